"""Energy distance between measures: a random graph, then a Brownian chain.

Run: python3 demos/metric_and_chain.py
"""

import numpy as np

from pcaf_lab import continuum as ct
from pcaf_lab import discrete as dsc


if __name__ == "__main__":
    rng = np.random.default_rng(7)

    # A random weighted graph with a little killing.
    form = dsc.random_form(12, rng, killing=0.1)
    mu, nu = rng.random((2, form.vertex_count))
    print("graph with", form.vertex_count, "vertices")
    for alpha in (0.1, 1.0, 10.0):
        print(f"  rho_{alpha:<4} (mu, nu) = {dsc.rho(form, mu, nu, alpha):.6f}")

    # Capacity of single vertices and the diagonal of the 1-Green matrix.
    g = dsc.green_matrix(form, 1.0)
    caps = np.array([dsc.capacity(form, [y]) for y in range(form.vertex_count)])
    print("  max |Cap({y}) g(y, y) - 1| =", f"{np.max(np.abs(caps * np.diag(g) - 1)):.2e}")

    # Monotone approximation n R_{n+1} f -> f of a 1-potential f.
    f = dsc.potential(form, dsc.DiscreteMeasure(mu), 1.0).values
    for n in (1, 10, 100, 1000):
        diff = dsc.resolvent_apply(form, dsc.approx_g(form, f, n), 1.0) - f
        print(f"  n = {n:>4}: energy error {np.sqrt(form.energy(diff, alpha=1.0) / form.energy(f, alpha=1.0)):.3e}")

    # Brownian motion on the line versus its nearest-neighbour chain.
    kernel = ct.ResolventKernel(ct.BM1D, 1.0)
    exact = ct.rho_cont(kernel, ct.MeasureRep.atom(0.0), ct.MeasureRep.atom(1.0))
    print(f"\nBrownian motion: rho(delta_0, delta_1) = {exact:.8f}")
    for cells in (50, 200, 2000):
        chain, nodes = ct.brownian_chain(-5.0, 5.0, cells)
        e0 = ct.chain_masses(nodes, ct.MeasureRep.atom(0.0))
        e1 = ct.chain_masses(nodes, ct.MeasureRep.atom(1.0))
        value = dsc.rho(chain, e0, e1)
        print(f"  chain with {cells:>4} cells: {value:.8f}  (relative gap {abs(value - exact) / exact:.1e})")
