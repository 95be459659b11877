"""Acceptance gate: the twelve criteria at their stated tolerances.

Each test prints one ``CRITERION k: PASS|FAIL`` line (shown even when pytest
captures output) and then asserts. Reference values come from the oracles
in ``oracles.py`` or from dense linear algebra written out here, never from
the code under test.
"""

import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from pcaf_lab import conditions as cnd
from pcaf_lab import continuum as ct
from pcaf_lab import discrete as dsc
from pcaf_lab import simulate as sim

from oracles import heat_kernel_resolvent, revuz_first_order

MASTER_SEED = 20240611
LOCAL_TIME_TARGET = math.sqrt(2 / math.pi)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number:>2}: {'PASS' if ok else 'FAIL'} -- {detail}")
        return ok

    return emit


def dense_stiffness(form, alpha):
    """``L + K + alpha M`` assembled from the raw conductances."""
    w = np.asarray(form.conductances.toarray() if hasattr(form.conductances, "toarray") else form.conductances)
    return np.diag(w.sum(axis=1)) - w + np.diag(form.killing) + alpha * np.diag(form.base_measure)


def dense_rho(form, mu, nu, alpha=1.0):
    d = np.asarray(mu, dtype=float) - np.asarray(nu, dtype=float)
    return math.sqrt(max(d @ np.linalg.solve(dense_stiffness(form, alpha), d), 0.0))


def random_instance(rng, n_max, killing=0.0):
    n = int(rng.integers(2, n_max + 1))
    return dsc.random_form(n, rng, killing=killing)


# 1 -------------------------------------------------------------------------------

def test_criterion_01_metric_suite(report):
    start = time.perf_counter()
    rng = np.random.default_rng(MASTER_SEED)
    worst = {"symmetry": 0.0, "identity": 0.0, "triangle": 0.0, "oracle": 0.0, "equivalence": 0.0}
    separated = True
    for _ in range(100):
        form = random_instance(rng, 50)
        mu, nu, xi = rng.random((3, form.vertex_count))
        r = dsc.rho(form, mu, nu)
        worst["symmetry"] = max(worst["symmetry"], abs(r - dsc.rho(form, nu, mu)))
        worst["identity"] = max(worst["identity"], dsc.rho(form, mu, mu))
        separated &= r > 1e-10
        worst["triangle"] = max(worst["triangle"], r - dsc.rho(form, mu, xi) - dsc.rho(form, xi, nu))
        worst["oracle"] = max(worst["oracle"], abs(r - dense_rho(form, mu, nu)) / max(r, 1.0))
        for a in (0.1, 0.5, 2.0, 10.0):
            ra = dsc.rho(form, mu, nu, a)
            lower = math.sqrt(min(1.0, 1.0 / a)) * r  # E_1 <= max(1, 1/alpha) E_alpha
            upper = math.sqrt(max(1.0, 1.0 / a)) * r
            worst["equivalence"] = max(worst["equivalence"], lower - ra, ra - upper)
    elapsed = time.perf_counter() - start
    ok = (worst["symmetry"] <= 1e-10 and worst["identity"] <= 1e-10 and separated
          and worst["triangle"] <= 1e-10 and worst["equivalence"] <= 1e-10 and worst["oracle"] <= 1e-10
          and elapsed < 10)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    assert report(1, ok, detail)


# 2 -------------------------------------------------------------------------------

def test_criterion_02_potential_identities(report):
    start = time.perf_counter()
    rng = np.random.default_rng(MASTER_SEED + 2)
    pairing = duality = capg = 0.0
    for _ in range(20):
        form = random_instance(rng, 50, killing=0.1)
        n = form.vertex_count
        mu, f, v = rng.random(n), rng.random(n), rng.normal(size=n)
        for alpha in (0.5, 1.0, 3.0):
            u = dsc.potential(form, dsc.DiscreteMeasure(mu), alpha).values
            a = dense_stiffness(form, alpha)
            pairing = max(pairing, abs(v @ a @ u - v @ mu) / (np.linalg.norm(v) * np.linalg.norm(mu)))
            lhs = mu @ dsc.resolvent_apply(form, f, alpha)
            rhs = (form.base_measure * f) @ u
            duality = max(duality, abs(lhs - rhs))
        g = np.linalg.inv(dense_stiffness(form, 1.0))
        for y in range(n):
            capg = max(capg, abs(dsc.capacity(form, [y]) * g[y, y] - 1.0))
    elapsed = time.perf_counter() - start
    ok = pairing <= 1e-9 and duality <= 1e-10 and capg <= 1e-8 and elapsed < 10
    assert report(2, ok, f"pairing {pairing:.1e}, duality {duality:.1e}, cap*g {capg:.1e}; {elapsed:.1f}s")


# 3 -------------------------------------------------------------------------------

def test_criterion_03_strong_approximation(report):
    start = time.perf_counter()
    rng = np.random.default_rng(MASTER_SEED + 3)
    form = dsc.random_form(20, rng)
    a1 = dense_stiffness(form, 1.0)
    f = np.linalg.solve(a1, rng.random(20))  # U_1 mu
    min_step, prev = math.inf, None
    for n in range(1, 1001):
        cur = n * dsc.resolvent_apply(form, f, n + 1.0)
        if prev is not None:
            min_step = min(min_step, float(np.min(cur - prev)))
        prev = cur
    g = dsc.approx_g(form, f, 1000)
    diff = np.linalg.solve(a1, form.base_measure * g) - f
    rel = math.sqrt(diff @ a1 @ diff / (f @ a1 @ f))
    elapsed = time.perf_counter() - start
    ok = min_step >= -1e-12 and rel <= 1e-2 and elapsed < 5
    assert report(3, ok, f"min increment {min_step:.2e}, relative E1 error {rel:.2e} at n=1000; {elapsed:.1f}s")


# 4 -------------------------------------------------------------------------------

def test_criterion_04_revuz_rate(report):
    start = time.perf_counter()
    rng = np.random.default_rng(MASTER_SEED + 4)
    form = dsc.random_form(20, rng, killing=0.5)
    f, mu = rng.random((2, 20))
    k = revuz_first_order(form, f, mu)
    ratios = []
    for t in (1e-1, 1e-2, 1e-3):
        err = abs(dsc.revuz_rate(form, f, mu, t) - f @ mu)
        ratios.append(err / (k * t))
    elapsed = time.perf_counter() - start
    ok = all(abs(r - 1) <= 0.2 for r in ratios) and elapsed < 5
    assert report(4, ok, f"K = {k:.4f}, error/(K t) = {', '.join(f'{r:.3f}' for r in ratios)}; {elapsed:.1f}s")


# 5 -------------------------------------------------------------------------------

def test_criterion_05_kernel_certification(report):
    start = time.perf_counter()
    rng = np.random.default_rng(MASTER_SEED + 5)
    worst = {}
    for model, d in ((ct.BM1D, 1), (ct.BM3D, 3)):
        worst[model] = 0.0
        for _ in range(100):
            alpha = float(rng.choice([0.1, 0.5, 1.0, 2.0, 10.0]))
            x, y = rng.uniform(-2, 2, (2, d))
            r = float(np.linalg.norm(x - y))
            g = ct.kernel_eval(ct.ResolventKernel(model, alpha), x, y)
            worst[model] = max(worst[model], abs(g - heat_kernel_resolvent(r, alpha, d)))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-6 and elapsed < 30
    assert report(5, ok, f"max abs error BM1D {worst[ct.BM1D]:.1e}, BM3D {worst[ct.BM3D]:.1e}; {elapsed:.1f}s")


# 6 -------------------------------------------------------------------------------

def test_criterion_06_continuum_discrete(report):
    start = time.perf_counter()
    kernel = ct.ResolventKernel(ct.BM1D, 1.0)
    cont = ct.rho_cont(kernel, ct.MeasureRep.atom(0.0), ct.MeasureRep.atom(1.0))
    form, nodes = ct.brownian_chain(-5.0, 5.0, 2000)
    e0 = (np.abs(nodes - 0.0) < 1e-9).astype(float)
    e1 = (np.abs(nodes - 1.0) < 1e-9).astype(float)
    chain = dsc.rho(form, e0, e1)
    gap = abs(chain - cont) / cont
    elapsed = time.perf_counter() - start
    ok = e0.sum() == 1 and e1.sum() == 1 and gap <= 0.02 and elapsed < 30
    assert report(6, ok, f"rho_cont {cont:.8f}, chain {chain:.8f}, gap {gap:.2e}; {elapsed:.1f}s")


# 7 -------------------------------------------------------------------------------

def test_criterion_07_local_time(report):
    start = time.perf_counter()
    lt, defect = sim.local_time_at_zero(1.0, 1e-4, 10_000, MASTER_SEED + 7, 0.02)
    mean = float(np.mean(lt))
    se = float(np.std(lt, ddof=1) / math.sqrt(lt.size))
    rel = abs(mean - LOCAL_TIME_TARGET) / LOCAL_TIME_TARGET
    elapsed = time.perf_counter() - start
    ok = rel <= 0.05 and float(np.max(defect)) <= 1e-12
    assert report(7, ok, f"mean {mean:.5f} +- {se:.5f} vs {LOCAL_TIME_TARGET:.5f} (rel {rel:.2%}), "
                         f"conservation defect {float(np.max(defect)):.1e}; {elapsed:.0f}s")


# 8 -------------------------------------------------------------------------------

def test_criterion_08_density_convergence(report):
    start = time.perf_counter()
    f = ct.RadialPower(0.25, r_hi=1.0)
    capped = lambda n: ct.RadialPower(0.25, r_hi=1.0, cap=float(n))
    indices = [2, 8, 32, 128]
    rep = sim.mc_convergence(sim.Brownian(1), lambda n: sim.radial_function(capped(n)), sim.radial_function(f),
                             indices, 1.0, 1e-4, 10_000, MASTER_SEED + 8)
    kernel = ct.ResolventKernel(ct.BM1D, 1.0)
    ref = ct.MeasureRep(1, radial=f)
    energies = [ct.rho_cont(kernel, ct.MeasureRep(1, radial=capped(n)), ref) for n in indices]
    energy_down = all(b < a for a, b in zip(energies, energies[1:]))
    elapsed = time.perf_counter() - start
    ok = rep.decreasing and energy_down
    means = ", ".join(f"{m:.3e}+-{s:.1e}" for m, s in zip(rep.means, rep.stderrs))
    assert report(8, ok, f"means {means}; slope {rep.slope:.2f}; rho {', '.join(f'{e:.2e}' for e in energies)}; "
                         f"{elapsed:.0f}s")


# 9 -------------------------------------------------------------------------------

def test_criterion_09_measure_convergence(report):
    start = time.perf_counter()
    indices = [2, 8, 32, 128]
    rep = sim.mc_convergence(sim.Brownian(1), lambda n: ct.MeasureRep.uniform([-1.0 / n], [1.0 / n]),
                             ct.MeasureRep.atom(0.0), indices, 1.0, 1e-4, 10_000, MASTER_SEED + 9,
                             kind="measure", bins=0.02)
    elapsed = time.perf_counter() - start
    means = ", ".join(f"{m:.3e}+-{s:.1e}" for m, s in zip(rep.means, rep.stderrs))
    assert report(9, rep.decreasing, f"means {means}; slope {rep.slope:.2f}; {elapsed:.0f}s")


# 10 ------------------------------------------------------------------------------

def test_criterion_10_martingale(report):
    start = time.perf_counter()
    const = sim.martingale_residual(sim.Brownian(1), sim.constant_function(1.0), 1.0, 1e-3, 10_000,
                                    MASTER_SEED + 10)
    hat = sim.martingale_residual(sim.Brownian(1), sim.hat_function(0.0, 1.0), 1.0, 1e-3, 10_000,
                                  MASTER_SEED + 11)
    const_max = max(const.max_abs)
    hat_ok = all(abs(m) <= 3 * s for m, s in zip(hat.means, hat.stderrs))
    elapsed = time.perf_counter() - start
    ok = const_max <= 1e-12 and hat_ok
    detail = ", ".join(f"t={t:g}: {m:.1e}/{s:.1e}" for t, m, s in zip(hat.checkpoints, hat.means, hat.stderrs))
    assert report(10, ok, f"constant max |residual| {const_max:.1e}; hat mean/stderr {detail}; {elapsed:.0f}s")


# 11 ------------------------------------------------------------------------------

def test_criterion_11_corpus(report):
    start = time.perf_counter()
    expected = {
        "power_beta": ("Ac2", cnd.DIVERGES, cnd.TENDS_TO_ZERO),
        "annulus_spikes": ("Ac2", cnd.DIVERGES, cnd.TENDS_TO_ZERO),
        "log_singular": ("Ac1", cnd.TENDS_TO_ZERO, None),
        "counterexample_i": ("Ac2", cnd.DIVERGES, cnd.TENDS_TO_ZERO),
        "counterexample_ii": ("Ac1", cnd.TENDS_TO_ZERO, cnd.DIVERGES),
    }
    problems = []
    for name, (branch, ac1, ac2) in expected.items():
        m = cnd.verify_membership(cnd.corpus_example(name))
        if not m.member or m.ac_branch != branch:
            problems.append(f"{name}: {m.verdict} via {m.ac_branch}")
        if m.reports["Ac1"].verdict != ac1 or (ac2 and m.reports["Ac2"].verdict != ac2):
            problems.append(f"{name}: Ac1 {m.reports['Ac1'].verdict}, Ac2 {m.reports['Ac2'].verdict}")
        if name == "power_beta":
            per = m.reports["Ac2"].per_constant
            if sorted(per) != [1.1, 2.0, 10.0] or any(v["verdict"] != cnd.TENDS_TO_ZERO for v in per.values()):
                problems.append("power_beta: Ac2 fails for some C")
    odd = cnd.check_condition(cnd.corpus_example("counterexample_ii"), "Ac2", [5, 9, 17, 33, 65, 129])
    if odd.verdict != cnd.TENDS_TO_ZERO:
        problems.append(f"counterexample_ii odd indices: {odd.verdict}")
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 60
    assert report(11, ok, ("all five verdicts match" if not problems else "; ".join(problems)) + f"; {elapsed:.1f}s")


# 12 ------------------------------------------------------------------------------

SCENARIOS = {
    "oracle": {"parameters": {"forms": 10, "identity_forms": 4, "kernel_pairs": 10}},
    "metric": {},
    "classify": {},
    "mc": {"parameters": {"paths": 600, "dt": 1e-3, "batch": 64}, "output": {"formats": ["csv", "json", "plotdata"]}},
    "conditions": {"parameters": {"family": {"corpus": "counterexample_ii", "params": {"d": 2, "delta": 2.0}}}},
    "martingale": {"parameters": {"paths": 600, "batch": 64}},
}


def _run_cli(tmp_path, kind, doc, threads, tag):
    cfg = tmp_path / f"{kind}.json"
    cfg.write_text(json.dumps(doc))
    prefix = tmp_path / tag / kind
    env = dict(os.environ, PCAF_LAB_THREADS=str(threads))
    proc = subprocess.run([sys.executable, "-m", "pcaf_lab.cli", kind, "run", str(cfg), "--out", str(prefix)],
                          env=env, capture_output=True, text=True)
    files = {p.name: p.read_bytes() for p in sorted((tmp_path / tag).glob(f"{kind}.*.csv"))}
    return proc.returncode, files


def test_criterion_12_reproducibility(report, tmp_path):
    start = time.perf_counter()
    mismatched = []
    for kind, doc in SCENARIOS.items():
        runs = [_run_cli(tmp_path, kind, doc, threads, f"{kind}-{threads}-{rep}")
                for threads, rep in ((1, 0), (4, 1), (1, 2))]
        codes = {c for c, _ in runs}
        if not runs[0][1] or any(r[1] != runs[0][1] for r in runs[1:]) or 2 in codes or 3 in codes:
            mismatched.append(kind)
    elapsed = time.perf_counter() - start
    ok = not mismatched
    detail = ("CSV artifacts byte-identical across reruns and PCAF_LAB_THREADS in {1, 4} for "
              + ", ".join(SCENARIOS) if ok else f"differences in {', '.join(mismatched)}") + f"; {elapsed:.0f}s"
    assert report(12, ok, detail)
