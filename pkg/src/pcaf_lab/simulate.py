"""Monte-Carlo paths and additive functionals of Brownian motion and 1D diffusions.

Every path owns a Philox stream whose key is derived from ``(master seed,
path index)`` by :class:`numpy.random.SeedSequence`, so path ``i`` of an
ensemble is identical to ``sample_path(..., seed=path_seed(master, i))``
whatever the batch size or number of worker threads.

Additive functionals are accumulated with the trapezoidal rule on the time
grid. With the ``exp(-s)`` weight, the weight is integrated exactly on each
step against the linear interpolant of the integrand. Local times are
occupation times of spatial bins divided by the bin width, each step giving
half its duration to the bin of either endpoint, so the bins partition the
elapsed time exactly.
"""

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _io
from .continuum import (
    BM1D,
    BM3D,
    DensityGrid,
    HatFunction,
    MeasureRep,
    RadialPower,
    RadialTable,
    ResolventKernel,
    potential_at,
    radial_from_dict,
)
from .errors import (
    DimensionMismatch,
    GridMismatch,
    NonLipschitzCoefficient,
    NonpositiveStep,
    NonpositiveTime,
    NotOneDimensional,
    SupportOutsideBins,
)

DEFAULT_F_CAP = 1e6
#: horizon at which exp(-T) <= 1e-8, for discounted functionals on [0, inf)
INFINITE_HORIZON = 18.5
DEFAULT_BATCH = 256


# -- models -----------------------------------------------------------------

@dataclass(frozen=True)
class Brownian:
    """Standard Brownian motion (generator 1/2 Laplacian) in R^dim."""

    dim: int = 1

    @property
    def name(self):
        return f"BM{self.dim}D"


@dataclass(frozen=True)
class Diffusion1D:
    """``dX = drift(X) dt + volatility(X) dW`` simulated by Euler-Maruyama.

    ``lipschitz`` is a declared global Lipschitz constant for both
    coefficients; it is checked on a probe grid at construction.
    """

    drift: object
    volatility: object
    lipschitz: float
    name: str = "Diffusion1D"
    probe: tuple = (-100.0, 100.0, 4001)

    dim = 1

    def __post_init__(self):
        x = np.linspace(*self.probe[:2], int(self.probe[2]))
        for label, fn in (("drift", self.drift), ("volatility", self.volatility)):
            y = np.asarray(fn(x), dtype=float) * np.ones_like(x)
            if not np.all(np.isfinite(y)):
                raise NonLipschitzCoefficient(f"{label} is not finite on the probe grid")
            slope = np.max(np.abs(np.diff(y) / np.diff(x)))
            if slope > self.lipschitz * (1 + 1e-9) + 1e-12:
                raise NonLipschitzCoefficient(
                    f"{label} has difference quotient {slope:.6g} above the declared constant {self.lipschitz}")

    @classmethod
    def linear(cls, drift=(0.0, 0.0), volatility=(1.0, 0.0)):
        """Affine coefficients ``a + b x``; ``volatility=(0, 0)`` gives a frozen path."""
        a, b = map(float, drift)
        c, e = map(float, volatility)
        return cls(
            lambda x: a + b * np.asarray(x, dtype=float),
            lambda x: c + e * np.asarray(x, dtype=float),
            max(abs(b), abs(e)),
            name=f"Diffusion1D(drift={a}+{b}x, volatility={c}+{e}x)",
        )


def as_model(model):
    if isinstance(model, (Brownian, Diffusion1D)):
        return model
    if model == BM1D:
        return Brownian(1)
    if model == BM3D:
        return Brownian(3)
    raise DimensionMismatch(f"unknown model {model!r}")


def model_name(model):
    return as_model(model).name


# -- seeding ----------------------------------------------------------------

def path_seed(master, index):
    """64-bit sub-seed of path ``index`` under ``master`` (counter-based split)."""
    ss = np.random.SeedSequence(int(master), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def path_rng(seed):
    return np.random.Generator(np.random.Philox(int(seed)))


def worker_count():
    """Thread cap from ``PCAF_LAB_THREADS`` (defaults to the CPU count)."""
    env = os.environ.get("PCAF_LAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# -- paths ------------------------------------------------------------------

def time_grid(T, dt):
    if not T > 0:
        raise NonpositiveTime(f"horizon must be positive, got {T!r}")
    if not (dt > 0 and dt <= T):
        raise NonpositiveStep(f"step must satisfy 0 < dt <= T, got dt={dt!r}, T={T!r}")
    steps = max(1, math.ceil(T / dt - 1e-9))
    return np.linspace(0.0, T, steps + 1)


@dataclass(frozen=True, eq=False)
class PathSample:
    times: np.ndarray
    states: np.ndarray  # (K + 1, dim)
    seed: int
    model: object

    @property
    def dim(self):
        return self.states.shape[1]

    @property
    def horizon(self):
        return float(self.times[-1])

    def window(self, i0, i1):
        """Sub-path on ``times[i0..i1]`` (inclusive), keeping absolute times."""
        return PathSample(self.times[i0:i1 + 1], self.states[i0:i1 + 1], self.seed, self.model)


def _simulate(model, times, seeds, x0):
    """States of shape ``(len(seeds), K + 1, dim)``."""
    model = as_model(model)
    d = model.dim
    steps = times.size - 1
    dt = times[1] - times[0]
    start = np.zeros(d) if x0 is None else np.broadcast_to(np.asarray(x0, dtype=float), (d,))
    noise = np.empty((len(seeds), steps, d))
    for i, s in enumerate(seeds):
        noise[i] = path_rng(s).standard_normal((steps, d))
    out = np.empty((len(seeds), steps + 1, d))
    out[:, 0] = start
    if isinstance(model, Brownian):
        np.cumsum(noise * math.sqrt(dt), axis=1, out=out[:, 1:])
        out[:, 1:] += start
        return out
    x = out[:, 0, 0].copy()
    sq = math.sqrt(dt)
    for k in range(steps):
        x = x + model.drift(x) * dt + model.volatility(x) * sq * noise[:, k, 0]
        out[:, k + 1, 0] = x
    return out


def sample_path(model, T, dt, seed, x0=None):
    """One path on the grid ``0 = t_0 < ... < t_K = T`` (step ``T / ceil(T / dt)``)."""
    times = time_grid(T, dt)
    states = _simulate(model, times, [seed], x0)[0]
    times.setflags(write=False)
    states.setflags(write=False)
    return PathSample(times, states, int(seed), as_model(model))


def ensemble_map(model, T, dt, paths, seed, fn, x0=None, batch=DEFAULT_BATCH):
    """Apply ``fn(times, states, first_index)`` to batches of an ensemble.

    ``states`` has shape ``(b, K + 1, dim)``. Results (arrays with a leading
    path axis, or tuples of them) are concatenated in path order, so the
    output does not depend on the batch size or the thread count.
    """
    if paths < 1:
        raise ValueError("ensemble needs at least one path")
    times = time_grid(T, dt)
    starts = list(range(0, paths, batch))

    def run(start):
        seeds = [path_seed(seed, i) for i in range(start, min(start + batch, paths))]
        return fn(times, _simulate(model, times, seeds, x0), start)

    workers = min(worker_count(), len(starts))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(p, axis=0) for p in zip(*parts))
    return np.concatenate(parts, axis=0)


# -- binary path dumps ------------------------------------------------------

_MAGIC = b"PCAFPATH"


def write_path_dump(path_sample, filename):
    """Header (model, dt, T, seed, dim, count) followed by little-endian float64 states."""
    name = path_sample.model.name.encode()
    dt = float(path_sample.times[1] - path_sample.times[0])
    with open(filename, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(name)))
        fh.write(name)
        fh.write(struct.pack("<ddQIQ", dt, path_sample.horizon, path_sample.seed, path_sample.dim,
                             path_sample.states.shape[0]))
        fh.write(np.ascontiguousarray(path_sample.states, dtype="<f8").tobytes())


def read_path_dump(filename):
    with open(filename, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError("not a path dump")
        (n,) = struct.unpack("<I", fh.read(4))
        name = fh.read(n).decode()
        dt, T, seed, dim, count = struct.unpack("<ddQIQ", fh.read(struct.calcsize("<ddQIQ")))
        states = np.frombuffer(fh.read(), dtype="<f8").reshape(count, dim)
    return {"model": name, "dt": dt, "T": T, "seed": seed, "states": states}


# -- additive functionals ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class PcafTrajectory:
    times: np.ndarray
    values: np.ndarray
    provenance: str = ""

    def at(self, t):
        """Value at the last grid time not after ``t``."""
        return float(self.values[np.searchsorted(self.times, t, side="right") - 1])


def _step_weights(times, discount):
    """Per-step weights ``(w_left, w_right)`` for the trapezoidal integral."""
    h = np.diff(times)
    if not discount:
        return h / 2, h / 2
    e0 = -np.expm1(-h)
    small = h < 1e-3
    e1_over_h = np.where(small, h / 2 - h * h / 3 + h ** 3 / 8 - h ** 4 / 30,
                         (e0 - h * np.exp(-h)) / np.where(small, 1.0, h))
    scale = np.exp(-times[:-1])
    return scale * (e0 - e1_over_h), scale * e1_over_h


def _accumulate(values, times, discount):
    """Cumulative trapezoidal integral along the last axis, starting at 0."""
    wl, wr = _step_weights(times, discount)
    inc = values[..., :-1] * wl + values[..., 1:] * wr
    out = np.zeros(values.shape)
    np.cumsum(inc, axis=-1, out=out[..., 1:])
    return out


def _evaluate(f, states, f_cap):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        v = np.asarray(f(states), dtype=float)
    v = np.where(np.isnan(v), f_cap, v)
    return np.minimum(v, f_cap)


def occupation_pcaf(path, f, f_cap=DEFAULT_F_CAP, discount=False):
    """``A_t = int_0^t w(s) min(f(X_s), f_cap) ds`` with ``w = 1`` or ``exp(-s)``.

    ``f`` maps an array of states (shape ``(..., dim)``) to nonnegative values;
    see :func:`density_function` for the declarative forms.
    """
    vals = _evaluate(f, path.states, f_cap)
    values = _accumulate(vals, path.times, discount)
    label = getattr(f, "label", getattr(f, "__name__", "f"))
    return PcafTrajectory(path.times, values, f"occupation[{label}]{' discounted' if discount else ''}")


def sup_distance(a, b, T=None):
    """``max_{t_k <= T} |a(t_k) - b(t_k)|``."""
    if a.times.shape != b.times.shape or not np.array_equal(a.times, b.times):
        raise GridMismatch("trajectories live on different time grids")
    T = a.times[-1] if T is None else T
    if T > a.times[-1]:
        raise GridMismatch(f"T={T} is beyond the common horizon {a.times[-1]}")
    upto = a.times <= T
    return float(np.max(np.abs(a.values[upto] - b.values[upto])))


# -- local time -------------------------------------------------------------

@dataclass(frozen=True)
class BinSpec:
    """Bins of width ``width`` centred at ``j * width``; optional window ``[lo, hi]`` in bin units."""

    width: float
    lo: int = None
    hi: int = None

    def index(self, x):
        return np.floor(np.asarray(x, dtype=float) / self.width + 0.5).astype(np.int64)

    @classmethod
    def default(cls, dt):
        return cls(10 * math.sqrt(dt))


@dataclass(frozen=True, eq=False)
class LocalTimeField:
    """Occupation densities ``l(t_k, bin_j)`` of one path, stored lazily as bin indices.

    Bin ``j`` is ``[(j - 1/2) h, (j + 1/2) h)``; ``bins`` lists the
    represented ``j``. The full matrix is available as :attr:`values`.
    """

    times: np.ndarray
    width: float
    bins: np.ndarray
    state_bins: np.ndarray

    @property
    def edges(self):
        return (np.append(self.bins, self.bins[-1] + 1) - 0.5) * self.width

    @property
    def values(self):
        k = self.times.size
        wl, wr = _step_weights(self.times, False)
        col = self.state_bins - self.bins[0]
        inc = np.zeros((k, self.bins.size))
        rows = np.arange(1, k)
        np.add.at(inc, (rows, col[:-1]), wl)
        np.add.at(inc, (rows, col[1:]), wr)
        return np.cumsum(inc, axis=0) / self.width

    def at(self, t_index, x=0.0):
        """``l(t_k, bin containing x)``."""
        j = int(np.floor(x / self.width + 0.5))
        if j < self.bins[0] or j > self.bins[-1]:
            return 0.0
        return float(self.values[t_index, j - self.bins[0]])


def local_time_field(path, bins=None):
    if path.dim != 1:
        raise NotOneDimensional("local times are computed for one-dimensional paths")
    spec = bins if isinstance(bins, BinSpec) else (BinSpec(float(bins)) if bins else BinSpec.default(
        float(path.times[1] - path.times[0])))
    idx = spec.index(path.states[:, 0])
    # widen the window to cover the path so the bins partition the occupation
    lo = int(idx.min()) if spec.lo is None else min(spec.lo, int(idx.min()))
    hi = int(idx.max()) if spec.hi is None else max(spec.hi, int(idx.max()))
    return LocalTimeField(path.times, spec.width, np.arange(lo, hi + 1), idx)


def bin_masses(mu, width, bins):
    """``mu(bin_j)`` for the listed bins; raises if ``mu`` charges anything outside."""
    if mu.dim != 1:
        raise NotOneDimensional("measure PCAFs use one-dimensional measures")
    out = np.zeros(bins.size)
    lo_edge = (bins[0] - 0.5) * width
    hi_edge = (bins[-1] + 0.5) * width
    outside = 0.0
    if mu.atoms.shape[0]:
        j = np.floor(mu.atoms[:, 0] / width + 0.5).astype(np.int64)
        inside = (j >= bins[0]) & (j <= bins[-1])
        np.add.at(out, j[inside] - bins[0], mu.masses[inside])
        outside += float(mu.masses[~inside].sum())
    for g in mu.grids():
        clo, chi = g.cell_boxes()
        mass = g.values.ravel() * g.cell_volume
        edges = (np.append(bins, bins[-1] + 1) - 0.5) * width
        a, b = clo[:, 0], chi[:, 0]
        overlap = np.clip(np.minimum(b[:, None], edges[None, 1:]) - np.maximum(a[:, None], edges[None, :-1]), 0, None)
        out += (mass / (b - a)) @ overlap
        outside += float(np.sum(mass / (b - a) * (np.clip(lo_edge - a, 0, b - a) + np.clip(b - hi_edge, 0, b - a))))
    if outside > 1e-12 * max(1.0, out.sum()):
        raise SupportOutsideBins(f"measure puts mass {outside:.6g} outside the binned window "
                                 f"[{lo_edge:.6g}, {hi_edge:.6g}]")
    return out


def measure_pcaf(field, mu):
    """``A_t = sum_j l(t, bin_j) mu(bin_j)``."""
    w = bin_masses(mu, field.width, field.bins) / field.width
    vals = w[field.state_bins - field.bins[0]]
    return PcafTrajectory(field.times, _accumulate(vals, field.times, False), "local-time pairing")


# -- declarative integrands -------------------------------------------------

class _Integrand:
    def __init__(self, fn, label, resolvent=None):
        self.fn = fn
        self.label = label
        self.resolvent = resolvent  # closed-form R_1 f if known

    def __call__(self, states):
        return self.fn(states)

    def __repr__(self):
        return self.label


def radial_function(profile, label=None):
    """Wrap a radial profile (``RadialPower``/``RadialTable``) as a function of states."""
    return _Integrand(lambda s: profile(np.sqrt(np.sum(np.asarray(s) ** 2, axis=-1))), label or repr(profile))


def constant_function(value):
    value = float(value)
    return _Integrand(lambda s: np.full(np.shape(s)[:-1], value), f"const({value})",
                      resolvent=lambda s, alpha=1.0: np.full(np.shape(s)[:-1], value / alpha))


def hat_function(center=0.0, width=1.0):
    hat = HatFunction(tuple(np.atleast_1d(center).astype(float)), float(width))
    return _Integrand(lambda s: hat(s).reshape(np.shape(s)[:-1]), f"hat({list(hat.center)}, {hat.width})")


def density_function(doc):
    """Build an integrand from ``{"expr": "pow"|"table"|"const"|"hat", ...}``."""
    expr = doc.get("expr")
    if expr in ("pow", "table"):
        return radial_function(radial_from_dict(doc), _io.dumps(doc))
    if expr == "const":
        return constant_function(doc.get("value", 1.0))
    if expr == "hat":
        return hat_function(doc.get("center", 0.0), doc.get("width", 1.0))
    raise ValueError(f"unknown density expression {expr!r}")


# -- ensemble diagnostics ---------------------------------------------------

def _stats(samples):
    n = samples.shape[0]
    mean = float(np.mean(samples))
    stderr = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, stderr, float(np.quantile(samples, 0.9))


def loglog_slope(indices, means):
    """Least-squares slope of ``log mean`` against ``log n`` over positive means."""
    x = np.log(np.asarray(indices, dtype=float))
    y = np.asarray(means, dtype=float)
    keep = y > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(x[keep], np.log(y[keep]), 1)[0])


@dataclass
class TrendReport:
    indices: list
    means: list
    stderrs: list
    p90: list
    paths: int
    seed: int
    slope: float
    separations: list = field(default_factory=list)

    HEADER = ("n", "mean_sup_dist", "stderr", "p90", "paths", "seed")

    @property
    def decreasing(self):
        """Consecutive means drop by more than two combined standard errors and the slope is negative."""
        steps = all(
            m0 - m1 > 2 * math.hypot(s0, s1)
            for m0, m1, s0, s1 in zip(self.means, self.means[1:], self.stderrs, self.stderrs[1:])
        )
        return steps and self.slope < 0

    def rows(self):
        return [(n, m, s, p, self.paths, self.seed) for n, m, s, p in zip(self.indices, self.means, self.stderrs, self.p90)]

    def to_csv(self):
        return _io.csv_text(self.HEADER, self.rows())

    def to_dict(self):
        return {
            "indices": list(self.indices),
            "mean_sup_dist": list(self.means),
            "stderr": list(self.stderrs),
            "p90": list(self.p90),
            "paths": self.paths,
            "seed": self.seed,
            "loglog_slope": self.slope,
            "decreasing": self.decreasing,
        }


def _report(indices, dist, paths, seed):
    stats = [_stats(dist[:, i]) for i in range(len(indices))]
    means = [s[0] for s in stats]
    return TrendReport(list(indices), means, [s[1] for s in stats], [s[2] for s in stats],
                       paths, seed, loglog_slope(indices, means))


def mc_convergence(model, family, reference, indices, T, dt, paths, seed,
                   kind="density", bins=None, f_cap=DEFAULT_F_CAP, batch=DEFAULT_BATCH):
    """Ensemble statistics of ``sup_{t <= T} |A^(n)_t - A_t|`` for each index ``n``.

    ``kind="density"``: ``family(n)`` and ``reference`` are integrands for
    :func:`occupation_pcaf`. ``kind="measure"``: they are 1D
    :class:`MeasureRep` objects paired with the local-time field (``bins`` is
    the bin width or a :class:`BinSpec`). All indices reuse the same paths.
    """
    if paths < 2:
        raise ValueError("ensemble needs at least two paths for standard errors")
    indices = list(indices)
    members = [family(n) for n in indices]

    if kind == "density":
        def fn(times, states, _):
            ref = _accumulate(_evaluate(reference, states, f_cap), times, False)
            out = np.empty((states.shape[0], len(members)))
            for i, f in enumerate(members):
                a = _accumulate(_evaluate(f, states, f_cap), times, False)
                out[:, i] = np.max(np.abs(a - ref), axis=1)
            return out
    elif kind == "measure":
        spec = bins if isinstance(bins, BinSpec) else BinSpec(float(bins) if bins else 10 * math.sqrt(dt))
        support = [m.support_box() for m in members + [reference]]
        lo = min(spec.index(b[0][0]) for b in support if b is not None)
        hi = max(spec.index(b[1][0]) for b in support if b is not None)
        window = np.arange(min(lo, spec.lo if spec.lo is not None else lo),
                           max(hi, spec.hi if spec.hi is not None else hi) + 1)
        tables = [bin_masses(m, spec.width, window) / spec.width for m in members]
        ref_table = bin_masses(reference, spec.width, window) / spec.width

        def fn(times, states, _):
            j = spec.index(states[..., 0]) - window[0]
            inside = (j >= 0) & (j < window.size)
            jj = np.clip(j, 0, window.size - 1)

            def traj(tab):
                return _accumulate(np.where(inside, tab[jj], 0.0), times, False)

            ref = traj(ref_table)
            out = np.empty((states.shape[0], len(members)))
            for i, tab in enumerate(tables):
                out[:, i] = np.max(np.abs(traj(tab) - ref), axis=1)
            return out
    else:
        raise ValueError(f"unknown kind {kind!r}")

    dist = ensemble_map(model, T, dt, paths, seed, fn, batch=batch)
    return _report(indices, dist, paths, seed)


def local_time_at_zero(T, dt, paths, seed, width, batch=DEFAULT_BATCH):
    """Per-path ``l(T, bin containing 0)`` and the largest conservation defect."""
    spec = BinSpec(width)

    def fn(times, states, _):
        j = spec.index(states[..., 0])
        wl, wr = _step_weights(times, False)
        at0 = (j == 0).astype(float)
        occ0 = at0[:, :-1] @ wl + at0[:, 1:] @ wr
        # conservation: summing the per-bin occupations over all visited bins
        defect = np.empty(states.shape[0])
        for p in range(states.shape[0]):
            jp = j[p]
            lo = jp.min()
            occ = np.bincount(jp[:-1] - lo, weights=wl, minlength=jp.max() - lo + 1)
            occ += np.bincount(jp[1:] - lo, weights=wr, minlength=occ.size)
            defect[p] = abs(occ.sum() - (times[-1] - times[0]))
        return occ0 / width, defect

    return ensemble_map(BM1D, T, dt, paths, seed, fn, batch=batch)


def resolvent_function(f, alpha=1.0, lo=-12.0, hi=12.0, cells=4800, table_points=9601):
    """``R_alpha f`` for a 1D integrand, tabulated on ``[lo, hi]`` and interpolated.

    Closed forms are used when the integrand carries one (constants).
    """
    if getattr(f, "resolvent", None) is not None:
        return lambda s: f.resolvent(s, alpha)
    kernel = ResolventKernel(BM1D, alpha)
    # cell averages by 4-point Gauss rules (exact for piecewise-cubic f with kinks on edges)
    edges = np.linspace(lo, hi, cells + 1)
    nodes, weights = np.polynomial.legendre.leggauss(4)
    h = edges[1] - edges[0]
    pts = edges[:-1, None] + h * (nodes[None, :] + 1) / 2
    avg = f(pts.reshape(-1, 1)).reshape(cells, 4) @ weights / 2
    mu = MeasureRep(1, density=DensityGrid([lo], [hi], avg))
    xs = np.linspace(lo, hi, table_points)
    table = potential_at(kernel, mu, xs)

    def r(states):
        x = np.asarray(states)[..., 0]
        out = np.interp(x, xs, table)
        off = (x < lo) | (x > hi)
        if np.any(off):
            out[off] = potential_at(kernel, mu, x[off])
        return out

    return r


@dataclass
class MartingaleReport:
    checkpoints: list
    means: list
    stderrs: list
    max_abs: list
    paths: int
    seed: int

    @property
    def passed(self):
        return all(abs(m) <= 3 * s or a == 0.0 or abs(m) <= 1e-12
                   for m, s, a in zip(self.means, self.stderrs, self.max_abs))

    def rows(self):
        return [(t, m, s, a, self.paths, self.seed)
                for t, m, s, a in zip(self.checkpoints, self.means, self.stderrs, self.max_abs)]

    HEADER = ("t", "mean_residual", "stderr", "max_abs_residual", "paths", "seed")

    def to_dict(self):
        return {
            "checkpoints": self.checkpoints,
            "mean_residual": self.means,
            "stderr": self.stderrs,
            "max_abs_residual": self.max_abs,
            "paths": self.paths,
            "seed": self.seed,
            "passed": self.passed,
        }


def martingale_residual(model, f, T, dt, paths, seed, f_cap=DEFAULT_F_CAP, batch=DEFAULT_BATCH):
    """Ensemble mean of ``M(t) - M(0)`` with ``M(t) = A^f(t) + exp(-t) R_1 f(X_t)``.

    ``A^f`` carries the ``exp(-s)`` weight; checkpoints are ``T/4, T/2, T``.
    """
    if as_model(model) != Brownian(1):
        raise NotOneDimensional("the resolvent of the integrand is tabulated for BM1D")
    r1 = resolvent_function(f)
    times = time_grid(T, dt)
    marks = [int(np.searchsorted(times, c - 1e-12)) for c in (T / 4, T / 2, T)]

    def fn(ts, states, _):
        a = _accumulate(_evaluate(f, states, f_cap), ts, True)
        m0 = r1(states[:, 0])
        out = np.empty((states.shape[0], len(marks)))
        for i, k in enumerate(marks):
            out[:, i] = a[:, k] + math.exp(-ts[k]) * r1(states[:, k]) - m0
        return out

    res = ensemble_map(model, T, dt, paths, seed, fn, batch=batch)
    means, errs = [], []
    for i in range(len(marks)):
        m, s, _ = _stats(res[:, i])
        means.append(m)
        errs.append(s)
    return MartingaleReport([float(times[k]) for k in marks], means, errs,
                            [float(np.max(np.abs(res[:, i]))) for i in range(len(marks))], paths, seed)


def discounted_total(model, f, paths, seed, dt=1e-2, T=INFINITE_HORIZON, x0=None, f_cap=DEFAULT_F_CAP,
                     batch=DEFAULT_BATCH):
    """Per-path ``int_0^T exp(-s) f(X_s) ds`` (``T`` defaults to the 1e-8 truncation)."""
    def fn(times, states, _):
        return _accumulate(_evaluate(f, states, f_cap), times, True)[:, -1]

    return ensemble_map(model, T, dt, paths, seed, fn, x0=x0, batch=batch)
