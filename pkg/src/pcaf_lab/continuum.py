"""Brownian resolvent kernels, measures on R^d and energy integrals.

Brownian motion here has generator 1/2 Laplacian and reference measure
Lebesgue, so the alpha-resolvent kernels are

    BM1D:  g_a(x, y) = exp(-k |x - y|) / k               with k = sqrt(2 a)
    BM3D:  g_a(x, y) = exp(-k |x - y|) / (2 pi |x - y|)

A :class:`MeasureRep` is a finite sum of atoms, a piecewise-constant density
on a uniform grid and optionally a radial density. Energies

    I(mu, nu) = int int g_a(x, y) mu(dx) nu(dy)

are assembled from closed-form cell integrals in 1D and from a signed
pyramid decomposition of boxes in 3D (it absorbs the 1/r singularity).
Radial densities are gridded at three successive resolutions; a value that
grows by more than 10% at each doubling is reported as infinite.
"""

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.signal
from numpy.polynomial.legendre import leggauss

from . import _io
from .discrete import build_form
from .errors import (
    DimensionMismatch,
    NegativeEntry,
    NonintegrableSingularity,
    NonpositiveAlpha,
    NotFiniteEnergy,
    UnsupportedDimension,
    UnsupportedRegion,
)

BM1D = "BM1D"
BM3D = "BM3D"
MODELS = {BM1D: 1, BM3D: 3}

#: relative growth per resolution doubling that marks a quantity as divergent
DIVERGENCE_GROWTH = 0.10
#: negative round-off tolerated in the energy expansion of rho
RHO_CLAMP = 1e-12

DEFAULT_RESOLUTION = {1: 512, 3: 6}


def unit_sphere_area(d):
    """Surface area of the unit sphere in R^d (2 for d = 1)."""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


@lru_cache(maxsize=None)
def _gauss01(q):
    x, w = leggauss(q)
    return (x + 1.0) / 2.0, w / 2.0


def diverges(values, growth=DIVERGENCE_GROWTH):
    """True when each of the last two refinements grew the value by more than ``growth``."""
    a, b, c = values[-3:]
    if math.isinf(c):
        return True
    return b > (1 + growth) * a and c > (1 + growth) * b


# -- kernels ----------------------------------------------------------------

@dataclass(frozen=True)
class ResolventKernel:
    model: str = BM1D
    alpha: float = 1.0

    def __post_init__(self):
        if self.model not in MODELS:
            raise UnsupportedDimension(f"unknown model {self.model!r}; only BM1D and BM3D have closed-form kernels")
        if not self.alpha > 0:
            raise NonpositiveAlpha(f"alpha must be positive, got {self.alpha!r}")

    @property
    def dim(self):
        return MODELS[self.model]

    @property
    def rate(self):
        return math.sqrt(2.0 * self.alpha)

    def radial(self, r):
        """Kernel as a function of distance; ``inf`` on the diagonal in 3D."""
        r = np.asarray(r, dtype=float)
        k = self.rate
        if self.model == BM1D:
            return np.exp(-k * r) / k
        with np.errstate(divide="ignore"):
            return np.where(r > 0, np.exp(-k * r) / (2 * np.pi * np.where(r > 0, r, 1.0)), np.inf)


def heat_kernel_quadrature(r, alpha, d):
    """``int_0^inf exp(-alpha t) p_t(r) dt`` for the Gaussian heat kernel in R^d, by quadrature.

    Independent certification of the closed forms: with ``t = s^2`` the
    integrand ``2 s exp(-alpha s^2 - r^2 / (2 s^2)) (2 pi s^2)^(-d/2)`` is
    smooth, and the range is split around its peak.
    """
    from scipy.integrate import quad

    r = float(r)
    if d >= 2 and r == 0:
        return math.inf

    def integrand(s):
        if s == 0:
            return 0.0 if (r > 0 or d > 1) else 2.0 / math.sqrt(2 * math.pi)
        return 2 * s * math.exp(-alpha * s * s - r * r / (2 * s * s)) * (2 * math.pi * s * s) ** (-d / 2)

    # the integrand peaks near s = r / sqrt(d) at short range and near (r^2 / 2 alpha)^(1/4) further out
    marks = {1.0 / math.sqrt(alpha)}
    if r > 0:
        marks |= {r / math.sqrt(d), math.sqrt(r / math.sqrt(2 * alpha))}
    cuts = [0.0] + sorted(marks) + [math.inf]
    return math.fsum(quad(integrand, a, b, epsabs=0, epsrel=1e-12, limit=200)[0] for a, b in zip(cuts[:-1], cuts[1:]))


def _points(x, d):
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != d:
        raise DimensionMismatch(f"expected points in R^{d}, got shape {x.shape}")
    return x


def kernel_eval(kernel, x, y):
    """``g_alpha(x, y)``; broadcasts over leading axes of ``x`` and ``y``."""
    d = kernel.dim
    x, y = _points(x, d), _points(y, d)
    r = np.sqrt(np.sum((x - y) ** 2, axis=-1))
    out = kernel.radial(r)
    return float(out) if out.ndim == 0 else out


# -- radial densities -------------------------------------------------------

def _power_antiderivative(r1, r2, e):
    """``int_r1^r2 r^(e-1) dr`` with infinities where it diverges."""
    if r2 <= r1:
        return 0.0
    if e == 0:
        if r1 == 0 or math.isinf(r2):
            return math.inf
        return math.log(r2 / r1)
    if e > 0:
        if math.isinf(r2):
            return math.inf
        return (r2 ** e - r1 ** e) / e
    if r1 == 0:
        return math.inf
    hi = 0.0 if math.isinf(r2) else r2 ** e
    return (r1 ** e - hi) / (-e)


@dataclass(frozen=True)
class RadialPower:
    """``min(coef * |x|^-beta, cap)`` on ``r_lo < |x| <= r_hi``, zero elsewhere."""

    beta: float
    coef: float = 1.0
    r_lo: float = 0.0
    r_hi: float = math.inf
    cap: float = math.inf

    def __post_init__(self):
        if self.coef < 0 or self.cap < 0:
            raise NegativeEntry("radial densities must be nonnegative")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            v = self.coef * np.where(r > 0, r, np.nan) ** (-self.beta)
        v = np.where(r > 0, v, np.inf if self.beta > 0 else (self.coef if self.beta == 0 else 0.0))
        v = np.minimum(v, self.cap)
        return np.where((r > self.r_lo) & (r <= self.r_hi), v, 0.0)

    def _cap_radius(self):
        if math.isinf(self.cap) or self.beta <= 0 or self.coef == 0:
            return 0.0
        if self.cap == 0:
            return math.inf
        return (self.coef / self.cap) ** (1.0 / self.beta)

    def pth_integral(self, p, a, b, d):
        """``int_{a < |x| <= b} f(x)^p dx`` in R^d (closed form)."""
        lo, hi = max(a, self.r_lo), min(b, self.r_hi)
        if hi <= lo or self.coef == 0:
            return 0.0
        c_d = unit_sphere_area(d)
        rc = min(max(self._cap_radius(), lo), hi)
        total = 0.0
        if rc > lo:  # capped part
            total += self.cap ** p * (rc ** d - lo ** d) / d
        tail = _power_antiderivative(rc, hi, d - self.beta * p)
        if math.isinf(tail):
            where = "the origin" if rc == 0 else "infinity"
            raise NonintegrableSingularity(
                f"|x|^-{self.beta} to the power {p} is not integrable near {where} in dimension {d}")
        total += self.coef ** p * tail
        return c_d * total

    def line_integral(self, a, b):
        """``int_a^b f(|x|) dx`` on the real line."""
        return _line_integral(self, a, b)


@dataclass(frozen=True)
class RadialTable:
    """Piecewise-linear radial profile through ``(r[i], v[i])``; zero outside ``[r[0], r[-1]]``."""

    r: tuple
    v: tuple

    def __post_init__(self):
        r = tuple(float(x) for x in self.r)
        v = tuple(float(x) for x in self.v)
        if len(r) != len(v) or len(r) < 2:
            raise DimensionMismatch("radial table needs matching r and v of length >= 2")
        if any(b <= a for a, b in zip(r, r[1:])) or r[0] < 0:
            raise DimensionMismatch("radial table radii must be increasing and nonnegative")
        if min(v) < 0:
            raise NegativeEntry("radial densities must be nonnegative")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "v", v)

    @property
    def r_hi(self):
        return self.r[-1]

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        return np.where((r >= self.r[0]) & (r <= self.r[-1]), np.interp(r, self.r, self.v), 0.0)

    def pth_integral(self, p, a, b, d):
        xg, wg = _gauss01(24)
        total = 0.0
        for r0, r1 in zip(self.r, self.r[1:]):
            lo, hi = max(r0, a), min(r1, b)
            if hi <= lo:
                continue
            rr = lo + (hi - lo) * xg
            total += (hi - lo) * np.sum(wg * rr ** (d - 1) * self(rr) ** p)
        return unit_sphere_area(d) * float(total)

    def line_integral(self, a, b):
        return _line_integral(self, a, b)


def _line_integral(radial, a, b):
    # the 1D "sphere" has two points, so one half-line carries half of pth_integral
    total = 0.0
    if b > 0:
        total += 0.5 * radial.pth_integral(1, max(a, 0.0), b, 1)
    if a < 0:
        total += 0.5 * radial.pth_integral(1, max(-b, 0.0), -a, 1)
    return total


def radial_from_dict(doc):
    if doc.get("expr") == "pow":
        return RadialPower(
            beta=float(doc["beta"]),
            coef=float(doc.get("coef", 1.0)),
            r_lo=float(doc.get("r_min", 0.0)),
            r_hi=float(doc.get("r_max", math.inf)),
            cap=float(doc.get("cap", math.inf)),
        )
    if doc.get("expr") == "table":
        return RadialTable(tuple(doc["r"]), tuple(doc["v"]))
    raise ValueError(f"unknown radial expression {doc.get('expr')!r}")


def radial_to_dict(radial):
    if isinstance(radial, RadialPower):
        out = {"expr": "pow", "beta": radial.beta}
        if radial.coef != 1.0:
            out["coef"] = radial.coef
        if radial.r_lo != 0.0:
            out["r_min"] = radial.r_lo
        if not math.isinf(radial.r_hi):
            out["r_max"] = radial.r_hi
        if not math.isinf(radial.cap):
            out["cap"] = radial.cap
        return out
    return {"expr": "table", "r": list(radial.r), "v": list(radial.v)}


# -- measures ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DensityGrid:
    """Constant density ``values[i]`` on each cell of a uniform grid of a box."""

    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray  # shape == cells

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float).ravel()
        hi = np.array(self.hi, dtype=float).ravel()
        values = np.array(self.values, dtype=float)
        if values.ndim != lo.size or lo.size != hi.size:
            raise DimensionMismatch("grid box and values disagree on the dimension")
        if np.any(hi <= lo):
            raise DimensionMismatch("grid box must have hi > lo in every coordinate")
        if np.any(values < 0):
            raise NegativeEntry("density values must be nonnegative")
        for a in (lo, hi, values):
            a.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "values", values)

    @property
    def dim(self):
        return self.lo.size

    @property
    def cells(self):
        return self.values.shape

    @property
    def h(self):
        return (self.hi - self.lo) / np.array(self.cells)

    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    def same_geometry(self, other):
        return (
            self.cells == other.cells
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
        )

    def centers(self):
        axes = [self.lo[i] + (np.arange(n) + 0.5) * self.h[i] for i, n in enumerate(self.cells)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def cell_boxes(self):
        c = self.centers()
        half = self.h / 2
        return c - half, c + half

    def total_mass(self):
        return float(self.values.sum() * self.cell_volume)


def _radial_to_grid(radial, d, n):
    """Grid an isotropic density on ``[-R, R]^d`` with ``n`` cells per axis (``n`` even).

    1D uses exact cell averages; 3D samples cell centres, which never hit the origin.
    """
    big = radial.r_hi
    if math.isinf(big):
        raise UnsupportedRegion("radial densities need a finite outer radius for gridding")
    n += n % 2
    lo, hi = np.full(d, -big), np.full(d, big)
    h = 2 * big / n
    edges = -big + h * np.arange(n + 1)
    if d == 1:
        vals = np.array([radial.line_integral(a, b) for a, b in zip(edges[:-1], edges[1:])]) / h
    else:
        axes = (edges[:-1] + edges[1:]) / 2
        mesh = np.meshgrid(*([axes] * d), indexing="ij")
        r = np.sqrt(sum(m ** 2 for m in mesh))
        vals = radial(r)
    return DensityGrid(lo, hi, vals.reshape((n,) * d))


@dataclass(frozen=True, eq=False)
class MeasureRep:
    dim: int
    atoms: np.ndarray = None  # (k, dim)
    masses: np.ndarray = None  # (k,)
    density: DensityGrid = None
    radial: object = None  # RadialPower | RadialTable

    def __post_init__(self):
        if self.dim not in (1, 2, 3) and self.dim < 1:
            raise DimensionMismatch(f"bad dimension {self.dim}")
        atoms = np.zeros((0, self.dim)) if self.atoms is None else np.array(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms.reshape(-1, self.dim)
        masses = np.zeros(0) if self.masses is None else np.array(self.masses, dtype=float).ravel()
        if atoms.shape != (masses.size, self.dim):
            raise DimensionMismatch(f"atoms have shape {atoms.shape}, expected ({masses.size}, {self.dim})")
        if np.any(masses < 0):
            raise NegativeEntry("atom masses must be nonnegative")
        if self.density is not None and self.density.dim != self.dim:
            raise DimensionMismatch("density grid dimension differs from the measure")
        atoms.setflags(write=False)
        masses.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "masses", masses)

    # constructors
    @classmethod
    def zero(cls, dim):
        return cls(dim)

    @classmethod
    def atom(cls, x, mass=1.0):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(x.size, x[None, :], [mass])

    @classmethod
    def uniform(cls, lo, hi, mass=1.0, cells=1):
        """Mass spread uniformly over a box, stored on ``cells`` cells per axis."""
        lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
        d = lo.size
        vol = float(np.prod(hi - lo))
        grid = DensityGrid(lo, hi, np.full((cells,) * d, mass / vol))
        return cls(d, density=grid)

    @classmethod
    def from_function(cls, f, lo, hi, cells):
        """Grid a density ``f(points)`` by sampling cell centres."""
        lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
        d = lo.size
        cells = tuple(np.broadcast_to(cells, (d,)).tolist())
        tmp = DensityGrid(lo, hi, np.zeros(cells))
        vals = np.asarray(f(tmp.centers() if d > 1 else tmp.centers()[:, 0]), dtype=float)
        return cls(d, density=DensityGrid(lo, hi, vals.reshape(cells)))

    @property
    def has_atoms(self):
        return bool(np.any(self.masses > 0))

    def total_mass(self):
        total = float(self.masses.sum())
        if self.density is not None:
            total += self.density.total_mass()
        if self.radial is not None:
            total += self.radial.pth_integral(1, 0.0, math.inf, self.dim)
        return total

    def restrict(self, lo, hi):
        """``1_F mu`` for the box ``F = [lo, hi]``.

        Atoms are kept when they lie in the closed box; grid cells keep the
        fraction of their mass inside ``F`` (exact when ``F`` follows cell faces).
        """
        if self.radial is not None:
            raise UnsupportedRegion("restriction of radial densities is not represented; grid them first")
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (self.dim,))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (self.dim,))
        keep = np.all((self.atoms >= lo) & (self.atoms <= hi), axis=1)
        density = None
        if self.density is not None:
            g = self.density
            clo, chi = g.cell_boxes()
            frac = np.prod(np.clip(np.minimum(chi, hi) - np.maximum(clo, lo), 0, None) / g.h, axis=1)
            density = DensityGrid(g.lo, g.hi, g.values * frac.reshape(g.cells))
        return MeasureRep(self.dim, self.atoms[keep], self.masses[keep], density)

    def support_box(self):
        """Bounding box of the support (``None`` for the zero measure)."""
        los, his = [], []
        if self.atoms.shape[0]:
            los.append(self.atoms.min(axis=0))
            his.append(self.atoms.max(axis=0))
        if self.density is not None:
            los.append(self.density.lo)
            his.append(self.density.hi)
        if self.radial is not None:
            los.append(np.full(self.dim, -self.radial.r_hi))
            his.append(np.full(self.dim, self.radial.r_hi))
        if not los:
            return None
        return np.min(los, axis=0), np.max(his, axis=0)

    def grids(self, resolution=None):
        """Density grids of this measure (the radial part gridded at ``resolution``)."""
        out = []
        if self.density is not None:
            out.append(self.density)
        if self.radial is not None:
            n = resolution or DEFAULT_RESOLUTION.get(self.dim, 64)
            out.append(_radial_to_grid(self.radial, self.dim, n))
        return out

    # JSON
    def to_dict(self):
        doc = {"dim": self.dim}
        doc["atoms"] = [list(x) + [m] for x, m in zip(self.atoms.tolist(), self.masses.tolist())]
        if self.density is not None:
            g = self.density
            doc["density"] = {
                "box": g.lo.tolist() + g.hi.tolist(),
                "cells": list(g.cells),
                "values": g.values.ravel().tolist(),
            }
        if self.radial is not None:
            doc["radial"] = radial_to_dict(self.radial)
        return doc

    @classmethod
    def from_dict(cls, doc, dim=None):
        dim = doc.get("dim", dim)
        atoms = doc.get("atoms", [])
        if dim is None:
            if atoms:
                dim = len(atoms[0]) - 1
            elif "density" in doc:
                dim = len(doc["density"]["box"]) // 2
            else:
                raise DimensionMismatch("cannot infer the dimension of the measure")
        dim = int(dim)
        locs = [a[:-1] for a in atoms]
        masses = [a[-1] for a in atoms]
        if any(len(x) != dim for x in locs):
            raise DimensionMismatch("atom coordinates do not match the dimension")
        density = None
        if "density" in doc:
            dd = doc["density"]
            box = dd["box"]
            cells = tuple(int(c) for c in dd["cells"])
            density = DensityGrid(box[:dim], box[dim:], np.asarray(dd["values"], dtype=float).reshape(cells))
        radial = radial_from_dict(doc["radial"]) if "radial" in doc else None
        return cls(dim, np.asarray(locs, dtype=float).reshape(-1, dim), masses, density, radial)

    def to_json(self):
        return _io.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class MeasureClass:
    in_S: bool
    in_S0: bool
    in_S00: bool
    energy_integral: float
    potential_sup: float
    total_mass: float

    def to_dict(self):
        return {
            "in_S": self.in_S,
            "in_S0": self.in_S0,
            "in_S00": self.in_S00,
            "energy_integral": self.energy_integral,
            "potential_sup": self.potential_sup,
            "total_mass": self.total_mass,
        }


# -- 1D cell integrals (kernel exp(-k|z|), closed form) ---------------------

def _k2(z, k):
    # second antiderivative of exp(-k|z|) vanishing at 0
    z = np.abs(z)
    return (np.expm1(-k * z) + k * z) / (k * k)


def _line_cell_pairs(a, b, c, d, k):
    """``int_a^b int_c^d exp(-k|x-y|) dy dx`` elementwise."""
    a, b, c, d = np.broadcast_arrays(a, b, c, d)
    out = np.empty(a.shape)
    left = b <= c
    right = d <= a
    both = ~(left | right)
    fa = -np.expm1(-k * (b - a)) / k
    fc = -np.expm1(-k * (d - c)) / k
    out[left] = np.exp(-k * (c - b))[left] * fa[left] * fc[left]
    out[right] = np.exp(-k * (a - d))[right] * fa[right] * fc[right]
    out[both] = (_k2(b - c, k) - _k2(a - c, k) - _k2(b - d, k) + _k2(a - d, k))[both]
    return out


def _line_point_cell(x, c, d, k):
    """``int_c^d exp(-k|x-y|) dy`` elementwise."""
    x, c, d = np.broadcast_arrays(x, c, d)
    width = -np.expm1(-k * (d - c)) / k
    out = np.where(
        x <= c,
        np.exp(-k * np.maximum(c - x, 0)) * width,
        np.where(
            x >= d,
            np.exp(-k * np.maximum(x - d, 0)) * width,
            (-np.expm1(-k * np.maximum(x - c, 0)) - np.expm1(-k * np.maximum(d - x, 0))) / k,
        ),
    )
    return out


# -- 3D box integrals --------------------------------------------------------

def _phi(s):
    # int_0^1 t exp(-s t) dt
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    small = s < 1e-3
    ss = s[~small]
    out[~small] = (-np.expm1(-ss) - ss * np.exp(-ss)) / (ss * ss)
    t = s[small]
    out[small] = 0.5 - t / 3 + t * t / 8 - t ** 3 / 30
    return out


def _box_potential_near(x, lo, hi, k, q=10):
    """``int_box g(x, y) dy`` for the 3D kernel, row by row.

    Signed pyramids from ``x`` over the six faces cover the box exactly once;
    the pyramid Jacobian ``t^2 h`` cancels the singularity and the radial
    integral is done in closed form. Faces are split at the foot of ``x``.
    """
    xg, wg = _gauss01(q)
    n = x.shape[0]
    total = np.zeros(n)
    for a in range(3):
        b, c = [i for i in range(3) if i != a]
        pb = np.clip(x[:, b], lo[:, b], hi[:, b])
        pc = np.clip(x[:, c], lo[:, c], hi[:, c])
        for plane, sign in ((lo[:, a], -1.0), (hi[:, a], 1.0)):
            hgt = sign * (plane - x[:, a])
            for b0, b1 in ((lo[:, b], pb), (pb, hi[:, b])):
                for c0, c1 in ((lo[:, c], pc), (pc, hi[:, c])):
                    wb, wc = b1 - b0, c1 - c0
                    ub = b0[:, None] + wb[:, None] * xg[None, :]  # (n, q)
                    uc = c0[:, None] + wc[:, None] * xg[None, :]
                    db = (ub - x[:, b, None])[:, :, None]
                    dc = (uc - x[:, c, None])[:, None, :]
                    rho = np.sqrt(hgt[:, None, None] ** 2 + db ** 2 + dc ** 2)
                    safe = np.where(rho > 0, rho, 1.0)
                    vals = np.where(rho > 0, hgt[:, None, None] / (2 * np.pi * safe) * _phi(k * safe), 0.0)
                    w2 = wg[:, None] * wg[None, :]
                    total += (wb * wc) * np.einsum("nij,ij->n", vals, w2)
    return total


def _box_potential_far(x, lo, hi, k, q=3):
    xg, wg = _gauss01(q)
    size = hi - lo
    nodes = lo[:, None, :] + size[:, None, :] * _tensor_nodes(xg)[None, :, :]
    w = _tensor_weights(wg)
    r = np.sqrt(np.sum((nodes - x[:, None, :]) ** 2, axis=-1))
    vals = np.exp(-k * r) / (2 * np.pi * r)
    return np.prod(size, axis=1) * (vals @ w)


@lru_cache(maxsize=None)
def _tensor_nodes_cached(q):
    xg, _ = _gauss01(q)
    m = np.meshgrid(xg, xg, xg, indexing="ij")
    return np.stack([a.ravel() for a in m], axis=-1)


def _tensor_nodes(xg):
    return _tensor_nodes_cached(len(xg))


def _tensor_weights(wg):
    return np.einsum("i,j,k->ijk", wg, wg, wg).ravel()


def _box_potential(x, lo, hi, k, near_ratio=4.0):
    """Pairwise ``int_[lo_i, hi_i] g(x_i, y) dy`` in 3D."""
    x, lo, hi = (np.asarray(a, dtype=float) for a in (x, lo, hi))
    center = (lo + hi) / 2
    halfdiag = np.linalg.norm(hi - lo, axis=1) / 2
    dist = np.linalg.norm(x - center, axis=1)
    near = dist <= near_ratio * halfdiag
    out = np.empty(x.shape[0])
    for sel, fn in ((near, _box_potential_near), (~near, _box_potential_far)):
        idx = np.flatnonzero(sel)
        for start in range(0, idx.size, 4096):
            part = idx[start:start + 4096]
            out[part] = fn(x[part], lo[part], hi[part], k)
    return out


# -- potentials -------------------------------------------------------------

def _grid_potential(kernel, grid, points):
    """``int g(x, y) grid(y) dy`` at each row of ``points``."""
    k = kernel.rate
    vals = grid.values.ravel()
    live = np.flatnonzero(vals)
    if live.size == 0:
        return np.zeros(points.shape[0])
    clo, chi = grid.cell_boxes()
    clo, chi = clo[live], chi[live]
    vals = vals[live]
    out = np.zeros(points.shape[0])
    if kernel.model == BM1D:
        chunk = max(1, 2_000_000 // live.size)
        for s in range(0, points.shape[0], chunk):
            x = points[s:s + chunk, 0][:, None]
            out[s:s + chunk] = _line_point_cell(x, clo[None, :, 0], chi[None, :, 0], k) @ vals / k
        return out
    for i, x in enumerate(points):
        xx = np.broadcast_to(x, clo.shape)
        out[i] = _box_potential(xx, clo, chi, k) @ vals
    return out


def _atom_potential(kernel, atoms, masses, points):
    if atoms.shape[0] == 0:
        return np.zeros(points.shape[0])
    r = np.sqrt(np.sum((points[:, None, :] - atoms[None, :, :]) ** 2, axis=-1))
    vals = kernel.radial(r)
    vals = np.where(masses[None, :] > 0, vals, 0.0)
    with np.errstate(invalid="ignore"):
        return vals @ masses


def potential_at(kernel, mu, points, resolution=None):
    """``R_alpha mu(x) = int g_alpha(x, y) mu(dy)`` at the given points."""
    _check_dims(kernel, mu)
    points = _points(points, kernel.dim).reshape(-1, kernel.dim)
    out = _atom_potential(kernel, mu.atoms, mu.masses, points)
    for g in mu.grids(resolution):
        out = out + _grid_potential(kernel, g, points)
    return out


# -- energies ---------------------------------------------------------------

def _check_dims(kernel, *measures):
    for mu in measures:
        if mu.dim != kernel.dim:
            raise DimensionMismatch(f"{kernel.model} lives in R^{kernel.dim}, measure in R^{mu.dim}")


def _grid_self_table(kernel, grid):
    """``T[D] = int_cell0 int_cell(D) g``, indexed by offsets ``D`` in ``(-n+1 .. n-1)^d``."""
    k = kernel.rate
    h = grid.h
    if kernel.model == BM1D:
        n = grid.cells[0]
        off = np.arange(n) * h[0]
        half = _line_cell_pairs(0.0, h[0], off, off + h[0], k) / k
        return np.concatenate([half[:0:-1], half])
    n = grid.cells
    offs = np.stack(np.meshgrid(*[np.arange(c) for c in n], indexing="ij"), axis=-1).reshape(-1, 3)
    nearish = np.max(offs, axis=1) <= 3
    q_near, q_far = 4, 2
    table = np.empty(offs.shape[0])
    for sel, q in ((nearish, q_near), (~nearish, q_far)):
        idx = np.flatnonzero(sel)
        if idx.size == 0:
            continue
        xg, wg = _gauss01(q)
        outer = _tensor_nodes(xg) * h  # points in cell 0 = [0, h]
        ow = _tensor_weights(wg) * np.prod(h)
        lo = offs[idx] * h
        hi = lo + h
        m = outer.shape[0]
        x = np.repeat(outer[None, :, :], idx.size, axis=0).reshape(-1, 3)
        pot = _box_potential(x, np.repeat(lo, m, axis=0), np.repeat(hi, m, axis=0), k)
        table[idx] = pot.reshape(idx.size, m) @ ow
    table = table.reshape(n)
    # reflect to negative offsets (cells are symmetric under coordinate flips)
    for axis in range(3):
        table = np.concatenate([np.flip(table, axis=axis).take(range(n[axis] - 1), axis=axis), table], axis=axis)
    return table


def _grid_grid(kernel, ga, gb):
    va = ga.values
    vb = gb.values
    if not va.any() or not vb.any():
        return 0.0
    if ga.same_geometry(gb):
        table = _grid_self_table(kernel, ga)
        if kernel.model == BM1D:
            conv = np.convolve(vb.ravel(), table, mode="full")[va.size - 1: 2 * va.size - 1]
        else:
            full = scipy.signal.fftconvolve(vb, table, mode="full")
            n = va.shape
            conv = full[n[0] - 1:2 * n[0] - 1, n[1] - 1:2 * n[1] - 1, n[2] - 1:2 * n[2] - 1]
        return float(np.sum(va * conv))
    k = kernel.rate
    if kernel.model == BM1D:
        alo, ahi = ga.cell_boxes()
        blo, bhi = gb.cell_boxes()
        a_vals, b_vals = va.ravel(), vb.ravel()
        total = 0.0
        chunk = max(1, 2_000_000 // b_vals.size)
        for s in range(0, a_vals.size, chunk):
            pairs = _line_cell_pairs(alo[s:s + chunk, 0, None], ahi[s:s + chunk, 0, None], blo[None, :, 0], bhi[None, :, 0], k)
            total += float(a_vals[s:s + chunk] @ (pairs @ b_vals))
        return total / k
    # 3D, different grids: outer Gauss on cells of ga, exact inner potential of gb
    xg, wg = _gauss01(3)
    alo, _ = ga.cell_boxes()
    live = np.flatnonzero(va.ravel())
    nodes = (alo[live][:, None, :] + _tensor_nodes(xg)[None, :, :] * ga.h).reshape(-1, 3)
    pot = _grid_potential(kernel, gb, nodes).reshape(live.size, -1)
    return float(va.ravel()[live] @ (pot @ (_tensor_weights(wg) * ga.cell_volume)))


def _components(mu, sign=1.0, resolution=None):
    grids = [(sign, g) for g in mu.grids(resolution)]
    return (mu.atoms, sign * mu.masses), grids


def _merge(parts):
    """Combine signed atom sets and grids; grids with equal geometry are summed."""
    atoms = np.concatenate([p[0][0] for p in parts])
    masses = np.concatenate([p[0][1] for p in parts])
    if atoms.shape[0]:
        uniq, inv = np.unique(atoms, axis=0, return_inverse=True)
        merged = np.zeros(uniq.shape[0])
        np.add.at(merged, inv.ravel(), masses)
        atoms, masses = uniq, merged
    grids = []
    for part in parts:
        for sign, g in part[1]:
            for i, (acc_lo, acc_hi, acc_vals) in enumerate(grids):
                probe = DensityGrid(acc_lo, acc_hi, np.zeros(acc_vals.shape))
                if probe.same_geometry(g):
                    grids[i] = (acc_lo, acc_hi, acc_vals + sign * g.values)
                    break
            else:
                grids.append((g.lo, g.hi, sign * g.values))
    return atoms, masses, grids


class _SignedGrid:
    # DensityGrid without the sign check, for internal signed combinations
    def __init__(self, lo, hi, values):
        self.lo, self.hi, self.values = lo, hi, values
        self.dim = lo.size

    cells = DensityGrid.cells
    h = DensityGrid.h
    cell_volume = DensityGrid.cell_volume
    same_geometry = DensityGrid.same_geometry
    centers = DensityGrid.centers
    cell_boxes = DensityGrid.cell_boxes


def _bilinear(kernel, a, b):
    """``sum sum g(x, y) a(dx) b(dy)`` for merged signed components."""
    a_atoms, a_masses, a_grids = a
    b_atoms, b_masses, b_grids = b
    a_grids = [_SignedGrid(*g) for g in a_grids]
    b_grids = [_SignedGrid(*g) for g in b_grids]
    total = 0.0
    if a_atoms.shape[0] and b_atoms.shape[0]:
        r = np.sqrt(np.sum((a_atoms[:, None, :] - b_atoms[None, :, :]) ** 2, axis=-1))
        vals = kernel.radial(r)
        w = a_masses[:, None] * b_masses[None, :]
        hit = (w != 0) & np.isinf(vals)
        if hit.any():
            return math.inf
        total += float(np.sum(np.where(w != 0, vals * w, 0.0)))
    for atoms, masses, grids in ((a_atoms, a_masses, b_grids), (b_atoms, b_masses, a_grids)):
        if atoms.shape[0]:
            for g in grids:
                total += float(masses @ _grid_potential(kernel, g, atoms))
    for ga in a_grids:
        for gb in b_grids:
            total += _grid_grid(kernel, ga, gb)
    return total


def _energy_once(kernel, mu, nu, resolution, signed=False):
    if signed:
        comb = _merge([_components(mu, 1.0, resolution), _components(nu, -1.0, resolution)])
        return _bilinear(kernel, comb, comb)
    a = _merge([_components(mu, 1.0, resolution)])
    b = a if nu is mu else _merge([_components(nu, 1.0, resolution)])
    return _bilinear(kernel, a, b)


def _refined(kernel, fn, measures, resolution):
    """Run ``fn(resolution)`` once, or three times with doubling if radial parts are gridded."""
    if not any(m.radial is not None for m in measures):
        return fn(None), False
    n0 = resolution or DEFAULT_RESOLUTION.get(kernel.dim, 64)
    values = [fn(n0 * 2 ** j) for j in range(3)]
    return values, True


def _refined_energy(kernel, mu, nu, resolution, signed=False):
    result, multi = _refined(kernel, lambda n: _energy_once(kernel, mu, nu, n, signed), (mu, nu), resolution)
    if not multi:
        return result
    if signed:
        return result[-1]
    if any(math.isinf(v) for v in result) or diverges(result):
        return math.inf
    return result[-1]


def _radial_locally_integrable(mu):
    try:
        mu.radial.pth_integral(1, 0.0, mu.radial.r_hi, mu.dim)
    except NonintegrableSingularity:
        return False
    return True


def mutual_energy(kernel, mu, nu, resolution=None):
    """``I(mu, nu)``; ``math.inf`` flags an infinite energy."""
    _check_dims(kernel, mu, nu)
    for m in (mu, nu):
        if m.radial is not None and not _radial_locally_integrable(m):
            return math.inf
    return _refined_energy(kernel, mu, nu, resolution)


def rho_cont(kernel, mu, nu, resolution=None):
    """Energy distance ``sqrt(I(mu,mu) - 2 I(mu,nu) + I(nu,nu))``.

    The expansion is evaluated as the energy of the signed difference so that
    close measures do not lose digits to cancellation.
    """
    _check_dims(kernel, mu, nu)
    for name, m in (("mu", mu), ("nu", nu)):
        if math.isinf(mutual_energy(kernel, m, m, resolution)):
            raise NotFiniteEnergy(f"{name} has infinite self-energy")
    sq = _refined_energy(kernel, mu, nu, resolution, signed=True)
    if sq < -RHO_CLAMP:
        raise ArithmeticError(f"negative squared distance {sq!r}")
    return math.sqrt(max(sq, 0.0))


def classify_measure(kernel, mu, probe_grid, resolution=None):
    """Place ``mu`` in S / S_0 / S_00 by energy finiteness and the sup of its potential."""
    _check_dims(kernel, mu)
    probe = _points(probe_grid, kernel.dim).reshape(-1, kernel.dim)
    if probe.shape[0] == 0:
        raise ValueError("probe grid is empty")
    # points are polar for 3D Brownian motion; densities are always smooth
    smooth = not (kernel.dim >= 2 and mu.has_atoms)
    if mu.radial is not None and not _radial_locally_integrable(mu):
        smooth = False
    energy = mutual_energy(kernel, mu, mu, resolution)
    in_s0 = smooth and math.isfinite(energy)
    if kernel.dim >= 2 and mu.has_atoms:
        sup = math.inf
    else:
        res, multi = _refined(kernel, lambda n: float(np.max(potential_at(kernel, mu, probe, n))), (mu,), resolution)
        if multi:
            sup = math.inf if diverges(res) else res[-1]
        else:
            sup = res
    try:
        mass = mu.total_mass()
    except NonintegrableSingularity:
        mass = math.inf
    in_s00 = in_s0 and math.isfinite(mass) and math.isfinite(sup)
    return MeasureClass(smooth, in_s0, in_s00, energy, sup, mass)


# -- norms --------------------------------------------------------------------

@dataclass(frozen=True)
class Annulus:
    r_in: float = 0.0
    r_out: float = math.inf


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple


def lp_norm_region(f, p, region, dim):
    """``(int_region f^p dx)^(1/p)`` for a radial profile or a density grid.

    Radial profiles integrate in closed form (powers) or by Gauss rules
    (tables); anything else with a ``pth_integral(p, a, b, d)`` method is
    accepted. A divergent integral raises :class:`NonintegrableSingularity`.
    """
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p!r}")
    if isinstance(f, DensityGrid):
        if not isinstance(region, Box):
            raise UnsupportedRegion("grid densities are integrated over boxes")
        if f.dim != dim:
            raise DimensionMismatch("grid dimension differs from dim")
        lo, hi = np.broadcast_to(region.lo, (dim,)), np.broadcast_to(region.hi, (dim,))
        clo, chi = f.cell_boxes()
        overlap = np.prod(np.clip(np.minimum(chi, hi) - np.maximum(clo, lo), 0, None), axis=1)
        total = float(np.sum(overlap * f.values.ravel() ** p))
    elif isinstance(region, Annulus):
        total = f.pth_integral(p, region.r_in, region.r_out, dim)
    elif isinstance(region, Box) and dim == 1:
        a, b = float(np.ravel(region.lo)[0]), float(np.ravel(region.hi)[0])
        total = 0.0
        if b > 0:
            total += 0.5 * f.pth_integral(p, max(a, 0.0), b, 1)
        if a < 0:
            total += 0.5 * f.pth_integral(p, max(-b, 0.0), -a, 1)
    else:
        raise UnsupportedRegion(f"cannot integrate a radial profile over {region!r} in dimension {dim}")
    if math.isinf(total):
        raise NonintegrableSingularity("integral diverges")
    return total ** (1.0 / p)


# -- vague convergence ------------------------------------------------------

@dataclass(frozen=True)
class HatFunction:
    """Tensor hat ``prod_i (1 - |x_i - c_i| / width)_+`` supported on ``c +- width``."""

    center: tuple
    width: float = 1.0

    @property
    def support(self):
        c = np.asarray(self.center, dtype=float)
        return c - self.width, c + self.width

    def __call__(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, len(self.center))
        return np.prod(np.clip(1 - np.abs(x - np.asarray(self.center)) / self.width, 0, None), axis=1)

    def box_integral(self, lo, hi):
        """Exact ``int_box hat`` for rows of boxes."""
        c = np.asarray(self.center, dtype=float)
        w = self.width

        def prim(t):  # antiderivative of the 1D hat centred at 0 with half-width w
            t = np.clip(t, -w, w)
            return t - np.sign(t) * t * t / (2 * w)

        return np.prod(prim(hi - c) - prim(lo - c), axis=1)


@dataclass(frozen=True)
class TestFunction:
    """Generic compactly supported test function with a declared support box."""

    func: object
    lo: tuple
    hi: tuple

    __test__ = False  # not a pytest class

    @property
    def support(self):
        return np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)

    def __call__(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, len(self.lo))
        inside = np.all((x >= self.support[0]) & (x <= self.support[1]), axis=1)
        return np.where(inside, np.asarray(self.func(x), dtype=float).ravel(), 0.0)

    def box_integral(self, lo, hi, q=8):
        xg, wg = _gauss01(q)
        d = lo.shape[1]
        mesh = np.meshgrid(*([xg] * d), indexing="ij")
        nodes = np.stack([m.ravel() for m in mesh], axis=-1)
        weights = np.prod(np.meshgrid(*([wg] * d), indexing="ij"), axis=0).ravel()
        pts = lo[:, None, :] + (hi - lo)[:, None, :] * nodes[None, :, :]
        vals = self(pts.reshape(-1, d)).reshape(lo.shape[0], -1)
        return np.prod(hi - lo, axis=1) * (vals @ weights)


def pair(phi, mu, resolution=None):
    """``int phi dmu``."""
    total = float(phi(mu.atoms) @ mu.masses) if mu.atoms.shape[0] else 0.0
    for g in mu.grids(resolution):
        lo, hi = g.cell_boxes()
        total += float(phi.box_integral(lo, hi) @ g.values.ravel())
    return total


def default_tests(mu, nu, width=1.0, spacing=0.5):
    """Hats of the given width centred on a lattice covering both supports."""
    boxes = [b for b in (mu.support_box(), nu.support_box()) if b is not None]
    if not boxes:
        return [HatFunction((0.0,) * mu.dim, width)]
    lo = np.min([b[0] for b in boxes], axis=0) - width
    hi = np.max([b[1] for b in boxes], axis=0) + width
    axes = [np.arange(np.floor(l / spacing), np.ceil(h / spacing) + 1) * spacing for l, h in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([m.ravel() for m in mesh], axis=-1)
    return [HatFunction(tuple(c), width) for c in centers]


def vague_gap(mu, nu, tests=None, resolution=None):
    """``max_phi |int phi dmu - int phi dnu|`` over a family of test functions."""
    if mu.dim != nu.dim:
        raise DimensionMismatch("measures live in different dimensions")
    if tests is None:
        tests = default_tests(mu, nu)
    if not tests:
        raise ValueError("test family is empty")
    return max(abs(pair(phi, mu, resolution) - pair(phi, nu, resolution)) for phi in tests)


# -- discretized Brownian motion ----------------------------------------------

def brownian_chain(lo, hi, n_cells):
    """Birth-death chain on the nodes of ``[lo, hi]`` whose ``A_1`` is ``h (1 - 1/2 d^2/dx^2)``.

    Nodes are ``lo + i h``; ``m_i = h`` (``h/2`` at the ends, reflecting) and
    neighbours are joined by conductance ``1/(2h)``.
    """
    h = (hi - lo) / n_cells
    nodes = lo + h * np.arange(n_cells + 1)
    n = n_cells + 1
    import scipy.sparse

    off = np.full(n - 1, 1.0 / (2 * h))
    w = scipy.sparse.diags([off, off], [-1, 1], shape=(n, n), format="csr")
    m = np.full(n, h)
    m[0] = m[-1] = h / 2
    return build_form(w, np.zeros(n), m), nodes


def chain_masses(nodes, mu):
    """Lump a 1D measure onto the nearest chain nodes."""
    out = np.zeros(nodes.size)
    if mu.atoms.shape[0]:
        idx = np.abs(mu.atoms[:, 0][:, None] - nodes[None, :]).argmin(axis=1)
        np.add.at(out, idx, mu.masses)
    for g in mu.grids():
        c = g.centers()[:, 0]
        idx = np.abs(c[:, None] - nodes[None, :]).argmin(axis=1)
        np.add.at(out, idx, g.values.ravel() * g.cell_volume)
    return out
