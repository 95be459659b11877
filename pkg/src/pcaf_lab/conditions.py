"""Numerical checks of approximation conditions for radial densities on R^d.

Densities are radial and described in the volume coordinate ``s = |x|^d``,
where ``dx = (c_d / d) ds`` with ``c_d`` the area of the unit sphere. A
density is a sum of pieces:

* :class:`PowerPiece` -- ``coef * |x|^gamma`` on ``s_lo < s <= s_hi``;
* :class:`LogPiece` -- ``|x|^-d (log |x|)^-2`` on ``0 < s <= s_hi``;
* :class:`ShellSequence` -- infinitely many thin shells ``coef * |x|^gamma_j``.

Shells are stored as an anchor plus a width so that shells of width
``1e-30`` next to ``s = 200`` keep full relative precision, and every power
integral is evaluated with ``log1p``/``expm1``.

Nests ``F_n`` are s-intervals ``[s_lo(n), s_hi(n)]``. Infinite series,
over shells or over nest indices, are summed up to ``J = max(start + tail,
2 start)``. The remainder is then estimated from two dyadic blocks
``B1 = sum_(J/2, J]`` and ``B2 = sum_(J, 2J]``. A block ratio no smaller than
that of the harmonic series marks the series as divergent. Otherwise a
power law ``c k^-s`` is fitted to the two blocks and its Hurwitz zeta tail
is added.
"""

import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.special import zeta

from . import _io
from .continuum import MeasureRep, ResolventKernel, potential_at, unit_sphere_area
from .errors import NonintegrableSingularity, UnsupportedDimension, UnsupportedRegion, ValidationError

CONDITIONS = ("Aa", "Ab1", "Ab2", "Ac1", "Ac2", "Sb", "Sc")
DEFAULT_INDICES = (4, 8, 16, 32, 64, 128)
DEFAULT_CONSTANTS = (1.1, 2.0, 10.0)
DEFAULT_TAIL = 200

TENDS_TO_ZERO = "tends-to-zero"
BOUNDED_AWAY = "bounded-away"
DIVERGES = "diverges"
INCONCLUSIVE = "inconclusive"

INF = math.inf
HARMONIC_MARGIN = 1e-3


# -- intervals in the volume coordinate --------------------------------------

def _clean(intervals):
    return [(a, b) for a, b in intervals if b > a]


def intersect(r1, r2):
    out = []
    for a1, b1 in r1:
        for a2, b2 in r2:
            out.append((max(a1, a2), min(b1, b2)))
    return _clean(out)


def complement(region):
    """Complement in ``(0, inf)`` of a sorted disjoint interval list."""
    out, cursor = [], 0.0
    for a, b in sorted(region):
        out.append((cursor, a))
        cursor = b
    out.append((cursor, INF))
    return _clean(out)


def measure_of(region, d):
    return unit_sphere_area(d) / d * sum(b - a for a, b in region)


# -- series -------------------------------------------------------------------

def _block_ratio(s, J):
    h = lambda a, b: zeta(s, a) - zeta(s, b)
    return h(J + 1, 2 * J + 1) / h(J // 2 + 1, J + 1)


def dyadic_remainder(b1, b2, J):
    """Estimated ``sum_{k > J}`` from the blocks ``(J/2, J]`` and ``(J, 2J]``.

    The block ratio fixes the exponent ``s`` of a power law ``c k^-s``.
    The tail past ``2J`` is then the Hurwitz zeta value ``c zeta(s, 2J+1)``.
    Exponents within ``HARMONIC_MARGIN`` of 1 count as divergent.
    Block ratios below that of ``k^-60`` fall back to continuing the blocks
    geometrically.
    """
    if b2 == 0:
        return 0.0
    if math.isinf(b2) or b1 == 0:
        return INF
    ratio = b2 / b1
    if ratio >= 1:
        return INF
    s_max = 60.0
    if ratio <= _block_ratio(s_max, J):
        return b2 / (1 - ratio)
    lo = 1.0 + HARMONIC_MARGIN
    if ratio >= _block_ratio(lo, J):
        return INF
    s = brentq(lambda t: _block_ratio(t, J) - ratio, lo, s_max, xtol=1e-13, rtol=1e-13)
    c = b2 / (zeta(s, J + 1) - zeta(s, 2 * J + 1))
    return b2 + c * zeta(s, 2 * J + 1)


def sum_series(term, start, tail=DEFAULT_TAIL):
    """``sum_{k >= start} term(k)`` with the dyadic remainder estimate."""
    stop = max(start + tail, 2 * start)
    partial = math.fsum(term(k) for k in range(start, stop + 1))
    if math.isinf(partial):
        return INF
    b1 = math.fsum(term(k) for k in range(stop // 2 + 1, stop + 1))
    b2 = math.fsum(term(k) for k in range(stop + 1, 2 * stop + 1))
    return partial + dyadic_remainder(b1, b2, stop)


# -- pieces ---------------------------------------------------------------------

def _power_segment(anchor, side, o1, o2, exponent):
    """``int s^exponent ds`` over ``anchor + [o1, o2]`` (side "lo") or ``anchor - [o2, o1]`` (side "hi")."""
    if o2 <= o1:
        return 0.0
    F = exponent + 1
    if anchor == 0:
        if F > 0:
            return INF if math.isinf(o2) else (o2 ** F - o1 ** F) / F
        if o1 == 0:
            return INF
        if F == 0:
            return INF if math.isinf(o2) else math.log(o2 / o1)
        return (o1 ** F - (0.0 if math.isinf(o2) else o2 ** F)) / (-F)
    sign = 1.0 if side == "lo" else -1.0
    if math.isinf(o2):
        if F >= 0:
            return INF
        x_bot = math.log1p(o1 / anchor)
        return math.exp(F * (math.log(anchor) + x_bot)) / (-F)
    xa, xb = math.log1p(sign * o1 / anchor), math.log1p(sign * o2 / anchor)
    x_bot, x_top = min(xa, xb), max(xa, xb)
    if F == 0:
        return x_top - x_bot
    diff = (math.expm1(F * x_top) - math.expm1(F * x_bot)) / F
    if diff <= 0:
        return 0.0
    log_val = F * math.log(anchor) + math.log(diff)
    return INF if log_val > 709 else math.exp(log_val)


def _offsets(anchor, width, side, a, b):
    """Offsets ``[o1, o2]`` of the part of a shell inside ``(a, b]``."""
    if side == "lo":
        o1 = max(a - anchor, 0.0)
        o2 = width if math.isinf(b) else min(b - anchor, width)
    else:
        o1 = 0.0 if math.isinf(b) else max(anchor - b, 0.0)
        o2 = min(anchor - a, width)
    return o1, o2


@dataclass(frozen=True)
class Shell:
    anchor: float
    width: float
    side: str  # "lo": (anchor, anchor + width]; "hi": (anchor - width, anchor]
    coef: float
    gamma: float

    def overlap(self, a, b):
        o1, o2 = _offsets(self.anchor, self.width, self.side, a, b)
        return o1, o2

    def integral(self, p, a, b, d):
        o1, o2 = self.overlap(a, b)
        if o2 <= o1:
            return 0.0
        val = _power_segment(self.anchor, self.side, o1, o2, p * self.gamma / d)
        return val * self.coef ** p * unit_sphere_area(d) / d

    def nodes(self, a, b, q=8):
        """Gauss nodes (in s) and weights (in dx) on the part inside ``(a, b]``."""
        o1, o2 = self.overlap(a, b)
        if o2 <= o1:
            return np.zeros(0), np.zeros(0)
        return _geometric_gauss(self.anchor, self.side, o1, o2, q)

    def value(self, s, d):
        return self.coef * np.asarray(s, dtype=float) ** (self.gamma / d)


@functools.lru_cache(maxsize=8)
def _unit_gauss(q):
    x, w = np.polynomial.legendre.leggauss(q)
    return (x + 1) / 2, w / 2


def _geometric_gauss(anchor, side, o1, o2, q):
    """Gauss nodes (values of s) and weights on ``anchor + [o1, o2]`` (or ``anchor - [o2, o1]``).

    Thin pieces get a single panel laid out in offsets, so widths far below
    the spacing of floats near ``anchor`` keep their exact length. Long pieces
    are split into panels whose ends double in ``s``.
    """
    x, w = _unit_gauss(q)
    length = o2 - o1
    start = anchor + o1 if side == "lo" else anchor - o2
    if start > 0 and length <= 0.5 * start:
        return start + length * x, length * w
    lo = start if start > 0 else length * 1e-14
    cuts = [0.0, lo] if start <= 0 else [lo]
    end = start + length
    while cuts[-1] < end:
        cuts.append(min(2 * cuts[-1], end))
    cuts = np.asarray(cuts)
    widths = np.diff(cuts)
    nodes = (cuts[:-1, None] + widths[:, None] * x[None, :]).ravel()
    weights = (widths[:, None] * w[None, :]).ravel()
    return nodes, weights


@dataclass(frozen=True)
class PowerPiece:
    """``coef * |x|^gamma`` on ``s_lo < |x|^d <= s_hi``."""

    gamma: float
    coef: float = 1.0
    s_lo: float = 0.0
    s_hi: float = INF

    def shells(self, a, b):
        lo, hi = max(a, self.s_lo), min(b, self.s_hi)
        if hi <= lo:
            return []
        return [Shell(lo if lo > 0 else 0.0, hi - lo, "lo", self.coef, self.gamma)]

    def integral(self, p, region, d, tail=DEFAULT_TAIL):
        return math.fsum(s.integral(p, a, b, d) for a, b in region for s in self.shells(a, b))

    def to_dict(self):
        out = {"type": "power", "gamma": self.gamma, "coef": self.coef, "s_lo": self.s_lo}
        out["s_hi"] = None if math.isinf(self.s_hi) else self.s_hi
        return out


@dataclass(frozen=True)
class LogPiece:
    """``|x|^-d (log |x|)^-2`` on ``0 < |x|^d <= s_hi`` with ``s_hi < 1``."""

    s_hi: float

    def __post_init__(self):
        if not 0 < self.s_hi < 1:
            raise ValidationError("the logarithmic piece needs 0 < s_hi < 1")

    def integral(self, p, region, d, tail=DEFAULT_TAIL):
        total = 0.0
        for a, b in region:
            a, b = max(a, 0.0), min(b, self.s_hi)
            if b <= a:
                continue
            total += self._segment(p, a, b, d)
        return total

    def _segment(self, p, a, b, d):
        scale = unit_sphere_area(d) / d * d ** (2 * p)
        if p == 1:
            # int s^-1 (log s)^-2 ds = -1 / log s
            upper = -1.0 / math.log(b)
            lower = 0.0 if a == 0 else -1.0 / math.log(a)
            return scale * (upper - lower)
        if a == 0:
            return INF
        # u = -log s:  int exp((p - 1) u) u^(-2p) du
        u0, u1 = -math.log(b), -math.log(a)
        val = quad(lambda u: math.exp((p - 1) * (u - u1)) * u ** (-2 * p), u0, u1, limit=200)[0]
        return scale * val * math.exp((p - 1) * u1)

    def value(self, s, d):
        s = np.asarray(s, dtype=float)
        return np.where((s > 0) & (s <= self.s_hi), d * d / (s * np.log(s) ** 2), 0.0)

    def weighted(self, weight, region, d, q=8):
        total = 0.0
        for a, b in region:
            a, b = max(a, 0.0), min(b, self.s_hi)
            if b <= a:
                continue
            nodes, w = _geometric_gauss(0.0, "lo", a, b, q)
            total += float(np.sum(w * self.value(nodes, d) * weight(nodes))) * unit_sphere_area(d) / d
        return total

    def to_dict(self):
        return {"type": "loglaw", "s_hi": self.s_hi}


# shell families: name -> (first index, direction, builder(j, d, params) -> Shell)
def _annulus_inner(j, d, a=1.0, **_):
    return Shell(1.0 / j, float(j) ** (-2 * a - 2), "lo", 1.0, -d * a)


def _annulus_outer(j, d, b=1.0, **_):
    return Shell(float(j), float(j) ** (-2 * b - 2), "hi", 1.0, d * b)


def _log_shells(j, d, **_):
    lo = float(j) ** d
    width = float(j + 1) ** d - lo
    return Shell(lo, width, "lo", 1.0, -d + 1.0 / math.log(j + 1))


def _odd_shells(k, d, **_):
    j = 2 * k - 1
    return Shell(float(j), float(j) ** -3.0, "lo", 1.0, float(d))


def _even_shells(k, d, delta=2.0, **_):
    j = 2 * k
    return Shell(float(j), math.exp(-delta * math.log(j + 2) * math.log(j)), "lo", 1.0, -float(d))


SHELL_KINDS = {
    "annulus_inner": (2, "down", _annulus_inner),
    "annulus_outer": (2, "up", _annulus_outer),
    "log_shells": (1, "up", _log_shells),
    "odd_shells": (1, "up", _odd_shells),
    "even_shells": (1, "up", _even_shells),
}


@dataclass(frozen=True)
class ShellSequence:
    kind: str
    dim: int
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in SHELL_KINDS:
            raise ValidationError(f"unknown shell family {self.kind!r}")

    def shell(self, j):
        return SHELL_KINDS[self.kind][2](j, self.dim, **dict(self.params))

    @property
    def first(self):
        return SHELL_KINDS[self.kind][0]

    @property
    def direction(self):
        return SHELL_KINDS[self.kind][1]

    def _index_range(self, a, b):
        """First overlapping index and last one (``None`` when unbounded)."""
        j = self.first
        limit = 10 ** 7
        up = self.direction == "up"
        while j < limit:
            sh = self.shell(j)
            o1, o2 = sh.overlap(a, b)
            if o2 > o1:
                break
            start = sh.anchor - (sh.width if sh.side == "hi" else 0.0)
            end = sh.anchor + (sh.width if sh.side == "lo" else 0.0)
            if up and start >= b:
                return None, None
            if not up and end <= a:
                return None, None
            j += 1
        else:
            return None, None
        unbounded = (up and math.isinf(b)) or (not up and a == 0)
        if unbounded:
            return j, None
        last = j
        while True:
            o1, o2 = self.shell(last + 1).overlap(a, b)
            if o2 <= o1:
                break
            last += 1
        return j, last

    def _sum(self, term, a, b, tail):
        first, last = self._index_range(a, b)
        if first is None:
            return 0.0
        if last is None:
            return sum_series(term, first, tail)
        return math.fsum(term(j) for j in range(first, last + 1))

    def integral(self, p, region, d, tail=DEFAULT_TAIL):
        total = 0.0
        for a, b in region:
            total += self._sum(lambda j: self.shell(j).integral(p, a, b, d), a, b, tail)
        return total

    def weighted(self, weight, region, d, tail=DEFAULT_TAIL, q=8):
        scale = unit_sphere_area(d) / d

        def block(js, a, b):
            nodes, wts, owner = [], [], []
            for i, j in enumerate(js):
                sh = self.shell(j)
                nd, w = sh.nodes(a, b, q)
                nodes.append(nd)
                wts.append(w * sh.value(nd, d))
                owner.append(np.full(nd.size, i))
            if not nodes:
                return np.zeros(0)
            nodes, wts, owner = map(np.concatenate, (nodes, wts, owner))
            vals = wts * weight(nodes) if nodes.size else wts
            return np.bincount(owner, weights=vals, minlength=len(js)) * scale

        total = 0.0
        for a, b in region:
            first, last = self._index_range(a, b)
            if first is None:
                continue
            if last is not None:
                total += math.fsum(block(range(first, last + 1), a, b))
                continue
            stop = max(first + tail, 2 * first)
            terms = block(range(first, 2 * stop + 1), a, b)
            head = terms[: stop - first + 1]
            b1 = math.fsum(terms[stop // 2 + 1 - first: stop + 1 - first])
            b2 = math.fsum(terms[stop + 1 - first:])
            total += math.fsum(head) + dyadic_remainder(b1, b2, stop)
        return total

    def to_dict(self):
        return {"type": "shells", "kind": self.kind, "params": dict(self.params)}


def _power_weighted(piece, weight, region, d, q=8):
    total = 0.0
    for a, b in region:
        for sh in piece.shells(a, b):
            if math.isinf(sh.width):
                raise UnsupportedRegion("potential-weighted integrals need a bounded region")
            nodes, w = _geometric_gauss(sh.anchor, "lo", 0.0, sh.width, q)
            total += float(np.sum(w * sh.value(nodes, d) * weight(nodes))) * unit_sphere_area(d) / d
    return total


@dataclass(frozen=True)
class RadialDensity:
    dim: int
    pieces: tuple

    def integral(self, p, region, tail=DEFAULT_TAIL):
        """``int_region f^p dx`` (``inf`` when it diverges)."""
        return math.fsum(pc.integral(p, region, self.dim, tail) for pc in self.pieces) if region else 0.0

    def weighted(self, weight, region, tail=DEFAULT_TAIL):
        """``int_region w(|x|^d) f(x) dx`` for a bounded weight in the volume coordinate."""
        total = 0.0
        for pc in self.pieces:
            if isinstance(pc, PowerPiece):
                total += _power_weighted(pc, weight, region, self.dim)
            elif isinstance(pc, LogPiece):
                total += pc.weighted(weight, region, self.dim)
            else:
                total += pc.weighted(weight, region, self.dim, tail)
        return total

    def value(self, s):
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        for pc in self.pieces:
            if isinstance(pc, PowerPiece):
                inside = (s > pc.s_lo) & (s <= pc.s_hi)
                with np.errstate(divide="ignore"):
                    out = out + np.where(inside, pc.coef * np.where(s > 0, s, 1.0) ** (pc.gamma / self.dim), 0.0)
            elif isinstance(pc, LogPiece):
                out = out + pc.value(s, self.dim)
        return out

    def to_dict(self):
        return {"dim": self.dim, "pieces": [pc.to_dict() for pc in self.pieces]}

    @classmethod
    def from_dict(cls, doc, dim=None):
        d = int(doc.get("dim", dim))
        pieces = []
        for pc in doc["pieces"]:
            t = pc["type"]
            if t == "power":
                hi = pc.get("s_hi")
                pieces.append(PowerPiece(float(pc["gamma"]), float(pc.get("coef", 1.0)),
                                         float(pc.get("s_lo", 0.0)), INF if hi is None else float(hi)))
            elif t == "loglaw":
                pieces.append(LogPiece(float(pc.get("s_hi", math.exp(-d)))))
            elif t == "shells":
                pieces.append(ShellSequence(pc["kind"], d, tuple(sorted(pc.get("params", {}).items()))))
            else:
                raise ValidationError(f"unknown piece type {t!r}")
        return cls(d, tuple(pieces))


# -- parameter sequences ------------------------------------------------------

@dataclass(frozen=True)
class Exponent:
    """Exponent sequence: constant, ``log(n + shift)`` or a parity split."""

    value: float = 1.0
    expr: str = "const"
    shift: float = 1.0
    even: object = None
    odd: object = None

    def __call__(self, n):
        if self.expr == "const":
            return self.value
        if self.expr == "log":
            return math.log(n + self.shift)
        if self.expr == "parity":
            return (self.even if n % 2 == 0 else self.odd)(n)
        raise ValidationError(f"unknown exponent expression {self.expr!r}")

    def to_dict(self):
        if self.expr == "const":
            return self.value
        if self.expr == "log":
            return {"expr": "log", "shift": self.shift}
        return {"expr": "parity", "even": self.even.to_dict(), "odd": self.odd.to_dict()}

    @classmethod
    def from_dict(cls, doc):
        if isinstance(doc, (int, float)):
            return cls(float(doc))
        if doc.get("expr") == "log":
            return cls(expr="log", shift=float(doc.get("shift", 1.0)))
        if doc.get("expr") == "parity":
            return cls(expr="parity", even=cls.from_dict(doc["even"]), odd=cls.from_dict(doc["odd"]))
        if doc.get("expr") == "const":
            return cls(float(doc["value"]))
        raise ValidationError(f"unknown exponent spec {doc!r}")


def _conjugate_factor(r, region_measure):
    """``min(1, m^(1/r'))`` with ``1/r + 1/r' = 1``."""
    if region_measure <= 0:
        return 0.0
    inv = 1.0 - 1.0 / r  # 1 / r'
    return min(1.0, region_measure ** inv) if inv > 0 else 1.0


@dataclass(frozen=True)
class Nest:
    """``F_n = {s_lo(n) <= |x|^d <= s_hi(n)}`` with ``s = coef * n^power`` bounds."""

    hi_coef: float = 1.0
    hi_power: float = 1.0
    lo_coef: float = 0.0
    lo_power: float = -1.0

    def bounds(self, n):
        lo = self.lo_coef * float(n) ** self.lo_power if self.lo_coef else 0.0
        return lo, self.hi_coef * float(n) ** self.hi_power

    def region(self, n):
        return _clean([self.bounds(n)])

    def outside(self, n):
        return complement(self.region(n))

    def layer(self, k):
        """``F_(k+1) minus F_k``."""
        lo_k, hi_k = self.bounds(k)
        lo_k1, hi_k1 = self.bounds(k + 1)
        return _clean([(lo_k1, lo_k), (hi_k, hi_k1)])

    def validate(self, upto=1000):
        prev = None
        for n in range(1, upto + 1):
            lo, hi = self.bounds(n)
            if prev and (lo > prev[0] or hi < prev[1]):
                raise ValidationError(f"nest is not increasing at n={n}")
            prev = (lo, hi)

    def to_dict(self):
        return {"s_hi": [self.hi_coef, self.hi_power], "s_lo": [self.lo_coef, self.lo_power] if self.lo_coef else None}

    @classmethod
    def from_dict(cls, doc, dim=None):
        kind = doc.get("kind")
        if kind == "ball":
            coef, power = doc.get("radius", [1.0, 1.0])
            return cls(float(coef) ** dim, dim * float(power))
        if kind == "annulus":
            (ci, pi), (co, po) = doc["inner"], doc["outer"]
            return cls(float(co) ** dim, dim * float(po), float(ci) ** dim, dim * float(pi))
        if kind is not None:
            raise UnsupportedRegion(f"nests must be radial (ball or annulus), got {kind!r}")
        lo = doc.get("s_lo")
        hi = doc.get("s_hi", [1.0, 1.0])
        return cls(float(hi[0]), float(hi[1]), *(map(float, lo) if lo else (0.0, -1.0)))

    @classmethod
    def ball(cls, d, radius_power=1.0):
        """``|x| <= n^radius_power``."""
        return cls(1.0, d * radius_power)


# -- families -----------------------------------------------------------------

@dataclass(frozen=True)
class DensityFamily:
    """Reference density, approximants ``f_n = f 1_(F_n)``, nest and exponents."""

    dim: int
    reference: RadialDensity
    nest: Nest
    p: Exponent = Exponent(1.0)
    q: Exponent = Exponent(1.0)
    r: Exponent = Exponent(1.0)
    constants: tuple = DEFAULT_CONSTANTS
    approximant: str = "restrict"
    name: str = "custom"
    params: tuple = ()

    def __post_init__(self):
        if self.approximant != "restrict":
            raise ValidationError(f"unsupported approximant {self.approximant!r}")
        if any(c <= 1 for c in self.constants):
            raise ValidationError("probe constants must exceed 1")
        self.nest.validate()

    def check_exponents(self, indices, labels="pqr"):
        for label in labels:
            seq = getattr(self, label)
            for n in indices:
                if seq(n) < 1:
                    raise ValidationError(f"exponent {label}_{n} = {seq(n)} is below 1")

    def approximant_region(self, n, region):
        """Region on which ``f_n`` coincides with ``f`` (it vanishes elsewhere)."""
        return intersect(region, self.nest.region(n))

    def to_dict(self):
        return {
            "name": self.name,
            "params": dict(self.params),
            "dim": self.dim,
            "reference": self.reference.to_dict(),
            "approximants": {"kind": self.approximant},
            "nest": self.nest.to_dict(),
            "exponents": {"p": self.p.to_dict(), "q": self.q.to_dict(), "r": self.r.to_dict()},
            "constants": list(self.constants),
        }

    def to_json(self):
        return _io.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc):
        if "corpus" in doc:
            return corpus_example(doc["corpus"], **doc.get("params", {}))
        d = int(doc["dim"])
        ex = doc.get("exponents", {})
        return cls(
            d,
            RadialDensity.from_dict(doc["reference"], d),
            Nest.from_dict(doc["nest"], d),
            Exponent.from_dict(ex.get("p", 1.0)),
            Exponent.from_dict(ex.get("q", 1.0)),
            Exponent.from_dict(ex.get("r", 1.0)),
            tuple(doc.get("constants", DEFAULT_CONSTANTS)),
            doc.get("approximants", {}).get("kind", "restrict"),
            doc.get("name", "custom"),
            tuple(sorted(doc.get("params", {}).items())),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _need(cond, message):
    if not cond:
        raise ValidationError(message)


def corpus_example(name, **params):
    """The radial example families with their nests and exponent sequences."""
    d = int(params.get("d", 2))
    _need(d >= 1, "dimension must be positive")
    if name == "power_beta":
        beta = float(params.get("beta", 1.0))
        _need(0 < beta < d, "power_beta needs 0 < beta < d")
        ref = RadialDensity(d, (PowerPiece(-beta),))
        return DensityFamily(d, ref, Nest.ball(d), r=Exponent((d + 1) / beta), name=name,
                             params=(("beta", beta), ("d", d)))
    if name == "annulus_spikes":
        a, b = float(params.get("a", 1.0)), float(params.get("b", 1.0))
        _need(a >= 1 and b >= 1, "annulus_spikes needs a, b >= 1")
        ref = RadialDensity(d, (ShellSequence("annulus_inner", d, (("a", a),)),
                                ShellSequence("annulus_outer", d, (("b", b),))))
        nest = Nest(1.0, 1.0, 1.0, -1.0)
        return DensityFamily(d, ref, nest, r=Exponent(2.0), name=name, params=(("a", a), ("b", b), ("d", d)))
    if name == "log_singular":
        _need(d >= 2, "log_singular needs d >= 2")
        ref = RadialDensity(d, (LogPiece(math.exp(-d)), ShellSequence("log_shells", d)))
        return DensityFamily(d, ref, Nest.ball(d), r=Exponent(expr="log", shift=1.0), name=name, params=(("d", d),))
    if name == "counterexample_i":
        _need(d >= 2, "counterexample_i needs d >= 2")
        ref = RadialDensity(d, (PowerPiece(-1.0, s_lo=1.0),))
        return DensityFamily(d, ref, Nest.ball(d), r=Exponent(float(d + 1)), name=name, params=(("d", d),))
    if name == "counterexample_ii":
        delta = float(params.get("delta", 2.0))
        _need(delta > 1, "counterexample_ii needs delta > 1")
        _need(d >= 2, "counterexample_ii needs d >= 2")
        ref = RadialDensity(d, (ShellSequence("odd_shells", d), ShellSequence("even_shells", d, (("delta", delta),))))
        r = Exponent(expr="parity", even=Exponent(expr="log", shift=1.0), odd=Exponent(1.0))
        return DensityFamily(d, ref, Nest(1.0, 1.0), r=r, name=name, params=(("d", d), ("delta", delta)))
    raise ValidationError(f"unknown corpus example {name!r}")


CORPUS = ("power_beta", "annulus_spikes", "log_singular", "counterexample_i", "counterexample_ii")


# -- verdicts -------------------------------------------------------------------

def loglog_slope(indices, values):
    x, y = np.asarray(indices, dtype=float), np.asarray(values, dtype=float)
    keep = np.isfinite(y) & (y > 0)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)[0])


def verdict(values, slope):
    """Classify a sampled sequence (rules applied in this order).

    * diverges -- an infinite value among the last three, or growth by more
      than 10% at each of the last two steps;
    * tends-to-zero -- all zero, or last < 0.1 first with log-log slope < -0.2;
    * bounded-away -- slope within +-0.05 and values within a factor 2;
    * inconclusive otherwise.
    """
    v = [float(x) for x in values]
    tail = v[-3:]
    if any(math.isinf(x) for x in tail):
        return DIVERGES
    if len(tail) == 3 and tail[1] > 1.1 * tail[0] and tail[2] > 1.1 * tail[1]:
        return DIVERGES
    if all(x == 0 for x in v):
        return TENDS_TO_ZERO
    if v[-1] < 0.1 * v[0] and slope < -0.2:
        return TENDS_TO_ZERO
    positive = [x for x in v if x > 0]
    if abs(slope) <= 0.05 and positive and len(positive) == len(v) and max(v) <= 2 * min(v):
        return BOUNDED_AWAY
    return INCONCLUSIVE


@dataclass
class ConditionReport:
    condition: str
    indices: list
    values: list
    slope: float
    verdict: str
    per_constant: dict = field(default_factory=dict)
    notes: str = ""

    @property
    def passed(self):
        return self.verdict == TENDS_TO_ZERO

    def to_dict(self):
        out = {
            "condition": self.condition,
            "indices": list(self.indices),
            "values": list(self.values),
            "loglog_slope": self.slope,
            "verdict": self.verdict,
        }
        if self.per_constant:
            out["per_constant"] = {
                _io.format_real(c): {"values": r["values"], "loglog_slope": r["slope"], "verdict": r["verdict"]}
                for c, r in self.per_constant.items()
            }
        if self.notes:
            out["notes"] = self.notes
        return out


def _report(condition, indices, values, notes=""):
    slope = loglog_slope(indices, values)
    return ConditionReport(condition, list(indices), list(values), slope, verdict(values, slope), notes=notes)


# -- quantities -----------------------------------------------------------------

def _aa(family, n, tail):
    # f_n - f = -f 1_(F_n^c): its norm over F_n vanishes identically
    region = intersect(family.nest.region(n), family.nest.outside(n))
    val = family.reference.integral(family.p(n), region, tail)
    return val ** (1 / family.p(n)) if val > 0 else 0.0


def _layer_term(family, density_region, exponent, k, tail):
    layer = family.nest.layer(k)
    region = intersect(layer, density_region(layer))
    r = exponent(k)
    norm = family.reference.integral(r, region, tail) ** (1.0 / r) if region else 0.0
    if norm == 0:
        return 0.0
    return norm * _conjugate_factor(r, measure_of(layer, family.dim))


def _ab1(family, n, tail):
    return sum_series(lambda k: _layer_term(family, lambda lay: family.approximant_region(n, lay), family.q, k, tail),
                      n, tail)


def _ac1(family, n, tail):
    return sum_series(lambda k: _layer_term(family, lambda lay: lay, family.r, k, tail), n, tail)


def _tail_power(family, exponent, n, constant, approx, tail):
    q = exponent(n)
    region = family.nest.outside(n)
    if approx:
        region = family.approximant_region(n, region)
    val = family.reference.integral(q, region, tail)
    if val == 0:
        return 0.0
    if math.isinf(val):
        return INF
    return math.exp(q * math.log(constant) + math.log(val))


def _probe_weight(probe, d, alpha=1.0):
    """Spherical mean of ``U_alpha probe`` as a function of ``s = |x|^d``."""
    if d not in (1, 3):
        raise UnsupportedDimension("potential-weighted conditions use the closed-form kernels (d = 1 or 3)")
    kernel = ResolventKernel("BM1D" if d == 1 else "BM3D", alpha)
    if d == 1:
        def weight(s):
            s = np.asarray(s, dtype=float)
            return 0.5 * (potential_at(kernel, probe, s) + potential_at(kernel, probe, -s))
        return weight, kernel
    # 3D: atoms exactly, density cells lumped at their centres
    locs = [probe.atoms]
    masses = [probe.masses]
    for g in probe.grids():
        locs.append(g.centers())
        masses.append(g.values.ravel() * g.cell_volume)
    rho = np.linalg.norm(np.concatenate(locs), axis=1)
    mass = np.concatenate(masses)
    k = kernel.rate

    def weight(s):
        r = np.cbrt(np.asarray(s, dtype=float))[:, None]
        a = np.maximum(r, rho[None, :])
        b = np.minimum(r, rho[None, :])
        x = k * b
        shc = np.where(x < 1e-8, 1.0, np.sinh(np.minimum(x, 700)) / np.where(x < 1e-8, 1.0, x))
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            vals = np.exp(-k * a) * shc / (2 * np.pi * a)
        return vals @ mass

    return weight, kernel


def _weighted_cutoff(probe, kernel, d):
    box = probe.support_box()
    reach = 0.0 if box is None else float(np.max(np.abs(np.concatenate(box))) * math.sqrt(d))
    return (reach + 45.0 / kernel.rate) ** d


def _sb(family, k, weight, cutoff, tail):
    region = intersect(family.nest.outside(k), [(0.0, cutoff)])
    return family.reference.weighted(weight, region, tail)


def _sc(family, k, indices, weight, cutoff, tail):
    region = intersect(family.nest.outside(k), [(0.0, cutoff)])
    indices = sorted(set(indices) | {max(indices) * 2 ** j for j in range(1, 7)})
    return max(family.reference.weighted(weight, family.approximant_region(n, region), tail) for n in indices)


def check_condition(family, which, indices=DEFAULT_INDICES, probe=None, tail=DEFAULT_TAIL):
    """Evaluate one condition at each index and classify the resulting sequence."""
    if which not in CONDITIONS:
        raise ValidationError(f"unknown condition {which!r}; expected one of {CONDITIONS}")
    indices = [int(n) for n in indices]
    if not indices or any(b <= a for a, b in zip(indices, indices[1:])) or indices[0] < 1:
        raise ValidationError("indices must be a nonempty increasing list of positive integers")
    family.check_exponents(indices, {"Aa": "p", "Ab1": "q", "Ab2": "q", "Ac1": "r", "Ac2": "r"}.get(which, ""))
    note = f"series truncated at max(n + {tail}, 2n) with dyadic-block remainder"
    if which == "Aa":
        return _report(which, indices, [_aa(family, n, tail) for n in indices])
    if which == "Ab1":
        return _report(which, indices, [_ab1(family, n, tail) for n in indices], note)
    if which == "Ac1":
        return _report(which, indices, [_ac1(family, n, tail) for n in indices], note)
    if which in ("Ab2", "Ac2"):
        exponent, approx = (family.q, True) if which == "Ab2" else (family.r, False)
        per = {}
        for c in family.constants:
            vals = [_tail_power(family, exponent, n, c, approx, tail) for n in indices]
            slope = loglog_slope(indices, vals)
            per[c] = {"values": vals, "slope": slope, "verdict": verdict(vals, slope)}
        # report the first constant that fails, else the largest one
        failing = [c for c in family.constants if per[c]["verdict"] != TENDS_TO_ZERO]
        shown = failing[0] if failing else max(family.constants)
        rep = ConditionReport(which, indices, per[shown]["values"], per[shown]["slope"], per[shown]["verdict"],
                              per, f"constants probed: {list(family.constants)}; shown C={shown}")
        return rep
    if probe is None:
        raise ValidationError(f"{which} needs a probe measure")
    if probe.dim != family.dim:
        raise ValidationError("probe measure lives in a different dimension")
    weight, kernel = _probe_weight(probe, family.dim)
    cutoff = _weighted_cutoff(probe, kernel, family.dim)
    if which == "Sb":
        return _report(which, indices, [_sb(family, k, weight, cutoff, tail) for k in indices])
    return _report(which, indices, [_sc(family, k, indices, weight, cutoff, tail) for k in indices],
                   "supremum over the sampled approximant indices and 2^j times the largest (j <= 6)")


@dataclass
class MembershipReport:
    family: str
    reports: dict
    ab_branch: str
    ac_branch: str
    locally_integrable: bool
    integrability: list
    verdict: str  # "member", "not-established", "inconclusive-negative"

    @property
    def member(self):
        return self.verdict == "member"

    def to_dict(self):
        return {
            "family": self.family,
            "verdict": self.verdict,
            "member": self.member,
            "Ab_branch": self.ab_branch,
            "Ac_branch": self.ac_branch,
            "locally_integrable": self.locally_integrable,
            "integral_over_nest": self.integrability,
            "conditions": {k: r.to_dict() for k, r in self.reports.items()},
        }


def verify_membership(family, indices=DEFAULT_INDICES, tail=DEFAULT_TAIL):
    """Run (Aa), both (Ab) and both (Ac) branches and the local integrability check."""
    reports = {c: check_condition(family, c, indices, tail=tail) for c in ("Aa", "Ab1", "Ab2", "Ac1", "Ac2")}

    def branch(a, b):
        passing = [c for c in (a, b) if reports[c].passed]
        return passing[0] if passing else "none"

    ab, ac = branch("Ab1", "Ab2"), branch("Ac1", "Ac2")
    integrals = [family.reference.integral(1.0, family.nest.region(n), tail) for n in indices]
    integrable = all(math.isfinite(v) for v in integrals)
    if not integrable:
        result = "inconclusive-negative"
    elif reports["Aa"].passed and ab != "none" and ac != "none":
        result = "member"
    else:
        result = "not-established"
    return MembershipReport(family.name, reports, ab, ac, integrable, integrals, result)


def lp_norm_radial(density, p, region):
    """``(int_region f^p dx)^(1/p)``; raises when the integral diverges."""
    val = density.integral(p, region)
    if math.isinf(val):
        raise NonintegrableSingularity("integral diverges on the region")
    return val ** (1.0 / p)
