"""Exact symmetric Dirichlet forms on finite weighted graphs.

A form on ``N`` vertices is given by symmetric conductances ``w``, a killing
vector ``k`` and a strictly positive reference measure ``m``::

    E(u, v) = 1/2 sum_{i != j} w_ij (u_i - u_j)(v_i - v_j) + sum_i k_i u_i v_i

and ``E_a(u, v) = E(u, v) + a <u, v>_m = u^T A_a v`` with the stiffness matrix
``A_a = L + diag(k) + a diag(m)`` (``L`` is the graph Laplacian). Every
finite measure has a potential here, so this module is the brute-force ground
truth for potentials, resolvents, the energy metric and capacities.
"""

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from . import _io
from .errors import (
    AsymmetricConductance,
    DimensionMismatch,
    EmptySet,
    NegativeEntry,
    NonpositiveAlpha,
    NonpositiveBaseMeasure,
    NonpositiveTime,
    SolverFailure,
)

#: above this many vertices the solves switch to conjugate gradients
DIRECT_SOLVE_LIMIT = 10_000

RESIDUAL_TOL = 1e-10


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DiscreteForm:
    conductances: np.ndarray  # dense (N, N) or scipy.sparse CSR above DIRECT_SOLVE_LIMIT
    killing: np.ndarray
    base_measure: np.ndarray

    @property
    def vertex_count(self):
        return self.base_measure.shape[0]

    @property
    def is_sparse(self):
        return scipy.sparse.issparse(self.conductances)

    def laplacian(self):
        w = self.conductances
        if self.is_sparse:
            deg = np.asarray(w.sum(axis=1)).ravel()
            return (scipy.sparse.diags(deg) - w).tocsr()
        return np.diag(w.sum(axis=1)) - w

    def stiffness(self, alpha=1.0):
        """Matrix ``A_alpha`` with ``E_alpha(u, v) = u @ A_alpha @ v``."""
        diag = self.killing + alpha * self.base_measure
        if self.is_sparse:
            return (self.laplacian() + scipy.sparse.diags(diag)).tocsr()
        return self.laplacian() + np.diag(diag)

    def energy(self, u, v=None, alpha=0.0):
        u = np.asarray(u, dtype=float)
        v = u if v is None else np.asarray(v, dtype=float)
        return float(u @ (self.stiffness(alpha) @ v))

    def generator(self):
        """``H = M^-1 (L + K)``, so the semigroup is ``P_t = exp(-t H)``."""
        a0 = self.stiffness(0.0)
        if self.is_sparse:
            a0 = a0.toarray()
        return a0 / self.base_measure[:, None]


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    masses: np.ndarray

    def __post_init__(self):
        masses = _frozen(self.masses)
        if masses.ndim != 1:
            raise DimensionMismatch("masses must be a vector")
        bad = np.flatnonzero(masses < 0)
        if bad.size:
            raise NegativeEntry(f"negative mass at vertex {bad[0]}")
        object.__setattr__(self, "masses", masses)

    @property
    def total_mass(self):
        return float(self.masses.sum())


@dataclass(frozen=True, eq=False)
class PotentialVector:
    values: np.ndarray
    alpha: float


def build_form(w, k, m):
    """Validate inputs and return an immutable :class:`DiscreteForm`.

    ``w`` may be a dense array or a scipy sparse matrix. An empty ``w`` is
    accepted for a single vertex.
    """
    m = np.asarray(m, dtype=float).ravel()
    k = np.asarray(k, dtype=float).ravel()
    n = m.shape[0]
    if n == 0:
        raise DimensionMismatch("base measure is empty")
    if k.shape[0] != n:
        raise DimensionMismatch(f"killing has {k.shape[0]} entries, expected {n}")

    if scipy.sparse.issparse(w):
        w = scipy.sparse.csr_matrix(w, dtype=float)
        if w.shape != (n, n):
            raise DimensionMismatch(f"conductances have shape {w.shape}, expected {(n, n)}")
        coo = w.tocoo()
        neg = coo.data < 0
        if neg.any():
            i = int(np.flatnonzero(neg)[0])
            raise NegativeEntry(f"negative conductance at ({coo.row[i]}, {coo.col[i]})")
        diag = w.diagonal()
        if np.any(diag != 0):
            i = int(np.flatnonzero(diag)[0])
            raise NegativeEntry(f"nonzero self-conductance at ({i}, {i})")
        diff = (w - w.T).tocoo()
        nz = np.flatnonzero(diff.data != 0)
        if nz.size:
            raise AsymmetricConductance(f"w[{diff.row[nz[0]]}, {diff.col[nz[0]]}] != w[{diff.col[nz[0]]}, {diff.row[nz[0]]}]")
        if n <= DIRECT_SOLVE_LIMIT:
            w = w.toarray()
    else:
        w = np.asarray(w, dtype=float)
        if w.size == 0 and n == 1:
            w = np.zeros((1, 1))
        if w.shape != (n, n):
            raise DimensionMismatch(f"conductances have shape {w.shape}, expected {(n, n)}")
        neg = np.argwhere(w < 0)
        if neg.size:
            i, j = neg[0]
            raise NegativeEntry(f"negative conductance at ({i}, {j})")
        d = np.flatnonzero(np.diag(w))
        if d.size:
            raise NegativeEntry(f"nonzero self-conductance at ({d[0]}, {d[0]})")
        asym = np.argwhere(w != w.T)
        if asym.size:
            i, j = asym[0]
            raise AsymmetricConductance(f"w[{i}, {j}] = {w[i, j]!r} != w[{j}, {i}] = {w[j, i]!r}")

    bad = np.flatnonzero(~(m > 0))
    if bad.size:
        raise NonpositiveBaseMeasure(f"base measure m[{bad[0]}] = {m[bad[0]]!r} is not positive")
    bad = np.flatnonzero(k < 0)
    if bad.size:
        raise NegativeEntry(f"negative killing at vertex {bad[0]}")

    if not scipy.sparse.issparse(w):
        w = _frozen(w)
    return DiscreteForm(conductances=w, killing=_frozen(k), base_measure=_frozen(m))


def random_form(n, rng, p=0.3, killing=0.0, mass_range=(0.5, 1.5)):
    """Erdos-Renyi graph with edge probability ``p`` and weights in (0, 1].

    ``killing`` is the upper bound of i.i.d. uniform killing rates (0 keeps
    the chain conservative).
    """
    upper = np.triu(rng.random((n, n)) < p, 1)
    weights = np.where(upper, 1.0 - rng.random((n, n)), 0.0)
    w = weights + weights.T
    k = killing * rng.random(n) if killing > 0 else np.zeros(n)
    lo, hi = mass_range
    m = lo + (hi - lo) * (1.0 - rng.random(n))
    return build_form(w, k, m)


# -- linear algebra ---------------------------------------------------------

def _check_alpha(alpha):
    if not alpha > 0:
        raise NonpositiveAlpha(f"alpha must be positive, got {alpha!r}")


def _as_vector(form, x, name):
    if isinstance(x, DiscreteMeasure):
        x = x.masses
    elif isinstance(x, PotentialVector):
        x = x.values
    x = np.asarray(x, dtype=float)
    if x.shape != (form.vertex_count,):
        raise DimensionMismatch(f"{name} has shape {x.shape}, expected ({form.vertex_count},)")
    return x


def _solve(form, alpha, rhs):
    """Solve ``A_alpha x = rhs`` (``rhs`` may have several columns)."""
    a = form.stiffness(alpha)
    if form.is_sparse:
        b = np.atleast_2d(rhs.T).T
        cols = []
        for j in range(b.shape[1]):
            x, info = scipy.sparse.linalg.cg(a, b[:, j], rtol=1e-13, atol=0.0, maxiter=20 * form.vertex_count)
            if info != 0:
                raise SolverFailure(f"conjugate gradients did not converge (info={info})")
            cols.append(x)
        x = np.column_stack(cols).reshape(rhs.shape)
        return x
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SolverFailure("stiffness matrix is not positive definite", np.linalg.cond(a)) from exc
    x = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    resid = np.linalg.norm(a @ x - rhs)
    scale = np.linalg.norm(rhs)
    if not np.isfinite(resid) or resid > RESIDUAL_TOL * max(scale, 1.0) * max(1.0, np.abs(a).max()):
        raise SolverFailure(f"residual {resid:.3e} too large", np.linalg.cond(a))
    return x


def potential(form, mu, alpha=1.0):
    """alpha-potential ``U_alpha mu``: the solution of ``A_alpha u = mu``."""
    _check_alpha(alpha)
    mu = _as_vector(form, mu, "mu")
    if not mu.any():
        return PotentialVector(_frozen(np.zeros_like(mu)), float(alpha))
    return PotentialVector(_frozen(_solve(form, alpha, mu)), float(alpha))


def green_matrix(form, alpha=1.0):
    """Kernel ``g_alpha(x, y)``; column ``y`` is the potential of the unit atom at ``y``."""
    _check_alpha(alpha)
    return _solve(form, alpha, np.eye(form.vertex_count))


def rho(form, mu, nu, alpha=1.0):
    """Energy distance ``||U_alpha mu - U_alpha nu||`` in the ``E_alpha`` norm."""
    _check_alpha(alpha)
    d = _as_vector(form, mu, "mu") - _as_vector(form, nu, "nu")
    if not d.any():
        return 0.0
    u = _solve(form, alpha, d)
    return float(np.sqrt(max(d @ u, 0.0)))


def resolvent_apply(form, f, alpha=1.0):
    """``R_alpha f = A_alpha^{-1} M f``, i.e. the potential of the measure ``f m``."""
    _check_alpha(alpha)
    f = _as_vector(form, f, "f")
    if not f.any():
        return np.zeros_like(f)
    return _solve(form, alpha, form.base_measure * f)


def approx_g(form, f, n):
    """``g_n = n (f - n R_{n+1} f)``; for a 1-potential ``f`` one has ``R_1 g_n = n R_{n+1} f``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n!r}")
    f = _as_vector(form, f, "f")
    return n * (f - n * resolvent_apply(form, f, n + 1.0))


def capacity(form, B):
    """1-capacity of a vertex set: the minimum of ``E_1(u, u)`` over ``u = 1`` on ``B``.

    Solves the E_1-harmonic extension off ``B``; by the maximum principle this
    also minimizes over ``u >= 1`` on ``B``.
    """
    idx = np.unique(np.asarray(list(B), dtype=int))
    if idx.size == 0:
        raise EmptySet("capacity of the empty set")
    n = form.vertex_count
    if idx.min() < 0 or idx.max() >= n:
        raise DimensionMismatch(f"vertex index out of range 0..{n - 1}")
    a = form.stiffness(1.0)
    if form.is_sparse:
        a = a.toarray()
    u = np.zeros(n)
    u[idx] = 1.0
    free = np.setdiff1d(np.arange(n), idx)
    if free.size:
        a_ff = a[np.ix_(free, free)]
        rhs = -a[np.ix_(free, idx)].sum(axis=1)
        factor = scipy.linalg.cho_factor(a_ff, lower=True)
        u[free] = scipy.linalg.cho_solve(factor, rhs)
    return float(u @ a @ u)


def semigroup_integral(form, phi, t):
    """``int_0^t P_s phi ds`` via one exponential of an augmented matrix.

    With ``Z = [[-H, phi], [0, 0]]`` the top-right column of ``exp(t Z)`` is
    the integral (scaling and squaring with Pade approximants).
    """
    n = form.vertex_count
    z = np.zeros((n + 1, n + 1))
    z[:n, :n] = -form.generator()
    z[:n, n] = phi
    return scipy.linalg.expm(t * z)[:n, n]


def revuz_rate(form, f, mu, t):
    """Short-time Revuz functional with the excessive weight ``h = 1``.

    The additive functional is ``A_s = int_0^s g(X_u) du`` with ``g = mu / m``;
    returns ``(1/t) sum_i m_i E_i[int_0^t f(X_s) dA_s]``, which tends to
    ``sum_i f_i mu_i`` as ``t -> 0``.
    """
    if not t > 0:
        raise NonpositiveTime(f"t must be positive, got {t!r}")
    f = _as_vector(form, f, "f")
    mu = _as_vector(form, mu, "mu")
    g = mu / form.base_measure
    v = semigroup_integral(form, f * g, t)
    return float(form.base_measure @ v) / t


# -- JSON -------------------------------------------------------------------

def form_to_dict(form):
    w = form.conductances
    if form.is_sparse:
        coo = scipy.sparse.triu(w, 1).tocoo()
        edges = [[int(i), int(j), float(x)] for i, j, x in zip(coo.row, coo.col, coo.data)]
    else:
        ii, jj = np.nonzero(np.triu(w, 1))
        edges = [[int(i), int(j), float(w[i, j])] for i, j in zip(ii, jj)]
    return {
        "vertices": form.vertex_count,
        "edges": edges,
        "killing": form.killing.tolist(),
        "m": form.base_measure.tolist(),
    }


def form_from_dict(doc):
    n = int(doc["vertices"])
    edges = doc.get("edges", [])
    rows = [int(e[0]) for e in edges]
    cols = [int(e[1]) for e in edges]
    vals = [float(e[2]) for e in edges]
    for i, j in zip(rows, cols):
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise DimensionMismatch(f"bad edge ({i}, {j}) for {n} vertices")
    w = scipy.sparse.coo_matrix((vals + vals, (rows + cols, cols + rows)), shape=(n, n)).tocsr()
    if n <= DIRECT_SOLVE_LIMIT:
        w = w.toarray()
    return build_form(w, doc.get("killing", [0.0] * n), doc["m"])


def form_to_json(form):
    return _io.dumps(form_to_dict(form))


def form_from_json(text):
    return form_from_dict(json.loads(text))


def measure_to_json(mu):
    return _io.dumps({"masses": mu.masses.tolist()})


def measure_from_json(text):
    return DiscreteMeasure(json.loads(text)["masses"])
