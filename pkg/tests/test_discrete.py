import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcaf_lab import discrete as dsc
from pcaf_lab.errors import (
    AsymmetricConductance,
    EmptySet,
    NegativeEntry,
    NonpositiveAlpha,
    NonpositiveBaseMeasure,
    NonpositiveTime,
)

from oracles import capacity_projected_gradient, revuz_first_order, revuz_rate_spectral


@pytest.fixture
def two():
    return dsc.build_form([[0, 1], [1, 0]], [0, 0], [1, 1])


def random_instance(seed, n_max=50, killing=0.0):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, n_max + 1))
    return dsc.random_form(n, rng, killing=killing), rng


# -- build_form -------------------------------------------------------------

def test_two_vertex_stiffness(two):
    np.testing.assert_array_equal(two.stiffness(1.0), [[2, -1], [-1, 2]])


def test_single_vertex():
    form = dsc.build_form(np.zeros((0, 0)), [0.0], [1.0])
    np.testing.assert_array_equal(form.stiffness(1.0), [[1.0]])


@pytest.mark.parametrize(
    "w, k, m, exc, where",
    [
        ([[0, 1], [2, 0]], [0, 0], [1, 1], AsymmetricConductance, "w[0, 1]"),
        ([[0, -1], [-1, 0]], [0, 0], [1, 1], NegativeEntry, "(0, 1)"),
        ([[0, 1], [1, 0]], [0, 0], [1, 0], NonpositiveBaseMeasure, "m[1]"),
        ([[0, 1], [1, 0]], [0, -1], [1, 1], NegativeEntry, "vertex 1"),
    ],
)
def test_build_form_rejects(w, k, m, exc, where):
    with pytest.raises(exc, match=re_escape(where)):
        dsc.build_form(w, k, m)


def re_escape(s):
    import re
    return re.escape(s)


def test_form_is_immutable(two):
    with pytest.raises(ValueError):
        two.base_measure[0] = 5.0


def test_energy_matches_definition():
    form, rng = random_instance(3, 12, killing=0.5)
    u, v = rng.normal(size=(2, form.vertex_count))
    w = form.conductances
    expected = 0.5 * sum(
        w[i, j] * (u[i] - u[j]) * (v[i] - v[j])
        for i in range(form.vertex_count)
        for j in range(form.vertex_count)
        if i != j
    ) + np.sum(form.killing * u * v)
    assert form.energy(u, v) == pytest.approx(expected, rel=1e-12)


# -- potentials and resolvents ---------------------------------------------

def test_potential_two_vertex(two):
    np.testing.assert_allclose(dsc.potential(two, [1, 0]).values, [2 / 3, 1 / 3], rtol=1e-14)
    np.testing.assert_allclose(dsc.potential(two, [0, 1]).values, [1 / 3, 2 / 3], rtol=1e-14)


def test_potential_zero_measure(two):
    assert not dsc.potential(two, [0, 0]).values.any()


def test_potential_rejects_alpha(two):
    with pytest.raises(NonpositiveAlpha):
        dsc.potential(two, [1, 0], alpha=0.0)


@pytest.mark.parametrize("seed", range(10))
def test_defining_pairing(seed):
    form, rng = random_instance(seed, killing=0.3)
    mu = dsc.DiscreteMeasure(rng.random(form.vertex_count))
    for alpha in (0.1, 1.0, 7.0):
        u = dsc.potential(form, mu, alpha)
        v = rng.normal(size=form.vertex_count)
        err = abs(form.energy(u.values, v, alpha) - v @ mu.masses)
        assert err <= 1e-9 * np.linalg.norm(v) * np.linalg.norm(mu.masses)


def test_resolvent_two_vertex(two):
    np.testing.assert_allclose(dsc.resolvent_apply(two, [1, 1]), [1, 1], rtol=1e-14)
    np.testing.assert_allclose(dsc.resolvent_apply(two, [1, 0]), [2 / 3, 1 / 3], rtol=1e-14)
    big = 1e3 * dsc.resolvent_apply(two, [1, 0], alpha=1e3)
    np.testing.assert_allclose(big, [1, 0], atol=1e-2)


@pytest.mark.parametrize("seed", range(5))
def test_resolvent_markovian(seed):
    form, rng = random_instance(seed, killing=0.2)
    f = rng.random(form.vertex_count)
    for alpha in (0.5, 2.0):
        r = alpha * dsc.resolvent_apply(form, f, alpha)
        assert r.min() >= -1e-12 and r.max() <= 1 + 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_duality(seed):
    form, rng = random_instance(seed, killing=0.1)
    f = rng.random(form.vertex_count)
    nu = rng.random(form.vertex_count)
    for alpha in (0.3, 1.0, 4.0):
        lhs = nu @ dsc.resolvent_apply(form, f, alpha)
        rhs = (form.base_measure * f) @ dsc.potential(form, nu, alpha).values
        assert abs(lhs - rhs) <= 1e-10


# -- the metric -------------------------------------------------------------

def test_rho_two_vertex(two):
    assert dsc.rho(two, [1, 0], [0, 1]) == pytest.approx(np.sqrt(2 / 3), rel=1e-14)
    assert dsc.rho(two, [0.3, 0.2], [0.3, 0.2]) == 0.0
    r1 = np.sqrt(2 / 3)
    r2 = dsc.rho(two, [1, 0], [0, 1], alpha=2.0)
    assert np.sqrt(0.5) * r1 - 1e-12 <= r2 <= r1 + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_axioms(seed):
    form, rng = random_instance(seed)
    mu, nu, xi = (rng.random(form.vertex_count) for _ in range(3))
    d_mn = dsc.rho(form, mu, nu)
    assert d_mn == dsc.rho(form, nu, mu)
    assert dsc.rho(form, mu, mu) == 0.0
    assert d_mn > 1e-10
    assert d_mn <= dsc.rho(form, mu, xi) + dsc.rho(form, xi, nu) + 1e-10


@pytest.mark.parametrize("alpha", [0.1, 0.5, 2.0, 10.0])
def test_rho_alpha_equivalence(alpha):
    for seed in range(20):
        form, rng = random_instance(seed)
        mu, nu = rng.random((2, form.vertex_count))
        r1 = dsc.rho(form, mu, nu)
        ra = dsc.rho(form, mu, nu, alpha)
        assert np.sqrt(1 / max(alpha, 1)) * r1 <= ra + 1e-10
        assert ra <= np.sqrt(max(1 / alpha, 1)) * r1 + 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_vague_gap_bounded_by_rho(seed):
    # |sum phi (mu_n - mu)| <= ||phi||_{E_1} rho(mu_n, mu)
    form, rng = random_instance(seed)
    mu = rng.random(form.vertex_count)
    for scale in (1.0, 0.1, 0.01):
        mu_n = mu + scale * rng.normal(size=form.vertex_count) * mu
        mu_n = np.abs(mu_n)
        for _ in range(5):
            phi = rng.normal(size=form.vertex_count)
            lhs = abs(phi @ (mu_n - mu))
            rhs = np.sqrt(form.energy(phi, alpha=1.0)) * dsc.rho(form, mu_n, mu)
            assert lhs <= rhs * (1 + 1e-10) + 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_density_bound(seed):
    form, rng = random_instance(seed, killing=0.2)
    f = rng.random(form.vertex_count)
    fn = f + 0.1 * rng.normal(size=form.vertex_count)
    fn = np.abs(fn)
    m = form.base_measure
    l2 = np.sqrt(np.sum(m * (f - fn) ** 2))
    assert dsc.rho(form, f * m, fn * m) <= l2 + 1e-10


# -- approximation by densities --------------------------------------------

def test_approx_g_two_vertex(two):
    f = dsc.potential(two, [1, 0]).values
    np.testing.assert_allclose(dsc.approx_g(two, f, 1), [3 / 8, 1 / 8], rtol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_approx_g_resolvent_identity(seed):
    form, rng = random_instance(seed, 20, killing=0.1)
    f = dsc.potential(form, rng.random(form.vertex_count)).values
    for n in (1, 3, 50):
        g = dsc.approx_g(form, f, n)
        assert g.min() >= -1e-10
        np.testing.assert_allclose(dsc.resolvent_apply(form, g), n * dsc.resolvent_apply(form, f, n + 1.0), atol=1e-10)


def test_approx_g_monotone_and_convergent():
    rng = np.random.default_rng(11)
    form = dsc.random_form(20, rng)
    f = dsc.potential(form, rng.random(20)).values
    prev = None
    for n in range(1, 200, 7):
        cur = n * dsc.resolvent_apply(form, f, n + 1.0)
        if prev is not None:
            assert np.all(cur - prev >= -1e-12)
        prev = cur
    d = dsc.resolvent_apply(form, dsc.approx_g(form, f, 1000)) - f
    assert np.sqrt(form.energy(d, alpha=1.0)) <= 1e-2 * np.sqrt(form.energy(f, alpha=1.0))


# -- capacity ---------------------------------------------------------------

def test_capacity_two_vertex(two):
    assert dsc.capacity(two, {0}) == pytest.approx(1.5, rel=1e-14)
    g = dsc.green_matrix(two)
    assert dsc.capacity(two, [0]) * g[0, 0] == pytest.approx(1.0, rel=1e-14)


def test_capacity_whole_space():
    form, _ = random_instance(4, 15, killing=0.4)
    expected = form.killing.sum() + form.base_measure.sum()
    assert dsc.capacity(form, range(form.vertex_count)) == pytest.approx(expected, rel=1e-12)


def test_capacity_empty(two):
    with pytest.raises(EmptySet):
        dsc.capacity(two, [])


@pytest.mark.parametrize("seed", range(6))
def test_capacity_matches_qp(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(3, 13))
    form = dsc.random_form(n, rng, killing=0.2)
    B = rng.choice(n, size=int(rng.integers(1, n)), replace=False)
    exact = dsc.capacity(form, B)
    assert capacity_projected_gradient(form, B) == pytest.approx(exact, rel=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_point_capacity_inverse_green(seed):
    form, _ = random_instance(seed, 30)
    g = dsc.green_matrix(form)
    for y in range(0, form.vertex_count, 5):
        assert dsc.capacity(form, [y]) * g[y, y] == pytest.approx(1.0, abs=1e-8)


# -- Revuz rate -------------------------------------------------------------

def test_revuz_constant_f_conservative():
    form, rng = random_instance(2, 15)
    mu = rng.random(form.vertex_count)
    for t in (0.01, 1.0, 5.0):
        assert dsc.revuz_rate(form, np.ones(form.vertex_count), mu, t) == pytest.approx(mu.sum(), rel=1e-10)


def test_revuz_two_vertex(two):
    assert abs(dsc.revuz_rate(two, [1, 0], [1, 0], 0.01) - 1.0) <= 0.05


def test_revuz_rejects_time(two):
    with pytest.raises(NonpositiveTime):
        dsc.revuz_rate(two, [1, 0], [1, 0], 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_revuz_matches_spectral(seed):
    form, rng = random_instance(seed, 25, killing=0.5)
    f, mu = rng.random((2, form.vertex_count))
    for t in (1e-3, 0.1, 2.0):
        assert dsc.revuz_rate(form, f, mu, t) == pytest.approx(revuz_rate_spectral(form, f, mu, t), rel=1e-10)


def test_revuz_linear_error():
    form, rng = random_instance(7, 20, killing=0.5)
    f, mu = rng.random((2, form.vertex_count))
    target = f @ mu
    k = revuz_first_order(form, f, mu)
    for t in (1e-1, 1e-2, 1e-3):
        err = target - dsc.revuz_rate(form, f, mu, t)
        assert err / t == pytest.approx(k, rel=0.2)


# -- serialization ----------------------------------------------------------

def test_json_roundtrip():
    form, rng = random_instance(9, 10, killing=0.3)
    back = dsc.form_from_json(dsc.form_to_json(form))
    np.testing.assert_array_equal(back.conductances, form.conductances)
    np.testing.assert_array_equal(back.killing, form.killing)
    np.testing.assert_array_equal(back.base_measure, form.base_measure)
    mu = dsc.DiscreteMeasure(rng.random(10))
    np.testing.assert_array_equal(dsc.measure_from_json(dsc.measure_to_json(mu)).masses, mu.masses)


def test_json_17_digits():
    form = dsc.build_form([[0, 0.1], [0.1, 0]], [0, 0], [1 / 3, 1])
    text = dsc.form_to_json(form)
    assert "0.33333333333333331" in text
    assert '"edges": [[0, 1, 0.10000000000000001]]' in text


def test_sparse_path_matches_dense():
    import scipy.sparse
    form, rng = random_instance(5, 30, killing=0.1)
    sparse = dsc.DiscreteForm(scipy.sparse.csr_matrix(form.conductances), form.killing, form.base_measure)
    mu = rng.random(form.vertex_count)
    np.testing.assert_allclose(dsc.potential(sparse, mu).values, dsc.potential(form, mu).values, rtol=1e-9)
