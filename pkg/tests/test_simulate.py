import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcaf_lab import simulate as sim
from pcaf_lab.continuum import BM1D, BM3D, MeasureRep, RadialPower, ResolventKernel, kernel_eval
from pcaf_lab.errors import (
    GridMismatch,
    NonLipschitzCoefficient,
    NonpositiveStep,
    NonpositiveTime,
    NotOneDimensional,
    SupportOutsideBins,
)

from oracles import expected_occupation_1d

ONE = sim.constant_function(1.0)
SPIKE = sim.radial_function(RadialPower(0.25, r_hi=1.0))


# -- paths ------------------------------------------------------------------

def test_sample_path_shape_and_start():
    path = sim.sample_path(BM1D, 1.0, 1e-3, 42)
    assert path.states.shape == (1001, 1)
    assert path.states[0, 0] == 0.0
    assert path.times[0] == 0.0 and path.times[-1] == 1.0
    assert np.all(np.diff(path.times) > 0)


def test_sample_path_deterministic():
    a = sim.sample_path(BM3D, 1.0, 1e-2, 123)
    b = sim.sample_path(BM3D, 1.0, 1e-2, 123)
    np.testing.assert_array_equal(a.states, b.states)
    assert a.states.shape == (101, 3)
    c = sim.sample_path(BM3D, 1.0, 1e-2, 124)
    assert not np.array_equal(a.states, c.states)


def test_sample_path_rejects_bad_grid():
    with pytest.raises(NonpositiveStep):
        sim.sample_path(BM1D, 1.0, 0.0, 1)
    with pytest.raises(NonpositiveStep):
        sim.sample_path(BM1D, 1.0, 2.0, 1)
    with pytest.raises(NonpositiveTime):
        sim.sample_path(BM1D, -1.0, 0.1, 1)


def test_ensemble_mean_endpoint_clt():
    ends = sim.ensemble_map(BM1D, 1.0, 1e-2, 10_000, 2024, lambda t, s, _: s[:, -1, 0])
    assert abs(ends.mean()) <= 4 * math.sqrt(1.0 / 10_000)
    assert ends.var() == pytest.approx(1.0, rel=0.05)


def test_ensemble_path_matches_single_path():
    states = sim.ensemble_map(BM1D, 1.0, 1e-2, 20, 99, lambda t, s, _: s[:, :, 0], batch=7)
    single = sim.sample_path(BM1D, 1.0, 1e-2, sim.path_seed(99, 13))
    np.testing.assert_array_equal(states[13], single.states[:, 0])


def test_ensemble_independent_of_threads_and_batch(monkeypatch):
    fn = lambda t, s, _: np.max(np.abs(s[:, :, 0]), axis=1)  # noqa: E731
    monkeypatch.setenv("PCAF_LAB_THREADS", "1")
    a = sim.ensemble_map(BM1D, 1.0, 1e-2, 50, 5, fn, batch=50)
    monkeypatch.setenv("PCAF_LAB_THREADS", "4")
    b = sim.ensemble_map(BM1D, 1.0, 1e-2, 50, 5, fn, batch=6)
    np.testing.assert_array_equal(a, b)


def test_brownian_increments_have_step_variance():
    path = sim.sample_path(BM1D, 100.0, 1e-2, 8)
    inc = np.diff(path.states[:, 0])
    assert inc.var() == pytest.approx(1e-2, rel=0.05)


def test_diffusion_frozen_path():
    model = sim.Diffusion1D.linear(volatility=(0.0, 0.0))
    path = sim.sample_path(model, 1.0, 1e-2, 1)
    assert np.all(path.states == 0.0)


def test_diffusion_ou_mean_reversion():
    # dX = -X dt + dW from 1: E X_1 = e^-1
    model = sim.Diffusion1D.linear(drift=(0.0, -1.0))
    ends = sim.ensemble_map(model, 1.0, 1e-3, 4000, 3, lambda t, s, _: s[:, -1, 0], x0=1.0)
    assert abs(ends.mean() - math.exp(-1)) <= 4 * ends.std() / math.sqrt(ends.size) + 1e-3


def test_diffusion_rejects_non_lipschitz():
    with pytest.raises(NonLipschitzCoefficient):
        sim.Diffusion1D(lambda x: x ** 2, lambda x: np.ones_like(x), 10.0)
    with pytest.raises(NonLipschitzCoefficient):
        sim.Diffusion1D(lambda x: 0 * x, lambda x: 3 * x, 1.0)


def test_path_dump_round_trip(tmp_path):
    path = sim.sample_path(BM3D, 0.5, 0.01, 77)
    sim.write_path_dump(path, tmp_path / "p.bin")
    back = sim.read_path_dump(tmp_path / "p.bin")
    assert back["model"] == "BM3D" and back["seed"] == 77 and back["T"] == 0.5
    assert back["dt"] == pytest.approx(0.01)
    np.testing.assert_array_equal(back["states"], path.states)


# -- occupation PCAFs -------------------------------------------------------

def test_occupation_constant_is_time():
    path = sim.sample_path(BM1D, 1.0, 1e-3, 1)
    a = sim.occupation_pcaf(path, ONE)
    assert a.values[0] == 0.0
    assert a.values[-1] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(a.values, path.times, atol=1e-12)


def test_occupation_discounted_constant():
    path = sim.sample_path(BM1D, 20.0, 1e-2, 1)
    a = sim.occupation_pcaf(path, ONE, discount=True)
    assert a.values[-1] == pytest.approx(1 - math.exp(-20), abs=1e-13)


def test_occupation_zero():
    path = sim.sample_path(BM1D, 1.0, 1e-2, 1)
    assert np.all(sim.occupation_pcaf(path, sim.constant_function(0.0)).values == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 63 - 1), st.integers(1, 199), st.booleans())
def test_occupation_additive(seed, split, discount):
    path = sim.sample_path(BM1D, 2.0, 1e-2, seed)
    f = sim.hat_function(0.0, 0.7)
    whole = sim.occupation_pcaf(path, f, discount=discount).values
    first = sim.occupation_pcaf(path.window(0, split), f, discount=discount).values
    second = sim.occupation_pcaf(path.window(split, 200), f, discount=discount).values
    assert whole[-1] == pytest.approx(first[-1] + second[-1], rel=1e-12, abs=1e-15)
    np.testing.assert_allclose(whole[split:], first[-1] + second, rtol=1e-12, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 63 - 1), st.booleans())
def test_occupation_nondecreasing(seed, discount):
    path = sim.sample_path(BM1D, 1.0, 1e-3, seed)
    a = sim.occupation_pcaf(path, SPIKE, discount=discount)
    assert a.values[0] == 0.0
    assert np.all(np.diff(a.values) >= 0)
    assert np.isfinite(a.values[-1])


def test_occupation_cap_bounds_singular_values():
    path = sim.sample_path(BM1D, 1.0, 1e-2, 3)
    f = sim._Integrand(lambda s: np.full(s.shape[:-1], np.inf), "inf")
    a = sim.occupation_pcaf(path, f, f_cap=5.0)
    assert a.values[-1] == pytest.approx(5.0)


def test_occupation_mean_matches_heat_kernel_integral():
    ref = expected_occupation_1d(lambda y: y ** -0.25 if y > 0 else 0.0, singular_power=0.25)
    totals = sim.ensemble_map(
        BM1D, 1.0, 1e-4, 10_000, 17,
        lambda t, s, _: sim._accumulate(sim._evaluate(SPIKE, s, sim.DEFAULT_F_CAP), t, False)[:, -1])
    stderr = totals.std(ddof=1) / math.sqrt(totals.size)
    assert abs(totals.mean() - ref) <= 3 * stderr


def test_discounted_duality_from_origin():
    # E int_0^inf e^-s f(X_s) ds = R_1 f(0) for bounded compactly supported f
    f = sim.hat_function(0.3, 1.0)
    totals = sim.discounted_total(BM1D, f, 2000, 8, dt=1e-2)
    ref = float(sim.resolvent_function(f)(np.zeros((1, 1)))[0])
    stderr = totals.std(ddof=1) / math.sqrt(totals.size)
    assert abs(totals.mean() - ref) <= 3 * stderr


def test_resolvent_function_of_constant_is_exact():
    r = sim.resolvent_function(sim.constant_function(2.0))
    assert np.all(r(np.array([[0.0], [5.0]])) == 2.0)


def test_resolvent_function_matches_kernel_pairing():
    # hat at 0 width 1: R_1 f(x) = int g(x,y) (1-|y|)_+ dy; compare with direct quadrature
    from scipy.integrate import quad

    k = ResolventKernel(BM1D, 1.0)
    r = sim.resolvent_function(sim.hat_function(0.0, 1.0))
    for x in (0.0, 0.4, 2.5, 15.0):
        ref = quad(lambda y: kernel_eval(k, x, y) * max(0.0, 1 - abs(y)), -1, 1, points=[x] if abs(x) < 1 else None,
                   epsabs=1e-13)[0]
        # piecewise-constant cells of width 0.005 cost O(h^2) in the potential
        assert r(np.array([[x]]))[0] == pytest.approx(ref, rel=2e-5, abs=1e-15)


# -- sup distance -----------------------------------------------------------

def test_sup_distance_identical_and_double():
    path = sim.sample_path(BM1D, 1.0, 1e-2, 4)
    a = sim.occupation_pcaf(path, ONE)
    b = sim.occupation_pcaf(path, sim.constant_function(2.0))
    assert sim.sup_distance(a, a) == 0.0
    assert sim.sup_distance(a, b, 1.0) == pytest.approx(1.0)
    assert sim.sup_distance(a, b, 0.5) == pytest.approx(0.5)


def test_sup_distance_grid_mismatch():
    a = sim.occupation_pcaf(sim.sample_path(BM1D, 1.0, 1e-2, 4), ONE)
    b = sim.occupation_pcaf(sim.sample_path(BM1D, 1.0, 2e-2, 4), ONE)
    with pytest.raises(GridMismatch):
        sim.sup_distance(a, b)
    with pytest.raises(GridMismatch):
        sim.sup_distance(a, a, 2.0)


def test_truncation_invisible_on_paths_inside():
    f = sim.hat_function(0.0, 5.0)
    for seed in range(20):
        path = sim.sample_path(BM1D, 0.1, 1e-3, seed)
        if np.max(np.abs(path.states)) > 1:
            continue
        fn = sim._Integrand(lambda s: f(s) * (np.abs(s[..., 0]) <= 1), "f_1")
        assert sim.sup_distance(sim.occupation_pcaf(path, f), sim.occupation_pcaf(path, fn)) == 0.0


# -- local time -------------------------------------------------------------

def test_local_time_frozen_path():
    path = sim.sample_path(sim.Diffusion1D.linear(volatility=(0.0, 0.0)), 1.0, 1e-2, 1)
    field = sim.local_time_field(path, 0.1)
    assert field.at(-1, 0.0) == pytest.approx(10.0)
    assert field.bins.tolist() == [0]


def test_local_time_conservation_exact():
    path = sim.sample_path(BM1D, 1.0, 1e-3, 5)
    field = sim.local_time_field(path, 0.05)
    np.testing.assert_allclose(field.values.sum(axis=1) * field.width, path.times, atol=1e-14, rtol=0)


def test_local_time_conservation_on_subsets():
    path = sim.sample_path(BM1D, 1.0, 1e-3, 6)
    field = sim.local_time_field(path, 0.05)
    # occupation of A = [-0.1, 0.2) by the same half-step rule
    inside = ((path.states[:, 0] >= -0.125) & (path.states[:, 0] < 0.225)).astype(float)
    occ = np.concatenate([[0], np.cumsum((inside[:-1] + inside[1:]) * 5e-4)])
    sel = (field.bins >= -2) & (field.bins <= 4)
    np.testing.assert_allclose(field.values[:, sel].sum(axis=1) * field.width, occ, atol=1e-14)


def test_local_time_requires_1d():
    with pytest.raises(NotOneDimensional):
        sim.local_time_field(sim.sample_path(BM3D, 1.0, 0.1, 1))


def test_local_time_default_width():
    field = sim.local_time_field(sim.sample_path(BM1D, 1.0, 1e-4, 1))
    assert field.width == pytest.approx(0.1)


def test_local_time_mean_at_zero():
    lt, defect = sim.local_time_at_zero(1.0, 1e-3, 3000, 11, 0.1)
    # E l(1, [-h/2, h/2)) / h, by the occupation density of BM at time s
    from scipy.integrate import quad
    from scipy.special import erf

    ref = quad(lambda s: erf(0.05 / math.sqrt(2 * s)), 0, 1)[0] / 0.1
    assert abs(lt.mean() - ref) <= 3 * lt.std(ddof=1) / math.sqrt(lt.size)
    assert defect.max() <= 1e-13


# -- measure PCAFs ----------------------------------------------------------

def test_measure_pcaf_atom_is_local_time():
    path = sim.sample_path(BM1D, 1.0, 1e-3, 5)
    field = sim.local_time_field(path, 0.05)
    a = sim.measure_pcaf(field, MeasureRep.atom(0.0))
    np.testing.assert_allclose(a.values, field.values[:, field.bins.tolist().index(0)], atol=1e-14)


def test_measure_pcaf_lebesgue_is_time():
    path = sim.sample_path(BM1D, 1.0, 1e-3, 5)
    field = sim.local_time_field(path, 0.05)
    lo, hi = field.edges[0], field.edges[-1]
    a = sim.measure_pcaf(field, MeasureRep.uniform([lo], [hi], hi - lo))
    np.testing.assert_allclose(a.values, path.times, atol=1e-12)


def test_measure_pcaf_density_matches_occupation():
    path = sim.sample_path(BM1D, 1.0, 1e-4, 9)
    field = sim.local_time_field(path, sim.BinSpec(0.01, lo=-300, hi=300))
    f = sim.hat_function(0.0, 1.0)
    mu = MeasureRep.from_function(lambda x: np.clip(1 - np.abs(x), 0, None), [-1.0], [1.0], 2000)
    a = sim.measure_pcaf(field, mu)
    b = sim.occupation_pcaf(path, f)
    assert sim.sup_distance(a, b) <= 0.02


def test_measure_pcaf_rejects_mass_outside():
    path = sim.sample_path(BM1D, 0.1, 1e-3, 5)
    field = sim.local_time_field(path, sim.BinSpec(0.05, lo=-2, hi=2))
    with pytest.raises(SupportOutsideBins):
        sim.measure_pcaf(field, MeasureRep.atom(50.0))


def test_measure_pcaf_nondecreasing():
    path = sim.sample_path(BM1D, 1.0, 1e-3, 5)
    field = sim.local_time_field(path, sim.BinSpec(0.05, lo=-40, hi=40))
    a = sim.measure_pcaf(field, MeasureRep.uniform([-0.5], [0.3], 2.0))
    assert a.values[0] == 0 and np.all(np.diff(a.values) >= 0)


# -- convergence and martingale ---------------------------------------------

def test_mc_convergence_constant_family():
    rep = sim.mc_convergence(BM1D, lambda n: SPIKE, SPIKE, [1, 2, 4], 1.0, 1e-2, 200, 3)
    assert rep.means == [0.0, 0.0, 0.0]
    assert rep.to_csv().splitlines()[0] == "n,mean_sup_dist,stderr,p90,paths,seed"


def test_mc_convergence_spike_truncation_small():
    rep = sim.mc_convergence(
        BM1D, lambda n: sim.radial_function(RadialPower(0.25, r_hi=1.0, cap=n)), SPIKE,
        [2, 8, 32], 1.0, 1e-3, 1000, 7)
    assert rep.decreasing


def test_mc_convergence_shrinking_uniforms_small():
    rep = sim.mc_convergence(
        BM1D, lambda n: MeasureRep.uniform([-1 / n], [1 / n], 1.0), MeasureRep.atom(0.0),
        [2, 8, 32], 1.0, 1e-3, 500, 7, kind="measure", bins=0.02)
    assert rep.decreasing


def test_mc_convergence_deterministic():
    args = (BM1D, lambda n: sim.hat_function(0.0, 1.0 / n), sim.hat_function(0.0, 0.01), [1, 2], 0.5, 1e-2, 100, 4)
    assert sim.mc_convergence(*args).to_csv() == sim.mc_convergence(*args).to_csv()


def test_martingale_constant_exact():
    rep = sim.martingale_residual(BM1D, ONE, 1.0, 1e-3, 100, 1)
    assert max(rep.max_abs) <= 1e-12
    assert rep.passed


def test_martingale_zero():
    rep = sim.martingale_residual(BM1D, sim.constant_function(0.0), 1.0, 1e-2, 50, 1)
    assert rep.max_abs == [0.0, 0.0, 0.0]


def test_martingale_hat():
    rep = sim.martingale_residual(BM1D, sim.hat_function(0.0, 1.0), 1.0, 1e-3, 2000, 12)
    assert rep.checkpoints == [0.25, 0.5, 1.0]
    assert rep.passed


def test_density_function_specs():
    f = sim.density_function({"expr": "pow", "beta": 0.25, "r_max": 1.0, "cap": 8})
    x = np.array([[0.5], [1e-9], [2.0]])
    np.testing.assert_allclose(f(x), [0.5 ** -0.25, 8.0, 0.0])
    assert sim.density_function({"expr": "const", "value": 3})(x).tolist() == [3.0, 3.0, 3.0]
    assert sim.density_function({"expr": "hat"})(np.array([[0.5]]))[0] == 0.5
