import math

import numpy as np
import pytest

from mild.dyncheck import (
    DEFAULT_STEPS,
    OrderReport,
    TestDynamics,
    constant_dynamics,
    convergence_gap,
    estimate_lipschitz,
    explicit_step,
    linear_decay,
    logistic,
    mlp_jacobian,
    rotation,
    run_suite,
    spectral_norm,
    stability_ratio,
    suite,
    trajectories,
    truncation_order,
    zero_dynamics,
)
from mild.hsidata import SequenceCube
from mild.model import MildModel, fusion_term


def random_cube(t=6, l=10, side=4, seed=0):
    return SequenceCube(np.random.default_rng(seed).uniform(0.05, 1, (t, side, side, l)))


def test_suite_composition():
    assert [d.name for d in suite()] == ["constant", "linear_decay", "logistic", "rotation"]
    for d in suite():
        assert math.isfinite(d.lipschitz)


@pytest.mark.parametrize("dyn", [linear_decay(), logistic()], ids=lambda d: d.name)
def test_truncation_slope_is_two(dyn):
    rep = truncation_order(dyn, DEFAULT_STEPS)
    assert 1.8 <= rep.slope <= 2.2


def test_truncation_slope_rotation():
    assert truncation_order(rotation()).slope >= 1.8


def test_linear_decay_local_error_closed_form():
    # one step from A: A (1 - D + D^2/2) against A e^{-D}
    d = 0.05
    a = explicit_step(linear_decay(), 0.0, np.array([1.0]), d)
    assert math.isclose(a[0], 1 - d + d * d / 2, rel_tol=1e-15)
    rep = truncation_order(linear_decay(), DEFAULT_STEPS)
    expected = [(1 - s + s * s / 2 - math.exp(-s)) / s for s in DEFAULT_STEPS]
    assert np.allclose(rep.errors, np.abs(expected), rtol=1e-6)


@pytest.mark.parametrize("dyn", [zero_dynamics(), constant_dynamics()], ids=lambda d: d.name)
def test_truncation_exact_for_trivial_dynamics(dyn):
    rep = truncation_order(dyn)
    assert rep.exact
    assert all(e == 0.0 for e in rep.errors)


def test_truncation_input_checks():
    with pytest.raises(ValueError):
        truncation_order(linear_decay(), (0.1, 0.05, 0.025))
    with pytest.raises(ValueError):
        truncation_order(linear_decay(), (0.1, 0.05, 0.02, 0.01))
    no_exact = TestDynamics("x", np.zeros(1), lambda t: np.zeros(1), lambda a: -a, lambda a: -np.eye(1), 1.0)
    with pytest.raises(ValueError):
        truncation_order(no_exact)
    with pytest.raises(ValueError):
        OrderReport((0.1,), (0.0,), "exact")


def test_gap_zero_when_g2_vanishes():
    for dyn in (zero_dynamics(), constant_dynamics()):
        for d in (1e-1, 1e-2, 1e-4):
            assert convergence_gap(dyn, d) == 0.0


def test_gap_halving_linear_decay():
    gaps = [convergence_gap(linear_decay(), d) for d in DEFAULT_STEPS]
    shrink = [gaps[i] / gaps[i + 1] for i in range(3)]
    assert all(1.7 <= s <= 2.3 for s in shrink)
    # closed form of the trapezoidal recursion: gap = 1 - r^5, r = (1 - D/2) / (1 + D/2)
    r = (1 - 0.05) / (1 + 0.05)
    assert math.isclose(gaps[0], 1 - r ** 5, rel_tol=1e-12)


@pytest.mark.parametrize("dyn", suite(), ids=lambda d: d.name)
def test_gap_trend(dyn):
    gaps = [convergence_gap(dyn, d) for d in DEFAULT_STEPS]
    if dyn.g2_zero:
        assert all(g == 0.0 for g in gaps)
    else:
        assert all(a > b for a, b in zip(gaps, gaps[1:]))
        assert convergence_gap(dyn, 1e-4) < convergence_gap(dyn, 1e-1)


def test_a_recursion_is_implicit_trapezoid():
    dyn = logistic()
    z, a = trajectories(dyn, 0.1)
    for k in range(1, len(a)):
        rhs = a[k - 1] + 0.05 * (dyn.g2(a[k]) + dyn.g2(a[k - 1])) + z[k] - z[k - 1]
        assert np.allclose(a[k], rhs, atol=1e-13)


def test_mlp_jacobian_matches_finite_differences():
    m = MildModel.create(5, 4, 3, 1, seed=2)
    layers = m.params.layers("fusion1")
    x = np.array([0.2, 0.5, 0.3])
    J = mlp_jacobian(layers, x)
    h = 1e-6
    fd = np.stack([(fusion_term(m, 1, x + h * e) - fusion_term(m, 1, x - h * e)) / (2 * h)
                   for e in np.eye(3)], axis=1)
    assert np.allclose(J, fd, atol=1e-7)


def test_power_iteration():
    J = np.diag([3.0, 1.0, 0.5])
    assert math.isclose(spectral_norm(J), 3.0, rel_tol=1e-8)
    assert spectral_norm(np.zeros((3, 3))) == 0.0
    R = np.random.default_rng(0).normal(size=(4, 4))
    assert spectral_norm(R) <= np.linalg.norm(R, 2) + 1e-12


def test_stability_zero_fusion_is_exactly_one():
    cube = random_cube()
    m = MildModel.create(6, 10, 3, 2, seed=1).zero_fusion()
    rep = stability_ratio(m, cube, 1e-3, seed=0)
    assert rep.ratio == 1.0
    assert rep.ok


def test_stability_bound_random_models():
    cube = random_cube(seed=1)
    for s in range(10):
        m = MildModel.create(6, 10, 3, 2, seed=s)
        rep = stability_ratio(m, cube, 1e-3, seed=s)
        assert rep.ratio <= rep.lipschitz * m.delta + 1 + 1e-6


def test_stability_scale_free_for_linear_fusion():
    cube = random_cube(seed=2)
    m = MildModel.create(6, 10, 3, 2, seed=3)
    for t in range(6):
        (W1, b1), (W2, b2) = m.params.layers(f"fusion{t}")
        W1[...] = np.abs(W1)
        b1[...] = 10.0  # every hidden unit active on the simplex: F is linear
    r1 = stability_ratio(m, cube, 1e-3, seed=4).ratio
    r2 = stability_ratio(m, cube, 2e-3, seed=4).ratio
    assert abs(r1 - r2) <= 0.1 * r1


def test_stability_rejects_zero_eps():
    m = MildModel.create(6, 10, 3, 2)
    with pytest.raises(ValueError):
        stability_ratio(m, random_cube(), 0.0)


def test_lipschitz_estimate_sees_largest_net():
    m = MildModel.create(6, 10, 3, 2, seed=0)
    base = estimate_lipschitz(m, [np.zeros((0, 3))] * 6)
    (W1, _), _ = m.params.layers("fusion4")
    W1 *= 10.0
    assert estimate_lipschitz(m, [np.zeros((0, 3))] * 6) > 5 * base


def test_run_suite_passes():
    cube = random_cube()
    models = [(f"r{s}", MildModel.create(6, 10, 3, 2, seed=s), cube) for s in range(2)]
    rep = run_suite(models)
    assert rep["passed"]
    assert {"truncation", "convergence", "stability"} <= set(rep)
    assert all("slope" in r for r in rep["truncation"])
    assert all("gaps" in r for r in rep["convergence"])
    assert all("ratio" in r for r in rep["stability"])
