import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from mvlab.coefficients import build_coefficients, constant
from mvlab.harnack import (anchored_exponential, coupled_simulate, entropy_estimate, gamma_constant,
                           gaussian_entropy, gaussian_gap, log_harnack_check, power_harnack_check,
                           power_harnack_probe, zeta, zeta_schedule)
from mvlab.model import Ensemble, TimeGrid

BM = constant(0.0, 1.0)


def dirac(x, m):
    return Ensemble.dirac([x], m)


def test_gamma_examples():
    assert gamma_constant(1, 0, 1.0, 0) == pytest.approx(2.88)
    assert gamma_constant(2, 1, 1.0, 0) == pytest.approx(5.84)
    with pytest.raises(ValueError):
        gamma_constant(1, 1, 0.0)


@settings(max_examples=50, deadline=None)
@given(K=st.floats(1, 10), d=st.integers(0, 5), delta=st.floats(0.1, 5), lam=st.floats(0, 5),
       dK=st.floats(0.01, 2), dd=st.floats(0.01, 2))
def test_gamma_monotone(K, d, delta, lam, dK, dd):
    g = gamma_constant(K, d, delta, lam)
    assert gamma_constant(K + dK, d, delta, lam) > g
    assert gamma_constant(K, d + 1, delta, lam) > g
    assert gamma_constant(K, d, delta, lam + dK) > g
    if d > 0:
        assert gamma_constant(K, d, delta + dd, lam) < g


def test_zeta_examples():
    g, t0 = 2.96, 1.0
    assert zeta(t0, g, t0) == 0.0
    assert zeta(0.0, g, t0) == pytest.approx(12 / (25 * g) * (1 - np.exp(-25 * g * t0 / 16)), rel=1e-14)
    assert zeta(t0 - 1e-4, g, t0) / 1e-4 == pytest.approx(0.75, rel=0.01)


@settings(max_examples=40, deadline=None)
@given(g=st.floats(0.5, 50), t0=st.floats(0.1, 3), n=st.integers(2, 400))
def test_zeta_schedule_positive_decreasing(g, t0, n):
    z = zeta_schedule(g, t0, TimeGrid(0, t0, n))
    assert z[-1] == 0 and np.all(z[:-1] > 0)
    # Far from t0 the exponential saturates in double precision, so only weak monotonicity is visible there.
    assert np.all(np.diff(z) <= 0) and z[-2] > z[-1]


def test_zeta_schedule_errors():
    with pytest.raises(ValueError):
        zeta_schedule(1.0, 2.0, TimeGrid(0, 1, 10))


def test_gaussian_entropy_matches_ode_oracle():
    g = 2.96
    z = lambda t: zeta(t, g, 1.0)  # noqa: E731
    sol = solve_ivp(lambda t, y: [-y[0] / z(t), 0.5 * y[0] ** 2 / z(t) ** 2], [0, 1 - 1e-10], [1.0, 0.0],
                    rtol=1e-11, atol=1e-13, dense_output=True)
    assert gaussian_entropy(1.0, g, 1.0) == pytest.approx(sol.y[1, -1], rel=1e-6)
    assert gaussian_gap(0.5, 1.0, g, 1.0) == pytest.approx(sol.sol(0.5)[0], rel=1e-6)


def test_identical_initials_no_coupling_cost():
    x0 = Ensemble(np.linspace(-1, 1, 200))
    run = coupled_simulate(BM, x0, x0, 1.0, TimeGrid(0, 1, 50), seed=1)
    assert np.all(run.x_terminal == run.y_terminal)
    assert np.all(run.weights.log_R == 0)
    assert entropy_estimate(run)["value"] == 0


def test_deterministic_gap_and_entropy():
    # With b = 0 and sigma = 1 the gap X - Y is deterministic and so is the quadratic term.
    run = coupled_simulate(BM, dirac(0.0, 50), dirac(1.0, 50), 1.0, TimeGrid(0, 1, 1000), seed=1,
                           store_paths=True)
    gap = (run.y_paths - run.x_paths)[:, :, 0]
    assert np.ptp(gap[:, :-1], axis=0).max() < 1e-12
    assert np.ptp(run.quad_term) < 1e-12
    assert run.quad_term[0] == pytest.approx(gaussian_entropy(1.0, run.gamma, 1.0), rel=0.01)
    assert gap[0, 500] == pytest.approx(gaussian_gap(0.5, 1.0, run.gamma, 1.0), rel=0.01)


def test_merge_and_martingale():
    gaps = []
    for n in (100, 1000):
        run = coupled_simulate(BM, dirac(0.0, 4000), dirac(1.0, 4000), 1.0, TimeGrid(0, 1, n), seed=2)
        gaps.append(np.median(run.gap_pre))
        assert run.weights.merge_rate >= 0.99
        assert run.weights.martingale_ok
        assert np.all(run.weights.R > 0)
    assert gaps[1] < gaps[0]


def test_entropy_quadratic_scaling():
    vals = []
    for shift in (0.2, 0.4):
        run = coupled_simulate(BM, dirac(0.0, 20000), dirac(shift, 20000), 1.0, TimeGrid(0, 1, 200), seed=3)
        vals.append(entropy_estimate(run)["value"])
    assert 3.5 <= vals[1] / vals[0] <= 4.5


def test_coupling_requires_distribution_free_sigma():
    spec = build_coefficients("integral_type", {"kernel": "tanh", "sigma_mod": 0.5})
    with pytest.raises(ValueError):
        coupled_simulate(spec, dirac(0, 4), dirac(1, 4), 1.0, TimeGrid(0, 1, 10))


def test_log_harnack_gaussian_closed_form():
    rep = log_harnack_check(BM, anchored_exponential(1.0, -10.0), dirac(0.0, 20000), dirac(1.0, 20000),
                            1.0, TimeGrid(0, 1, 100), seed=4)
    assert rep["minimal_C"] == pytest.approx(0.5, abs=3 * rep["minimal_C_se"] + 0.01)
    assert rep["slack"] <= 3 * rep["slack_se"]
    assert rep["floor_active_fraction"] < 0.001


def test_log_harnack_identical_laws():
    x0 = Ensemble(np.linspace(-1, 1, 2000))
    rep = log_harnack_check(BM, anchored_exponential(0.5, -10.0), x0, x0, 1.0, TimeGrid(0, 1, 50), seed=5)
    assert rep["minimal_C"] == 0
    assert rep["slack"] <= 3 * rep["slack_se"]


def test_log_harnack_f_one_exact():
    rep = log_harnack_check(BM, lambda x: np.ones(len(x)), dirac(0.0, 500), dirac(1.0, 500), 1.0,
                            TimeGrid(0, 1, 50), seed=6)
    assert rep["lhs"] == 0 and rep["log_Pf"] == 0
    assert rep["slack_C"] == pytest.approx(-rep["C"] * rep["W2"] ** 2)


def test_log_harnack_rejects_f_below_one():
    with pytest.raises(ValueError, match="f >= 1"):
        log_harnack_check(BM, lambda x: np.full(len(x), 0.5), dirac(0.0, 10), dirac(1.0, 10), 1.0,
                          TimeGrid(0, 1, 10))


def test_power_harnack_identical_laws_and_constant():
    x0 = Ensemble(np.linspace(-1, 1, 2000))
    f = anchored_exponential(0.3, -10.0)
    for p in (1.5, 2.0, 4.0):
        rep = power_harnack_check(BM, f, p, x0, x0, 1.0, TimeGrid(0, 1, 50), seed=7)
        assert rep["log_lhs"] <= rep["log_rhs0"] + 3 * np.hypot(rep["log_lhs_se"], rep["log_rhs0_se"])
    rep = power_harnack_check(BM, lambda x: np.full(len(x), 3.0), 2.0, dirac(0, 100), dirac(1, 100), 1.0,
                              TimeGrid(0, 1, 20), c=0.1)
    assert rep["log_lhs"] == pytest.approx(rep["log_rhs0"]) and rep["slack_c"] == pytest.approx(-0.1)


def test_power_harnack_gaussian_minimal_c():
    # E e^{a X} from y vs E e^{p a X} from x: gap = p a (y - x) - p (p - 1) a^2 t0 / 2.
    a, p, t0 = 0.25, 2.0, 1.0
    reps = power_harnack_probe(BM, anchored_exponential(a, -10.0), dirac(0.0, 20000), dirac(1.0, 20000), t0,
                               TimeGrid(0, 1, 100), ps=(p,), seed=8)
    expected = p * a - p * (p - 1) * a**2 * t0 / 2
    assert reps[0]["minimal_c"] == pytest.approx(expected, abs=3 * reps[0]["minimal_c_se"] + 0.01)


def test_wiggle_scenario_flow_ratio():
    spec = build_coefficients("affine_meanfield", {"B": 0.5, "sigma_wiggle": 0.3})
    mu0 = Ensemble(np.linspace(-0.5, 0.5, 3000))
    nu0 = Ensemble(np.linspace(0.0, 1.0, 3000))
    rep = log_harnack_check(spec, anchored_exponential(1.0, -10.0), mu0, nu0, 1.0, TimeGrid(0, 1, 50), seed=9)
    assert np.isfinite(rep["flow_ratio_sup"])
    assert rep["mean_R"] == pytest.approx(1.0, abs=3 * rep["mean_R_se"])
