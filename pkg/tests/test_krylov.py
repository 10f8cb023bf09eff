import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from mvlab.coefficients import build_coefficients, constant
from mvlab.fields import GridField, lpq_norm
from mvlab.krylov import (bm_occupation_oracle, default_ladder, khasminskii_exp, krylov_fit,
                          markov_spot_check, occupation_functional, path_integrals)
from mvlab.model import Ensemble, TimeGrid
from mvlab.simulate import euler_frozen


def field(fn, box=8.0, n=800):
    return GridField.from_function(fn, [-box], [box], [n], (0.0, 1.0), 1)


ONE = field(lambda t, x: np.ones(x.shape[0]))
ZERO = field(lambda t, x: np.zeros(x.shape[0]))
IND = field(lambda t, x: (np.abs(x[:, 0]) <= 1).astype(float))


@pytest.fixture(scope="module")
def bm():
    return euler_frozen(constant(0.0, 1.0), None, Ensemble.dirac([0.0], 20000), TimeGrid(0, 1, 1000), 3,
                        keep_noise=False)


def test_bm_oracle_independent():
    ref = quad(lambda r: 2 * norm.cdf(1 / np.sqrt(r)) - 1, 0, 1)[0]
    assert bm_occupation_oracle(1.0, 1.0) == pytest.approx(ref, rel=1e-9)


def test_trivial_fields(bm):
    est, se = occupation_functional(bm, ONE, 0.2, 0.7)
    assert est == pytest.approx(0.5, abs=1e-12) and se == pytest.approx(0, abs=1e-12)
    assert occupation_functional(bm, ZERO, 0, 1) == (0.0, 0.0)


def test_bm_occupation(bm):
    ref = quad(lambda r: 2 * norm.cdf(1 / np.sqrt(r)) - 1, 0, 1)[0]
    est, _ = occupation_functional(bm, IND, 0, 1)
    assert est == pytest.approx(ref, rel=0.02)


def test_additivity(bm):
    a = path_integrals(bm, IND, 0, 0.4) + path_integrals(bm, IND, 0.4, 1.0)
    assert np.allclose(a, path_integrals(bm, IND, 0, 1), rtol=0, atol=1e-12)


def test_monotone_in_f(bm):
    half = field(lambda t, x: 0.5 * (np.abs(x[:, 0]) <= 1))
    a, sa = occupation_functional(bm, half, 0, 1)
    b, sb = occupation_functional(bm, IND, 0, 1)
    assert a <= b + 3 * np.hypot(sa, sb)


def test_negative_f_rejected(bm):
    with pytest.raises(ValueError):
        occupation_functional(bm, ONE * -1.0, 0, 1)


def test_fit_constant_field(bm):
    fit = krylov_fit(bm, ONE, 4, 4)
    assert fit.delta_hat == pytest.approx(1.0, abs=0.02)
    assert fit.C_hat == pytest.approx(1 / lpq_norm(ONE, 4, 4, 0, 1), rel=1e-6)


def test_fit_indicator_delta(bm):
    ladder = default_ladder(bm.grid, 8, s=0.5)
    fit = krylov_fit(bm, IND, 4, 4, ladder=ladder)
    assert 0.9 < fit.delta_hat <= 1.0 + 1e-3
    assert fit.delta_positive and np.isfinite(fit.C_hat)


def test_fit_needs_four_points(bm):
    with pytest.raises(ValueError):
        krylov_fit(bm, ONE, 4, 4, ladder=[(0, 0.1), (0, 0.2), (0, 0.4)])


def test_khasminskii_trivial(bm):
    assert khasminskii_exp(bm, ZERO, 1.0).estimate == 1.0
    three = ONE * 3.0
    assert khasminskii_exp(bm, three, 0.5).estimate == pytest.approx(np.exp(1.5), rel=1e-12)


def test_khasminskii_jensen_and_moments(bm):
    rep = khasminskii_exp(bm, IND, 1.0)
    occ, _ = occupation_functional(bm, IND, 0, 1)
    assert np.isfinite(rep.estimate)
    assert rep.estimate >= np.exp(occ) - 3 * rep.se
    assert [row["n"] for row in rep.moments] == [1, 2, 3, 4]


def test_khasminskii_overflow(bm):
    with pytest.raises(OverflowError, match="smaller lambda"):
        khasminskii_exp(bm, ONE, 1000.0)


def test_markov_spot_check_bm(bm):
    mc = markov_spot_check(constant(0.0, 1.0), bm, IND, 0.5, 1.0, n_sub=30, n_inner=300, seed=1)
    assert mc.consistent


def test_singular_drift_fit():
    spec = build_coefficients("singular", {"alpha": 0.25})
    paths = euler_frozen(spec, None, Ensemble.dirac([0.1], 3000), TimeGrid(0, 1, 400), 2, keep_noise=False)
    from mvlab.coefficients import singular_square_field

    f = singular_square_field(0.25, 1.0, 1, 3.0, 600, (0.0, 1.0), 1)
    fit = krylov_fit(paths, f, 1.5, 4)
    assert fit.delta_hat > 0 and np.isfinite(fit.C_hat)
