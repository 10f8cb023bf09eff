import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from mvlab.dini import DiniModulus, dini_check, dini_integral


def test_hoelder_half_passes_with_integral_two():
    rep = dini_check(DiniModulus.hoelder(1.0, 0.5))
    assert rep.passed
    assert rep.integral == pytest.approx(2.0, rel=1e-8)


def test_lipschitz_square_is_convex():
    # phi(s) = s: phi^2 = s^2 is convex, so the concavity requirement fails.
    rep = dini_check(DiniModulus.hoelder(1.0, 1.0))
    assert rep.integral == pytest.approx(1.0, rel=1e-8)
    assert rep.monotone and not rep.concave_square and not rep.passed


def test_log_modulus_epsilon_zero_diverges():
    rep = dini_check(DiniModulus.log_dini(1.0, 0.0))
    assert rep.diverged and not rep.passed
    assert any("diverges" in n for n in rep.notes)


@pytest.mark.parametrize("eps", [0.5, 1.0, 2.0])
def test_log_modulus_integral_closed_form(eps):
    phi = DiniModulus.log_dini(1.0, eps)
    L0 = phi.log_cutoff
    # int_{L0}^inf (1 + L)^{-(1+eps)} dL + phi(s0) * L0
    expected = (1 + L0) ** -eps / eps + (1 + L0) ** -(1 + eps) * L0
    rep = dini_check(phi)
    assert rep.passed
    assert rep.integral == pytest.approx(expected, rel=1e-7)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.1, 5), beta=st.floats(0.05, 1.0))
def test_hoelder_integral_matches_quadrature(c, beta):
    value, converged, diverged, *_ = dini_integral(DiniModulus.hoelder(c, beta))
    oracle = quad(lambda s: c * s ** (beta - 1), 0, 1)[0]
    assert converged and not diverged
    assert value == pytest.approx(oracle, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(eps=st.floats(0.05, 3), s=st.floats(1e-8, 4), t=st.floats(1e-8, 4))
def test_log_modulus_monotone(eps, s, t):
    phi = DiniModulus.log_dini(1.0, eps)
    lo, hi = sorted((s, t))
    assert phi(lo) <= phi(hi) + 1e-15


def test_modulus_validation_and_dict():
    with pytest.raises(ValueError):
        DiniModulus.hoelder(1.0, 1.5)
    with pytest.raises(ValueError):
        DiniModulus("cubic")
    with pytest.raises(ValueError):
        DiniModulus.log_dini(-1.0, 1.0)
    d = DiniModulus.hoelder(np.float64(2.0), 0.5).to_dict()
    assert d == {"family": "hoelder", "c": 2.0, "beta": 0.5}
    assert type(d["c"]) is float
    assert DiniModulus.log_dini(1.0, 1.0)(0.0) == 0.0
    assert np.asarray(DiniModulus.hoelder()(np.array([0.0, 1.0]))).tolist() == [0.0, 1.0]
