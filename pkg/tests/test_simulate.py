import numpy as np
import pytest

from mvlab.coefficients import CoefficientSpec, build_coefficients, constant
from mvlab.model import Ensemble, MeasureFlow, TimeGrid
from mvlab.simulate import (PicardDidNotConverge, SimulationError, euler_frozen, euler_step, flow_distance,
                            particle_system, picard)


def ou():
    return build_coefficients("affine_meanfield", {"A": -1.0, "B": 0.0})


def test_zero_coefficients_freeze():
    spec = constant(0.0, 0.0)
    x0 = Ensemble(np.linspace(-1, 1, 9))
    b = euler_frozen(spec, None, x0, TimeGrid(0, 1, 20), 0)
    assert np.all(b.paths == x0.points[:, None, :])


def test_unit_drift_ode():
    b = euler_frozen(constant(1.0, 0.0), None, Ensemble.dirac([0.0], 5), TimeGrid(0, 1, 50), 0)
    assert np.allclose(b.terminal().points, 1.0, atol=1e-12)


def test_ou_moments():
    b = euler_frozen(ou(), None, Ensemble.dirac([0.0], 40000), TimeGrid(0, 1, 200), 1)
    xt = b.terminal().points[:, 0]
    se = xt.std(ddof=1) / np.sqrt(xt.size)
    assert abs(xt.mean()) <= 3 * se
    assert xt.var(ddof=1) == pytest.approx((1 - np.exp(-2)) / 2, rel=0.05)


def test_ou_strong_order_with_shared_noise():
    # Fine run, then coarse runs driven by summed increments of the same noise.
    spec = ou()
    fine = euler_frozen(spec, None, Ensemble.dirac([1.0], 2000), TimeGrid(0, 1, 400), 5)
    mu = Ensemble.dirac([0.0])

    def coarse(factor):
        dw = fine.noise.reshape(fine.size, -1, factor, 1).sum(axis=2)
        x = fine.initial().points.copy()
        dt = 1.0 / dw.shape[1]
        for k in range(dw.shape[1]):
            x = euler_step(spec, k * dt, x, mu, dw[:, k], dt)
        return x[:, 0]

    x1, x2, x4 = coarse(4), coarse(2), fine.terminal().points[:, 0]
    r1 = np.sqrt(np.mean((x1 - x2) ** 2))
    r2 = np.sqrt(np.mean((x2 - x4) ** 2))
    assert 1.2 <= r1 / r2 <= 3


def test_particle_mean_preserved():
    spec = build_coefficients("affine_meanfield", {"A": -1.0, "B": 1.0})
    b, flow = particle_system(spec, Ensemble.dirac([1.0], 5000), TimeGrid(0, 1, 100), 2)
    means = flow.means()[:, 0]
    se = b.terminal().points.std(ddof=1) / np.sqrt(5000)
    assert np.all(np.abs(means - 1.0) <= 3 * se + 1e-12)
    # The spread follows the OU variance (1 - e^{-2t}) / 2.
    assert b.terminal().points.var() == pytest.approx((1 - np.exp(-2)) / 2, rel=0.08)


def test_measure_free_neutrality():
    spec = ou()
    x0 = Ensemble(np.linspace(-1, 1, 50))
    grid = TimeGrid(0, 0.5, 25)
    a, _ = particle_system(spec, x0, grid, 3)
    b = euler_frozen(spec, None, x0, grid, 3)
    c = euler_frozen(spec, MeasureFlow.constant(Ensemble.dirac([7.0]), grid), x0, grid, 3)
    assert np.array_equal(a.paths, b.paths) and np.array_equal(a.paths, c.paths)


def test_determinism_and_threads():
    spec = build_coefficients("affine_meanfield", {})
    x0 = Ensemble(np.linspace(-1, 1, 5000))
    grid = TimeGrid(0, 0.1, 10)
    a, _ = particle_system(spec, x0, grid, 9, threads=1)
    b, _ = particle_system(spec, x0, grid, 9, threads=3)
    assert a.to_bytes() == b.to_bytes()


def test_non_finite_reported():
    blow = CoefficientSpec(lambda t, x, mu: np.where(x > 2, np.inf, 1.0) * np.ones_like(x),
                           lambda t, x, mu: np.zeros((x.shape[0], 1, 1)), 1, measure_free=True)
    with pytest.raises(SimulationError, match="particle 0 became non-finite at step"):
        euler_frozen(blow, None, Ensemble([3.0, 0.0]), TimeGrid(0, 1, 4), 0)


def test_flow_required_for_measure_dependent():
    with pytest.raises(ValueError):
        euler_frozen(build_coefficients("affine_meanfield", {}), None, Ensemble.dirac([0.0]), TimeGrid(0, 1, 2), 0)


def test_flow_distance_examples():
    grid = TimeGrid(0, 1, 5)
    a = MeasureFlow.constant(Ensemble.dirac([0.0], 4), grid)
    b = MeasureFlow.constant(Ensemble.dirac([2.5], 4), grid)
    assert flow_distance(a, a) == 0
    assert flow_distance(a, b) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        flow_distance(a, MeasureFlow.constant(Ensemble.dirac([0.0], 4), TimeGrid(0, 1, 6)).truncate(1.0))


def test_picard_measure_free_one_step():
    r = picard(ou(), Ensemble(np.linspace(-1, 1, 100)), TimeGrid(0, 0.5, 20), tol=1e-12)
    assert r.gaps[1] == 0 and r.iterations == 2


def test_picard_affine_contraction_and_gap_definition():
    spec = build_coefficients("affine_meanfield", {"A": -1.0, "B": 1.0})
    x0 = Ensemble(np.linspace(0, 2, 400))
    grid = TimeGrid(0, 0.5, 50)
    r = picard(spec, x0, grid, tol=1e-6, seed=4)
    assert all(b <= a for a, b in zip(r.gaps[1:], r.gaps[2:]))
    assert max(r.ratios[1:]) < 0.8
    # Replaying the iteration by hand reproduces every reported gap.
    prev = MeasureFlow.constant(x0, grid)
    for gap in r.gaps:
        flow = euler_frozen(spec, prev, x0, grid, 4).flow()
        assert flow_distance(flow, prev) == gap
        prev = flow


def test_picard_vs_particle_system_improves_with_M():
    spec = build_coefficients("affine_meanfield", {"A": -1.0, "B": 1.0})
    grid = TimeGrid(0, 0.5, 25)
    errs = []
    for m in (100, 3000):
        x0 = Ensemble(np.linspace(0, 2, m))
        fixed = picard(spec, x0, grid, tol=1e-8, seed=6).flow
        _, realized = particle_system(spec, x0, grid, 6)
        errs.append(flow_distance(fixed, realized))
    assert errs[1] < errs[0]


def test_picard_failure_carries_gaps():
    spec = build_coefficients("affine_meanfield", {"A": -1.0, "B": 1.0})
    with pytest.raises(PicardDidNotConverge) as info:
        picard(spec, Ensemble(np.linspace(0, 2, 50)), TimeGrid(0, 0.5, 10), tol=1e-14, max_iter=3)
    assert len(info.value.gaps) == 3
