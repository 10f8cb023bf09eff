import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvlab.model import (Ensemble, MeasureFlow, PairClass, PathBundle, TimeGrid, flow_modulus, in_class_K,
                         moment)
from mvlab.rng import standard_normals


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_in_class_K_examples(d):
    assert in_class_K(2 * d, 4, d)
    if d > 1:
        assert not in_class_K(d, 2, d)
    assert in_class_K(4 * d, 8, d, strict=True)


def test_in_class_K_rejects_bad_exponents():
    with pytest.raises(ValueError):
        in_class_K(1.0, 3.0, 1)
    with pytest.raises(ValueError):
        PairClass(2.0, 0.5, 1)


@settings(max_examples=200, deadline=None)
@given(p=st.floats(1.01, 50), q=st.floats(1.01, 50), dp=st.floats(0, 10), dq=st.floats(0, 10),
       d=st.integers(1, 6), strict=st.booleans())
def test_in_class_K_monotone(p, q, dp, dq, d, strict):
    if in_class_K(p, q, d, strict):
        assert in_class_K(p + dp, q + dq, d, strict)


def test_moment_examples():
    assert moment(Ensemble.dirac([0.0]), 2) == 0
    assert moment(Ensemble([[1.0, 0.0], [0.0, 1.0]]), 2) == pytest.approx(1.0)
    z = standard_normals(1, 0, 0, 10000, 1)
    assert moment(Ensemble(z), 2) == pytest.approx(1.0, abs=0.05)


def test_moment_rejects_small_theta():
    with pytest.raises(ValueError):
        moment(Ensemble.dirac([1.0]), 0.5)


def test_flow_modulus_examples():
    grid = TimeGrid(0, 1, 10)
    ens = Ensemble(standard_normals(0, 0, 0, 50, 1))
    assert np.all(flow_modulus(MeasureFlow.constant(ens, grid)) == 0)
    drift = MeasureFlow(grid, tuple(Ensemble.dirac([t], 3) for t in grid.times))
    assert np.allclose(flow_modulus(drift), grid.dt)


def _bm_flow(dt, m=4000):
    grid = TimeGrid.from_dt(0.05, dt)
    z = np.stack([standard_normals(2, 0, k, m, 1) for k in range(grid.n_steps)], axis=1) * np.sqrt(dt)
    paths = np.concatenate([np.zeros((m, 1, 1)), np.cumsum(z, axis=1)], axis=1)
    return PathBundle(grid, paths).flow()


def test_flow_modulus_brownian_scale():
    # The laws are N(0, t): consecutive W_2 is sqrt(t + dt) - sqrt(t), which is sqrt(dt) at t = 0.
    for dt in (1e-2, 1e-3):
        mod = flow_modulus(_bm_flow(dt))
        assert mod[0] == pytest.approx(np.sqrt(dt), rel=0.05)
        assert np.all(mod <= 1.05 * np.sqrt(dt))
    assert flow_modulus(_bm_flow(1e-3)).max() < flow_modulus(_bm_flow(1e-2)).max()


def test_timegrid_nodes():
    g = TimeGrid.from_dt(1.0, 0.01)
    assert g.n_steps == 100
    assert g.node_of(0.5) == 50
    with pytest.raises(ValueError):
        g.node_of(0.505)
    assert g.truncate(0.3).n_steps == 30
    assert g.refine(4).n_steps == 400
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0.5, 3)
    with pytest.raises(ValueError):
        TimeGrid.from_dt(1.0, 0.3)


def test_ensemble_validation():
    with pytest.raises(ValueError):
        Ensemble(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        Ensemble(np.zeros((0, 1)))
    e = Ensemble([1.0, 2.0])
    assert e.dim == 1 and e.size == 2
    assert e.mean()[0] == 1.5
    with pytest.raises(ValueError):
        e.points[0, 0] = 3.0


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 20), d=st.integers(1, 3), seed=st.integers(0, 1000))
def test_ensemble_round_trips(m, d, seed):
    e = Ensemble(standard_normals(seed, 0, 0, m, d) * 1e3)
    assert Ensemble.from_bytes(e.to_bytes()) == e
    assert Ensemble.from_csv_text(e.to_csv()) == e


def test_ensemble_bytes_errors():
    blob = Ensemble.dirac([1.0], 3).to_bytes()
    with pytest.raises(ValueError):
        Ensemble.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        Ensemble.from_bytes(blob[:-3])


def test_resample_deterministic():
    e = Ensemble(np.arange(10.0))
    a, b = e.resample(25, 3), e.resample(25, 3)
    assert a == b and a.size == 25
    assert set(a.points[:, 0]) <= set(range(10))


def test_measure_flow_save_load(tmp_path):
    grid = TimeGrid(0, 1, 4)
    flow = MeasureFlow(grid, tuple(Ensemble.dirac([float(k)], 2) for k in range(5)))
    flow.save(tmp_path / "flow")
    back = MeasureFlow.load(tmp_path / "flow")
    assert back.grid == grid
    assert all(back[k] == flow[k] for k in range(5))
    with pytest.raises(ValueError):
        MeasureFlow(grid, (flow[0],) * 3)


def test_path_bundle_shapes_and_bytes():
    grid = TimeGrid(0, 1, 3)
    paths = np.arange(2 * 4 * 1, dtype=float).reshape(2, 4, 1)
    b = PathBundle(grid, paths)
    assert b.terminal().points[:, 0].tolist() == [3.0, 7.0]
    back = PathBundle.from_bytes(b.to_bytes())
    assert np.array_equal(back.paths, paths) and back.grid == grid
    assert b.to_csv().splitlines()[0] == "particle,step,t,x0"
    with pytest.raises(ValueError):
        PathBundle(grid, paths, noise=np.zeros((2, 4, 1)))
