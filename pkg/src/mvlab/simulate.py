"""Euler-Maruyama schemes: frozen-flow SDEs, interacting particles, Picard on flows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coefficients import CoefficientSpec
from .model import Ensemble, MeasureFlow, PathBundle, TimeGrid, as_ensemble
from .rng import STREAM_MAIN, brownian_increments
from .transport import w_theta


class SimulationError(ValueError):
    """A particle left the finite reals."""


class PicardDidNotConverge(RuntimeError):
    def __init__(self, message, gaps):
        super().__init__(message)
        self.gaps = list(gaps)


def _check_finite(x, k):
    bad = ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise SimulationError(f"particle {i} became non-finite at step {k + 1} "
                              f"({int(bad.sum())} particles affected)")


def euler_step(spec: CoefficientSpec, t: float, x: np.ndarray, mu: Ensemble, dw: np.ndarray, dt: float):
    """One explicit step x + b dt + sigma dW."""
    sig = spec.diffusion(t, x, mu)
    return x + spec.drift(t, x, mu) * dt + np.einsum("mij,mj->mi", sig, dw)


def _run(spec, x0, grid, seed, stream, measure_at, threads, keep_noise):
    x0 = as_ensemble(x0)
    if x0.dim != spec.dim:
        raise ValueError(f"initial ensemble has dimension {x0.dim}, coefficients expect {spec.dim}")
    m, d, n = x0.size, x0.dim, grid.n_steps
    paths = np.empty((m, n + 1, d))
    noise = np.empty((m, n, d)) if keep_noise else None
    x = x0.points.copy()
    paths[:, 0] = x
    for k in range(n):
        dw = brownian_increments(seed, stream, k, m, d, grid.dt, threads)
        if keep_noise:
            noise[:, k] = dw
        x = euler_step(spec, grid.time(k), x, measure_at(k, x), dw, grid.dt)
        _check_finite(x, k)
        paths[:, k + 1] = x
    return PathBundle(grid, paths, noise, {"seed": seed, "stream": stream})


def euler_frozen(spec: CoefficientSpec, flow: MeasureFlow | None, x0, grid: TimeGrid, seed: int,
                 stream: int = STREAM_MAIN, threads: int | None = None, keep_noise: bool = True) -> PathBundle:
    """Euler-Maruyama for dX = b(X, mu_t) dt + sigma(X, mu_t) dW with mu_t = flow[k] frozen.

    ``flow`` may be ``None`` when the coefficients ignore the measure.
    """
    x0 = as_ensemble(x0)
    if flow is None:
        if not spec.measure_free:
            raise ValueError("a measure flow is required for measure-dependent coefficients")
        return _run(spec, x0, grid, seed, stream, lambda k, x: x0, threads, keep_noise)
    if flow.grid.n_steps != grid.n_steps or not np.allclose(flow.grid.times, grid.times, rtol=0, atol=1e-12):
        raise ValueError("flow grid does not match the simulation grid")
    if flow.dim != spec.dim:
        raise ValueError(f"flow dimension {flow.dim} does not match coefficients ({spec.dim})")
    return _run(spec, x0, grid, seed, stream, lambda k, x: flow[k], threads, keep_noise)


def particle_system(spec: CoefficientSpec, x0, grid: TimeGrid, seed: int, stream: int = STREAM_MAIN,
                    threads: int | None = None, keep_noise: bool = True) -> tuple[PathBundle, MeasureFlow]:
    """Interacting particles: every particle sees the empirical law of all M at t_k."""
    bundle = _run(spec, x0, grid, seed, stream, lambda k, x: Ensemble(x), threads, keep_noise)
    return bundle, bundle.flow()


def flow_distance(a: MeasureFlow, b: MeasureFlow, theta: float = 2.0, method: str = "auto") -> float:
    """max_k W_theta(a_k, b_k) over a shared grid."""
    if a.grid != b.grid:
        raise ValueError("flows live on different grids")
    return max(w_theta(a[k], b[k], theta, method) for k in range(len(a)))


@dataclass
class PicardResult:
    flow: MeasureFlow
    gaps: list
    iterations: int
    bundle: PathBundle

    @property
    def ratios(self) -> list:
        g = self.gaps
        return [g[i + 1] / g[i] if g[i] > 0 else 0.0 for i in range(len(g) - 1)]


def picard(spec: CoefficientSpec, x0, grid: TimeGrid, theta: float = 2.0, tol: float = 1e-6,
           max_iter: int = 30, seed: int = 0, stream: int = STREAM_MAIN, threads: int | None = None,
           method: str = "auto") -> PicardResult:
    """Picard iteration on measure flows with common random numbers.

    mu^(0) is the constant flow at the initial law; iteration n solves the
    SDE frozen at mu^(n-1).  ``gaps[n-1]`` is sup_t W_theta(mu^(n), mu^(n-1)),
    so coefficients that ignore the measure give ``gaps[1] == 0``.
    """
    x0 = as_ensemble(x0)
    prev = MeasureFlow.constant(x0, grid)
    gaps = []
    for n in range(1, max_iter + 1):
        bundle = euler_frozen(spec, prev, x0, grid, seed, stream, threads)
        flow = bundle.flow()
        gaps.append(flow_distance(flow, prev, theta, method))
        if gaps[-1] <= tol:
            return PicardResult(flow, gaps, n, bundle)
        prev = flow
    raise PicardDidNotConverge(f"no convergence in {max_iter} iterations (last gap {gaps[-1]:.3e}); "
                               "a shorter horizon contracts faster", gaps)
