"""Shift coupling Y_t = X_t + t v / t0 for SDEs with state-free noise."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .coefficients import CoefficientSpec
from .dini import DiniModulus
from .harnack import HarnackReport, WeightVector
from .model import PathBundle, TimeGrid, as_ensemble
from .rng import STREAM_MAIN
from .simulate import euler_frozen, particle_system


def dini_bound_integral(phi: DiniModulus | None, sigma_inv_norm, v, t0: float) -> float:
    """int_0^t0 |sigma_s^-1|^2 (|v|/t0 + phi(s |v| / t0))^2 ds by adaptive quadrature.

    ``sigma_inv_norm`` is a constant, a function of s, or ``None`` (= 1);
    ``phi=None`` means phi = 0.
    """
    if not t0 > 0:
        raise ValueError("t0 must be positive")
    vn = float(np.linalg.norm(np.atleast_1d(np.asarray(v, dtype=np.float64))))
    if callable(sigma_inv_norm):
        sn = sigma_inv_norm
    else:
        c = 1.0 if sigma_inv_norm is None else float(sigma_inv_norm)
        sn = lambda s: c  # noqa: E731

    def integrand(s):
        ph = 0.0 if phi is None else float(phi(s * vn / t0))
        return float(sn(s)) ** 2 * (vn / t0 + ph) ** 2

    return quad(integrand, 0.0, t0, limit=400, epsabs=0.0, epsrel=1e-11)[0]


def _inv_norm(S):
    # Operator norm of the inverse = 1 / smallest singular value.
    return 1.0 / np.linalg.svd(S, compute_uv=False)[..., -1]


@dataclass
class ShiftRun:
    x: PathBundle
    y: PathBundle
    weights: WeightVector
    shift: np.ndarray
    eta_norm: np.ndarray
    sigma_inv_norm: np.ndarray
    t0: float
    v: np.ndarray


def shift_coupled_simulate(spec: CoefficientSpec, mu0, v, t0: float, grid: TimeGrid, seed: int = 0,
                           threads: int | None = None) -> ShiftRun:
    """X from the mu-dynamics, Y = X + t v / t0, and the weight making Y a solution."""
    if not spec.diffusion_state_free:
        raise ValueError("the shift coupling needs a state-free diffusion sigma_t(mu)")
    mu0 = as_ensemble(mu0)
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), (mu0.dim,)).copy()
    sub = grid.truncate(t0)
    if spec.measure_free:
        xb = euler_frozen(spec, None, mu0, sub, seed, STREAM_MAIN, threads)
        law = lambda k: mu0  # noqa: E731
    else:
        xb, flow = particle_system(spec, mu0, sub, seed, STREAM_MAIN, threads)
        law = flow.__getitem__
    n, dt = sub.n_steps, sub.dt
    shift = (sub.times / t0)[:, None] * v[None, :]
    ypaths = xb.paths + shift[None, :, :]
    m = mu0.size
    log_r = np.zeros(m)
    eta_norm = np.empty((m, n))
    inv_norms = np.empty(n)
    for k in range(n):
        t = sub.time(k)
        x, y, dw = xb.paths[:, k], ypaths[:, k], xb.noise[:, k]
        mu_k = law(k)
        s = spec.diffusion(t, x, mu_k)
        try:
            inv_norms[k] = float(np.max(_inv_norm(s[:1])))
            rhs = v / t0 + spec.drift(t, x, mu_k) - spec.drift(t, y, mu_k)
            eta = rhs / s[:, 0, :] if mu0.dim == 1 else np.linalg.solve(s, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"sigma not invertible at step {k}: {exc}") from None
        if not np.all(np.isfinite(eta)):
            raise np.linalg.LinAlgError(f"sigma not invertible at step {k}")
        eta_norm[:, k] = np.linalg.norm(eta, axis=1)
        log_r += -np.sum(eta * dw, axis=1) - 0.5 * dt * eta_norm[:, k] ** 2
    yb = PathBundle(sub, ypaths, xb.noise, dict(xb.seed, shift=v.tolist()))
    return ShiftRun(xb, yb, WeightVector(log_r, np.ones(m, dtype=bool)), shift, eta_norm, inv_norms, t0, v)


def _paired_gap(a, b):
    """mean(a) - log mean(b) with a delta-method SE for paired samples."""
    mb = b.mean()
    gap = float(a.mean() - np.log(mb))
    se = float(np.std(a - b / mb, ddof=1) / np.sqrt(a.size)) if a.size > 1 else 0.0
    return gap, se


def _sigma_norm_fn(run: ShiftRun):
    times = run.x.grid.times[:-1]
    vals = run.sigma_inv_norm
    return lambda s: float(vals[min(np.searchsorted(times, s, side="right") - 1, vals.size - 1)])


def _entropy(run: ShiftRun):
    lr = run.weights.log_R
    r = np.exp(lr)
    e = r * lr
    return float(e.mean()), float(e.std(ddof=1) / np.sqrt(e.size)) if e.size > 1 else 0.0


def shift_log_harnack_check(spec: CoefficientSpec, f: Callable, mu0, v, t0: float, grid: TimeGrid,
                            seed: int = 0, phi: DiniModulus | None = None, run: ShiftRun | None = None,
                            threads: int | None = None) -> HarnackReport:
    """P log f(mu0) <= log P f(v + .)(mu0) + 1/2 int |sigma^-1|^2 (|v|/t0 + phi)^2."""
    run = run or shift_coupled_simulate(spec, mu0, v, t0, grid, seed, threads)
    phi = spec.phi if phi is None else phi
    xt = run.x.terminal().points
    fx, fv = f(xt), f(xt + run.v)
    if np.any(fx < 1) or np.any(fv < 1):
        raise ValueError("f < 1 on samples; the log-Harnack test needs f >= 1")
    lhs = float(np.mean(np.log(fx)))
    lhs_se = float(np.std(np.log(fx), ddof=1) / np.sqrt(fx.size))
    log_pf = float(np.log(fv.mean()))
    gap, gap_se = _paired_gap(np.log(fx), fv)
    bound = 0.5 * dini_bound_integral(phi, _sigma_norm_fn(run), run.v, t0)
    ent, ent_se = _entropy(run)
    out = {"lhs": lhs, "lhs_se": lhs_se, "log_Pf_shift": log_pf,
           "log_Pf_shift_se": float(fv.std(ddof=1) / np.sqrt(fv.size) / fv.mean()),
           "bound_term": bound, "rhs": log_pf + bound, "slack": gap - bound, "slack_se": gap_se,
           "entropy": ent, "entropy_se": ent_se, "rhs_entropy": log_pf + ent,
           "slack_entropy": gap - ent, "slack_entropy_se": float(np.hypot(gap_se, ent_se)),
           "mean_R": run.weights.mean, "mean_R_se": run.weights.se,
           "v": run.v.tolist(), "t0": t0, "modulus": phi.to_dict() if phi is not None else None}
    return HarnackReport(out)


def shift_power_harnack_check(spec: CoefficientSpec, f: Callable, p: float, mu0, v, t0: float, grid: TimeGrid,
                              seed: int = 0, phi: DiniModulus | None = None, run: ShiftRun | None = None,
                              threads: int | None = None) -> HarnackReport:
    """(P f)^p(mu0) <= P f^p(v + .)(mu0) exp(p I / (2 (p - 1)^k)), k = 1 (statement) and 2 (proof)."""
    if not p > 1:
        raise ValueError("p must exceed 1")
    run = run or shift_coupled_simulate(spec, mu0, v, t0, grid, seed, threads)
    phi = spec.phi if phi is None else phi
    xt = run.x.terminal().points
    fx, fv = f(xt), f(xt + run.v)
    if np.any(fx <= 0) or np.any(fv <= 0):
        raise ValueError("f must be positive")
    mx, mv = fx.mean(), (fv**p).mean()
    log_lhs, log_rhs0 = p * float(np.log(mx)), float(np.log(mv))
    # Paired delta method for p log mean(fx) - log mean(fv^p).
    se = float(np.std(p * fx / mx - fv**p / mv, ddof=1) / np.sqrt(fx.size))
    integral = dini_bound_integral(phi, _sigma_norm_fn(run), run.v, t0)
    e_stmt = p * integral / (2 * (p - 1))
    e_proof = p * integral / (2 * (p - 1) ** 2)
    rq = np.exp(run.weights.log_R * p / (p - 1))
    log_factor = float((p - 1) * np.log(rq.mean()))
    out = {"p": p, "log_lhs": log_lhs, "log_rhs0": log_rhs0, "se": se, "integral": integral,
           "exponent_statement": e_stmt, "exponent_proof": e_proof,
           "slack_statement": log_lhs - log_rhs0 - e_stmt, "slack_proof": log_lhs - log_rhs0 - e_proof,
           "log_coupling_factor": log_factor, "slack_coupling": log_lhs - log_rhs0 - log_factor,
           "mean_R": run.weights.mean, "mean_R_se": run.weights.se, "v": run.v.tolist(), "t0": t0}
    return HarnackReport(out)
