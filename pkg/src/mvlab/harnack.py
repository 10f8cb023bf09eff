"""Coupling by change of measure for SDEs with distribution-free noise.

X follows the mu-dynamics; Y follows the nu-drift plus an attraction
zeta_t^-1 sigma(Y) sigma(X)^-1 (X - Y) and shares X's increments.  The
Girsanov weight R turns Y into a nu-solution, and zeta -> 0 at t0 forces
the pair to meet there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSpec
from .model import TimeGrid, as_ensemble
from .rng import STREAM_COUPLING, STREAM_MAIN, STREAM_NU, brownian_increments
from .simulate import euler_frozen, particle_system
from .transport import optimal_initial_pairing, w_theta


def gamma_constant(K: float, d: int, delta: float, lam: float = 0.0) -> float:
    """gamma = 72 K / 25 + 2 d / (25 delta) + 12 lam / 25."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    if K < 1 or d < 0 or lam < 0:
        raise ValueError("need K >= 1, d >= 0 and lambda >= 0")
    return 72.0 * K / 25.0 + 2.0 * d / (25.0 * delta) + 12.0 * lam / 25.0


def zeta(t, gamma: float, t0: float):
    """zeta_t = 12/(25 gamma) (1 - exp(25 gamma (t - t0) / 16)), exactly 0 at t0."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    t = np.asarray(t, dtype=np.float64)
    return 12.0 / (25.0 * gamma) * -np.expm1(25.0 * gamma * (t - t0) / 16.0) + 0.0


def zeta_schedule(gamma: float, t0: float, grid: TimeGrid) -> np.ndarray:
    """zeta at the grid nodes up to and including t0 (which must be a node)."""
    if not grid.t_start < t0 <= grid.t_end + 1e-12:
        raise ValueError(f"t0={t0} lies outside the grid ({grid.t_start}, {grid.t_end}]")
    k0 = grid.node_of(t0)
    z = zeta(grid.times[:k0 + 1], gamma, t0)
    z[k0] = 0.0
    return z


def gaussian_gap(t, g0: float, gamma: float, t0: float):
    """Deterministic gap of the b = 0, sigma = I coupling: g' = -g / zeta."""
    k = 25.0 * gamma / 16.0
    t = np.asarray(t, dtype=np.float64)
    return g0 * (np.expm1(k * (t0 - t)) / np.expm1(k * t0)) ** (4.0 / 3.0)


def gaussian_entropy(g0: float, gamma: float, t0: float) -> float:
    """1/2 int_0^t0 g_t^2 / zeta_t^2 dt for the b = 0, sigma = I coupling."""
    from scipy.integrate import quad

    def integrand(t):
        z = float(zeta(t, gamma, t0))
        return 0.5 * float(gaussian_gap(t, g0, gamma, t0)) ** 2 / z**2 if z > 0 else 0.0
    return quad(integrand, 0.0, t0, limit=400, epsrel=1e-12)[0]


@dataclass
class WeightVector:
    log_R: np.ndarray
    merged: np.ndarray

    @property
    def R(self) -> np.ndarray:
        return np.exp(self.log_R)

    @property
    def mean(self) -> float:
        return float(self.R.mean())

    @property
    def se(self) -> float:
        return float(self.R.std(ddof=1) / np.sqrt(self.R.size)) if self.R.size > 1 else 0.0

    @property
    def martingale_ok(self) -> bool:
        return abs(self.mean - 1.0) <= 3 * self.se + 1e-12

    @property
    def merge_rate(self) -> float:
        return float(self.merged.mean())

    def to_csv(self, path=None) -> str:
        lines = ["i,log_R,R,merged"] + [f"{i},{lr!r},{float(np.exp(lr))!r},{int(m)}"
                                         for i, (lr, m) in enumerate(zip(self.log_R.tolist(), self.merged))]
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


@dataclass
class CouplingRun:
    grid: TimeGrid
    t0: float
    gamma: float
    zeta: np.ndarray
    x_terminal: np.ndarray
    y_terminal: np.ndarray
    gap_pre: np.ndarray
    stoch_int: np.ndarray
    quad_term: np.ndarray
    weights: WeightVector
    merge_tol: np.ndarray
    pairing: np.ndarray
    x_paths: np.ndarray | None = None
    y_paths: np.ndarray | None = None
    noise: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def terminal_gap(self) -> np.ndarray:
        return np.linalg.norm(self.x_terminal - self.y_terminal, axis=1)

    def merge_stats(self) -> dict:
        return {"merge_rate": self.weights.merge_rate, "median_gap_pre": float(np.median(self.gap_pre)),
                "median_terminal_gap": float(np.median(self.terminal_gap)),
                "max_merge_tol": float(self.merge_tol.max())}


def _solve(S, v):
    if S.shape[-1] == 1:
        return v / S[:, 0, :]
    return np.linalg.solve(S, v[..., None])[..., 0]


def _check_invertible(S, k):
    if S.shape[-1] == 1:
        bad = np.abs(S[:, 0, 0]) < 1e-12
    else:
        bad = np.linalg.cond(S) > 1e12
    if np.any(bad):
        raise np.linalg.LinAlgError(f"sigma(X) numerically singular for particle "
                                    f"{int(np.flatnonzero(bad)[0])} at step {k}")


def _flows(spec, mu0, nu0, grid, seed, threads):
    if spec.measure_free:
        return None, None
    _, mf = particle_system(spec, mu0, grid, seed, STREAM_MAIN, threads, keep_noise=False)
    _, nf = particle_system(spec, nu0, grid, seed, STREAM_NU, threads, keep_noise=False)
    return mf, nf


def coupled_simulate(spec: CoefficientSpec, mu0, nu0, t0: float, grid: TimeGrid, gamma: float | None = None,
                     seed: int = 0, flows: tuple | None = None, merge_tol: float | None = None,
                     merge_factor: float = 10.0, store_paths: bool = False, threads: int | None = None,
                     delta: float | None = None, lam: float = 0.0) -> CouplingRun:
    """Simulate the coupled pair (X, Y) on [0, t0] with Girsanov bookkeeping.

    The attraction uses zeta at each step's left node.  On the last step a
    pair whose gap is within the merge tolerance (default
    ``merge_factor * sqrt(dt) * |sigma(X)|``) is sent to Y_t0 = X_t0, and
    the weight picks up the exact Gaussian likelihood ratio of that step.
    """
    if not spec.diffusion_distribution_free:
        raise ValueError("the coupling needs a distribution-free diffusion")
    mu0, nu0 = as_ensemble(mu0), as_ensemble(nu0)
    if mu0.size != nu0.size:
        raise ValueError("mu0 and nu0 must have equal sizes; resample one of them first")
    if gamma is None:
        gamma = gamma_constant(spec.K, spec.dim, delta if delta is not None else 1.0 / spec.K, lam)
    z = zeta_schedule(gamma, t0, grid)
    k0 = z.size - 1
    if k0 < 1:
        raise ValueError("t0 must be at least one step after the start")
    if flows is None:
        flows = _flows(spec, mu0, nu0, grid, seed, threads)
    mf, nf = flows

    def law(flow, ens, k):
        return ens if flow is None else flow[k]

    perm = optimal_initial_pairing(mu0, nu0, 2.0)
    m, d, dt = mu0.size, mu0.dim, grid.dt
    x = mu0.points.copy()
    y = nu0.points[perm].copy()
    stoch = np.zeros(m)
    quad = np.zeros(m)
    log_r = np.zeros(m)
    merged = np.zeros(m, dtype=bool)
    tol = np.zeros(m)
    gap_pre = np.zeros(m)
    xs = ys = noise = None
    if store_paths:
        xs, ys = np.empty((m, k0 + 1, d)), np.empty((m, k0 + 1, d))
        noise = np.empty((m, k0, d))
        xs[:, 0], ys[:, 0] = x, y
    for k in range(k0):
        t = grid.time(k)
        if not (z[k] > 0 and np.isfinite(1.0 / z[k])):
            raise FloatingPointError(f"zeta underflows at step {k} before the final node")
        dw = brownian_increments(seed, STREAM_COUPLING, k, m, d, dt, threads)
        mu_k, nu_k = law(mf, mu0, k), law(nf, nu0, k)
        sx, sy = spec.diffusion(t, x, mu_k), spec.diffusion(t, y, nu_k)
        _check_invertible(sx, k)
        bx, by = spec.drift(t, x, mu_k), spec.drift(t, y, nu_k)
        x_new = x + bx * dt + np.einsum("mij,mj->mi", sx, dw)
        if k < k0 - 1:
            h = _solve(sx, x - y) / z[k]
            si = -np.sum(h * dw, axis=1)
            qt = 0.5 * np.sum(h * h, axis=1) * dt
            stoch += si
            quad += qt
            log_r += si - qt
            y = y + by * dt + np.einsum("mij,mj->mi", sy, dw + h * dt)
        else:
            gap_pre = np.linalg.norm(x - y, axis=1)
            snorm = np.linalg.norm(sx, ord=2, axis=(1, 2)) if d > 1 else np.abs(sx[:, 0, 0])
            tol = np.full(m, merge_tol) if merge_tol is not None else merge_factor * np.sqrt(dt) * snorm
            merged = gap_pre <= tol
            h = _solve(sx, x - y) / z[k]
            y_reg = y + by * dt + np.einsum("mij,mj->mi", sy, dw + h * dt)
            si = -np.sum(h * dw, axis=1)
            qt = 0.5 * np.sum(h * h, axis=1) * dt
            _check_invertible(sy, k)
            # dw_tilde = dw + corr is the noise that would carry Y onto X_new.
            corr = _solve(sy, x - y + (bx - by) * dt + np.einsum("mij,mj->mi", sx - sy, dw))
            if d == 1:
                logdet = np.log(np.abs(sx[:, 0, 0] / sy[:, 0, 0]))
            else:
                logdet = np.linalg.slogdet(sx)[1] - np.linalg.slogdet(sy)[1]
            lr_merge = -np.sum((2 * dw + corr) * corr, axis=1) / (2 * dt) + logdet
            log_r += np.where(merged, lr_merge, si - qt)
            stoch += np.where(merged, 0.0, si)
            quad += np.where(merged, 0.0, qt)
            y = np.where(merged[:, None], x_new, y_reg)
        x = x_new
        if store_paths:
            xs[:, k + 1], ys[:, k + 1] = x, y
            noise[:, k] = dw
    if not np.all(np.isfinite(log_r)):
        raise FloatingPointError("non-finite Girsanov log-weight")
    info = {"seed": seed, "stream": STREAM_COUPLING, "merge_factor": merge_factor,
            "merge_tol": merge_tol, "gamma": gamma}
    return CouplingRun(grid.truncate(t0), t0, gamma, z, x, y, gap_pre, stoch, quad,
                       WeightVector(log_r, merged), tol, perm, xs, ys, noise, info)


def entropy_estimate(run: CouplingRun) -> dict:
    """E[R log R] with its standard error, next to W_2(mu0, nu0)^2 / t0."""
    lr = run.weights.log_R
    r = np.exp(lr)
    if np.any(r <= 0):
        raise ValueError("non-positive Girsanov weight")
    v = r * lr
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return {"value": float(v.mean()), "se": se,
            "quadratic": float(np.mean(r * run.quad_term)),
            "quadratic_se": float(np.std(r * run.quad_term, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0}


def anchored_exponential(alpha: float, anchor: float, coord: int = 0):
    """f(x) = max(1, exp(alpha (x_coord - anchor))); the anchor keeps the floor inactive."""
    def f(x):
        x = np.atleast_2d(x)
        return np.maximum(1.0, np.exp(alpha * (x[:, coord] - anchor)))
    f.alpha, f.anchor = alpha, anchor
    return f


def _mean_se(v):
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def _terminal(spec, ens, grid, t0, seed, stream, threads, flow):
    sub = grid.truncate(t0)
    if spec.measure_free:
        return euler_frozen(spec, None, ens, sub, seed, stream, threads, keep_noise=False).terminal().points
    if flow is not None:
        return flow[sub.n_steps].points
    return particle_system(spec, ens, sub, seed, stream, threads, keep_noise=False)[0].terminal().points


def _check_f(vals, name="f"):
    if np.any(vals < 1):
        raise ValueError(f"{name} < 1 on {int(np.sum(vals < 1))} samples; the log-Harnack test needs f >= 1")


@dataclass
class HarnackReport:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self) -> dict:
        return dict(self.values)


def log_harnack_check(spec: CoefficientSpec, f, mu0, nu0, t0: float, grid: TimeGrid, seed: int = 0,
                      C: float | None = None, run: CouplingRun | None = None, threads: int | None = None,
                      **coupling_kw) -> HarnackReport:
    """P log f(nu0) <= log P f(mu0) + entropy  and  <= log P f(mu0) + C W_2^2 / (t0 ^ 1)."""
    mu0, nu0 = as_ensemble(mu0), as_ensemble(nu0)
    flows = _flows(spec, mu0, nu0, grid.truncate(t0), seed, threads)
    x_mu = _terminal(spec, mu0, grid, t0, seed, STREAM_MAIN, threads, flows[0])
    x_nu = _terminal(spec, nu0, grid, t0, seed, STREAM_NU, threads, flows[1])
    f_mu, f_nu = f(x_mu), f(x_nu)
    _check_f(f_mu)
    _check_f(f_nu)
    lhs, lhs_se = _mean_se(np.log(f_nu))
    pf, pf_se = _mean_se(f_mu)
    log_pf, log_pf_se = float(np.log(pf)), pf_se / pf
    w2 = w_theta(mu0, nu0, 2.0)
    if run is None:
        run = coupled_simulate(spec, mu0, nu0, t0, grid, seed=seed, flows=flows, threads=threads, **coupling_kw)
    ent = entropy_estimate(run)
    tt = min(t0, 1.0)
    gap = lhs - log_pf
    gap_se = float(np.hypot(lhs_se, log_pf_se))
    min_c = max(0.0, tt * gap / w2**2) if w2 > 0 else 0.0
    c_used = min_c if C is None else float(C)
    rhs1 = log_pf + ent["value"]
    rhs2 = log_pf + (c_used / tt) * w2**2
    out = {
        "lhs": lhs, "lhs_se": lhs_se, "log_Pf": log_pf, "log_Pf_se": log_pf_se,
        "entropy": ent["value"], "entropy_se": ent["se"],
        "entropy_quadratic": ent["quadratic"], "entropy_quadratic_se": ent["quadratic_se"],
        "rhs_coupling": rhs1, "rhs_coupling_se": float(np.hypot(log_pf_se, ent["se"])),
        "rhs_C": rhs2, "rhs_C_se": log_pf_se, "C": c_used,
        "slack": lhs - rhs1, "slack_se": float(np.sqrt(lhs_se**2 + log_pf_se**2 + ent["se"] ** 2)),
        "slack_C": lhs - rhs2, "slack_C_se": gap_se,
        "minimal_C": min_c, "minimal_C_se": tt * gap_se / w2**2 if w2 > 0 else 0.0,
        "W2": w2, "t0": t0, "mean_R": run.weights.mean, "mean_R_se": run.weights.se,
        "floor_active_fraction": float(np.mean(np.concatenate([f_mu, f_nu]) <= 1.0)),
        "merge": run.merge_stats(), "gamma": run.gamma,
    }
    if flows[0] is not None and w2 > 0:
        ratios = [w_theta(flows[0][k], flows[1][k], 2.0) / w2 for k in range(len(flows[0]))]
        out["flow_ratio_sup"] = float(max(ratios))
    return HarnackReport(out)


def power_harnack_check(spec: CoefficientSpec, f, p: float, mu0, nu0, t0: float, grid: TimeGrid,
                        seed: int = 0, c: float | None = None, run: CouplingRun | None = None,
                        threads: int | None = None, **coupling_kw) -> HarnackReport:
    """(P f)^p(nu0) <= P f^p(mu0) exp(c W_2^2 / (t0 ^ 1)), in log form."""
    if not p > 1:
        raise ValueError("p must exceed 1")
    mu0, nu0 = as_ensemble(mu0), as_ensemble(nu0)
    flows = _flows(spec, mu0, nu0, grid.truncate(t0), seed, threads)
    x_mu = _terminal(spec, mu0, grid, t0, seed, STREAM_MAIN, threads, flows[0])
    x_nu = _terminal(spec, nu0, grid, t0, seed, STREAM_NU, threads, flows[1])
    f_mu, f_nu = f(x_mu), f(x_nu)
    if np.any(f_mu <= 0) or np.any(f_nu <= 0):
        raise ValueError("f must be positive")
    m_nu, se_nu = _mean_se(f_nu)
    m_mu, se_mu = _mean_se(f_mu**p)
    log_lhs, log_lhs_se = p * np.log(m_nu), p * se_nu / m_nu
    log_rhs, log_rhs_se = float(np.log(m_mu)), se_mu / m_mu
    w2 = w_theta(mu0, nu0, 2.0)
    tt = min(t0, 1.0)
    gap = float(log_lhs - log_rhs)
    gap_se = float(np.hypot(log_lhs_se, log_rhs_se))
    min_c = max(0.0, tt * gap / w2**2) if w2 > 0 else 0.0
    if run is None:
        run = coupled_simulate(spec, mu0, nu0, t0, grid, seed=seed, flows=flows, threads=threads, **coupling_kw)
    rq = np.exp(run.weights.log_R * (p / (p - 1)))
    mq, mq_se = _mean_se(rq)
    log_factor = (p - 1) * np.log(mq)
    out = {
        "p": p, "log_lhs": float(log_lhs), "log_lhs_se": float(log_lhs_se),
        "log_rhs0": log_rhs, "log_rhs0_se": float(log_rhs_se),
        "minimal_c": min_c, "minimal_c_se": tt * gap_se / w2**2 if w2 > 0 else 0.0,
        "log_coupling_factor": float(log_factor), "log_coupling_factor_se": float((p - 1) * mq_se / mq),
        "slack_coupling": float(log_lhs - log_rhs - log_factor),
        "W2": w2, "t0": t0, "mean_R": run.weights.mean, "mean_R_se": run.weights.se,
    }
    if c is not None:
        slack = float(log_lhs - log_rhs - c * w2**2 / tt)
        out.update({"c": c, "slack_c": slack, "violated": bool(slack > 3 * gap_se)})
    return HarnackReport(out)


def power_harnack_probe(spec, f, mu0, nu0, t0, grid, ps=(1.5, 2.0, 4.0), c: float | None = None,
                        seed: int = 0, **kw) -> list:
    """Run power_harnack_check over several p, sharing one coupling run."""
    mu0, nu0 = as_ensemble(mu0), as_ensemble(nu0)
    run = coupled_simulate(spec, mu0, nu0, t0, grid, seed=seed, **kw)
    return [power_harnack_check(spec, f, p, mu0, nu0, t0, grid, seed, c, run) for p in ps]
