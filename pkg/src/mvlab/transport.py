"""Wasserstein-theta distances and optimal couplings between equal-size ensembles."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .model import Ensemble, as_ensemble

EXACT_CAP = 256


class CapExceededError(ValueError):
    """Ensemble too large for the exact assignment solver."""


class SinkhornConvergenceError(RuntimeError):
    def __init__(self, message, violation):
        super().__init__(message)
        self.violation = violation


@dataclass(frozen=True)
class CouplingPlan:
    """A coupling in sparse (i, j, mass) form.

    ``cost`` is sum(mass * |x_i - y_j|^theta), i.e. W_theta^theta for an
    optimal plan.
    """

    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray
    pair_cost: np.ndarray
    cost: float
    theta: float
    method: str
    size: int

    @property
    def distance(self) -> float:
        return max(self.cost, 0.0) ** (1.0 / self.theta)

    @property
    def permutation(self) -> np.ndarray:
        if self.method == "sinkhorn":
            raise ValueError("a Sinkhorn plan is not a permutation")
        perm = np.empty(self.size, dtype=np.int64)
        perm[self.rows] = self.cols
        return perm

    def matrix(self) -> np.ndarray:
        out = np.zeros((self.size, self.size))
        out[self.rows, self.cols] = self.mass
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "j", "mass", "cost"])
        for i, j, m, c in zip(self.rows, self.cols, self.mass, self.pair_cost):
            w.writerow([int(i), int(j), repr(float(m)), repr(float(c))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _check_theta(theta):
    if not theta >= 1:
        raise ValueError(f"theta must be >= 1, got {theta}")


def _pair(mu, nu):
    mu, nu = as_ensemble(mu), as_ensemble(nu)
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if mu.size != nu.size:
        raise ValueError(f"ensembles must have equal size ({mu.size} vs {nu.size}); "
                         "resample one of them first")
    return mu, nu


def cost_matrix(x: np.ndarray, y: np.ndarray, theta: float) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    return np.linalg.norm(diff, axis=2) ** theta


def w_theta_1d(xs, ys, theta: float = 2.0) -> float:
    """Exact W_theta between equal-size uniform empirical measures on the line."""
    _check_theta(theta)
    xs = np.sort(np.asarray(xs, dtype=np.float64).ravel())
    ys = np.sort(np.asarray(ys, dtype=np.float64).ravel())
    if xs.size != ys.size:
        raise ValueError(f"unequal sizes {xs.size} and {ys.size}; resample first")
    if xs.size == 0:
        raise ValueError("empty sample")
    return float(np.mean(np.abs(xs - ys) ** theta) ** (1.0 / theta))


def _canonical(perm: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # Among identical source points (and identical targets) hand out
    # matches in index order; the cost is unchanged.
    perm = perm.copy()
    for pts, by_source in ((x, True), (y, False)):
        _, groups = np.unique(pts, axis=0, return_inverse=True)
        groups = groups.ravel()
        for g in np.unique(groups):
            idx = np.flatnonzero(groups == g)
            if idx.size < 2:
                continue
            if by_source:
                perm[idx] = np.sort(perm[idx])
            else:
                inv = np.argsort(perm)
                src = np.sort(inv[idx])
                perm[src] = idx
    return perm


def w_theta_exact(mu, nu, theta: float = 2.0, cap: int = EXACT_CAP) -> tuple[float, CouplingPlan]:
    """Exact W_theta by solving the M x M assignment problem."""
    _check_theta(theta)
    mu, nu = _pair(mu, nu)
    m = mu.size
    if m > cap:
        raise CapExceededError(f"M={m} exceeds the exact-solver cap {cap}; "
                               "use w_theta_sinkhorn (or w_theta_1d for d=1)")
    c = cost_matrix(mu.points, nu.points, theta)
    rows, cols = linear_sum_assignment(c)
    perm = _canonical(cols[np.argsort(rows)], mu.points, nu.points)
    rows = np.arange(m)
    pair_cost = c[rows, perm]
    cost = float(pair_cost.mean())
    plan = CouplingPlan(rows, perm, np.full(m, 1.0 / m), pair_cost, cost, theta, "exact-assignment", m)
    return plan.distance, plan


def _round_to_marginals(p, a, b):
    # Project an approximate plan onto the transport polytope (rows a, cols b).
    r = p.sum(axis=1)
    p = p * np.minimum(a / np.where(r > 0, r, 1.0), 1.0)[:, None]
    c = p.sum(axis=0)
    p = p * np.minimum(b / np.where(c > 0, c, 1.0), 1.0)[None, :]
    err_r = a - p.sum(axis=1)
    err_c = b - p.sum(axis=0)
    s = err_r.sum()
    if s > 0:
        p = p + np.outer(err_r, err_c) / s
    return p


def sinkhorn_plan(mu, nu, theta: float = 2.0, epsilon: float = 1e-3,
                  max_iter: int = 100_000, tol: float = 1e-6) -> CouplingPlan:
    """Entropic transport plan by log-domain Sinkhorn with epsilon scaling.

    The returned plan is rounded onto the exact marginals, so its cost is
    a feasible upper bound for W_theta^theta; the entropic bias is at most
    ``2 * epsilon * log(M)`` in cost units.
    """
    _check_theta(theta)
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    mu, nu = _pair(mu, nu)
    m = mu.size
    c = cost_matrix(mu.points, nu.points, theta)
    loga = logb = np.full(m, -np.log(m))
    f = np.zeros(m)
    g = np.zeros(m)
    eps_ladder = [epsilon]
    top = max(float(c.max()), epsilon)
    while eps_ladder[-1] * 4 < top:
        eps_ladder.append(eps_ladder[-1] * 4)
    eps_ladder.reverse()
    it = 0
    viol = np.inf
    for eps in eps_ladder:
        level_tol = tol if eps == epsilon else max(tol, 1e-4)
        while True:
            f = -eps * logsumexp((g[None, :] - c) / eps + logb[None, :], axis=1)
            g = -eps * logsumexp((f[:, None] - c) / eps + loga[:, None], axis=0)
            it += 1
            if it % 10 and it < max_iter:
                continue
            logp = (f[:, None] + g[None, :] - c) / eps + loga[:, None] + logb[None, :]
            viol = float(np.abs(np.exp(logsumexp(logp, axis=1)) - 1.0 / m).sum())
            if viol <= level_tol:
                break
            if it >= max_iter:
                raise SinkhornConvergenceError(
                    f"Sinkhorn did not converge in {max_iter} iterations "
                    f"(marginal violation {viol:.3e} at epsilon={eps:g})", viol)
    p = _round_to_marginals(np.exp(logp), np.full(m, 1.0 / m), np.full(m, 1.0 / m))
    rows, cols = np.nonzero(p > 0)
    cost = float((p * c).sum())
    return CouplingPlan(rows, cols, p[rows, cols], c[rows, cols], cost, theta, "sinkhorn", m)


def w_theta_sinkhorn(mu, nu, theta: float = 2.0, epsilon: float = 1e-3,
                     max_iter: int = 100_000, tol: float = 1e-6) -> float:
    """Regularised transport cost ``<P_eps, C>^(1/theta)``; biased upward."""
    return sinkhorn_plan(mu, nu, theta, epsilon, max_iter, tol).distance


def w_theta(mu, nu, theta: float = 2.0, method: str = "auto", cap: int = EXACT_CAP,
            epsilon: float = 1e-3) -> float:
    """Dispatching W_theta: sorted 1-D, exact assignment, or Sinkhorn."""
    mu, nu = _pair(mu, nu)
    if method == "auto":
        method = "sorted-1d" if mu.dim == 1 else ("exact-assignment" if mu.size <= cap else "sinkhorn")
    if method == "sorted-1d":
        if mu.dim != 1:
            raise ValueError("sorted-1d requires d = 1")
        return w_theta_1d(mu.points[:, 0], nu.points[:, 0], theta)
    if method == "exact-assignment":
        return w_theta_exact(mu, nu, theta, cap)[0]
    if method == "sinkhorn":
        return w_theta_sinkhorn(mu, nu, theta, epsilon)
    raise ValueError(f"unknown method {method!r}")


def optimal_initial_pairing(mu0, nu0, theta: float = 2.0, cap: int = EXACT_CAP) -> np.ndarray:
    """Permutation pairing particle i of ``mu0`` with ``perm[i]`` of ``nu0`` optimally.

    In one dimension the monotone (rank) matching is optimal for every
    theta >= 1 and has no size cap; ties are broken by index.
    """
    _check_theta(theta)
    mu0, nu0 = _pair(mu0, nu0)
    if mu0.dim == 1:
        rx = np.argsort(mu0.points[:, 0], kind="stable")
        ry = np.argsort(nu0.points[:, 0], kind="stable")
        perm = np.empty(mu0.size, dtype=np.int64)
        perm[rx] = ry
        return perm
    return w_theta_exact(mu0, nu0, theta, cap)[1].permutation


def bootstrap_to_size(ens: Ensemble, size: int, seed: int = 0) -> Ensemble:
    """Resample ``ens`` to ``size`` points (identity when sizes already agree)."""
    ens = as_ensemble(ens)
    return ens if ens.size == size else ens.resample(size, seed)
