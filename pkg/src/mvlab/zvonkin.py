"""One-dimensional Zvonkin transform.

Solves  u_t + 1/2 sigma^2 u_xx + b u_x + b = lambda u,  u(T) = 0  backward in
time by finite differences and checks the Ito formula for theta = x + u.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .coefficients import CoefficientSpec
from .fields import GridField
from .model import Ensemble, TimeGrid, as_ensemble
from .rng import STREAM_MAIN
from .simulate import euler_frozen, particle_system


@dataclass(frozen=True)
class Lattice:
    """Node lattice: nx points on [x_lo, x_hi], nt steps on [t_start, T]."""

    x_lo: float
    x_hi: float
    nx: int
    T: float
    nt: int
    t_start: float = 0.0

    def __post_init__(self):
        if not self.x_lo < self.x_hi or self.nx < 3:
            raise ValueError("need x_lo < x_hi and at least 3 space nodes")
        if not self.t_start < self.T or self.nt < 1:
            raise ValueError("need t_start < T and nt >= 1")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.nx)

    @property
    def t(self) -> np.ndarray:
        return self.t_start + np.arange(self.nt + 1) * self.dt

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / (self.nx - 1)

    @property
    def dt(self) -> float:
        return (self.T - self.t_start) / self.nt


@dataclass(frozen=True)
class UField:
    lattice: Lattice
    u: np.ndarray
    lam: float

    def _locate(self, t):
        lat = self.lattice
        k = (t - lat.t_start) / lat.dt
        kr = int(round(k))
        if abs(k - kr) > 1e-7 or kr < 0 or kr > lat.nt:
            raise ValueError(f"time {t} is not a lattice node")
        return kr

    def at(self, t, x) -> np.ndarray:
        """u(t, x) by linear interpolation in x (t must be a lattice node)."""
        lat = self.lattice
        return np.interp(x, lat.x, self.u[self._locate(t)])

    def grad_at(self, t, x) -> np.ndarray:
        lat = self.lattice
        return np.interp(x, lat.x, np.gradient(self.u[self._locate(t)], lat.dx))

    def theta(self, t, x) -> np.ndarray:
        return x + self.at(t, x)

    def to_gridfield(self) -> GridField:
        # Lattice nodes become cell centres.
        lat = self.lattice
        h, dt = lat.dx, lat.dt
        return GridField([lat.x_lo - h / 2], [lat.x_hi + h / 2], self.u,
                         (lat.t_start - dt / 2, lat.T + dt / 2))

    @classmethod
    def from_gridfield(cls, g: GridField, lam: float) -> "UField":
        h = g.spacing[0]
        dt = g.dt
        lat = Lattice(g.lower[0] + h / 2, g.upper[0] - h / 2, g.shape[0],
                      g.t_range[1] - dt / 2, g.nt - 1, g.t_range[0] + dt / 2)
        return cls(lat, np.array(g.values), lam)


def _coef(c, t, x):
    if callable(c):
        return np.broadcast_to(np.asarray(c(t, x), dtype=np.float64), x.shape)
    return np.full_like(x, float(c))


def spec_fields(spec: CoefficientSpec, mu: Ensemble | None = None):
    """(b(t, x), sigma(t, x)) scalar callables from a 1-D coefficient spec."""
    if spec.dim != 1:
        raise ValueError("the Zvonkin solver is one-dimensional")
    mu = mu if mu is not None else Ensemble.dirac([0.0])

    def b(t, x):
        return spec.drift(t, np.asarray(x)[:, None], mu)[:, 0]

    def s(t, x):
        return spec.diffusion(t, np.asarray(x)[:, None], mu)[:, 0, 0]
    return b, s


def solve_backward_pde(b, sigma, lam: float, lattice: Lattice, scheme: str = "implicit") -> UField:
    """Backward solve from u(T) = 0 with the drift-only ODE at the box edges."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    lat = lattice
    x, dx, dt = lat.x, lat.dx, lat.dt
    u = np.zeros((lat.nt + 1, lat.nx))
    for k in range(lat.nt - 1, -1, -1):
        t = lat.t_start + k * dt
        bv, sv = _coef(b, t, x), _coef(sigma, t, x)
        diff = 0.5 * sv**2 / dx**2
        adv = bv / (2 * dx)
        lo, up = diff - adv, diff + adv
        old = u[k + 1]
        new = np.empty_like(old)
        if scheme == "implicit":
            ab = np.zeros((3, lat.nx))
            ab[1] = 1.0 + dt * (2 * diff + lam)
            ab[0, 2:] = -dt * up[1:-1]
            ab[2, :-2] = -dt * lo[1:-1]
            rhs = old + dt * bv
            for j in (0, -1):
                ab[1, j] = 1.0
                rhs[j] = (old[j] + dt * bv[j]) / (1.0 + lam * dt)
            ab[0, 1] = 0.0
            ab[2, -2] = 0.0
            new = solve_banded((1, 1), ab, rhs)
        elif scheme == "explicit":
            ratio = float(np.max(sv**2)) * dt / dx**2
            if ratio > 0.5:
                raise ValueError(f"explicit scheme unstable: sigma^2 dt / dx^2 = {ratio:.3g} > 0.5")
            lap = lo[1:-1] * old[:-2] - 2 * diff[1:-1] * old[1:-1] + up[1:-1] * old[2:]
            new[1:-1] = old[1:-1] + dt * (lap + bv[1:-1] - lam * old[1:-1])
            for j in (0, -1):
                new[j] = old[j] + dt * (bv[j] - lam * old[j])
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        u[k] = new
    return UField(lat, u, lam)


def gradient_bounds(uf: UField) -> tuple[float, float, float]:
    """(sup|u|, sup|u_x|, sup|u_xx|) over the interior lattice, central differences."""
    u, dx = uf.u, uf.lattice.dx
    ux = (u[:, 2:] - u[:, :-2]) / (2 * dx)
    uxx = (u[:, 2:] - 2 * u[:, 1:-1] + u[:, :-2]) / dx**2
    return float(np.abs(u[:, 1:-1]).max()), float(np.abs(ux).max()), float(np.abs(uxx).max())


def theta_monotone(uf: UField) -> bool:
    """theta = x + u strictly increasing in x at every time node."""
    th = uf.lattice.x[None, :] + uf.u
    return bool(np.all(np.diff(th, axis=1) > 0))


def lambda_threshold(b, sigma, lattice: Lattice, target: float = 0.2, lam_lo: float = 1e-2,
                     lam_hi: float = 1e5, iters: int = 40, rtol: float = 1e-3) -> dict:
    """Smallest lambda (bisection in log lambda) with |u| + |u_x| + |u_xx| <= target."""
    def total(lam):
        return sum(gradient_bounds(solve_backward_pde(b, sigma, lam, lattice)))

    hi_val = total(lam_hi)
    if hi_val > target:
        raise ValueError(f"even lambda={lam_hi:g} gives {hi_val:.4g} > {target}")
    lo_val = total(lam_lo)
    if lo_val <= target:
        return {"lambda": lam_lo, "total": lo_val, "iterations": 0}
    lo, hi = np.log(lam_lo), np.log(lam_hi)
    n = 0
    for n in range(1, iters + 1):
        mid = 0.5 * (lo + hi)
        if total(np.exp(mid)) <= target:
            hi = mid
        else:
            lo = mid
        if hi - lo < rtol:
            break
    lam = float(np.exp(hi))
    return {"lambda": lam, "total": total(lam), "iterations": n,
            "bounds": gradient_bounds(solve_backward_pde(b, sigma, lam, lattice))}


def boundary_sensitivity(b, sigma, lam: float, lattice: Lattice) -> float:
    """sup |u_box - u_doubled_box| on the original nodes."""
    lat = lattice
    half = 0.5 * (lat.x_hi - lat.x_lo)
    mid = 0.5 * (lat.x_hi + lat.x_lo)
    big = Lattice(mid - 2 * half, mid + 2 * half, 2 * lat.nx - 1, lat.T, lat.nt, lat.t_start)
    u1 = solve_backward_pde(b, sigma, lam, lat).u
    u2 = solve_backward_pde(b, sigma, lam, big).u
    lo = (lat.nx - 1) // 2
    return float(np.abs(u2[:, lo:lo + lat.nx] - u1).max())


def ito_consistency(uf: UField, spec: CoefficientSpec, x0, grid: TimeGrid, seed: int = 0,
                    threads: int | None = None) -> dict:
    """RMS over paths and nodes of theta_t(X_t) minus its Euler-integrated Ito expansion.

    B_{k+1} = B_k + lam u(t_k, X_k) dt + (1 + u_x) sigma(t_k, X_k) dW_k with the
    increments that drove X.
    """
    lat = uf.lattice
    ratio = grid.dt / lat.dt
    if abs(ratio - round(ratio)) > 1e-7 or grid.t_start < lat.t_start - 1e-12 or grid.t_end > lat.T + 1e-12:
        raise ValueError("simulation grid nodes must be lattice time nodes")
    x0 = as_ensemble(x0)
    if spec.measure_free:
        bundle = euler_frozen(spec, None, x0, grid, seed, STREAM_MAIN, threads)
        law = lambda k: x0  # noqa: E731
    else:
        bundle, flow = particle_system(spec, x0, grid, seed, STREAM_MAIN, threads)
        law = flow.__getitem__
    X = bundle.paths[:, :, 0]
    A = np.empty_like(X)
    B = np.empty_like(X)
    A[:, 0] = uf.theta(grid.time(0), X[:, 0])
    B[:, 0] = A[:, 0]
    for k in range(grid.n_steps):
        t = grid.time(k)
        A[:, k + 1] = uf.theta(grid.time(k + 1), X[:, k + 1])
        sig = spec.diffusion(t, X[:, k:k + 1], law(k))[:, 0, 0]
        B[:, k + 1] = (B[:, k] + uf.lam * uf.at(t, X[:, k]) * grid.dt
                       + (1.0 + uf.grad_at(t, X[:, k])) * sig * bundle.noise[:, k, 0])
    gap = A - B
    return {"rms": float(np.sqrt(np.mean(gap**2))), "terminal_rms": float(np.sqrt(np.mean(gap[:, -1] ** 2))),
            "dt": grid.dt}
