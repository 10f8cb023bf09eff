"""Monte Carlo checks of Krylov occupation bounds and Khasminskii exponential moments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSpec
from .fields import GridField, lpq_norm
from .model import Ensemble, MeasureFlow, PathBundle, TimeGrid
from .rng import STREAM_AUX


def _values_along(paths: PathBundle, f, k_lo: int, k_hi: int) -> np.ndarray:
    """f(t_k, X_k) for k in [k_lo, k_hi], shape (M, k_hi - k_lo + 1)."""
    cols = []
    for k in range(k_lo, k_hi + 1):
        t, x = paths.grid.time(k), paths.paths[:, k, :]
        v = f.evaluate(t, x) if isinstance(f, GridField) else np.asarray(f(t, x), dtype=np.float64)
        if np.any(v < 0):
            raise ValueError("f must be non-negative")
        cols.append(v)
    return np.stack(cols, axis=1)


def _check_nonneg(f):
    if isinstance(f, GridField) and np.any(f.values < 0):
        raise ValueError("f must be non-negative")


def path_integrals(paths: PathBundle, f, s: float, t: float) -> np.ndarray:
    """Per-path trapezoid integral of f(r, X_r) over [s, t] (grid nodes)."""
    _check_nonneg(f)
    ks, kt = paths.grid.node_of(s), paths.grid.node_of(t)
    if kt < ks:
        raise ValueError("need s <= t")
    if kt == ks:
        return np.zeros(paths.size)
    v = _values_along(paths, f, ks, kt)
    return 0.5 * paths.grid.dt * (v[:, :-1] + v[:, 1:]).sum(axis=1)


def occupation_functional(paths: PathBundle, f, s: float, t: float) -> tuple[float, float]:
    """Monte Carlo mean of int_s^t f(r, X_r) dr with its standard error."""
    vals = path_integrals(paths, f, s, t)
    se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
    return float(vals.mean()), se


def bm_occupation_oracle(t: float = 1.0, a: float = 1.0) -> float:
    """E int_0^t 1{|W_r| <= a} dr = int_0^t (2 Phi(a/sqrt r) - 1) dr for BM from 0."""
    from scipy.integrate import quad
    from scipy.special import erf

    return quad(lambda r: erf(a / np.sqrt(2 * r)) if r > 0 else 1.0, 0.0, t, limit=200)[0]


@dataclass
class KrylovFit:
    delta_hat: float
    C_hat: float
    intercept: float
    norm: float
    points: list
    residuals: list

    @property
    def delta_positive(self) -> bool:
        return self.delta_hat > 0

    def to_dict(self) -> dict:
        return {"delta_hat": self.delta_hat, "C_hat": self.C_hat, "intercept": self.intercept,
                "norm": self.norm, "ladder": self.points, "residuals": self.residuals,
                "delta_positive": self.delta_positive}


def default_ladder(grid: TimeGrid, n_points: int = 8, s: float | None = None) -> list:
    """Nested intervals [s, s + tau] with tau spread log-uniformly over two decades."""
    s = grid.t_start if s is None else s
    ks = grid.node_of(s)
    room = grid.n_steps - ks
    if room < 100:
        raise ValueError("need at least 100 steps after s for a two-decade ladder")
    ks_all = np.unique(np.round(np.geomspace(room / 100, room, n_points)).astype(int))
    return [(s, grid.time(ks + j)) for j in ks_all]


def krylov_fit(paths: PathBundle, f: GridField, p: float, q: float, ladder=None,
               norm: float | None = None) -> KrylovFit:
    """Fit estimate(s, t) ~ C (t - s)^delta ||f||_{L^q_p} on a ladder of intervals."""
    ladder = default_ladder(paths.grid) if ladder is None else list(ladder)
    if len(ladder) < 4:
        raise ValueError(f"need at least 4 ladder points, got {len(ladder)}")
    if norm is None:
        norm = lpq_norm(f, p, q, paths.grid.t_start, paths.grid.t_end)
    lengths, est, pts = [], [], []
    for s, t in ladder:
        e, se = occupation_functional(paths, f, s, t)
        if e <= 0:
            raise ValueError(f"zero occupation on [{s}, {t}]; the ladder cannot be fitted in log scale")
        lengths.append(t - s)
        est.append(e)
        pts.append({"s": s, "t": t, "estimate": e, "se": se})
    lx, ly = np.log(lengths), np.log(est)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    c_hat = max(e / (tau**slope * norm) for e, tau in zip(est, lengths)) if norm > 0 else math.inf
    return KrylovFit(float(slope), float(c_hat), float(intercept), float(norm), pts, resid.tolist())


@dataclass
class KhasminskiiReport:
    estimate: float
    se: float
    jensen_lower: float
    moments: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def khasminskii_exp(paths: PathBundle, f, lam: float, s: float | None = None, t: float | None = None,
                    delta: float = 1.0, c: float = 1.0, norm: float | None = None,
                    p: float = 2.0, q: float = 2.0) -> KhasminskiiReport:
    """Monte Carlo E exp(lam int_s^t f(X_r) dr) plus the moment chain n = 1..4.

    The moment table compares E[(int f)^n] with the envelope
    n! (c (t - s)^delta ||f||)^n built from fitted Krylov constants.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    s = paths.grid.t_start if s is None else s
    t = paths.grid.t_end if t is None else t
    ints = path_integrals(paths, f, s, t)
    top = lam * float(ints.max()) if ints.size else 0.0
    if top > 700:
        raise OverflowError(f"lam * max path integral = {top:.1f} overflows exp; use a smaller lambda")
    w = np.exp(lam * ints)
    se = float(w.std(ddof=1) / np.sqrt(w.size)) if w.size > 1 else 0.0
    if norm is None:
        norm = lpq_norm(f, p, q, s, t) if isinstance(f, GridField) else 1.0
    table = []
    for n in range(1, 5):
        mom = float(np.mean(ints**n))
        env = math.factorial(n) * (c * (t - s) ** delta * norm) ** n
        table.append({"n": n, "moment": mom, "envelope": env, "ratio": mom / env if env > 0 else math.inf})
    return KhasminskiiReport(float(w.mean()), se, float(np.exp(lam * ints.mean())), table)


@dataclass
class MarkovSpotCheck:
    conditional: np.ndarray
    conditional_se: np.ndarray
    pathwise: np.ndarray
    mean_gap: float
    mean_gap_se: float

    @property
    def consistent(self) -> bool:
        return abs(self.mean_gap) <= 3 * self.mean_gap_se + 1e-12


def markov_spot_check(spec: CoefficientSpec, paths: PathBundle, f, s: float, t: float,
                      n_sub: int = 20, n_inner: int = 200, seed: int = 0) -> MarkovSpotCheck:
    """Restart from X_s for a subsample and compare conditional and pathwise occupations."""
    from .simulate import euler_frozen

    grid = paths.grid
    ks, kt = grid.node_of(s), grid.node_of(t)
    sub = TimeGrid(grid.time(ks), grid.time(kt), kt - ks)
    idx = np.linspace(0, paths.size - 1, min(n_sub, paths.size)).astype(int)
    flow = None
    if not spec.measure_free:
        flow = MeasureFlow(sub, tuple(paths.at(k) for k in range(ks, kt + 1)))
    pathwise = path_integrals(paths, f, s, t)[idx]
    cond, cond_se = [], []
    for j, i in enumerate(idx):
        x0 = Ensemble.dirac(paths.paths[i, ks], n_inner)
        inner = euler_frozen(spec, flow, x0, sub, seed + j, STREAM_AUX, keep_noise=False)
        e, se = occupation_functional(inner, f, sub.t_start, sub.t_end)
        cond.append(e)
        cond_se.append(se)
    cond, cond_se = np.array(cond), np.array(cond_se)
    diff = pathwise - cond
    gap_se = float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else float(cond_se.max())
    return MarkovSpotCheck(cond, cond_se, pathwise, float(diff.mean()), gap_se)
