"""Coefficient families for distribution-dependent SDEs and their validators.

Evaluators are vectorised over particles: ``drift(t, x, mu)`` takes
``x`` of shape (M, d) and returns (M, d); ``diffusion(t, x, mu)`` returns
(M, d, d).  ``mu`` is the current :class:`~mvlab.model.Ensemble`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dini import DiniModulus
from .fields import GridField
from .model import Ensemble, as_ensemble
from .transport import w_theta_exact

Evaluator = Callable[[float, np.ndarray, Ensemble], np.ndarray]


@dataclass(frozen=True)
class CoefficientSpec:
    drift: Evaluator
    diffusion: Evaluator
    dim: int
    diffusion_distribution_free: bool = False
    diffusion_state_free: bool = False
    has_singular_drift: bool = False
    measure_free: bool = False
    K: float = 1.0
    L: float = 0.0
    phi: DiniModulus | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    integral: "IntegralTypeSpec | None" = None

    def b(self, t, x, mu) -> np.ndarray:
        """Drift at a single point or a batch."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out = self.drift(t, np.atleast_2d(x).reshape(-1, self.dim), as_ensemble(mu))
        return out[0] if single else out

    def sigma(self, t, x, mu) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out = self.diffusion(t, np.atleast_2d(x).reshape(-1, self.dim), as_ensemble(mu))
        return out[0] if single else out


def _matrix(a, d) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        return a * np.eye(d)
    a = a.reshape(d, d) if a.size == d * d else np.diag(a.reshape(d))
    return a


def _vector(c, d) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.broadcast_to(c, (d,)).copy() if c.ndim == 0 or c.size == 1 else c.reshape(d)


def _const_diffusion(s: np.ndarray):
    def diffusion(t, x, mu):
        return np.broadcast_to(s, (x.shape[0],) + s.shape)
    return diffusion


def _ellipticity_K(s: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(s @ s.T)
    return float(max(ev.max(), 1.0 / ev.min(), 1.0))


def constant(c=0.0, s=1.0, dim: int = 1) -> CoefficientSpec:
    """b = c, sigma = s (scalar times identity or a full matrix)."""
    cv, sm = _vector(c, dim), _matrix(s, dim)

    def drift(t, x, mu):
        return np.broadcast_to(cv, x.shape).copy()

    K = _ellipticity_K(sm) if np.any(sm) else 1.0
    return CoefficientSpec(drift, _const_diffusion(sm), dim, True, True, False, True, K, 0.0, None,
                           "constant", {"c": cv.tolist(), "s": sm.tolist()})


def affine_meanfield(A=-1.0, B=1.0, c=0.0, sigma=1.0, sigma_wiggle: float = 0.0, dim: int = 1) -> CoefficientSpec:
    """b(x, mu) = A x + B mean(mu) + c with sigma(x) = sigma (1 + a sin x_0) I.

    ``sigma_wiggle`` (a, |a| < 1) makes the noise state dependent while
    keeping it distribution free.
    """
    Am, Bm, cv = _matrix(A, dim), _matrix(B, dim), _vector(c, dim)
    s = float(sigma)
    if not abs(sigma_wiggle) < 1:
        raise ValueError("sigma_wiggle must lie in (-1, 1)")

    def drift(t, x, mu):
        return x @ Am.T + (Bm @ mu.mean()) + cv

    if sigma_wiggle == 0:
        diffusion = _const_diffusion(s * np.eye(dim))
    else:
        def diffusion(t, x, mu):
            scale = s * (1.0 + sigma_wiggle * np.sin(x[:, 0]))
            return scale[:, None, None] * np.eye(dim)
    lo, hi = s * (1 - abs(sigma_wiggle)), s * (1 + abs(sigma_wiggle))
    K = float(max(hi**2, 1.0 / lo**2, 1.0))
    lip_a = float(np.linalg.norm(Am, 2))
    phi = DiniModulus.hoelder(lip_a, 1.0) if lip_a > 0 else None
    return CoefficientSpec(drift, diffusion, dim, True, sigma_wiggle == 0, False, not np.any(Bm), K,
                           float(np.linalg.norm(Bm, 2)), phi, "affine_meanfield",
                           {"A": Am.tolist(), "B": Bm.tolist(), "c": cv.tolist(), "sigma": s,
                            "sigma_wiggle": sigma_wiggle})


@dataclass(frozen=True)
class IntegralTypeSpec:
    """b(t,x,mu) = B(t, x, mu(psi_b(t,x,.))), sigma likewise with psi_sigma.

    Kernels map (t, x (M,d), y (N,d)) to (M, N, k); outer maps take
    (t, x (M,d), r (M,k)) and return (M,d) or (M,d,d).
    """

    outer_b: Callable
    outer_sigma: Callable
    kernel_b: Callable
    kernel_sigma: Callable
    delta: float
    sup_bound: float
    dim: int


def _kernel_average(kernel, t, x, y):
    # Chunk the (M, N, k) intermediate to bound memory.
    m, n = x.shape[0], y.shape[0]
    rows = max(1, int(2_000_000 // max(n, 1)))
    out = []
    for i in range(0, m, rows):
        k = kernel(t, x[i:i + rows], y)
        if not np.all(np.isfinite(k)):
            raise ValueError("non-finite kernel output")
        out.append(k.mean(axis=1))
    return np.concatenate(out, axis=0)


def eval_integral_type(spec: IntegralTypeSpec, t, x, mu):
    """Return (drift, diffusion) for an integral-type coefficient."""
    mu = as_ensemble(mu)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = np.atleast_2d(x).reshape(-1, spec.dim)
    rb = _kernel_average(spec.kernel_b, t, xs, mu.points)
    rs = _kernel_average(spec.kernel_sigma, t, xs, mu.points)
    b, s = spec.outer_b(t, xs, rb), spec.outer_sigma(t, xs, rs)
    return (b[0], s[0]) if single else (b, s)


KERNELS = {
    "zero": (lambda t, x, y: np.zeros((x.shape[0], y.shape[0], x.shape[1])), 0.0, 0.0),
    "clamp": (lambda t, x, y: np.broadcast_to(np.clip(y, -1.0, 1.0)[None], (x.shape[0],) + y.shape), 1.0, 1.0),
    "sin": (lambda t, x, y: np.broadcast_to(np.sin(y)[None], (x.shape[0],) + y.shape), 1.0, 1.0),
    "tanh": (lambda t, x, y: np.tanh(y[None, :, :] - x[:, None, :]), 1.0, 1.0),
}


def integral_type(kernel: str = "clamp", scale: float = 1.0, sigma: float = 1.0,
                  sigma_mod: float = 0.0, sigma_kernel: str | None = None, dim: int = 1) -> CoefficientSpec:
    """Integral-type family: b = scale * r_b, sigma = s (1 + a tanh(r_sigma_0)) I."""
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel tag {kernel!r}; choose from {sorted(KERNELS)}")
    sigma_kernel = sigma_kernel or kernel
    if sigma_kernel not in KERNELS:
        raise ValueError(f"unknown kernel tag {sigma_kernel!r}")
    if not abs(sigma_mod) < 1:
        raise ValueError("sigma_mod must lie in (-1, 1)")
    kb, delta_b, sup_b = KERNELS[kernel]
    ks, delta_s, sup_s = KERNELS[sigma_kernel]
    s = float(sigma)
    eye = np.eye(dim)

    def outer_sigma(t, x, r):
        return (s * (1.0 + sigma_mod * np.tanh(r[:, 0])))[:, None, None] * eye

    ispec = IntegralTypeSpec(lambda t, x, r: scale * r, outer_sigma, kb, ks,
                             max(delta_b, delta_s), max(sup_b, sup_s), dim)

    def drift(t, x, mu):
        return scale * _kernel_average(kb, t, x, mu.points)

    if sigma_mod == 0:
        diffusion = _const_diffusion(s * eye)
    else:
        def diffusion(t, x, mu):
            return outer_sigma(t, x, _kernel_average(ks, t, x, mu.points))
    lo, hi = s * (1 - abs(sigma_mod)), s * (1 + abs(sigma_mod))
    K = float(max(hi**2, 1.0 / lo**2, 1.0, (abs(scale) * sup_b) ** 2 * dim))
    # tanh(y - x) is Lipschitz in x as well; the other kernels ignore x.
    phi = DiniModulus.hoelder(abs(scale), 1.0) if kernel == "tanh" and scale else None
    spec = CoefficientSpec(drift, diffusion, dim, sigma_mod == 0, kernel != "tanh" or sigma_mod == 0,
                           False, kernel == "zero", K, abs(scale) * delta_b, phi, "integral_type",
                           {"kernel": kernel, "scale": scale, "sigma": s, "sigma_mod": sigma_mod,
                            "sigma_kernel": sigma_kernel})
    return replace(spec, integral=ispec)


def singular(alpha: float = 0.25, beta: float = 1.0, sigma: float = 1.0, dim: int = 1) -> CoefficientSpec:
    """b(x) = beta x |x|^-(1+alpha) on 0 < |x| <= 1, zero elsewhere (and at 0)."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")

    def drift(t, x, mu):
        r = np.linalg.norm(x, axis=1)
        on = (r > 0) & (r <= 1.0)
        scale = np.zeros_like(r)
        scale[on] = beta * r[on] ** -(1.0 + alpha)
        return x * scale[:, None]

    s = float(sigma)
    return CoefficientSpec(drift, _const_diffusion(s * np.eye(dim)), dim, True, True, True, True,
                           float(max(s**2, 1 / s**2, 1.0)), 0.0, None, "singular",
                           {"alpha": alpha, "beta": beta, "sigma": s})


def singular_square_field(alpha: float, beta: float = 1.0, dim: int = 1, half_width: float = 1.0,
                          shape: int = 400, t_range=(0.0, 1.0), nt: int = 1) -> GridField:
    """|b|^2 of the singular family on a lattice (the F in |b|^2 <= F + K)."""
    def f(t, x):
        r = np.linalg.norm(x, axis=1)
        return np.where((r > 0) & (r <= 1), beta**2 * np.where(r > 0, r, 1.0) ** (-2 * alpha), 0.0)
    return GridField.from_function(f, [-half_width] * dim, [half_width] * dim, [shape] * dim, t_range, nt)


def singular_alpha_admissible(alpha: float, p: float, dim: int) -> bool:
    """|x|^-2alpha 1_{|x|<=1} is in L^p iff 2 alpha p < d."""
    return 2 * alpha * p < dim


def dini_drift(kappa: float = 1.0, holder: float = 0.5, sigma: float = 1.0, dim: int = 1) -> CoefficientSpec:
    """b(x) = kappa sign(x) min(|x|, 1)^beta coordinatewise; constant for |x| >= 1."""
    if not 0 < holder <= 1:
        raise ValueError("holder exponent must lie in (0, 1]")

    def drift(t, x, mu):
        return kappa * np.sign(x) * np.minimum(np.abs(x), 1.0) ** holder

    s = float(sigma)
    phi = DiniModulus.hoelder(kappa * 2.0 ** (1.0 - holder) * np.sqrt(dim), holder)
    return CoefficientSpec(drift, _const_diffusion(s * np.eye(dim)), dim, True, True, False, True,
                           float(max(s**2, 1 / s**2, 1.0, kappa**2 * dim)), 0.0, phi, "dini_drift",
                           {"kappa": kappa, "holder": holder, "sigma": s})


FAMILIES = {
    "constant": constant,
    "affine_meanfield": affine_meanfield,
    "integral_type": integral_type,
    "singular": singular,
    "dini_drift": dini_drift,
}


def build_coefficients(tag: str, params: dict | None = None, dim: int = 1) -> CoefficientSpec:
    if tag not in FAMILIES:
        raise ValueError(f"unknown coefficient tag {tag!r}; choose from {sorted(FAMILIES)}")
    try:
        return FAMILIES[tag](**dict(params or {}), dim=dim)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {tag!r}: {exc}") from None


def psd_sqrt(A) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix (or a batch of them)."""
    A = np.asarray(A, dtype=np.float64)
    scale = np.max(np.abs(A), axis=(-2, -1), keepdims=True)
    asym = np.abs(A - np.swapaxes(A, -1, -2))
    if np.any(asym > 1e-8 * np.maximum(scale, 1.0)):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym.max():.3e})")
    w, v = np.linalg.eigh(0.5 * (A + np.swapaxes(A, -1, -2)))
    if np.any(w < -1e-10 * np.maximum(scale[..., 0], 1.0)):
        raise ValueError(f"matrix has a negative eigenvalue {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)[..., None, :]) @ np.swapaxes(v, -1, -2)


def _bump(u):
    u = np.asarray(u, dtype=np.float64)
    out = np.zeros_like(u)
    inside = np.abs(u) < 1
    out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
    return out


MIN_NODES = 2


def mollifier_nodes(dim: int, n: int, nodes: int = 8):
    """Offsets (Q, 1+d) in (r, z) and unit-sum weights for rho_n.

    The tensor bump lives on the cube of half-width 1/(n sqrt(d+1)), which
    sits inside the ball of radius 1/n.
    """
    if nodes < MIN_NODES:
        raise ValueError(f"need at least {MIN_NODES} quadrature nodes per axis, got {nodes}")
    if n < 1:
        raise ValueError("n must be >= 1")
    u, w = np.polynomial.legendre.leggauss(nodes)
    w = w * _bump(u)
    half = 1.0 / (n * np.sqrt(dim + 1))
    grids = np.meshgrid(*([u] * (dim + 1)), indexing="ij")
    offsets = np.stack([g.ravel() for g in grids], axis=1) * half
    weights = np.ones(offsets.shape[0])
    for g in np.meshgrid(*([w] * (dim + 1)), indexing="ij"):
        weights = weights * g.ravel()
    return offsets, weights / weights.sum()


def mollify(spec: CoefficientSpec, n: int, nodes: int = 8, horizon: float | None = None) -> CoefficientSpec:
    """Space-time convolution of b and a = sigma sigma* with rho_n.

    Outside [0, horizon] the coefficients are extended by b = 0, a = I
    before convolving; ``horizon=None`` means no extension.
    """
    offsets, weights = mollifier_nodes(spec.dim, n, nodes)
    d = spec.dim

    def outside(t):
        return horizon is not None and (t < 0 or t > horizon)

    def drift(t, x, mu):
        out = np.zeros_like(x)
        for (r, *z), w in zip(offsets, weights):
            s = t - r
            if outside(s):
                continue
            out += w * spec.drift(s, x - np.asarray(z), mu)
        return out

    def diffusion(t, x, mu):
        a = np.zeros((x.shape[0], d, d))
        for (r, *z), w in zip(offsets, weights):
            s = t - r
            if outside(s):
                a += w * np.eye(d)
                continue
            sig = spec.diffusion(s, x - np.asarray(z), mu)
            a += w * (sig @ np.swapaxes(sig, -1, -2))
        return psd_sqrt(a)

    return replace(spec, drift=drift, diffusion=diffusion, has_singular_drift=False,
                   name=f"{spec.name}*rho_{n}", params=dict(spec.params, mollified_n=n, nodes=nodes))


@dataclass(frozen=True)
class ProbePlan:
    n_points: int = 200
    n_measures: int = 12
    ensemble_size: int = 24
    box: float = 3.0
    theta: float = 2.0
    t_range: tuple = (0.0, 1.0)
    h_range: tuple = (1e-6, 1.0)
    seed: int = 0


@dataclass
class BoundsReport:
    eig_min: float
    eig_max: float
    ellipticity_ok: bool
    drift_sup_sq: float
    drift_bounded_by_K: bool
    lipschitz_ratio: float
    lipschitz_ok: bool
    sigma_lipschitz_ratio: float
    dini_ratio: float
    dini_ok: bool
    modulus: str
    K: float
    L: float
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.ellipticity_ok and self.lipschitz_ok and self.dini_ok

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items()}
        out["passed"] = self.passed
        return out


def _random_ensemble(rng, size, dim, box):
    loc = rng.uniform(-box / 2, box / 2, size=dim)
    scale = rng.uniform(0.2, 1.5)
    return Ensemble(loc + scale * rng.standard_normal((size, dim)))


def validate_bounds(spec: CoefficientSpec, probes: ProbePlan | None = None, rel_tol: float = 1e-6) -> BoundsReport:
    """Spot-check the declared K, L and Dini modulus on random probes."""
    plan = probes or ProbePlan()
    rng = np.random.default_rng(plan.seed)
    d = spec.dim
    ts = rng.uniform(*plan.t_range, size=plan.n_measures)
    mus = [_random_ensemble(rng, plan.ensemble_size, d, plan.box) for _ in range(plan.n_measures)]
    per = max(1, plan.n_points // plan.n_measures)
    notes = []

    eig_lo, eig_hi, drift_sq = np.inf, -np.inf, 0.0
    lip, sig_lip, dini = 0.0, 0.0, 0.0
    phi = spec.phi if spec.phi is not None else DiniModulus.hoelder(spec.K, 1.0)
    if spec.phi is None:
        notes.append(f"no Dini modulus declared; probing against K|x-y| with K={spec.K:g}")
    lo_h, hi_h = np.log(plan.h_range[0]), np.log(plan.h_range[1])

    for t, mu in zip(ts, mus):
        x = rng.uniform(-plan.box, plan.box, size=(per, d))
        sig = spec.diffusion(t, x, mu)
        ev = np.linalg.eigvalsh(sig @ np.swapaxes(sig, -1, -2))
        eig_lo, eig_hi = min(eig_lo, ev.min()), max(eig_hi, ev.max())
        b = spec.drift(t, x, mu)
        drift_sq = max(drift_sq, float(np.max(np.sum(b**2, axis=1))))

        u = rng.standard_normal((per, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        h = np.exp(rng.uniform(lo_h, hi_h, size=per))
        pairs = [(x, x + h[:, None] * u), (0.5 * h[:, None] * u, -0.5 * h[:, None] * u)]
        for xa, xb in pairs:
            dist = np.linalg.norm(xa - xb, axis=1)
            db = np.linalg.norm(spec.drift(t, xa, mu) - spec.drift(t, xb, mu), axis=1)
            denom = phi(dist)
            ok = denom > 0
            if np.any(ok):
                dini = max(dini, float(np.max(db[ok] / denom[ok])))
            if np.any(db[~ok] > 0):
                dini = np.inf
            ds = np.linalg.norm(spec.diffusion(t, xa, mu) - spec.diffusion(t, xb, mu), axis=(1, 2))
            sig_lip = max(sig_lip, float(np.max(ds**2 / dist**2)))

        nu = Ensemble(mu.points * rng.uniform(0.5, 1.5) + rng.normal(0, 0.5, size=d)
                      + 0.05 * rng.standard_normal(mu.points.shape))
        w = w_theta_exact(mu, nu, plan.theta)[0]
        if w > 0:
            db = np.linalg.norm(spec.drift(t, x, mu) - spec.drift(t, x, nu), axis=1)
            lip = max(lip, float(np.max(db)) / w)

    tolK = rel_tol * max(1.0, spec.K)
    ell_ok = bool(eig_lo >= 1.0 / spec.K - tolK and eig_hi <= spec.K + tolK)
    lip_ok = bool(lip <= spec.L * (1 + rel_tol) + 1e-12)
    dini_ok = bool(dini <= 1.0 + rel_tol)
    if not dini_ok:
        notes.append(f"drift increments exceed the modulus by a factor {dini:.3g}")
    if spec.has_singular_drift:
        notes.append("singular drift: |b|^2 is controlled by F + K with F in L^q_p, not by K alone")
    return BoundsReport(float(eig_lo), float(eig_hi), ell_ok, drift_sq, bool(drift_sq <= spec.K + tolK),
                        lip, lip_ok, sig_lip, dini, dini_ok,
                        "declared" if spec.phi is not None else "K-Lipschitz fallback", spec.K, spec.L, notes)
