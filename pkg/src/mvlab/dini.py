"""Dini moduli of continuity and their admissibility check."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad


@dataclass(frozen=True)
class DiniModulus:
    """A modulus phi: [0, inf) -> [0, inf).

    ``hoelder``:   phi(s) = c * s**beta.
    ``log_dini``:  phi(s) = c * (1 + log(1/s))**-(1 + eps) for s <= s0 and
                   phi(s0) above, with s0 = exp(-2 - 2*eps).  Below s0 the
                   square is concave; the constant continuation keeps it so.
    """

    family: str
    c: float = 1.0
    beta: float | None = None
    eps: float | None = None

    def __post_init__(self):
        if self.c < 0 or not np.isfinite(self.c):
            raise ValueError("c must be finite and non-negative")
        if self.family == "hoelder":
            if self.beta is None or not 0 < self.beta <= 1:
                raise ValueError("hoelder modulus needs beta in (0, 1]")
        elif self.family == "log_dini":
            if self.eps is None or self.eps < 0:
                raise ValueError("log_dini modulus needs eps >= 0")
        else:
            raise ValueError(f"unknown modulus family {self.family!r}")

    @classmethod
    def hoelder(cls, c: float = 1.0, beta: float = 1.0) -> "DiniModulus":
        return cls("hoelder", c, beta=beta)

    @classmethod
    def log_dini(cls, c: float = 1.0, eps: float = 1.0) -> "DiniModulus":
        return cls("log_dini", c, eps=eps)

    @property
    def log_cutoff(self) -> float:
        """L0 = log(1/s0) for the log family."""
        return 2.0 + 2.0 * self.eps

    def of_log(self, L):
        """phi(exp(-L)), evaluated without forming exp(-L)."""
        L = np.asarray(L, dtype=np.float64)
        if self.family == "hoelder":
            return self.c * np.exp(-self.beta * L)
        return self.c * (1.0 + np.maximum(L, self.log_cutoff)) ** -(1.0 + self.eps)

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        if self.family == "hoelder":
            return self.c * np.maximum(s, 0.0) ** self.beta
        with np.errstate(divide="ignore"):
            out = self.of_log(-np.log(np.where(s > 0, s, 1.0)))
        return np.where(s > 0, out, 0.0)

    def to_dict(self) -> dict:
        d = {"family": self.family, "c": float(self.c)}
        d.update({"beta": float(self.beta)} if self.family == "hoelder" else {"eps": float(self.eps)})
        return d


@dataclass
class DiniReport:
    monotone: bool
    concave_square: bool
    integral: float
    converged: bool
    diverged: bool
    levels: int
    relative_change: float
    max_concavity_violation: float = 0.0
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.monotone and self.concave_square and self.converged and not self.diverged


def dini_integral(phi: DiniModulus, max_level: int = 60, rtol: float = 1e-10):
    """int_0^1 phi(s)/s ds = int_0^inf phi(e^-L) dL over doubling pieces of L.

    Returns (value, converged, diverged, levels, relative_change).  A slowly
    decaying tail is extrapolated geometrically from the last two pieces;
    the extrapolated totals at consecutive levels give the refinement check.
    """
    edges = [0.0] + [2.0**k for k in range(max_level + 1)]
    total = 0.0
    pieces = []
    estimates = []
    for k in range(len(edges) - 1):
        a, b = edges[k], edges[k + 1]
        piece = quad(lambda L: float(phi.of_log(L)), a, b, limit=200, epsabs=0.0, epsrel=1e-12)[0]
        pieces.append(piece)
        total += piece
        if k >= 3:
            if piece <= 1e-16 * max(total, 1e-300):
                return total, True, False, k + 1, 0.0
            r = pieces[-1] / pieces[-2] if pieces[-2] > 0 else 0.0
            tail = piece * r / (1.0 - r) if r < 1.0 else np.inf
            estimates.append(total + tail)
            if len(estimates) >= 2 and np.isfinite(estimates[-1]):
                change = abs(estimates[-1] - estimates[-2]) / abs(estimates[-1]) if estimates[-1] else 0.0
                if change <= rtol:
                    return estimates[-1], True, False, k + 1, change
    r = pieces[-1] / pieces[-2] if pieces[-2] > 0 else 0.0
    if r > 1.0 - 1e-9:
        return np.inf, False, True, len(pieces), np.inf
    change = abs(estimates[-1] - estimates[-2]) / abs(estimates[-1])
    return estimates[-1], change <= 1e-6, False, len(pieces), change


def dini_check(phi: DiniModulus, s_max: float = 4.0, tol: float = 1e-9) -> DiniReport:
    """Monotonicity, concavity of phi^2 and finiteness of the Dini integral."""
    grid = np.unique(np.concatenate([np.linspace(0.0, s_max, 4001), np.geomspace(1e-12, s_max, 400)]))
    vals = phi(grid)
    monotone = bool(np.all(np.diff(vals) >= -1e-15 * np.maximum(1.0, np.abs(vals[1:]))))
    sq = vals**2
    slopes = np.diff(sq) / np.diff(grid)
    excess = np.diff(slopes) - tol * (1.0 + np.abs(slopes[:-1]))
    concave = bool(np.all(excess <= 0))
    value, converged, diverged, levels, change = dini_integral(phi)
    notes = []
    if diverged:
        notes.append("Dini integral diverges: the doubling pieces stop decaying")
    if not concave:
        notes.append("phi^2 is not concave on the probe grid")
    return DiniReport(monotone, concave, float(value), converged, diverged, levels, float(change),
                      float(max(excess.max(), 0.0)), notes)
