"""Space-time lattice fields, mixed L^q_p norms and the discrete maximal operator.

Fields are cell-centred: a box ``[lower, upper]`` split into ``shape``
cells per axis, one value per cell, so the cells tile the box exactly.
Time-dependent fields carry ``nt`` time cells over ``t_range``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np


@dataclass(frozen=True, eq=False)
class GridField:
    lower: np.ndarray
    upper: np.ndarray
    values: np.ndarray
    t_range: tuple | None = None

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        v = np.asarray(self.values, dtype=np.float64)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("need lower < upper in every coordinate")
        d = lo.size
        expect = d + (1 if self.t_range is not None else 0)
        if v.ndim != expect:
            raise ValueError(f"values must have {expect} axes, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        if self.t_range is not None:
            t0, t1 = map(float, self.t_range)
            if not t0 < t1:
                raise ValueError("t_range must be increasing")
            object.__setattr__(self, "t_range", (t0, t1))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, func: Callable, lower, upper, shape, t_range=None, nt=None) -> "GridField":
        """Sample ``func`` at cell centres.

        ``func(x)`` for spatial fields, ``func(t, x)`` when ``t_range`` is
        given; ``x`` has shape (N, d) and the result shape (N,).
        """
        lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        upper = np.atleast_1d(np.asarray(upper, dtype=np.float64))
        shape = tuple(int(n) for n in np.atleast_1d(shape))
        if len(shape) != lower.size:
            shape = shape * lower.size if len(shape) == 1 else shape
        centers = [lo + (np.arange(n) + 0.5) * (hi - lo) / n for lo, hi, n in zip(lower, upper, shape)]
        pts = np.stack(np.meshgrid(*centers, indexing="ij"), axis=-1).reshape(-1, lower.size)
        if t_range is None:
            vals = np.asarray(func(pts), dtype=np.float64).reshape(shape)
        else:
            if nt is None:
                raise ValueError("nt is required for a time-dependent field")
            t0, t1 = t_range
            tc = t0 + (np.arange(nt) + 0.5) * (t1 - t0) / nt
            vals = np.stack([np.asarray(func(t, pts), dtype=np.float64).reshape(shape) for t in tc])
        return cls(lower, upper, vals, t_range)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def is_spatial(self) -> bool:
        return self.t_range is None

    @property
    def shape(self) -> tuple:
        return self.values.shape[-self.dim:]

    @property
    def nt(self) -> int:
        return 0 if self.is_spatial else self.values.shape[0]

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / np.array(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def dt(self) -> float:
        return (self.t_range[1] - self.t_range[0]) / self.nt

    def centers(self) -> list:
        return [lo + (np.arange(n) + 0.5) * h for lo, n, h in zip(self.lower, self.shape, self.spacing)]

    def points(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.centers(), indexing="ij"), axis=-1).reshape(-1, self.dim)

    def time_centers(self) -> np.ndarray:
        return self.t_range[0] + (np.arange(self.nt) + 0.5) * self.dt

    def with_values(self, values) -> "GridField":
        return GridField(self.lower, self.upper, values, self.t_range)

    def __mul__(self, c: float) -> "GridField":
        return self.with_values(self.values * c)

    __rmul__ = __mul__

    def spatial_slice(self, k: int) -> "GridField":
        return GridField(self.lower, self.upper, self.values[k])

    def evaluate(self, t, x) -> np.ndarray:
        """Piecewise-constant lookup; zero outside the box (and time range)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        idx = np.floor((x - self.lower) / self.spacing).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(self.shape)), axis=1)
        idx = np.clip(idx, 0, np.array(self.shape) - 1)
        if self.is_spatial:
            vals = self.values[tuple(idx.T)]
        else:
            k = int(np.floor((t - self.t_range[0]) / self.dt))
            if t == self.t_range[1]:
                k = self.nt - 1
            if k < 0 or k >= self.nt:
                return np.zeros(x.shape[0])
            vals = self.values[k][tuple(idx.T)]
        return np.where(inside, vals, 0.0)

    def to_csv(self, path=None) -> str:
        header = {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "shape": list(self.shape),
                  "t_range": list(self.t_range) if self.t_range else None, "nt": self.nt}
        buf = io.StringIO()
        buf.write("# " + json.dumps(header) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        cols = ([] if self.is_spatial else ["t"]) + [f"x{j}" for j in range(self.dim)] + ["value"]
        w.writerow(cols)
        pts = self.points()
        slabs = [(None, self.values)] if self.is_spatial else zip(self.time_centers(), self.values)
        for t, slab in slabs:
            for p, v in zip(pts, slab.reshape(-1)):
                w.writerow(([] if t is None else [repr(float(t))]) + [repr(float(c)) for c in p] + [repr(float(v))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "GridField":
        return cls.from_csv_text(Path(path).read_text())

    @classmethod
    def from_csv_text(cls, text: str) -> "GridField":
        first, _, rest = text.partition("\n")
        if not first.startswith("# "):
            raise ValueError("missing lattice header line")
        head = json.loads(first[2:])
        rows = list(csv.reader(io.StringIO(rest)))[1:]
        vals = np.array([float(r[-1]) for r in rows if r])
        shape = tuple(head["shape"])
        if head["t_range"] is not None:
            shape = (head["nt"],) + shape
        return cls(head["lower"], head["upper"], vals.reshape(shape),
                   tuple(head["t_range"]) if head["t_range"] else None)


def lpq_norm(f: GridField, p: float, q: float, s: float, t: float) -> float:
    """(int_s^t (int |f_r(x)|^p dx)^(q/p) dr)^(1/q) on the lattice.

    Midpoint rule in time (cells partially covered by [s, t] count with
    their overlap), cell sums in space.  A spatial-only field is treated
    as constant in time.
    """
    if p < 1 or q < 1:
        raise ValueError("need p, q >= 1")
    if t < s:
        raise ValueError("need s <= t")
    if t == s:
        return 0.0
    vol = f.cell_volume
    if f.is_spatial:
        inner = (np.sum(np.abs(f.values) ** p) * vol) ** (1.0 / p)
        return float(inner * (t - s) ** (1.0 / q))
    t0, t1 = f.t_range
    eps = 1e-12 * max(1.0, abs(t1))
    if s < t0 - eps or t > t1 + eps:
        raise ValueError(f"[{s}, {t}] is outside the field's time range {f.t_range}")
    edges = t0 + np.arange(f.nt + 1) * f.dt
    overlap = np.clip(np.minimum(edges[1:], t) - np.maximum(edges[:-1], s), 0.0, None)
    axes = tuple(range(1, f.values.ndim))
    inner = (np.sum(np.abs(f.values) ** p, axis=axes) * vol) ** (1.0 / p)
    return float(np.sum(overlap * inner**q) ** (1.0 / q))


def _ball_profile(h: GridField, x: np.ndarray):
    """Sorted lattice distances from ``x`` with running sums of h.

    The lattice is extended beyond the box with zero values, so the
    running count is the number of lattice points in the ball.
    """
    sp = h.spacing
    c0 = h.lower + 0.5 * sp
    r_max = float(np.linalg.norm(h.upper - h.lower))
    axes = []
    for j in range(h.dim):
        i_lo = int(np.floor((x[j] - r_max - c0[j]) / sp[j]))
        i_hi = int(np.ceil((x[j] + r_max - c0[j]) / sp[j]))
        axes.append(np.arange(i_lo, i_hi + 1))
    idx = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, h.dim)
    dist = np.linalg.norm(c0 + idx * sp - x, axis=1)
    inside = np.all((idx >= 0) & (idx < np.array(h.shape)), axis=1)
    vals = np.zeros(idx.shape[0])
    vals[inside] = h.values[tuple(idx[inside].T)]
    keep = dist <= r_max
    order = np.argsort(dist[keep], kind="stable")
    return dist[keep][order], np.cumsum(vals[keep][order]), r_max


def maximal_function(h: GridField, x, radii: str = "geometric", ratio: float = 1.1) -> float:
    """Discrete Hardy-Littlewood maximal function of ``h >= 0`` at ``x``.

    Ball averages count the lattice points within distance r (zero
    outside the box).  The default ``radii="geometric"`` takes the sup
    over r = 0 and r_k = h_min * ratio^k up to the box diameter; ``radii="lattice"``
    uses every distinct lattice distance, the exact discrete supremum.
    """
    if not h.is_spatial:
        raise ValueError("maximal_function needs a spatial field")
    if np.any(h.values < 0):
        raise ValueError("maximal_function needs h >= 0")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.size != h.dim:
        raise ValueError("point dimension does not match the field")
    if np.any(x < h.lower) or np.any(x > h.upper):
        raise ValueError(f"point {x} lies outside the field's box")
    dist, csum, r_max = _ball_profile(h, x)
    if radii == "lattice":
        last = np.searchsorted(dist, dist, side="right") - 1
    elif radii == "geometric":
        r0 = float(h.spacing.min())
        n = int(np.ceil(np.log(r_max / r0) / np.log(ratio))) + 1
        grid = np.concatenate([[0.0], r0 * ratio ** np.arange(n)])
        # The tolerance absorbs rounding in the lattice distances.
        last = np.searchsorted(dist, grid + 1e-9 * r0, side="right") - 1
        last = last[last >= 0]
    else:
        raise ValueError(f"unknown radius grid {radii!r}")
    return float(np.max(csum[last] / (last + 1)))


@dataclass(frozen=True)
class HardyReport:
    max_ratio: float
    mean_ratio: float
    n_pairs: int
    n_skipped: int
    ratios: np.ndarray


def gradient_norm(f: GridField) -> GridField:
    """|grad f| by central differences (one-sided at the box faces)."""
    if not f.is_spatial:
        raise ValueError("gradient_norm needs a spatial field")
    grads = np.gradient(f.values, *f.spacing) if f.dim > 1 else [np.gradient(f.values, f.spacing[0])]
    return f.with_values(np.sqrt(sum(g**2 for g in grads)))


def hardy_pointwise_check(f: GridField, pairs=None, n_pairs: int = 200, seed: int = 0,
                          grad_norm: GridField | None = None, radii: str = "geometric") -> HardyReport:
    """Empirical constant in |f(x)-f(y)| <= C|x-y|(M|grad f|(x) + M|grad f|(y)).

    ``pairs`` is an (n, 2) array of flat lattice indices; by default
    ``n_pairs`` random pairs are drawn.
    """
    g = gradient_norm(f) if grad_norm is None else grad_norm
    pts = f.points()
    vals = f.values.reshape(-1)
    if pairs is None:
        rng = np.random.default_rng(seed)
        pairs = rng.integers(0, pts.shape[0], size=(n_pairs, 2))
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    cache: dict[int, float] = {}

    def mx(i):
        if i not in cache:
            cache[i] = maximal_function(g, pts[i], radii=radii)
        return cache[i]

    ratios = []
    skipped = 0
    for i, j in pairs:
        denom = np.linalg.norm(pts[i] - pts[j]) * (mx(i) + mx(j))
        if denom == 0:
            skipped += 1
            continue
        ratios.append(abs(vals[i] - vals[j]) / denom)
    ratios = np.array(ratios)
    return HardyReport(float(ratios.max()) if ratios.size else 0.0,
                       float(ratios.mean()) if ratios.size else 0.0,
                       int(ratios.size), skipped, ratios)
