"""Core value types: time grids, empirical measures, measure flows, path bundles."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"MVL1"
_HEADER = struct.Struct("<4sQQ")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_start + k * dt`` for ``k = 0 .. n_steps``."""

    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.t_start) and math.isfinite(self.t_end)):
            raise ValueError("grid endpoints must be finite")
        if self.t_start < 0:
            raise ValueError("t_start must be >= 0")
        if not self.t_start < self.t_end:
            raise ValueError("need t_start < t_end")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def from_dt(cls, t_end: float, dt: float, t_start: float = 0.0) -> "TimeGrid":
        n = round((t_end - t_start) / dt)
        if n < 1 or abs(n * dt - (t_end - t_start)) > 1e-9 * max(1.0, t_end):
            raise ValueError(f"dt={dt} does not divide [{t_start}, {t_end}]")
        return cls(t_start, t_end, n)

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t_start + np.arange(self.n_steps + 1) * self.dt

    def time(self, k: int) -> float:
        return self.t_start + k * self.dt

    def node_of(self, t: float, tol: float = 1e-9) -> int:
        """Index of the node at time ``t``; raises if ``t`` is not a node."""
        k = round((t - self.t_start) / self.dt)
        if k < 0 or k > self.n_steps or abs(self.time(k) - t) > tol * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a node of {self}")
        return k

    def truncate(self, t: float) -> "TimeGrid":
        """The sub-grid ``[t_start, t]``; ``t`` must be a node."""
        k = self.node_of(t)
        if k == 0:
            raise ValueError("truncation would leave an empty grid")
        return TimeGrid(self.t_start, self.time(k), k)

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_start, self.t_end, self.n_steps * int(factor))


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Uniformly weighted empirical measure on M points in R^d."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise ValueError(f"points must be (M, d), got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("an ensemble needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("ensemble coordinates must be finite")
        object.__setattr__(self, "points", _readonly(pts))

    @classmethod
    def dirac(cls, x, size: int = 1) -> "Ensemble":
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        return cls(np.tile(x, (size, 1)))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def moment(self, theta: float) -> float:
        return moment(self, theta)

    def resample(self, size: int, seed: int, stream: int = 0) -> "Ensemble":
        from .rng import resample_indices

        return Ensemble(self.points[resample_indices(seed, stream, self.size, size)])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(self.dim)])
        for row in self.points:
            w.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "Ensemble":
        return cls.from_csv_text(Path(path).read_text())

    @classmethod
    def from_csv_text(cls, text: str) -> "Ensemble":
        rows = list(csv.reader(io.StringIO(text)))
        return cls(np.array([[float(v) for v in r] for r in rows[1:] if r]))

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.dim, self.size) + self.points.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Ensemble":
        magic, d, m = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
        expected = _HEADER.size + 8 * d * m
        if len(blob) != expected:
            raise ValueError(f"truncated ensemble dump: {len(blob)} bytes, expected {expected}")
        data = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(m, d)
        return cls(data.astype(np.float64))

    def __eq__(self, other):
        return isinstance(other, Ensemble) and np.array_equal(self.points, other.points)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """One ensemble per node of ``grid``."""

    grid: TimeGrid
    ensembles: tuple

    def __post_init__(self):
        ens = tuple(self.ensembles)
        if len(ens) != self.grid.n_steps + 1:
            raise ValueError(f"flow needs {self.grid.n_steps + 1} ensembles, got {len(ens)}")
        if len({e.dim for e in ens}) != 1:
            raise ValueError("all ensembles of a flow must share the dimension")
        object.__setattr__(self, "ensembles", ens)

    @classmethod
    def constant(cls, ens: Ensemble, grid: TimeGrid) -> "MeasureFlow":
        return cls(grid, (ens,) * (grid.n_steps + 1))

    @property
    def dim(self) -> int:
        return self.ensembles[0].dim

    def __getitem__(self, k: int) -> Ensemble:
        return self.ensembles[k]

    def __len__(self) -> int:
        return len(self.ensembles)

    def means(self) -> np.ndarray:
        return np.array([e.mean() for e in self.ensembles])

    def truncate(self, t: float) -> "MeasureFlow":
        g = self.grid.truncate(t)
        return MeasureFlow(g, self.ensembles[: g.n_steps + 1])

    def save(self, directory) -> Path:
        """Write one binary dump per node plus ``manifest.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for k, e in enumerate(self.ensembles):
            name = f"node_{k:06d}.mvl"
            (d / name).write_bytes(e.to_bytes())
            files.append(name)
        manifest = {
            "t_start": self.grid.t_start,
            "t_end": self.grid.t_end,
            "n_steps": self.grid.n_steps,
            "dim": self.dim,
            "files": files,
        }
        path = d / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, directory) -> "MeasureFlow":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        grid = TimeGrid(manifest["t_start"], manifest["t_end"], manifest["n_steps"])
        return cls(grid, tuple(Ensemble.from_bytes((d / f).read_bytes()) for f in manifest["files"]))


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Particle trajectories together with the increments that drove them.

    ``paths`` has shape (M, n_steps + 1, d); ``noise`` has shape
    (M, n_steps, d) or is ``None`` when increments were not retained.
    """

    grid: TimeGrid
    paths: np.ndarray
    noise: np.ndarray | None = None
    seed: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.paths, dtype=np.float64)
        if p.ndim != 3 or p.shape[1] != self.grid.n_steps + 1:
            raise ValueError(f"paths must be (M, {self.grid.n_steps + 1}, d), got {p.shape}")
        object.__setattr__(self, "paths", _readonly(p))
        if self.noise is not None:
            n = np.asarray(self.noise, dtype=np.float64)
            if n.shape != (p.shape[0], self.grid.n_steps, p.shape[2]):
                raise ValueError(f"noise shape {n.shape} does not match paths {p.shape}")
            object.__setattr__(self, "noise", _readonly(n))

    @property
    def size(self) -> int:
        return self.paths.shape[0]

    @property
    def dim(self) -> int:
        return self.paths.shape[2]

    def at(self, k: int) -> Ensemble:
        return Ensemble(self.paths[:, k, :])

    def initial(self) -> Ensemble:
        return self.at(0)

    def terminal(self) -> Ensemble:
        return self.at(self.grid.n_steps)

    def flow(self) -> MeasureFlow:
        return MeasureFlow(self.grid, tuple(self.at(k) for k in range(self.grid.n_steps + 1)))

    def to_csv(self, path=None) -> str:
        """Long format: particle, step, time, x0..x{d-1}."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["particle", "step", "t"] + [f"x{j}" for j in range(self.dim)])
        times = self.grid.times
        for i in range(self.size):
            for k in range(self.grid.n_steps + 1):
                w.writerow([i, k, repr(float(times[k]))] + [repr(float(v)) for v in self.paths[i, k]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_bytes(self) -> bytes:
        m, n1, d = self.paths.shape
        head = _HEADER.pack(MAGIC, d, m) + struct.pack("<Qdd", n1 - 1, self.grid.t_start, self.grid.t_end)
        return head + self.paths.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PathBundle":
        magic, d, m = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        n, t0, t1 = struct.unpack_from("<Qdd", blob, _HEADER.size)
        off = _HEADER.size + struct.calcsize("<Qdd")
        data = np.frombuffer(blob, dtype="<f8", offset=off).reshape(m, n + 1, d)
        return cls(TimeGrid(t0, t1, n), data.astype(np.float64))


@dataclass(frozen=True)
class PairClass:
    """Exponent pair (p, q) in dimension d."""

    p: float
    q: float
    d: int

    def __post_init__(self):
        _check_pair(self.p, self.q, self.d)

    @property
    def in_K(self) -> bool:
        return in_class_K(self.p, self.q, self.d)

    @property
    def in_K_strict(self) -> bool:
        return in_class_K(self.p, self.q, self.d, strict=True)


def _check_pair(p, q, d):
    if not all(math.isfinite(v) for v in (p, q, d)):
        raise ValueError("p, q, d must be finite")
    if p <= 1 or q <= 1 or d < 1:
        raise ValueError(f"need p > 1, q > 1, d >= 1; got p={p}, q={q}, d={d}")


def in_class_K(p: float, q: float, d: int, strict: bool = False) -> bool:
    """Whether d/p + 2/q < 2 (or < 1 with ``strict``)."""
    _check_pair(p, q, d)
    return d / p + 2.0 / q < (1.0 if strict else 2.0)


def moment(ens: Ensemble, theta: float) -> float:
    """(1/M) sum |x_i|^theta."""
    if theta < 1:
        raise ValueError("theta must be >= 1")
    r = np.linalg.norm(ens.points, axis=1)
    return float(np.mean(r**theta))


def flow_modulus(flow: MeasureFlow, theta: float = 2.0, **kw) -> np.ndarray:
    """W_theta between consecutive ensembles of a flow."""
    from .transport import w_theta

    return np.array([w_theta(flow[k], flow[k + 1], theta, **kw)
                     for k in range(len(flow) - 1)])


def noise_variance_ratio(bundle: PathBundle) -> np.ndarray:
    """Per-coordinate sample variance of the increments divided by dt."""
    if bundle.noise is None:
        raise ValueError("bundle does not retain its increments")
    flat = bundle.noise.reshape(-1, bundle.dim)
    return flat.var(axis=0) / bundle.grid.dt


def as_ensemble(x: "Ensemble | np.ndarray | Sequence") -> Ensemble:
    return x if isinstance(x, Ensemble) else Ensemble(np.asarray(x, dtype=np.float64))
