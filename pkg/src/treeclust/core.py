"""Points, datasets, solutions, cost evaluation and keyed randomness."""

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from treeclust.errors import ConfigError, DataError, NoCentersError
from treeclust.log_utils import get_logger

logger = get_logger("treeclust.core")

NORM_MARGIN = 1e-9
COST_BLOCK = 65536
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Seeded randomness identified by (seed, label).

    `generator()` yields a fresh sequential numpy Generator for the stream;
    `uniform_at(key)` is a counter-based draw that depends only on
    (seed, label, key), so keyed consumers agree regardless of draw order.
    """

    seed: int
    label: str = ""
    _prefix: object = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        h = hashlib.blake2b(digest_size=8)
        h.update((self.seed & _MASK64).to_bytes(8, "little"))
        h.update(self.label.encode())
        h.update(b"\x00")
        object.__setattr__(self, "_prefix", h)

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}" if self.label else label)

    def generator(self) -> np.random.Generator:
        digest = hashlib.blake2b(self.label.encode(), digest_size=16).digest()
        words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
        return np.random.default_rng(np.random.SeedSequence([self.seed & _MASK64, *words]))

    def hash_at(self, *key: int) -> int:
        h = self._prefix.copy()
        for part in key:
            h.update(str(part).encode())
            h.update(b"|")
        return int.from_bytes(h.digest(), "little")

    def uniform_at(self, *key: int) -> float:
        """Uniform in the open interval (0, 1)."""
        return ((self.hash_at(*key) >> 11) + 0.5) / 2.0**53


@dataclass(frozen=True)
class Dataset:
    """Points inside the open ball B(0, lam) plus the affine map back to raw input."""

    points: np.ndarray
    lam: float = 1.0
    shift: np.ndarray | None = None
    scale: float = 1.0

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2:
            raise DataError(f"points must be a 2-d array, got shape {pts.shape}")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.shift is None:
            object.__setattr__(self, "shift", np.zeros(pts.shape[1]))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def to_raw(self, centers: np.ndarray) -> np.ndarray:
        return np.asarray(centers, dtype=np.float64) / self.scale + self.shift

    def to_normalized(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=np.float64) - self.shift) * self.scale

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.points[indices], self.lam, self.shift, self.scale)

    @classmethod
    def in_ball(cls, points: np.ndarray, lam: float = 1.0) -> "Dataset":
        """Wrap already-normalized points, checking the open-ball invariant."""
        ds = cls(points, lam)
        _check_finite(ds.points)
        if ds.n and np.linalg.norm(ds.points, axis=1).max() >= lam:
            raise DataError("out of universe")
        return ds


@dataclass(frozen=True)
class Solution:
    """Centers with cost bookkeeping; `cost` is Euclidean whenever `assignment` is set."""

    centers: np.ndarray
    power: int = 1
    cost: float = 0.0
    assignment: np.ndarray | None = None
    tree_cost: float | None = None
    center_costs: np.ndarray | None = None
    ledger: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        c = np.array(self.centers, dtype=np.float64, copy=True)
        if c.ndim == 1:
            c = c.reshape(1, -1)
        c.flags.writeable = False
        object.__setattr__(self, "centers", c)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def evaluate(cls, data: Dataset, centers: np.ndarray, z: int = 1, **kwargs) -> "Solution":
        cost, assignment = clustering_cost(data, centers, z)
        return cls(centers, power=z, cost=cost, assignment=assignment, **kwargs)


def _check_finite(points: np.ndarray) -> None:
    if not np.all(np.isfinite(points)):
        raise DataError("invalid coordinate")


def normalize(raw_points, lam: float = 1.0) -> Dataset:
    """Shift by the bounding-box midpoint and scale so the max norm is lam·(1−1e-9)."""
    if lam <= 0:
        raise ConfigError(f"lambda must be > 0, got {lam}")
    raw = np.asarray(raw_points, dtype=np.float64)
    if raw.size == 0:
        raise DataError("empty dataset")
    if raw.ndim == 1:
        raw = raw.reshape(-1, 1)
    _check_finite(raw)
    mid = (raw.min(axis=0) + raw.max(axis=0)) / 2
    centered = raw - mid
    max_norm = float(np.linalg.norm(centered, axis=1).max())
    scale = lam * (1 - NORM_MARGIN) / max_norm if max_norm > 0 else 1.0
    logger.debug("normalize n=%d d=%d max_norm=%.6g scale=%.6g", raw.shape[0], raw.shape[1], max_norm, scale)
    return Dataset(centered * scale, lam, mid, scale)


def point_costs(points: np.ndarray, centers: np.ndarray, z: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Per-point distance^z to the nearest center and the argmin (lowest index on ties)."""
    if z not in (1, 2):
        raise ConfigError(f"power must be 1 or 2, got {z}")
    centers = np.asarray(centers, dtype=np.float64)
    if centers.size == 0:
        raise NoCentersError()
    centers = centers.reshape(centers.shape[0], -1)
    points = np.asarray(points, dtype=np.float64).reshape(-1, centers.shape[1])
    metric = "euclidean" if z == 1 else "sqeuclidean"
    costs = np.empty(points.shape[0])
    assignment = np.empty(points.shape[0], dtype=np.int64)
    for start in range(0, points.shape[0], COST_BLOCK):
        block = cdist(points[start : start + COST_BLOCK], centers, metric)
        idx = np.argmin(block, axis=1)
        assignment[start : start + COST_BLOCK] = idx
        costs[start : start + COST_BLOCK] = block[np.arange(block.shape[0]), idx]
    return costs, assignment


def clustering_cost(data: Dataset | np.ndarray, centers: np.ndarray, z: int = 1) -> tuple[float, np.ndarray]:
    points = data.points if isinstance(data, Dataset) else data
    costs, assignment = point_costs(points, centers, z)
    return math.fsum(costs), assignment


def exact_partials(values) -> list[float]:
    """Non-overlapping float expansion whose exact sum equals the exact sum of values."""
    partials: list[float] = []
    for x in values:
        x = float(x)
        i = 0
        for y in partials:
            if abs(x) < abs(y):
                x, y = y, x
            hi = x + y
            lo = y - (hi - x)
            if lo:
                partials[i] = lo
                i += 1
            x = hi
        partials[i:] = [x]
    return partials


def geometric_median(
    points: np.ndarray,
    weights: np.ndarray | None = None,
    max_iter: int = 500,
    tol: float = 1e-9,
    eps: float = 1e-12,
) -> np.ndarray:
    """Weighted geometric median by Weiszfeld iteration."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] == 0:
        raise DataError("empty dataset")
    w = np.ones(points.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    median = w @ points
    obj = float(w @ np.linalg.norm(points - median, axis=1))
    for _ in range(max_iter):
        dist = np.maximum(eps, np.linalg.norm(points - median, axis=1))
        inv = w / dist
        candidate = (inv / inv.sum()) @ points
        new_obj = float(w @ np.linalg.norm(points - candidate, axis=1))
        if new_obj > obj:
            break
        median, prev, obj = candidate, obj, new_obj
        if prev - obj <= tol * max(obj, eps):
            break
    return median


def sample_in_ball(gen: np.random.Generator, m: int, d: int, lam: float = 1.0) -> np.ndarray:
    """m points uniform in the open ball B(0, lam)."""
    direction = gen.normal(size=(m, d))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    radius = lam * (1 - NORM_MARGIN) * gen.random(m) ** (1.0 / d)
    return direction * radius[:, None]


def clamp_to_ball(x: np.ndarray, lam: float = 1.0) -> np.ndarray:
    norm = float(np.linalg.norm(x))
    limit = lam * (1 - NORM_MARGIN)
    return x * (limit / norm) if norm > limit else x


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def read_points_csv(path: str | Path, drop_column: str | int | None = None) -> np.ndarray:
    """One point per row; comma or whitespace delimited; header row auto-detected."""
    rows: list[list[str]] = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            tokens = [t.strip() for t in line.split(",")] if "," in line else line.split()
            rows.append(tokens)
    if not rows:
        raise DataError("empty dataset")
    header = None
    if not all(_is_number(t) for t in rows[0]):
        header, rows = rows[0], rows[1:]
    if not rows:
        raise DataError("empty dataset")
    if drop_column is not None:
        if isinstance(drop_column, str) and not drop_column.lstrip("-").isdigit():
            if header is None or drop_column not in header:
                raise DataError(f"no column named {drop_column!r}")
            col = header.index(drop_column)
        else:
            col = int(drop_column)
            if col < 0:
                col += len(rows[0])
        rows = [r[:col] + r[col + 1 :] for r in rows]
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"row {i + 1} has {len(r)} columns, expected {width}")
        try:
            out[i] = [float(t) for t in r]
        except ValueError as e:
            raise DataError(f"invalid coordinate in row {i + 1}: {e}") from e
    _check_finite(out)
    logger.debug("read_points_csv path=%s rows=%d cols=%d header=%s", path, out.shape[0], width, header is not None)
    return out
