"""Randomly shifted binary quadtree over [−Λ, Λ]^d.

Cells are addressed by heap ids: the root is 1 and cell c has children
2c (lower side of the split) and 2c+1 (upper side). Split values are keyed
draws on the cell id, so the geometry of any cell is a pure function of
(seed, label, id) and cells can be materialized lazily in any order.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from treeclust.config import log2n
from treeclust.core import Dataset, RngStream, Solution
from treeclust.errors import ConfigError, DataError
from treeclust.log_utils import get_logger

logger = get_logger("treeclust.quadtree")

ROOT = 1


def depth_of(cell_id: int) -> int:
    return cell_id.bit_length() - 1


def dfs_key(cell_id: int, max_depth: int) -> int:
    """Sort key placing disjoint cells in depth-first (lower child first) order."""
    depth = depth_of(cell_id)
    return (cell_id - (1 << depth)) << (max_depth - depth)


def default_max_depth(d: int, n: int) -> int:
    """Depth after which every cell has diam ≤ Λ/n (diam shrinks ≥ 3/2 per d depths)."""
    return d * max(1, math.ceil(math.log(2 * math.sqrt(d) * max(n, 1), 1.5)))


@dataclass(slots=True)
class Cell:
    id: int
    depth: int
    lo: np.ndarray
    hi: np.ndarray
    split_coord: int
    diam: float
    split_value: float | None = None
    children: tuple[int, int] | None = None
    weight: float | None = None
    true_count: int | None = None
    indices: np.ndarray | None = None

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2

    def margin(self, p: np.ndarray) -> float:
        return float(min((p - self.lo).min(), (self.hi - p).min()))

    def contains(self, p: np.ndarray) -> bool:
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


class Quadtree:
    def __init__(
        self,
        d: int,
        n: int,
        rng: RngStream,
        lam: float = 1.0,
        max_depth: int | None = None,
        points: np.ndarray | None = None,
    ):
        if max_depth is not None and max_depth < 1:
            raise ConfigError(f"max_depth must be >= 1, got {max_depth}")
        self.d = d
        self.n = n
        self.lam = lam
        self.rng = rng
        self.leaf_diam = lam / max(n, 1)
        self.max_depth = max_depth if max_depth is not None else default_max_depth(d, n)
        self.top_level = math.ceil(self.max_depth / d)
        self.level_unit = 2 * lam / 2**self.top_level
        self.points: np.ndarray | None = None
        self.cells: dict[int, Cell] = {}
        self._reset()
        if points is not None:
            self.attach(points)

    def _reset(self) -> None:
        lo, hi = np.full(self.d, -self.lam), np.full(self.d, self.lam)
        self.cells = {ROOT: Cell(ROOT, 0, lo, hi, 0, float(np.linalg.norm(hi - lo)))}

    @classmethod
    def for_dataset(cls, data: Dataset, rng: RngStream, max_depth: int | None = None, n: int | None = None):
        return cls(data.d, data.n if n is None else n, rng, data.lam, max_depth, data.points)

    def same_shift(self, points: np.ndarray | None = None) -> "Quadtree":
        """Fresh tree with identical geometry, optionally over other points."""
        return Quadtree(self.d, self.n, self.rng, self.lam, self.max_depth, points)

    def attach(self, points: np.ndarray) -> None:
        points = np.asarray(points, dtype=np.float64).reshape(-1, self.d)
        if points.shape[0] and np.abs(points).max() > self.lam:
            raise DataError("out of universe")
        self.points = points
        self._reset()
        root = self.cells[ROOT]
        root.indices = np.arange(points.shape[0])
        root.true_count = points.shape[0]

    def cell(self, cell_id: int) -> Cell:
        found = self.cells.get(cell_id)
        if found is not None:
            return found
        parent = self.cell(cell_id >> 1)
        lower, upper = self.children(parent.id)
        return lower if cell_id & 1 == 0 else upper

    def _draw_split(self, cell: Cell) -> float:
        j = cell.split_coord
        span = cell.hi[j] - cell.lo[j]
        return float(cell.lo[j] + span * (1 + self.rng.uniform_at(cell.id)) / 3)

    def split_value(self, cell: Cell) -> float:
        if cell.split_value is None:
            cell.split_value = self._draw_split(cell)
        return cell.split_value

    def _child_of(self, parent: Cell, s: float, upper: bool) -> Cell:
        j = parent.split_coord
        depth = parent.depth + 1
        coord = depth % self.d
        if upper:
            lo, hi = parent.lo.copy(), parent.hi
            lo[j] = s
        else:
            lo, hi = parent.lo, parent.hi.copy()
            hi[j] = s
        return Cell(2 * parent.id + int(upper), depth, lo, hi, coord, float(np.linalg.norm(hi - lo)))

    def children(self, cell_id: int) -> tuple[Cell, Cell]:
        parent = self.cells[cell_id] if cell_id in self.cells else self.cell(cell_id)
        if parent.children is not None:
            return self.cells[parent.children[0]], self.cells[parent.children[1]]
        s = self.split_value(parent)
        lower, upper = self._child_of(parent, s, False), self._child_of(parent, s, True)
        if parent.indices is not None:
            idx = parent.indices
            below = self.points[idx, parent.split_coord] <= s
            lower.indices, upper.indices = idx[below], idx[~below]
            lower.true_count, upper.true_count = lower.indices.shape[0], upper.indices.shape[0]
            parent.indices = None
        self.cells[lower.id] = lower
        self.cells[upper.id] = upper
        parent.children = (lower.id, upper.id)
        return lower, upper

    def is_leaf(self, cell: Cell) -> bool:
        return cell.diam <= self.leaf_diam or cell.depth >= self.max_depth

    def is_weighted(self, cell: Cell) -> bool:
        """Cells popped by the privatizer receive a noisy weight only above the leaf diameter."""
        return cell.diam > self.leaf_diam

    def level(self, depth: int) -> int:
        return math.ceil((self.max_depth - depth) / self.d)

    def check_universe(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(self.d)
        if not np.all(np.isfinite(p)) or np.abs(p).max() > self.lam:
            raise DataError("out of universe")
        return p

    def child_toward(self, cell: Cell, p: np.ndarray) -> Cell:
        """Child containing p; cells not yet in the arena are built detached and not stored."""
        s = cell.split_value if cell.split_value is not None else self._draw_split(cell)
        upper = bool(p[cell.split_coord] > s)
        found = self.cells.get(2 * cell.id + int(upper))
        return found if found is not None else self._child_of(cell, s, upper)

    def path(self, p: np.ndarray) -> list[Cell]:
        """Cells containing p from the root down to its leaf; a read-only descent."""
        p = self.check_universe(p)
        cell = self.cells[ROOT]
        out = [cell]
        while not self.is_leaf(cell):
            cell = self.child_toward(cell, p)
            out.append(cell)
        return out

    def expand_nonempty(self) -> None:
        """Materialize every nonempty cell down to the leaf rule, with exact counts."""
        if self.points is None:
            raise ConfigError("tree has no points attached")
        stack = [self.cells[ROOT]]
        while stack:
            cell = stack.pop()
            if self.is_leaf(cell) or not cell.true_count:
                continue
            stack.extend(c for c in self.children(cell.id) if c.true_count)

    def counts(self) -> dict[int, int]:
        return {cid: c.true_count for cid, c in self.cells.items() if c.true_count}

    def dump(self, path: str | Path) -> None:
        records = [
            {
                "id": c.id,
                "depth": c.depth,
                "lo": c.lo.tolist(),
                "hi": c.hi.tolist(),
                "count": c.true_count,
                "weight": c.weight,
            }
            for c in sorted(self.cells.values(), key=lambda c: c.id)
        ]
        Path(path).write_text(json.dumps({"d": self.d, "n": self.n, "lam": self.lam, "cells": records}, indent=1))


def build(data: Dataset, rng: RngStream, max_depth_override: int | None = None) -> Quadtree:
    tree = Quadtree.for_dataset(data, rng, max_depth_override)
    tree.expand_nonempty()
    logger.debug("build n=%d d=%d cells=%d max_depth=%d", data.n, data.d, len(tree.cells), tree.max_depth)
    return tree


def tree_distance(t: Quadtree, p: np.ndarray, q: np.ndarray) -> float:
    p = t.check_universe(p)
    q = t.check_universe(q)
    cell = t.cells[ROOT]
    while not t.is_leaf(cell):
        a = t.child_toward(cell, p)
        b = t.child_toward(cell, q)
        if a.id != b.id:
            return cell.diam
        cell = a
    return cell.diam


def tree_metric_cost(t: Quadtree, points: np.ndarray, centers: np.ndarray, z: int = 1) -> float:
    """Σ_p min_c dist_T(p, c)^z."""
    total = []
    for p in np.asarray(points):
        total.append(min(tree_distance(t, p, c) for c in np.asarray(centers)) ** z)
    return math.fsum(total)


def _margins(t: Quadtree, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    path = t.path(p)
    margins = np.array([c.margin(p) for c in path])
    depths = np.array([c.depth for c in path])
    return margins, depths


def ball_cut_level(t: Quadtree, p: np.ndarray, r: float) -> int:
    """Highest level whose cell on p's path fails to contain B(p, r); −1 if none does."""
    if r <= 0:
        raise ConfigError(f"radius must be > 0, got {r}")
    margins, depths = _margins(t, p)
    failing = np.nonzero(margins < r)[0]
    if failing.size == 0:
        return -1
    return t.level(int(depths[failing[0]]))


def badly_cut_centers(t: Quadtree, L: Solution | np.ndarray, alpha_F: float) -> set[int]:
    if not 0 < alpha_F < 1:
        raise ConfigError(f"alpha_F must be in (0, 1), got {alpha_F}")
    centers = L.centers if isinstance(L, Solution) else np.asarray(L, dtype=np.float64).reshape(-1, t.d)
    offset = math.log2(t.d * log2n(t.n) / alpha_F)
    bad = set()
    for idx, f in enumerate(centers):
        margins, depths = _margins(t, f)
        for i in range(t.top_level + 1):
            failing = np.nonzero(margins < 2**i * t.level_unit)[0]
            if failing.size and t.level(int(depths[failing[0]])) > i + offset:
                bad.add(idx)
                break
    return bad
