import json
import math

import numpy as np
import pytest

from treeclust.config import log2n
from treeclust.core import Dataset, RngStream
from treeclust.errors import ConfigError, DataError
from treeclust.quadtree import (
    ROOT,
    Quadtree,
    badly_cut_centers,
    ball_cut_level,
    build,
    default_max_depth,
    depth_of,
    dfs_key,
    tree_distance,
    tree_metric_cost,
)


def test_heap_ids_and_dfs_key() -> None:
    assert depth_of(ROOT) == 0
    assert depth_of(2) == depth_of(3) == 1
    assert depth_of(13) == 3
    ids = [ROOT, 2, 3, 4, 5, 6, 7, 11]
    order = sorted(ids, key=lambda c: (dfs_key(c, 4), depth_of(c)))
    assert order == [ROOT, 2, 4, 5, 11, 3, 6, 7]


def test_default_max_depth_is_multiple_of_d() -> None:
    for d in (1, 2, 5):
        assert default_max_depth(d, 1000) % d == 0
    assert default_max_depth(2, 1000) == 2 * math.ceil(math.log(2 * math.sqrt(2) * 1000, 1.5))


def test_quadtree_rejects_bad_depth() -> None:
    with pytest.raises(ConfigError):
        Quadtree(2, 10, RngStream(0), max_depth=0)


def test_split_value_range_and_determinism() -> None:
    t1 = Quadtree(2, 100, RngStream(4, "tree"))
    t2 = Quadtree(2, 100, RngStream(4, "tree"))
    for cid in (ROOT, 2, 3, 5, 14):
        c1, c2 = t1.cell(cid), t2.cell(cid)
        s = t1.split_value(c1)
        j = c1.split_coord
        span = c1.hi[j] - c1.lo[j]
        assert c1.lo[j] + span / 3 <= s <= c1.lo[j] + 2 * span / 3
        assert s == t2.split_value(c2)


def test_children_partition_points(blobs_2d: Dataset) -> None:
    tree = build(blobs_2d, RngStream(1, "tree"))
    for cell in list(tree.cells.values()):
        if cell.children is None:
            continue
        lower, upper = (tree.cells[c] for c in cell.children)
        assert lower.true_count + upper.true_count == cell.true_count
        assert lower.split_coord == upper.split_coord == (cell.depth + 1) % tree.d
    assert tree.cells[ROOT].true_count == blobs_2d.n


def test_split_plane_goes_to_lower_child() -> None:
    tree = Quadtree(1, 10, RngStream(2))
    s = tree.split_value(tree.cell(ROOT))
    tree.attach(np.array([[s], [s + 1e-6]]))
    lower, upper = tree.children(ROOT)
    assert lower.true_count == 1 and upper.true_count == 1
    assert tree.child_toward(tree.cell(ROOT), np.array([s])).id == 2


def test_path_ends_at_leaf_containing_point(blobs_2d: Dataset) -> None:
    tree = Quadtree.for_dataset(blobs_2d, RngStream(9))
    p = blobs_2d.points[17]
    path = tree.path(p)
    assert path[0].id == ROOT
    assert all(c.contains(p) for c in path)
    assert tree.is_leaf(path[-1])
    assert [c.id >> 1 for c in path[1:]] == [c.id for c in path[:-1]]


def test_attach_out_of_universe() -> None:
    tree = Quadtree(2, 10, RngStream(0))
    with pytest.raises(DataError, match="out of universe"):
        tree.attach(np.array([[1.5, 0.0]]))
    with pytest.raises(DataError, match="out of universe"):
        tree.path(np.array([np.inf, 0.0]))


def test_tree_distance_dominates_euclidean() -> None:
    gen = np.random.default_rng(0)
    pts = gen.uniform(-0.7, 0.7, size=(200, 2))
    n = 1000
    ratios = []
    for seed in range(5):
        tree = Quadtree(2, n, RngStream(seed, "tree"))
        for a, b in zip(pts[:100], pts[100:]):
            dist = float(np.linalg.norm(a - b))
            dt = tree_distance(tree, a, b)
            assert dt >= dist - 1e-12
            ratios.append(dt / dist)
    assert np.mean(ratios) <= 10 * 2**1.5 * log2n(n)


def test_tree_distance_same_point_is_leaf_diameter() -> None:
    tree = Quadtree(2, 100, RngStream(3))
    p = np.array([0.1, -0.2])
    assert tree_distance(tree, p, p) == tree.path(p)[-1].diam


def test_tree_metric_cost_of_points_is_their_leaf_diameters() -> None:
    tree = Quadtree(2, 50, RngStream(3))
    pts = np.array([[0.1, 0.1], [-0.4, 0.2]])
    assert tree_metric_cost(tree, pts, pts) == pytest.approx(
        sum(tree.path(p)[-1].diam for p in pts)
    )


def test_ball_cut_level_monotone_in_radius() -> None:
    tree = Quadtree(2, 1000, RngStream(6))
    p = np.array([0.05, -0.1])
    levels = [ball_cut_level(tree, p, r) for r in (1e-6, 1e-4, 1e-2, 0.1, 2.0)]
    assert levels == sorted(levels)
    assert levels[-1] == tree.top_level
    with pytest.raises(ConfigError):
        ball_cut_level(tree, p, 0.0)


@pytest.mark.slow
@pytest.mark.parametrize("d", [1, 2])
def test_ball_cut_probability_at_top_levels(d: int) -> None:
    points = [np.zeros(d), np.array([0.3, -0.2][:d])]
    radii = (0.01, 0.03)
    levels = {(pi, r): [] for pi in range(len(points)) for r in radii}
    for seed in range(1000):
        tree = Quadtree(d, 1000, RngStream(seed, "cut"))
        for (pi, r), seen in levels.items():
            seen.append(ball_cut_level(tree, points[pi], r))
    for (pi, r), seen in levels.items():
        seen = np.array(seen)
        for i in range(tree.top_level - 2, tree.top_level + 1):
            bound = 8 * d * (r / tree.level_unit) / 2**i
            assert np.mean(seen >= i) <= bound, (pi, r, i)


@pytest.mark.slow
@pytest.mark.parametrize("d", [1, 2, 5])
def test_mean_distortion_over_shifts(d: int) -> None:
    gen = np.random.default_rng(d)
    n = 1000
    a = gen.uniform(-0.4, 0.4, size=(20, d))
    b = gen.uniform(-0.4, 0.4, size=(20, d))
    dist = np.linalg.norm(a - b, axis=1)
    ratios = []
    for seed in range(1000):
        tree = Quadtree(d, n, RngStream(seed, "distortion"))
        ratios.extend(tree_distance(tree, p, q) / e for p, q, e in zip(a, b, dist))
    assert np.mean(ratios) <= 10 * d**1.5 * log2n(n)


def test_center_next_to_root_split_is_badly_cut() -> None:
    tree = Quadtree(2, 1000, RngStream(1))
    s = tree.split_value(tree.cell(ROOT))
    centers = np.array([[s + 1e-9, 0.0], [s - 1e-9, 0.2]])
    assert ball_cut_level(tree, centers[0], tree.level_unit) == tree.level(1) == tree.top_level
    assert badly_cut_centers(tree, centers, 0.5) == {0, 1}
    with pytest.raises(ConfigError):
        badly_cut_centers(tree, centers, 1.0)


def test_badly_cut_frequency_bounded_by_alpha_f() -> None:
    gen = np.random.default_rng(4)
    centers = gen.uniform(-0.6, 0.6, size=(20, 2))
    n, alpha_f, shifts = 1000, 0.02, 100
    hits = 0
    for seed in range(shifts):
        tree = Quadtree(2, n, RngStream(seed, "badly-cut"))
        hits += len(badly_cut_centers(tree, centers, alpha_f))
    bound = 8 * (tree.top_level + 1) / log2n(n) * alpha_f
    assert hits / (shifts * len(centers)) <= bound


def test_queries_leave_the_tree_unchanged() -> None:
    gen = np.random.default_rng(5)
    pts = gen.uniform(-0.6, 0.6, size=(30, 2))
    tree = Quadtree(2, 30, RngStream(5))
    paths = [[c.id for c in tree.path(p)] for p in pts]
    dists = [tree_distance(tree, pts[0], p) for p in pts]
    levels = [ball_cut_level(tree, p, 0.01) for p in pts]
    tree_metric_cost(tree, pts, pts[:3])
    badly_cut_centers(tree, pts[:5], 0.1)
    assert set(tree.cells) == {ROOT}
    assert tree.cells[ROOT].split_value is None
    built = build(Dataset.in_ball(pts), RngStream(5))
    assert paths == [[c.id for c in built.path(p)] for p in pts]
    assert dists == [tree_distance(built, pts[0], p) for p in pts]
    assert levels == [ball_cut_level(built, p, 0.01) for p in pts]


def test_dump_writes_cells(tmp_path, small_points: Dataset) -> None:
    tree = build(small_points, RngStream(2))
    out = tmp_path / "tree.json"
    tree.dump(out)
    payload = json.loads(out.read_text())
    assert payload["d"] == 2
    assert len(payload["cells"]) == len(tree.cells)
    assert payload["cells"][0]["id"] == ROOT
    assert payload["cells"][0]["count"] == small_points.n


def test_same_shift_shares_geometry(small_points: Dataset) -> None:
    tree = build(small_points, RngStream(8))
    twin = tree.same_shift(small_points.points[:3])
    twin.expand_nonempty()
    for cid in twin.cells:
        assert twin.split_value(twin.cell(cid)) == tree.split_value(tree.cell(cid))
