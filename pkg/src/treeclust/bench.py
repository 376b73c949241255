"""Synthetic data, baselines and the experiment matrix runner."""

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from treeclust.config import (
    DatasetRef,
    ExperimentSpec,
    KMeansConfig,
    KMedianConfig,
    OneMedianConfig,
    RefineConfig,
    TreeConfig,
    check_epsilon,
)
from treeclust.core import (
    NORM_MARGIN,
    Dataset,
    RngStream,
    Solution,
    clustering_cost,
    geometric_median,
    normalize,
    point_costs,
    read_points_csv,
    sample_in_ball,
)
from treeclust.errors import ConfigError, DataError, TreeclustError
from treeclust.kmeans import dp_kmeans_exact
from treeclust.kmedian import dp_kmedian
from treeclust.log_utils import get_logger
from treeclust.models import AggregateRecord, LedgerEntryModel, RunRecord, RunReport
from treeclust.mpc import mpc_run_kmedian
from treeclust.privacy import PrivacyBudget, solve_one_median
from treeclust.timing import Stopwatch, utc_stamp

logger = get_logger("treeclust.bench")


@dataclass(frozen=True)
class SyntheticData:
    data: Dataset
    means: np.ndarray | None = None
    labels: np.ndarray | None = None


def _clamp_rows(points: np.ndarray, lam: float) -> np.ndarray:
    limit = lam * (1 - NORM_MARGIN)
    norms = np.linalg.norm(points, axis=1)
    factor = np.where(norms > limit, limit / np.maximum(norms, 1e-300), 1.0)
    return points * factor[:, None]


def gen_synthetic(
    kind: str,
    n: int,
    d: int,
    params: dict | None = None,
    rng: RngStream | None = None,
    lam: float = 1.0,
) -> SyntheticData:
    """Reproducible point sets inside B(0, lam); blobs carry their means and labels."""
    if n < 1 or d < 1:
        raise ConfigError(f"n and d must be >= 1, got n={n} d={d}")
    params = params or {}
    gen = (rng or RngStream(0)).child(f"synthetic/{kind}").generator()
    if kind == "blobs":
        k = int(params.get("centers", 4))
        sigma = float(params.get("sigma", 0.03))
        means = sample_in_ball(gen, k, d, lam / 2)
        labels = gen.integers(0, k, size=n)
        points = _clamp_rows(means[labels] + sigma * lam * gen.normal(size=(n, d)), lam)
        return SyntheticData(Dataset.in_ball(points, lam), means, labels)
    if kind == "uniform":
        return SyntheticData(Dataset.in_ball(sample_in_ball(gen, n, d, lam), lam))
    if kind == "line":
        direction = gen.normal(size=d)
        direction /= max(float(np.linalg.norm(direction)), 1e-300)
        t = gen.uniform(-0.9, 0.9, size=n) * lam
        return SyntheticData(Dataset.in_ball(t[:, None] * direction[None, :], lam))
    raise ConfigError(f"unknown synthetic kind {kind!r}")


def ingest_csv(path: str | Path, out: str | Path, drop_column: str | int | None = None, lam: float = 1.0) -> Dataset:
    """Normalize a CSV of raw points and store it as .npz (points, shift, scale, lam)."""
    data = normalize(read_points_csv(path, drop_column), lam)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, points=data.points, shift=data.shift, scale=data.scale, lam=data.lam)
    logger.info("ingest path=%s out=%s n=%d d=%d scale=%.6g", path, out, data.n, data.d, data.scale)
    return data


def load_npz(path: str | Path) -> Dataset:
    try:
        with np.load(path) as f:
            return Dataset(f["points"], float(f["lam"]), f["shift"], float(f["scale"]))
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot load dataset {path}: {e}") from e


def load_dataset(ref: DatasetRef, lam: float = 1.0) -> Dataset:
    if ref.kind == "file":
        path = Path(ref.path)
        if path.suffix == ".npz":
            return load_npz(path)
        return normalize(read_points_csv(path), lam)
    params = {"centers": ref.centers, "sigma": ref.sigma}
    return gen_synthetic(ref.kind, ref.n, ref.d, params, RngStream(ref.seed), lam).data


def _seed_centers(points: np.ndarray, k: int, z: int, gen: np.random.Generator) -> np.ndarray:
    """D^z sampling: first center uniform, then proportional to distance^z to the chosen ones."""
    n = points.shape[0]
    chosen = [int(gen.integers(n))]
    closest, _ = point_costs(points, points[chosen], z)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(gen.choice(n, p=closest / total))
        else:
            idx = int(gen.integers(n))
        chosen.append(idx)
        closest = np.minimum(closest, point_costs(points, points[idx][None, :], z)[0])
    return points[chosen].copy()


def _check_k(data: Dataset, k: int) -> None:
    if k <= 0 or k > data.n:
        raise ConfigError(f"k must be in [1, n={data.n}], got {k}")


def kmedianpp_baseline(data: Dataset, k: int, lloyd_iters: int = 10, rng: RngStream | None = None) -> Solution:
    """Non-private k-median++: D¹ seeding, then Lloyd steps with Weiszfeld medians."""
    _check_k(data, k)
    gen = (rng or RngStream(0)).child("kmedianpp").generator()
    centers = _seed_centers(data.points, k, 1, gen)
    for _ in range(lloyd_iters):
        _, assignment = clustering_cost(data, centers, 1)
        updated = centers.copy()
        for j in range(k):
            members = data.points[assignment == j]
            if members.shape[0]:
                updated[j] = geometric_median(members, max_iter=500, tol=1e-9)
        if np.array_equal(updated, centers):
            break
        centers = updated
    return Solution.evaluate(data, centers, 1)


def kmeanspp_baseline(data: Dataset, k: int, lloyd_iters: int = 10, rng: RngStream | None = None) -> Solution:
    """Non-private k-means++: D² seeding, then mean updates."""
    _check_k(data, k)
    gen = (rng or RngStream(0)).child("kmeanspp").generator()
    centers = _seed_centers(data.points, k, 2, gen)
    for _ in range(lloyd_iters):
        _, assignment = clustering_cost(data, centers, 2)
        updated = centers.copy()
        for j in range(k):
            members = data.points[assignment == j]
            if members.shape[0]:
                updated[j] = members.mean(axis=0)
        if np.array_equal(updated, centers):
            break
        centers = updated
    return Solution.evaluate(data, centers, 2)


def private_lloyd_baseline(
    data: Dataset,
    k: int,
    epsilon: float,
    iters: int = 7,
    rng: RngStream | None = None,
    *,
    lambda_smooth: float = 1.0,
    gamma_grad: float | None = None,
    init: np.ndarray | None = None,
    max_points: int | None = None,
    budget: PrivacyBudget | None = None,
    label: str = "private_lloyd",
) -> Solution:
    """Lloyd steps whose 1-medians are private; each iteration costs ε/iters over disjoint clusters."""
    if k <= 0:
        raise ConfigError(f"k must be positive, got {k}")
    if iters < 1:
        raise ConfigError(f"iters must be >= 1, got {iters}")
    check_epsilon(epsilon)
    rng = rng or RngStream(0)
    budget = budget or PrivacyBudget(epsilon)
    gen = rng.child("private-lloyd").generator()
    one_median = OneMedianConfig(lambda_smooth=lambda_smooth, gamma_grad=gamma_grad)
    centers = sample_in_ball(gen, k, data.d, data.lam) if init is None else np.array(init, dtype=np.float64)
    eps_iter = epsilon / iters
    costs = []
    for it in range(iters):
        _, assignment = clustering_cost(data, centers, 1)
        updated = np.empty_like(centers)
        for j in range(centers.shape[0]):
            members = data.points[assignment == j]
            if members.shape[0] == 0:
                updated[j] = sample_in_ball(gen, 1, data.d, data.lam)[0]
                continue
            if max_points is not None and members.shape[0] > max_points:
                members = members[np.sort(gen.choice(members.shape[0], size=max_points, replace=False))]
            step_gen = rng.child(f"iter-{it}/cluster-{j}").generator()
            updated[j] = solve_one_median(members, eps_iter, step_gen, one_median, data.lam).point
        budget.charge_parallel(f"{label}.iter{it}", [eps_iter] * centers.shape[0])
        centers = updated
        costs.append(clustering_cost(data, centers, 1)[0])
        logger.debug("private_lloyd iter=%d cost=%.6g", it, costs[-1])
    return Solution.evaluate(data, centers, 1, ledger=budget.entries(), meta={"trace": costs})


def hst_refined(
    data: Dataset,
    k: int,
    epsilon: float,
    rng: RngStream,
    tree: TreeConfig | None = None,
    refine: RefineConfig | None = None,
    gamma_grad: float | None = None,
) -> Solution:
    """Tree solution on a slice of the budget, then private-Lloyd refinement on the rest."""
    tree = tree or TreeConfig(mode="experimental")
    refine = refine or RefineConfig()
    check_epsilon(epsilon)
    budget = PrivacyBudget(epsilon)
    eps_tree = epsilon * refine.tree_fraction if refine.iterations else epsilon
    start = dp_kmedian(data, k, eps_tree, rng.child("tree"), KMedianConfig(tree=tree), budget=budget)
    if not refine.iterations:
        return start
    eps_rest = math.inf if math.isinf(epsilon) else epsilon - eps_tree
    refined = private_lloyd_baseline(
        data,
        k,
        eps_rest,
        refine.iterations,
        rng.child("refine"),
        lambda_smooth=refine.lambda_smooth,
        gamma_grad=gamma_grad,
        init=start.centers,
        max_points=refine.max_points_per_cluster,
        budget=budget,
        label="refine",
    )
    return Solution(
        refined.centers,
        power=1,
        cost=refined.cost,
        assignment=refined.assignment,
        tree_cost=start.tree_cost,
        ledger=budget.entries(),
        meta=refined.meta,
    )


def run_algorithm(
    algorithm: str,
    data: Dataset,
    k: int,
    epsilon: float,
    rng: RngStream,
    spec: ExperimentSpec,
    grid: tuple[float, float] | None = None,
) -> Solution:
    alpha_depth, beta = grid or (spec.alpha_depths[0], spec.betas[0])
    tree = TreeConfig(mode="experimental", alpha_depth=alpha_depth, beta=beta)
    if algorithm == "hst":
        return hst_refined(data, k, epsilon, rng, tree, spec.refine, spec.gamma_grad)
    if algorithm == "hst-mpc":
        solution, _ = mpc_run_kmedian(data, k, epsilon, spec.mpc, rng.hash_at(0), KMedianConfig(tree=tree))
        return solution
    if algorithm == "private-lloyd":
        return private_lloyd_baseline(
            data, k, epsilon, spec.private_lloyd_iters, rng, lambda_smooth=1.0, gamma_grad=spec.gamma_grad
        )
    if algorithm == "kmedianpp":
        return kmedianpp_baseline(data, k, spec.lloyd_iters, rng)
    if algorithm == "kmeans":
        return dp_kmeans_exact(data, k, epsilon, rng, KMeansConfig(tree=tree))
    raise ConfigError(f"unknown algorithm {algorithm!r}")


def _normalize_costs(runs: list[RunRecord]) -> None:
    """Divide each cost by the best cost among runs with the same k and power."""
    best: dict[tuple[int, int], float] = {}
    for run in runs:
        if run.cost is not None:
            key = (run.k, run.power)
            best[key] = min(best.get(key, math.inf), run.cost)
    for run in runs:
        if run.cost is None:
            continue
        floor = best[(run.k, run.power)]
        if floor > 0:
            run.normalized_cost = run.cost / floor
        else:
            run.normalized_cost = 1.0 if run.cost == 0 else math.inf


def _aggregate(runs: list[RunRecord]) -> list[AggregateRecord]:
    groups: dict[tuple, list[RunRecord]] = defaultdict(list)
    for run in runs:
        groups[(run.algorithm, run.k, run.epsilon, run.alpha_depth, run.beta)].append(run)
    out = []
    for (algorithm, k, epsilon, alpha_depth, beta), group in groups.items():
        ok = [r for r in group if r.ok]
        costs = np.array([r.cost for r in ok])
        normalized = np.array([r.normalized_cost for r in ok])
        out.append(
            AggregateRecord(
                algorithm=algorithm,
                k=k,
                epsilon=epsilon,
                alpha_depth=alpha_depth,
                beta=beta,
                runs=len(ok),
                median_cost=float(np.median(costs)) if ok else None,
                mean_cost=float(costs.mean()) if ok else None,
                median_normalized=float(np.median(normalized)) if ok else None,
                mean_normalized=float(normalized.mean()) if ok else None,
            )
        )
    return out


def _run_cell(
    algorithm: str, data: Dataset, k: int, epsilon: float, seed: int, rep: int, spec: ExperimentSpec, grid
) -> RunRecord:
    label = f"{algorithm}/k={k}/eps={epsilon}/rep={rep}"
    record = RunRecord(algorithm=algorithm, k=k, epsilon=epsilon, seed=seed)
    if grid is not None:
        record.alpha_depth, record.beta = grid
        label += f"/alpha={grid[0]}/beta={grid[1]}"
    try:
        with Stopwatch() as watch:
            solution = run_algorithm(algorithm, data, k, epsilon, RngStream(seed).child(label), spec, grid)
    except TreeclustError as e:
        logger.warning("run failed algorithm=%s k=%d eps=%s seed=%d: %s", algorithm, k, epsilon, seed, e)
        record.error = str(e)
        return record
    record.power = solution.power
    record.cost = solution.cost
    record.tree_cost = solution.tree_cost
    record.wall_time = watch.elapsed
    record.centers = solution.k
    record.ledger = [LedgerEntryModel(label=lb, epsilon=e) for lb, e in solution.ledger]
    return record


def run_matrix(spec: ExperimentSpec, data: Dataset | None = None) -> RunReport:
    """Every (algorithm, k, ε, seed, repetition) cell, swept over the (α_depth, β) grid for tree algorithms.

    Failed runs are recorded and skipped.
    """
    data = data if data is not None else load_dataset(spec.dataset)
    runs = [
        _run_cell(algorithm, data, k, epsilon, seed, rep, spec, grid)
        for algorithm in spec.algorithms
        for grid in spec.tree_grid(algorithm)
        for k in spec.ks
        for epsilon in spec.epsilons
        for seed in spec.seeds
        for rep in range(spec.repetitions)
    ]
    _normalize_costs(runs)
    report = RunReport(name=spec.name, created_at=utc_stamp(), runs=runs, aggregates=_aggregate(runs))
    logger.info("run_matrix name=%s runs=%d failed=%d", spec.name, len(runs), len(report.failed()))
    return report


def write_report(report: RunReport, out: str | Path) -> tuple[Path, Path]:
    """JSON report plus a CSV of plot series (cost against k, one series per algorithm and ε)."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    json_path = out if out.suffix == ".json" else out.with_suffix(".json")
    json_path.write_text(report.model_dump_json(indent=2))
    csv_path = json_path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["algorithm", "epsilon", "k", "runs", "median_cost", "mean_cost", "median_normalized", "alpha_depth", "beta"]
        )
        for agg in sorted(report.aggregates, key=lambda a: (a.algorithm, a.epsilon, a.k, a.alpha_depth or 0, a.beta or 0)):
            eps = "inf" if math.isinf(agg.epsilon) else agg.epsilon
            row = [agg.algorithm, eps, agg.k, agg.runs, agg.median_cost, agg.mean_cost, agg.median_normalized]
            writer.writerow([*row, agg.alpha_depth, agg.beta])
    logger.info("write_report json=%s csv=%s", json_path, csv_path)
    return json_path, csv_path
