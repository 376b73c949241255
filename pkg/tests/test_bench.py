import csv
import itertools
import json
import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from treeclust.bench import (
    gen_synthetic,
    hst_refined,
    ingest_csv,
    kmeanspp_baseline,
    kmedianpp_baseline,
    load_npz,
    private_lloyd_baseline,
    run_matrix,
    write_report,
)
from treeclust.config import ExperimentSpec, TreeConfig
from treeclust.core import Dataset, RngStream, geometric_median
from treeclust.errors import ConfigError, DataError
from treeclust.kmedian import dp_kmedian


def _separated(n_per: int = 10) -> Dataset:
    gen = np.random.default_rng(0)
    means = np.array([[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]])
    points = np.repeat(means, n_per, axis=0) + gen.normal(0, 0.03, size=(4 * n_per, 2))
    return Dataset.in_ball(points)


def test_blobs_stay_near_their_means() -> None:
    sigma = 0.01
    synthetic = gen_synthetic("blobs", 1000, 2, {"centers": 5, "sigma": sigma}, RngStream(1))
    offsets = synthetic.data.points - synthetic.means[synthetic.labels]
    assert np.linalg.norm(offsets, axis=1).max() <= 5 * sigma
    assert np.linalg.norm(synthetic.means, axis=1).max() < 0.5
    assert synthetic.data.n == 1000


def test_gen_synthetic_kinds_and_errors() -> None:
    uniform = gen_synthetic("uniform", 200, 3, rng=RngStream(0)).data
    assert uniform.d == 3 and np.linalg.norm(uniform.points, axis=1).max() < 1
    line = gen_synthetic("line", 50, 4, rng=RngStream(0)).data
    assert np.linalg.matrix_rank(line.points) == 1
    with pytest.raises(ConfigError):
        gen_synthetic("spiral", 10, 2)
    with pytest.raises(ConfigError):
        gen_synthetic("blobs", 0, 2)


def test_gen_synthetic_is_reproducible() -> None:
    a = gen_synthetic("blobs", 100, 2, rng=RngStream(4)).data
    b = gen_synthetic("blobs", 100, 2, rng=RngStream(4)).data
    assert np.array_equal(a.points, b.points)


def test_ingest_and_load(tmp_path) -> None:
    raw = tmp_path / "raw.csv"
    raw.write_text("a,b,class\n10,20,x\n14,22,y\n12,27,x\n")
    out = tmp_path / "data" / "points.npz"
    data = ingest_csv(raw, out, drop_column="class", lam=1.0)
    loaded = load_npz(out)
    assert np.array_equal(loaded.points, data.points)
    assert loaded.scale == data.scale
    assert np.allclose(loaded.to_raw(loaded.points), [[10, 20], [14, 22], [12, 27]])
    with pytest.raises(DataError):
        load_npz(tmp_path / "missing.npz")


def test_kmedianpp_near_brute_force() -> None:
    data = _separated()
    k = 4
    sol = kmedianpp_baseline(data, k, 10, RngStream(3))
    dist = cdist(data.points, data.points)
    best = min(dist[:, list(c)].min(axis=1).sum() for c in itertools.combinations(range(data.n), k))
    assert sol.cost <= 1.2 * best
    assert sol.power == 1


def test_kmedianpp_k_equals_n() -> None:
    data = _separated(3)
    sol = kmedianpp_baseline(data, data.n, 5, RngStream(0))
    assert sol.cost == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ConfigError):
        kmedianpp_baseline(data, data.n + 1)
    with pytest.raises(ConfigError):
        kmeanspp_baseline(data, 0)


def test_kmeanspp_power() -> None:
    sol = kmeanspp_baseline(_separated(), 4, 10, RngStream(1))
    assert sol.power == 2
    assert sol.k == 4


def test_private_lloyd_ledger_and_trace(blobs_2d: Dataset) -> None:
    sol = private_lloyd_baseline(blobs_2d, 4, 1.0, 5, RngStream(0))
    assert len(sol.meta["trace"]) == 5
    assert [label for label, _ in sol.ledger] == [f"private_lloyd.iter{i}" for i in range(5)]
    assert math.fsum(eps for _, eps in sol.ledger) == pytest.approx(1.0)


def test_private_lloyd_noise_disabled_cost_does_not_grow(blobs_2d: Dataset) -> None:
    sol = private_lloyd_baseline(blobs_2d, 4, math.inf, 6, RngStream(2), lambda_smooth=1e-3)
    trace = sol.meta["trace"]
    for before, after in zip(trace, trace[1:]):
        assert after <= before * 1.05


def test_private_lloyd_single_blob_finds_median() -> None:
    points = np.random.default_rng(8).normal(0.2, 0.05, size=(800, 2))
    data = Dataset.in_ball(points)
    sol = private_lloyd_baseline(data, 1, math.inf, 3, RngStream(1), lambda_smooth=1e-3)
    assert np.linalg.norm(sol.centers[0] - geometric_median(points)) <= 1e-2


def test_private_lloyd_errors(blobs_2d: Dataset) -> None:
    with pytest.raises(ConfigError):
        private_lloyd_baseline(blobs_2d, 0, 1.0)
    with pytest.raises(ConfigError):
        private_lloyd_baseline(blobs_2d, 2, 1.0, iters=0)


def test_hst_refined_ledger(blobs_2d: Dataset) -> None:
    sol = hst_refined(blobs_2d, 4, 1.0, RngStream(0))
    labels = [label for label, _ in sol.ledger]
    assert labels[0] == "make_private"
    assert all(label.startswith("refine.iter") for label in labels[1:])
    assert math.fsum(eps for _, eps in sol.ledger) == pytest.approx(1.0)
    assert sol.tree_cost is not None


@pytest.mark.slow
@pytest.mark.parametrize(("epsilon", "bound"), [(1.0, 5.0), (math.inf, 3.0)])
def test_hst_close_to_kmedianpp(epsilon: float, bound: float) -> None:
    ratios = []
    for seed in range(10):
        data = gen_synthetic("blobs", 10_000, 2, {"centers": 4, "sigma": 0.02}, RngStream(seed)).data
        hst = hst_refined(data, 4, epsilon, RngStream(seed), TreeConfig(mode="experimental"))
        baseline = kmedianpp_baseline(data, 4, 10, RngStream(seed))
        ratios.append(hst.cost / baseline.cost)
    assert float(np.median(ratios)) <= bound


@pytest.mark.slow
def test_more_budget_means_lower_cost(blobs_2d: Dataset) -> None:
    wins = 0
    for seed in range(10):
        generous = dp_kmedian(blobs_2d, 4, 1.0, RngStream(seed))
        tight = dp_kmedian(blobs_2d, 4, 0.25, RngStream(seed))
        wins += generous.cost <= tight.cost
    assert wins >= 8


def _small_spec(**overrides) -> ExperimentSpec:
    raw = {
        "name": "unit",
        "dataset": {"kind": "blobs", "n": 300, "d": 2, "centers": 3, "sigma": 0.03, "seed": 1},
        "algorithms": ["kmedianpp", "private-lloyd"],
        "ks": [2],
        "epsilons": [1.0],
        "seeds": [0, 1],
        "private_lloyd_iters": 2,
        "lloyd_iters": 3,
    }
    raw.update(overrides)
    return ExperimentSpec.model_validate(raw)


def test_run_matrix_normalizes_per_k() -> None:
    report = run_matrix(_small_spec())
    assert len(report.runs) == 4
    assert not report.failed()
    normalized = [run.normalized_cost for run in report.runs]
    assert min(normalized) == pytest.approx(1.0)
    assert all(v >= 1.0 for v in normalized)
    assert {(a.algorithm, a.runs) for a in report.aggregates} == {("kmedianpp", 2), ("private-lloyd", 2)}


def test_run_matrix_sweeps_tree_grid() -> None:
    spec = _small_spec(algorithms=["hst", "kmedianpp"], seeds=[0], alpha_depths=[10, 12], betas=[6])
    report = run_matrix(spec)
    assert not report.failed()
    cells = sorted((run.algorithm, run.alpha_depth, run.beta) for run in report.runs)
    assert cells == [("hst", 10.0, 6.0), ("hst", 12.0, 6.0), ("kmedianpp", None, None)]
    assert len(report.aggregates) == 3


def test_run_matrix_records_failures() -> None:
    report = run_matrix(_small_spec(algorithms=["kmedianpp"], ks=[2, 500], seeds=[0]))
    failed = report.failed()
    assert len(failed) == 1
    assert failed[0].k == 500
    assert "k must be in" in failed[0].error


def test_write_report(tmp_path) -> None:
    report = run_matrix(_small_spec(algorithms=["kmedianpp"], epsilons=[math.inf], seeds=[0]))
    json_path, csv_path = write_report(report, tmp_path / "out" / "report")
    assert json_path.suffix == ".json" and csv_path.suffix == ".csv"
    payload = json.loads(json_path.read_text())
    assert payload["runs"][0]["epsilon"] == "inf"
    with open(csv_path) as f:
        rows = list(csv.reader(f))
    assert rows[0][:3] == ["algorithm", "epsilon", "k"]
    assert rows[1][:3] == ["kmedianpp", "inf", "2"]
