"""Command-line entry point: `treeclust cluster|bench|mpc-sim|gen-data|ingest`."""

import json
import math
from enum import Enum
from functools import wraps
from pathlib import Path
from typing import Annotated

import numpy as np
import typer

from treeclust.bench import gen_synthetic, hst_refined, ingest_csv, kmedianpp_baseline, load_npz
from treeclust.bench import private_lloyd_baseline, run_matrix, write_report
from treeclust.config import (
    ExperimentSpec,
    KMeansConfig,
    KMedianConfig,
    MpcConfig,
    OneMedianConfig,
    TreeConfig,
    load_config,
)
from treeclust.core import Dataset, RngStream, Solution, normalize, read_points_csv
from treeclust.errors import ConfigError, TreeclustError
from treeclust.kmeans import dp_kmeans_exact
from treeclust.kmedian import dp_kmedian, kmedian_high_dim
from treeclust.log_utils import get_logger
from treeclust.models import LedgerEntryModel, SolutionReport
from treeclust.mpc import mpc_run_kmedian, mpc_run_kmedian_high_dim
from treeclust.timing import Stopwatch, utc_stamp

logger = get_logger("treeclust.cli")

app = typer.Typer(help="Differentially private clustering on randomly shifted quadtrees.", no_args_is_help=True)

ENV = load_config()


class ClusterAlgorithm(str, Enum):
    kmedian = "kmedian"
    kmedian_high_dim = "kmedian-high-dim"
    kmeans = "kmeans"
    hst = "hst"
    private_lloyd = "private-lloyd"
    kmedianpp = "kmedianpp"


DataOpt = Annotated[Path | None, typer.Option("--data", help="CSV or .npz of points; synthetic blobs if omitted")]
KOpt = Annotated[int, typer.Option("--k", min=1)]
EpsOpt = Annotated[float, typer.Option("--epsilon", help="privacy budget ε")]
NoPrivacyOpt = Annotated[bool, typer.Option("--no-privacy", help="disable all noise (ε = inf)")]
SeedOpt = Annotated[int, typer.Option("--seed")]
OutOpt = Annotated[Path | None, typer.Option("--out", help="write the JSON result here")]


def _exit_codes(fn):
    """Map library errors to process exit codes."""

    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TreeclustError as e:
            logger.error("%s", e)
            typer.echo(f"error: {e}", err=True)
            raise typer.Exit(e.exit_code) from e

    return wrapper


def _epsilon(epsilon: float, no_privacy: bool) -> float:
    return math.inf if no_privacy else epsilon


def _load(data: Path | None, n: int, d: int, seed: int, lam: float) -> Dataset:
    if data is None:
        return gen_synthetic("blobs", n, d, rng=RngStream(seed), lam=lam).data
    if data.suffix == ".npz":
        return load_npz(data)
    return normalize(read_points_csv(data), lam)


def _emit(payload: str, out: Path | None) -> None:
    if out is None:
        typer.echo(payload)
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(payload)
    logger.info("wrote %s", out)


def _report(data: Dataset, solution: Solution, epsilon: float, wall_time: float) -> SolutionReport:
    return SolutionReport(
        centers=data.to_raw(solution.centers).tolist(),
        power=solution.power,
        cost=solution.cost,
        tree_cost=solution.tree_cost,
        epsilon=epsilon,
        ledger=[LedgerEntryModel(label=label, epsilon=eps) for label, eps in solution.ledger],
        wall_time=wall_time,
        created_at=utc_stamp(),
    )


@app.command()
@_exit_codes
def cluster(
    data: DataOpt = None,
    algorithm: Annotated[ClusterAlgorithm, typer.Option("--algorithm")] = ClusterAlgorithm.kmedian,
    k: KOpt = 4,
    epsilon: EpsOpt = ENV["epsilon"],
    no_privacy: NoPrivacyOpt = False,
    seed: SeedOpt = ENV["seed"],
    z: Annotated[int, typer.Option("--z", min=1, max=2)] = 1,
    alpha_depth: Annotated[float | None, typer.Option("--alpha-depth")] = None,
    beta: Annotated[float | None, typer.Option("--beta")] = None,
    lambda_smooth: Annotated[float, typer.Option("--lambda-smooth")] = 0.2,
    gamma_grad: Annotated[float | None, typer.Option("--gamma-grad")] = None,
    n: Annotated[int, typer.Option("--n", help="synthetic size")] = 10_000,
    d: Annotated[int, typer.Option("--d", help="synthetic dimension")] = 2,
    out: OutOpt = None,
):
    """One clustering run; centers are reported in raw coordinates."""
    eps = _epsilon(epsilon, no_privacy)
    points = _load(data, n, d, seed, ENV["lambda"])
    tree = _tree_config(alpha_depth, beta)
    config = KMedianConfig(tree=tree, one_median=OneMedianConfig(lambda_smooth=lambda_smooth, gamma_grad=gamma_grad))
    rng = RngStream(seed)
    with Stopwatch() as watch:
        if algorithm is ClusterAlgorithm.kmedian:
            solution = dp_kmedian(points, k, eps, rng, config, z=z)
        elif algorithm is ClusterAlgorithm.kmedian_high_dim:
            solution = kmedian_high_dim(points, k, eps, rng, config)
        elif algorithm is ClusterAlgorithm.kmeans:
            solution = dp_kmeans_exact(points, k, eps, rng, KMeansConfig(tree=tree))
        elif algorithm is ClusterAlgorithm.hst:
            hst_tree = TreeConfig(mode="experimental", alpha_depth=alpha_depth or 12.0, beta=beta or 8.0)
            solution = hst_refined(points, k, eps, rng, hst_tree, None, gamma_grad)
        elif algorithm is ClusterAlgorithm.private_lloyd:
            solution = private_lloyd_baseline(points, k, eps, 7, rng, lambda_smooth=1.0, gamma_grad=gamma_grad)
        else:
            solution = kmedianpp_baseline(points, k, 10, rng)
    _emit(_report(points, solution, eps, watch.elapsed).model_dump_json(indent=2), out)


def _tree_config(alpha_depth: float | None, beta: float | None) -> TreeConfig:
    if alpha_depth is None and beta is None:
        return TreeConfig()
    return TreeConfig(mode="experimental", alpha_depth=alpha_depth or 12.0, beta=beta or 8.0)


@app.command()
@_exit_codes
def bench(
    spec: Annotated[Path, typer.Argument(help="experiment spec, TOML or JSON")],
    out: Annotated[Path, typer.Option("--out")] = Path("results/report.json"),
):
    """Run an experiment matrix and write the JSON report and CSV plot series."""
    report = run_matrix(ExperimentSpec.from_file(spec))
    json_path, csv_path = write_report(report, out)
    typer.echo(f"{len(report.runs)} runs ({len(report.failed())} failed) -> {json_path}, {csv_path}")


@app.command("mpc-sim")
@_exit_codes
def mpc_sim(
    data: DataOpt = None,
    machines: Annotated[int, typer.Option("--machines", min=1)] = 4,
    memory_words: Annotated[float | None, typer.Option("--memory-words", help="per-machine cap; sized from n if omitted")] = None,
    k: KOpt = 4,
    epsilon: EpsOpt = ENV["epsilon"],
    no_privacy: NoPrivacyOpt = False,
    seed: SeedOpt = ENV["seed"],
    alpha_depth: Annotated[float | None, typer.Option("--alpha-depth")] = None,
    beta: Annotated[float | None, typer.Option("--beta")] = None,
    high_dim: Annotated[bool, typer.Option("--high-dim", help="JL projection and project-back")] = False,
    n: Annotated[int, typer.Option("--n")] = 10_000,
    d: Annotated[int, typer.Option("--d")] = 2,
    out: OutOpt = None,
):
    """Simulated MPC run; prints the solution and the per-round trace."""
    eps = _epsilon(epsilon, no_privacy)
    points = _load(data, n, d, seed, ENV["lambda"])
    try:
        cfg = MpcConfig(machines=machines, memory_words=memory_words)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    config = KMedianConfig(tree=_tree_config(alpha_depth, beta))
    run = mpc_run_kmedian_high_dim if high_dim else mpc_run_kmedian
    with Stopwatch() as watch:
        solution, trace = run(points, k, eps, cfg, seed, config)
    payload = {
        "solution": json.loads(_report(points, solution, eps, watch.elapsed).model_dump_json()),
        "trace": json.loads(trace.to_report(machines, solution.meta["memory_words"]).model_dump_json()),
    }
    _emit(json.dumps(payload, indent=2), out)


@app.command("gen-data")
@_exit_codes
def gen_data(
    out: Annotated[Path, typer.Argument(help=".npz or .csv")],
    kind: Annotated[str, typer.Option("--kind")] = "blobs",
    n: Annotated[int, typer.Option("--n", min=1)] = 10_000,
    d: Annotated[int, typer.Option("--d", min=1)] = 2,
    centers: Annotated[int, typer.Option("--centers", min=1)] = 4,
    sigma: Annotated[float, typer.Option("--sigma")] = 0.03,
    seed: SeedOpt = ENV["seed"],
):
    """Write a synthetic dataset."""
    synthetic = gen_synthetic(kind, n, d, {"centers": centers, "sigma": sigma}, RngStream(seed), ENV["lambda"])
    data = synthetic.data
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".csv":
        np.savetxt(out, data.points, delimiter=",")
    else:
        np.savez(out, points=data.points, shift=data.shift, scale=data.scale, lam=data.lam)
    typer.echo(f"{data.n} points in R^{data.d} -> {out}")


@app.command()
@_exit_codes
def ingest(
    csv_path: Annotated[Path, typer.Argument(help="raw CSV, one point per row")],
    out: Annotated[Path, typer.Argument(help="output .npz")],
    drop_column: Annotated[str | None, typer.Option("--drop-column", help="label column name or index")] = None,
):
    """Normalize a downloaded CSV into the unit ball."""
    data = ingest_csv(csv_path, out, drop_column, ENV["lambda"])
    typer.echo(f"{data.n} points in R^{data.d} -> {out}")


if __name__ == "__main__":
    app()
