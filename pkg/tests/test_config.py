import json
import logging
import math

import pytest
from pydantic import ValidationError

from treeclust.config import (
    ExperimentSpec,
    KMeansConfig,
    OneMedianConfig,
    ProjectBackConfig,
    TreeConfig,
    check_epsilon,
    load_config,
    log2n,
)
from treeclust.errors import ConfigError
from treeclust.log_utils import LOG_FORMAT, get_logger
from treeclust.models import LedgerEntryModel, RunRecord, RunReport, SolutionReport
from treeclust.timing import Stopwatch, utc_stamp


def test_load_config_defaults(monkeypatch) -> None:
    for name in ("TREECLUST_SEED", "TREECLUST_EPSILON", "TREECLUST_LAMBDA", "TREECLUST_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    assert load_config() == {"seed": 0, "epsilon": 1.0, "lambda": 1.0, "log_level": "INFO"}


def test_load_config_env(monkeypatch) -> None:
    monkeypatch.setenv("TREECLUST_SEED", "42")
    monkeypatch.setenv("TREECLUST_EPSILON", "0.5")
    monkeypatch.setenv("TREECLUST_LOG_LEVEL", "debug")
    cfg = load_config()
    assert cfg["seed"] == 42
    assert cfg["epsilon"] == 0.5
    assert cfg["log_level"] == "DEBUG"


def test_get_logger_level(monkeypatch) -> None:
    monkeypatch.setenv("TREECLUST_LOG_LEVEL", "WARNING")
    logger = get_logger("treeclust.test")
    assert logger.level == logging.WARNING
    assert len(logger.handlers) == 1
    get_logger("treeclust.test")
    assert len(logger.handlers) == 1
    assert logger.handlers[0].formatter._fmt == LOG_FORMAT


def test_log2n() -> None:
    assert log2n(1) == 1
    assert log2n(2) == 1
    assert log2n(1000) == 10
    assert log2n(1024) == 10


def test_check_epsilon() -> None:
    assert check_epsilon(math.inf) == math.inf
    for bad in (0.0, -2.0, float("nan")):
        with pytest.raises(ConfigError):
            check_epsilon(bad)


def test_tree_config_depths() -> None:
    assert TreeConfig().resolve_max_depth(3) is None
    assert TreeConfig(mode="experimental", alpha_depth=12).resolve_max_depth(2) == 24
    assert TreeConfig(max_depth=7, mode="experimental").resolve_max_depth(2) == 7
    assert TreeConfig(threshold=3.0).expansion_threshold(2, 100, math.inf) == 3.0
    with pytest.raises(ValidationError):
        TreeConfig(max_depth=0)


def test_derived_parameters() -> None:
    assert OneMedianConfig().resolve_gamma(4, 100) == pytest.approx(0.01 * 2 / 100)
    assert OneMedianConfig(gamma_grad=0.3).resolve_gamma(4, 100) == 0.3
    assert ProjectBackConfig(t=9).resolve_t(1000) == 9
    assert ProjectBackConfig().resolve_t(2) == math.ceil(25 * 2.0**2)
    cfg = KMeansConfig()
    assert cfg.resolve_pi(1024) == pytest.approx(1 / 40)
    assert cfg.alpha_f(1024) == pytest.approx(0.5 / 40 / 6)
    with pytest.raises(ValidationError):
        KMeansConfig(alpha=1.0)


def test_experiment_spec_from_toml(tmp_path) -> None:
    path = tmp_path / "spec.toml"
    path.write_text('name = "t"\nks = [2, 3]\nepsilons = [0.5]\n\n[dataset]\nkind = "uniform"\nn = 50\n')
    spec = ExperimentSpec.from_file(path)
    assert spec.ks == [2, 3]
    assert spec.dataset.kind == "uniform"
    assert spec.mpc.machines == 4
    assert spec.alpha_depths == [10.0, 12.0, 14.0] and spec.betas == [6.0, 8.0, 10.0]
    assert len(spec.tree_grid("hst")) == 9
    assert spec.tree_grid("kmedianpp") == [None]


def test_experiment_spec_from_json(tmp_path) -> None:
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"algorithms": ["kmeans"], "seeds": [3]}))
    assert ExperimentSpec.from_file(path).algorithms == ["kmeans"]


@pytest.mark.parametrize(
    "body",
    [
        'ks = []\n',
        'ks = [0]\n',
        'epsilons = [-1.0]\n',
        'betas = []\n',
        'alpha_depths = [0]\n',
        'algorithms = ["magic"]\n',
        '[dataset]\nkind = "file"\n',
        'name = \n',
    ],
)
def test_experiment_spec_invalid(tmp_path, body: str) -> None:
    path = tmp_path / "bad.toml"
    path.write_text(body)
    with pytest.raises(ConfigError):
        ExperimentSpec.from_file(path)


def test_experiment_spec_missing_file(tmp_path) -> None:
    with pytest.raises(ConfigError, match="cannot read"):
        ExperimentSpec.from_file(tmp_path / "nope.toml")


def test_models_serialize_infinite_epsilon() -> None:
    report = SolutionReport(centers=[[0.0, 1.0]], cost=2.0, epsilon=math.inf)
    payload = json.loads(report.model_dump_json())
    assert payload["epsilon"] == "inf"
    assert report.k == 1
    entry = LedgerEntryModel(label="tree", epsilon=0.5)
    assert json.loads(entry.model_dump_json())["epsilon"] == 0.5


def test_run_record_and_report() -> None:
    ok = RunRecord(
        algorithm="hst",
        k=2,
        epsilon=1.0,
        seed=0,
        cost=3.0,
        normalized_cost=1.0,
        ledger=[LedgerEntryModel(label="a", epsilon=0.25), LedgerEntryModel(label="b", epsilon=0.75)],
    )
    failed = RunRecord(algorithm="kmedianpp", k=2, epsilon=1.0, seed=0, error="boom")
    assert ok.ok and not failed.ok
    assert ok.epsilon_spent == pytest.approx(1.0)
    report = RunReport(name="r", created_at=utc_stamp(), runs=[ok, failed])
    assert report.failed() == [failed]
    bad = RunRecord(algorithm="hst", k=2, epsilon=1.0, seed=1, cost=1.0, normalized_cost=0.5)
    with pytest.raises(ValidationError):
        RunReport(name="r", created_at=utc_stamp(), runs=[bad])


def test_timing() -> None:
    stamp = utc_stamp()
    assert stamp.endswith("Z") and "T" in stamp
    with Stopwatch() as watch:
        sum(range(1000))
    assert watch.elapsed >= 0.0
