"""Parameter models and environment defaults."""

import json
import math
import os
from pathlib import Path
from typing import Literal

import tomli
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from treeclust.errors import ConfigError

Algorithm = Literal["hst", "hst-mpc", "private-lloyd", "kmedianpp", "kmeans"]
TREE_ALGORITHMS = ("hst", "hst-mpc", "kmeans")


def load_config():
    def _int(name):
        v = os.getenv(name)
        return int(v) if v and v.isdigit() else None

    cfg = {
        "seed": _int("TREECLUST_SEED") or 0,
        "epsilon": float(os.getenv("TREECLUST_EPSILON", "1.0")),
        "lambda": float(os.getenv("TREECLUST_LAMBDA", "1.0")),
        "log_level": os.getenv("TREECLUST_LOG_LEVEL", "INFO").upper(),
    }
    return cfg


def log2n(n: int) -> int:
    """⌈log₂ n⌉ floored at 1, the log used in every noise scale."""
    return max(1, math.ceil(math.log2(max(n, 2))))


def check_epsilon(epsilon: float) -> float:
    if math.isnan(epsilon) or epsilon <= 0:
        raise ConfigError(f"epsilon must be > 0 or inf, got {epsilon}")
    return epsilon


class TreeConfig(BaseModel):
    """Shifted-quadtree depth and expansion threshold."""

    mode: Literal["theory", "experimental"] = "theory"
    alpha_depth: float = Field(12.0, gt=0)
    beta: float = Field(8.0, gt=0)
    max_depth: int | None = Field(None, ge=1)
    threshold: float | None = None

    def resolve_max_depth(self, d: int) -> int | None:
        if self.max_depth is not None:
            return self.max_depth
        if self.mode == "experimental":
            return max(1, math.ceil(self.alpha_depth * d))
        return None

    def noise_scale(self, d: int, n: int, epsilon: float, max_depth: int) -> float:
        if math.isinf(epsilon):
            return 0.0
        if self.mode == "experimental":
            return (max_depth + 1) / epsilon
        return d * log2n(n) / epsilon

    def expansion_threshold(self, d: int, n: int, epsilon: float) -> float:
        if self.threshold is not None:
            return self.threshold
        if math.isinf(epsilon):
            return 0.0
        if self.mode == "experimental":
            return 10 * self.beta * d / epsilon
        return 2 * d * log2n(n) / epsilon


class OneMedianConfig(BaseModel):
    lambda_smooth: float = Field(0.2, gt=0)
    gamma_grad: float | None = Field(None, gt=0)
    max_iter: int = Field(500, ge=1)
    grad_tol: float = Field(1e-8, gt=0)

    def resolve_gamma(self, d: int, n: int) -> float:
        if self.gamma_grad is not None:
            return self.gamma_grad
        return 0.01 * math.sqrt(d) / max(n, 1)


class ProjectBackConfig(BaseModel):
    t: int | None = Field(None, ge=1)
    d_close: float = Field(1.0, gt=0)
    r_small: float | None = Field(None, gt=0, lt=1)
    anchor_share: float = Field(1 / 3, gt=0, lt=1)

    def resolve_t(self, size: int) -> int:
        if self.t is not None:
            return self.t
        return math.ceil(25 * math.log2(size + 2) ** 2)


class KMedianConfig(BaseModel):
    tree: TreeConfig = TreeConfig()
    one_median: OneMedianConfig = OneMedianConfig()
    project_back: ProjectBackConfig = ProjectBackConfig()
    jl_dim: int | None = Field(None, ge=1)
    tree_share: float = Field(0.5, gt=0, lt=1)
    back_composition: Literal["parallel", "sequential"] = "parallel"


class KMeansConfig(BaseModel):
    alpha: float = Field(0.5, gt=0, lt=1)
    pi: float | None = Field(None, gt=0, lt=1)
    init: Literal["origin", "one_mean"] = "origin"
    tree: TreeConfig = TreeConfig()

    def resolve_pi(self, n: int) -> float:
        if self.pi is not None:
            return self.pi
        return 1 / (4 * log2n(n))

    def alpha_f(self, n: int) -> float:
        return self.resolve_pi(n) * self.alpha / 6

    def alpha_c(self, n: int, d: int) -> float:
        pi = self.resolve_pi(n)
        return self.alpha**3 * pi**3 / (144 * d**3 * log2n(n) ** 2)


class MpcConfig(BaseModel):
    """Simulated cluster sizing; memory_words None sizes machines from the input."""

    machines: int = Field(1, ge=1)
    memory_words: float | None = Field(None, gt=0)
    delta: float | None = Field(None, gt=0, le=1)
    gamma: float | None = Field(None, ge=0)
    scaling_slack: float = Field(0.0, ge=0)
    dp_word_constant: float = Field(4.0, gt=0)

    @model_validator(mode="after")
    def _exponents(self):
        if self.delta is not None and self.gamma is not None:
            if self.delta - self.gamma <= self.scaling_slack:
                raise ValueError(
                    f"delta - gamma must exceed scaling_slack ({self.delta} - {self.gamma} <= {self.scaling_slack})"
                )
        return self


class RefineConfig(BaseModel):
    """Private-Lloyd refinement applied after the tree solution in benchmarks."""

    iterations: int = Field(4, ge=0)
    max_points_per_cluster: int = Field(20000, ge=1)
    tree_fraction: float = Field(0.2, gt=0, le=1)
    lambda_smooth: float = Field(0.2, gt=0)


class DatasetRef(BaseModel):
    kind: Literal["blobs", "uniform", "line", "file"] = "blobs"
    path: str | None = None
    n: int = Field(10_000, ge=1)
    d: int = Field(2, ge=1)
    centers: int = Field(4, ge=1)
    sigma: float = Field(0.03, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _path_for_file(self):
        if self.kind == "file" and not self.path:
            raise ValueError("dataset kind 'file' needs a path")
        return self


class ExperimentSpec(BaseModel):
    name: str = "experiment"
    dataset: DatasetRef = DatasetRef()
    algorithms: list[Algorithm] = Field(default_factory=lambda: ["hst", "kmedianpp"])
    ks: list[int] = Field(default_factory=lambda: [4])
    epsilons: list[float] = Field(default_factory=lambda: [1.0])
    seeds: list[int] = Field(default_factory=lambda: list(range(10)))
    alpha_depths: list[float] = Field(default_factory=lambda: [10.0, 12.0, 14.0])
    betas: list[float] = Field(default_factory=lambda: [6.0, 8.0, 10.0])
    lambda_smooth: float = Field(0.2, gt=0)
    gamma_grad: float | None = Field(None, gt=0)
    repetitions: int = Field(1, ge=1)
    lloyd_iters: int = Field(10, ge=0)
    private_lloyd_iters: int = Field(7, ge=1)
    refine: RefineConfig = RefineConfig()
    mpc: MpcConfig = MpcConfig(machines=4)

    @field_validator("algorithms", "ks", "epsilons", "seeds", "alpha_depths", "betas")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("list must be nonempty")
        return v

    @field_validator("ks")
    @classmethod
    def _positive_k(cls, v):
        if any(k <= 0 for k in v):
            raise ValueError("k must be positive")
        return v

    @field_validator("epsilons")
    @classmethod
    def _positive_eps(cls, v):
        if any(math.isnan(e) or e <= 0 for e in v):
            raise ValueError("epsilon must be > 0 or inf")
        return v

    @field_validator("alpha_depths", "betas")
    @classmethod
    def _positive_grid(cls, v):
        if any(not math.isfinite(x) or x <= 0 for x in v):
            raise ValueError("tree grid values must be finite and > 0")
        return v

    def tree_grid(self, algorithm: str) -> list[tuple[float, float] | None]:
        """(α_depth, β) cells swept for tree-based algorithms; one untuned cell for the rest."""
        if algorithm not in TREE_ALGORITHMS:
            return [None]
        return [(a, b) for a in self.alpha_depths for b in self.betas]

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentSpec":
        path = Path(path)
        try:
            if path.suffix == ".json":
                raw = json.loads(path.read_text())
            else:
                with open(path, "rb") as f:
                    raw = tomli.load(f)
            return cls.model_validate(raw)
        except (ValidationError, tomli.TOMLDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"invalid experiment spec {path}: {e}") from e
        except OSError as e:
            raise ConfigError(f"cannot read experiment spec {path}: {e}") from e
