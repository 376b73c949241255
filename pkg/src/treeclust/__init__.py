from treeclust.core import Dataset, RngStream, Solution, clustering_cost, normalize
from treeclust.errors import (
    BudgetExhaustedError,
    ConfigError,
    DataError,
    MemoryOverflowError,
    NoCentersError,
    TreeclustError,
)
from treeclust.kmeans import dp_kmeans, dp_kmeans_exact, reverse_greedy
from treeclust.kmedian import dp_kmedian, kmedian_high_dim, project_back
from treeclust.mpc import mpc_run_kmedian, mpc_run_kmedian_high_dim
from treeclust.privacy import PrivacyBudget, dp_one_mean, dp_one_median, make_private
from treeclust.quadtree import Quadtree, build

__all__ = [
    "BudgetExhaustedError",
    "ConfigError",
    "DataError",
    "Dataset",
    "MemoryOverflowError",
    "NoCentersError",
    "PrivacyBudget",
    "Quadtree",
    "RngStream",
    "Solution",
    "TreeclustError",
    "build",
    "clustering_cost",
    "dp_kmeans",
    "dp_kmeans_exact",
    "dp_kmedian",
    "dp_one_mean",
    "dp_one_median",
    "kmedian_high_dim",
    "make_private",
    "mpc_run_kmedian",
    "mpc_run_kmedian_high_dim",
    "normalize",
    "project_back",
    "reverse_greedy",
]
