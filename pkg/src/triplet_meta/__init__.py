"""Study-similarity embeddings from oracle-judged triplets, k-means
subgrouping, and random-effects meta-analysis within subgroups."""

__version__ = "0.1.0"

from .clustering import (ClusterAssignment, ElbowCurve, adjusted_rand_index,
                         elbow_curve, kmeans)
from .dataset import (Characteristic, CharacteristicSpec, Dataset, Study,
                      ValidationReport, load_dataset, save_dataset,
                      validate_dataset)
from .embedding import (TrainConfig, TrainHistory, train, triplet_error,
                        triplet_loss, triplet_loss_grad)
from .errors import (ArtifactError, ConfigError, DataError, DivergenceError,
                     OracleError, ReplyParseError, TransportError,
                     TripletMetaError)
from .meta import (MetaRegressionResult, MetaResult, SubgroupReport,
                   heterogeneity_stats, intervals, meta_analysis,
                   meta_regression, pooled_effect, reml_tau2,
                   subgroup_analysis)
from .oracle import (GowerOracle, LlmOracle, OracleConfig, TripletJudgment,
                     gower_distance, judge_gower, judge_llm, numeric_ranges)
from .pipeline import RunConfig, RunManifest, run_pipeline
from .sensitivity import (GridSpec, SensitivityReport, run_grid,
                          stable_clusters)
from .triplets import (BudgetParams, Triplet, TripletSet, generate_pool,
                       load_triplets, save_triplets, subsample, triplet_budget)

__all__ = [
    "__version__",
    # dataset
    "Characteristic", "CharacteristicSpec", "Dataset", "Study",
    "ValidationReport", "load_dataset", "save_dataset", "validate_dataset",
    # oracle
    "GowerOracle", "LlmOracle", "OracleConfig", "TripletJudgment",
    "gower_distance", "judge_gower", "judge_llm", "numeric_ranges",
    # triplets
    "BudgetParams", "Triplet", "TripletSet", "generate_pool", "load_triplets",
    "save_triplets", "subsample", "triplet_budget",
    # embedding
    "TrainConfig", "TrainHistory", "train", "triplet_error", "triplet_loss",
    "triplet_loss_grad",
    # clustering
    "ClusterAssignment", "ElbowCurve", "adjusted_rand_index", "elbow_curve",
    "kmeans",
    # meta
    "MetaRegressionResult", "MetaResult", "SubgroupReport",
    "heterogeneity_stats", "intervals", "meta_analysis", "meta_regression",
    "pooled_effect", "reml_tau2", "subgroup_analysis",
    # sensitivity
    "GridSpec", "SensitivityReport", "run_grid", "stable_clusters",
    # pipeline
    "RunConfig", "RunManifest", "run_pipeline",
    # errors
    "ArtifactError", "ConfigError", "DataError", "DivergenceError",
    "OracleError", "ReplyParseError", "TransportError", "TripletMetaError",
]
