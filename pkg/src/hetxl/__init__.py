"""Heteroscedastic classification heads with low-rank input-dependent noise.

The package models logits as Gaussian-perturbed affine maps and estimates
the resulting softmax/sigmoid integrals by Monte Carlo sampling or a
mean-field approximation, with a trainable temperature.  Noise can live on
the logits directly, on the pre-logit features, or on hashed logit buckets.
"""

from .covariance import (
    DIAGONAL,
    HASHED_SPACE,
    LOGIT_SPACE,
    PRE_LOGIT_SPACE,
    RANK_ONE,
    CovarianceSpec,
    Dims,
    FactorMatrix,
    affine_transform,
    covariance_dense,
    extra_param_count,
    factor_matrix,
    hash_bucket_map,
    identity_bucket_map,
    logit_variances,
)
from .datagen import (
    GAUSSIAN,
    GUMBEL,
    NONE,
    SyntheticDataset,
    SyntheticSpec,
    default_synthetic_spec,
    default_truth_head,
    make_synthetic,
    sample_label_frequencies,
    split,
)
from .diagnostics import (
    BenchReport,
    BenchRow,
    CostTerms,
    bench_predict,
    complexity_terms,
    crossover_samples,
    spa_cosine,
    spa_profile,
)
from .errors import ConfigError, DataError, NumericError, TrainingDiverged
from .io import (
    load_dataset,
    load_head,
    read_tensors,
    save_dataset,
    save_head,
    spec_from_json_dict,
    spec_to_json_dict,
    write_tensors,
)
from .meanfield import (
    DEFAULT_LAMBDA,
    LAMBDA_LOGISTIC_VARIANCE,
    LAMBDA_PROBIT,
    MeanFieldConfig,
    gauss_hermite_sigmoid,
    mf_predict,
    mf_sigmoid,
    mf_softmax,
)
from .sampling import (
    LINKS,
    SIGMOID,
    SOFTMAX,
    Head,
    PredictiveBatch,
    RngStream,
    deterministic_predict,
    draw_noise,
    logit_moments,
    mc_logits,
    mc_predict,
    mean_logits,
)
from .temperature import (
    DEFAULT_TAU_MAX,
    DEFAULT_TAU_MIN,
    Temperature,
    temperature_value,
)
from .training import (
    DEFAULT_TAU_GRID,
    DETERMINISTIC,
    MC,
    MEAN_FIELD,
    GridPoint,
    MetricsTrace,
    TrainConfig,
    batch_loss,
    grid_search_tau,
    init_head,
    loss_and_grad,
    luketina_tau_grad,
    nll,
    precision_at_1,
    predict,
    simple_tau_grad,
    solution_map_tau_sensitivity,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BenchReport",
    "BenchRow",
    "ConfigError",
    "CostTerms",
    "CovarianceSpec",
    "DataError",
    "DEFAULT_LAMBDA",
    "DEFAULT_TAU_GRID",
    "DEFAULT_TAU_MAX",
    "DEFAULT_TAU_MIN",
    "DETERMINISTIC",
    "DIAGONAL",
    "Dims",
    "FactorMatrix",
    "GAUSSIAN",
    "GridPoint",
    "GUMBEL",
    "HASHED_SPACE",
    "Head",
    "LAMBDA_LOGISTIC_VARIANCE",
    "LAMBDA_PROBIT",
    "LINKS",
    "LOGIT_SPACE",
    "MC",
    "MEAN_FIELD",
    "MeanFieldConfig",
    "MetricsTrace",
    "NONE",
    "NumericError",
    "PRE_LOGIT_SPACE",
    "PredictiveBatch",
    "RANK_ONE",
    "RngStream",
    "SIGMOID",
    "SOFTMAX",
    "SyntheticDataset",
    "SyntheticSpec",
    "Temperature",
    "TrainConfig",
    "TrainingDiverged",
    "batch_loss",
    "affine_transform",
    "bench_predict",
    "complexity_terms",
    "covariance_dense",
    "crossover_samples",
    "default_synthetic_spec",
    "default_truth_head",
    "deterministic_predict",
    "draw_noise",
    "extra_param_count",
    "factor_matrix",
    "gauss_hermite_sigmoid",
    "grid_search_tau",
    "hash_bucket_map",
    "identity_bucket_map",
    "init_head",
    "load_dataset",
    "load_head",
    "logit_moments",
    "logit_variances",
    "loss_and_grad",
    "luketina_tau_grad",
    "make_synthetic",
    "mc_logits",
    "mc_predict",
    "mean_logits",
    "mf_predict",
    "mf_sigmoid",
    "mf_softmax",
    "nll",
    "precision_at_1",
    "predict",
    "read_tensors",
    "sample_label_frequencies",
    "save_dataset",
    "save_head",
    "simple_tau_grad",
    "solution_map_tau_sensitivity",
    "spa_cosine",
    "spa_profile",
    "spec_from_json_dict",
    "spec_to_json_dict",
    "split",
    "temperature_value",
    "train",
    "write_tensors",
]
