"""Inference and FDR-controlled multiple testing of linear forms in noisy matrix completion."""

__version__ = "0.1.0"

from .completion import (
    FactorModel,
    GdConfig,
    MatrixCompleter,
    ObservationSet,
    debias,
    full_estimate,
    gradient_descent_init,
    incoherence_projection,
    low_rank_reconstruct,
)
from .inference import (
    DesignStack,
    LinearForm,
    LinearFormTest,
    TestRecord,
    alignment_ratio,
    batch_statistics,
    confidence_interval,
    pair_correlation,
    tangent_project,
    test_statistic,
)
from .multitest import (
    AggregationScheme,
    HypothesisSet,
    RejectionResult,
    SymmetricAggregationFDR,
    aggregate,
    bh_procedure,
    data_driven_threshold,
    run_algorithm1,
    run_bhq,
    score,
    split_observations,
)
from .whitening import (
    WhitenedScreeningFDR,
    inverse_sqrt,
    lasso,
    ols_refit,
    run_algorithm2,
)

__all__ = [
    "AggregationScheme", "DesignStack", "FactorModel", "GdConfig", "HypothesisSet",
    "LinearForm", "LinearFormTest", "MatrixCompleter", "ObservationSet", "RejectionResult",
    "SymmetricAggregationFDR", "TestRecord", "WhitenedScreeningFDR", "aggregate",
    "alignment_ratio", "batch_statistics", "bh_procedure", "confidence_interval",
    "data_driven_threshold", "debias", "full_estimate", "gradient_descent_init",
    "incoherence_projection", "inverse_sqrt", "lasso", "low_rank_reconstruct", "ols_refit",
    "pair_correlation", "run_algorithm1", "run_algorithm2", "run_bhq", "score",
    "split_observations", "tangent_project", "test_statistic",
]
