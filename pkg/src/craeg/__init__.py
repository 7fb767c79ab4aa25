"""Embedding-space crowding diagnostics and crowding-aware reweighting.

Measures how much next-token probability mass sits on geometrically
redundant (high-cosine) candidates, and reweights step distributions to
push mass from crowded tokens toward distinct alternatives. Ships the
measurement geometry, the reweighting sampler, statistical analyses,
file formats, a streaming protocol, and a synthetic end-to-end study.
"""

from .analytics import (
    EcdfCurve,
    RegressionResult,
    SequenceStats,
    avg_at_k,
    distinct_n,
    ecdf,
    expected_prob_by_crowding,
    logistic_fit,
    pass_at_k,
    point_biserial,
    semantic_diversity,
    shannon_entropy,
    standardize,
    tertile_accuracy,
)
from .geometry import (
    CrowdingReport,
    EmbeddingTable,
    NextTokenDistribution,
    adjusted_step_crowding,
    cosine_similarity,
    measure_crowding,
    pairwise_abs_cosine,
    sequence_crowding,
    step_crowding,
    token_crowding_scores,
    top_k_restrict,
)
from .sampler import (
    CraegConfig,
    InfeasibleReductionError,
    PipelineResult,
    ReweightReport,
    SkipCorrection,
    compute_lambda,
    correction_factors,
    decode_pipeline,
    exact_lambda_oracle,
    reweight,
    reweight_block,
    sample_token,
    select_correction_set,
    temperature_scale,
    top_p_filter,
)
from .simulate import (
    ArmSummary,
    SimulationReport,
    build_clustered_table,
    simulate_synthetic,
)
from .trace_io import (
    BadMagicError,
    EmbeddingFormatError,
    NonFinitePayloadError,
    SequenceEndRecord,
    StepRecord,
    TraceParseError,
    TraceRecord,
    TruncatedFileError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
    load_embedding_table,
    read_trace_stream,
    save_embedding_table,
    serve_stream,
    write_trace,
)

__version__ = "0.1.0"
