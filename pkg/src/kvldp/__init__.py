"""Locally differentially private key-value data collection and analysis."""

from .core import (
    CapacityError,
    DiscretizedState,
    DomainError,
    IllConditionedError,
    PrivacyBudget,
    RandomSource,
    direct_encode,
    discretize,
    flip_keep_probability,
    randomized_response_bit,
    vpp,
)
from .mechanisms import (
    KeyStats,
    KeyValueRecord,
    Mechanism,
    Report,
    StateCounts,
    StateEstimates,
    counts_to_stats,
    f2m_decode,
    f2m_encode,
    kvoh_decode,
    kvoh_encode,
    kvue_decode,
    kvue_encode,
    lpp_encode,
    privkv_decode_improved,
    privkv_decode_original,
    report_size_bits,
    theoretical_bound,
)
from .conditional import (
    AggregateVector,
    Condition,
    EncodedVector,
    conditional_frequency,
    conditional_mean,
    frequency_count,
    frequency_index_set,
    ioh_aggregate,
    ioh_encode,
    ioh_index,
    mean_index_sets,
)
from .datagen import (
    Dataset,
    GroundTruth,
    gen_regime,
    gen_synthetic,
    ingest_ratings,
    load_dataset,
    save_dataset,
    true_conditional,
    true_stats,
)
from .harness import (
    ExperimentConfig,
    MetricRow,
    default_value_study,
    emit,
    run_conditional,
    run_single,
    run_sweep,
    summarize,
)

__version__ = "0.1.0"
