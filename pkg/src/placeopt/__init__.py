"""Surrogate-guided placement optimization under additive cost constraints.

Pipeline: fit a linear cost model from throughput records, fit a Bayesian
cluster-expansion surrogate from (placement, score) evaluations, solve the
cost-constrained optimum exactly by dynamic programming, extract Pareto
frontiers, refine with risk-bucket acquisition, estimate speculative-decoding
acceptance from traces, and analyze rank stability across checkpoints.
"""

from .placements import (
    Allocation,
    DEFAULT_CATALOG,
    MixerCatalog,
    Placement,
    allocation_of,
    conditional_same_type_probability,
    count_compositions,
    count_placements_in_allocation,
    derive_seed,
    sample_global,
    sample_local,
)
from .cost import (
    CostModel,
    ThroughputRecord,
    allocation_cost,
    filter_singletons,
    fit_idealized,
    fit_regression,
    placement_cost,
)
from .features import ExpansionConfig, FeatureVector, encode, feature_count
from .surrogate import (
    EvaluationRecord,
    NIGPrior,
    ScoreNormalizer,
    SurrogatePosterior,
    default_expansion_candidates,
    fit,
    log_marginal_likelihood,
    predict,
    predict_batch,
    select_expansion,
)
from .dp import (
    AllocationSolution,
    InfeasibleBudgetError,
    MRFPotentials,
    ParetoPoint,
    StateSpaceBudgetError,
    constrained_optimum,
    extract_potentials,
    pareto_frontier,
    solve_all_allocations,
)
from .acquisition import (
    AcquisitionConfig,
    Evaluator,
    EvaluatorError,
    RefinementResult,
    SubprocessEvaluator,
    generate_candidates,
    refinement_loop,
    sample_exploration,
    select_batch,
)
from .speculative import (
    AcceptanceEstimate,
    DraftPoint,
    TraceTokenLogProbs,
    estimate_acceptance,
    search_draft_placement,
    speculative_speedup,
)
from .stability import (
    Band,
    CheckpointScores,
    StabilityReport,
    analyze,
    kendalls_w,
    normalize_scores,
    rolling_window_stability,
    spearman_rho,
    top_k_overlap,
)
from .synthetic import (
    SyntheticLandscape,
    SyntheticOracleEvaluator,
    brute_force_frontier,
    generate_landscape,
    oracle_score,
)

__version__ = "0.1.0"
