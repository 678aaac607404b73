"""Additive per-layer cost models fit from throughput measurements.

Per-token latency (inverse throughput) is modeled as a sum of per-type
coefficients weighted by layer counts.  Raw coefficients carry latency units;
everything downstream (budgets, frontiers, presets) uses costs normalized so
the reference type costs 1.00 per layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .placements import Allocation, MixerCatalog, Placement, allocation_of


@dataclass(frozen=True)
class ThroughputRecord:
    """One benchmark measurement: allocation plus aggregate decode throughput."""

    allocation: Allocation
    throughput: float

    def __post_init__(self) -> None:
        if not (self.throughput > 0 and np.isfinite(self.throughput)):
            raise ValueError(f"throughput must be finite and > 0, got {self.throughput}")


@dataclass(frozen=True)
class FitStats:
    r_squared: float
    mean_abs_error_fraction: float
    n_records: int


@dataclass(frozen=True)
class CostModel:
    """Per-type latency coefficients; placement cost is additive over layers."""

    coefficients: tuple[float, ...]
    reference_type: int = 0
    fit_stats: FitStats | None = None

    def __post_init__(self) -> None:
        if not self.coefficients:
            raise ValueError("cost model needs at least one type")
        if not 0 <= self.reference_type < len(self.coefficients):
            raise ValueError(f"reference type {self.reference_type} out of range")
        for c in self.coefficients:
            if not (c > 0 and np.isfinite(c)):
                raise ValueError(f"coefficients must be finite and > 0, got {self.coefficients}")

    @property
    def num_types(self) -> int:
        return len(self.coefficients)

    @property
    def normalized_costs(self) -> tuple[float, ...]:
        ref = self.coefficients[self.reference_type]
        return tuple(c / ref for c in self.coefficients)


def placement_cost(placement: Placement, model: CostModel) -> float:
    """Sum of normalized per-layer costs."""
    if placement.num_types != model.num_types:
        raise ValueError(
            f"placement has {placement.num_types} types, cost model has {model.num_types}"
        )
    costs = model.normalized_costs
    return float(sum(costs[x] for x in placement.assignments))


def allocation_cost(allocation: Allocation, model: CostModel) -> float:
    """Normalized cost from counts alone; equals placement_cost for any member."""
    if allocation.num_types != model.num_types:
        raise ValueError(
            f"allocation has {allocation.num_types} types, cost model has {model.num_types}"
        )
    costs = model.normalized_costs
    return float(sum(n * c for n, c in zip(allocation.counts, costs)))


def fit_idealized(pure_throughputs: list[float], reference_type: int = 0) -> CostModel:
    """Cost model from pure placements: cost_X = throughput_ref / throughput_X.

    Assumes each layer contributes independently; the raw coefficient is the
    per-layer share of inverse throughput, so normalization reproduces the
    throughput ratios exactly.
    """
    if len(pure_throughputs) < 1:
        raise ValueError("need one throughput per type")
    for t in pure_throughputs:
        if not (t > 0 and np.isfinite(t)):
            raise ValueError(f"throughputs must be finite and > 0, got {pure_throughputs}")
    coefficients = tuple(1.0 / t for t in pure_throughputs)
    return CostModel(coefficients, reference_type=reference_type)


def filter_singletons(records: list[ThroughputRecord], min_count: int = 3) -> list[ThroughputRecord]:
    """Keep records where every type count is 0 or at least `min_count`.

    Mixed placements with a tiny minority of one type are poorly described by
    the linear model (serving-engine overhead), so they are excluded rather
    than modeled.
    """
    if min_count < 0:
        raise ValueError("min_count must be >= 0")
    return [
        r for r in records
        if all(n == 0 or n >= min_count for n in r.allocation.counts)
    ]


def fit_regression(
    records: list[ThroughputRecord],
    reference_type: int = 0,
    intercept: bool = False,
) -> CostModel:
    """Ordinary least squares of inverse throughput on per-type layer counts.

    No intercept by default: a constant term would break the additivity the
    optimizer relies on.  R-squared is computed on the latency scale, using
    the uncentered total sum of squares when there is no intercept.
    """
    if not records:
        raise ValueError("no records to fit")
    num_types = records[0].allocation.num_types
    for r in records:
        if r.allocation.num_types != num_types:
            raise ValueError("records disagree on the number of types")
    if len(records) < num_types:
        raise ValueError(f"need at least {num_types} records, got {len(records)}")

    counts = np.array([r.allocation.counts for r in records], dtype=np.float64)
    y = np.array([1.0 / r.throughput for r in records], dtype=np.float64)
    design = np.hstack([counts, np.ones((len(records), 1))]) if intercept else counts

    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        deficient = _deficient_directions(design, num_types)
        raise ValueError(
            "rank-deficient design: no independent variation for "
            f"{deficient}; add records that vary these counts"
        )

    solution, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    coefficients = solution[:num_types]
    predicted = design @ solution

    sse = float(np.sum((y - predicted) ** 2))
    if intercept:
        sst = float(np.sum((y - y.mean()) ** 2))
    else:
        sst = float(np.sum(y ** 2))
    r_squared = 1.0 - sse / sst if sst > 0 else 1.0
    mae_frac = float(np.mean(np.abs(predicted - y) / y))

    stats = FitStats(r_squared=r_squared, mean_abs_error_fraction=mae_frac, n_records=len(records))
    return CostModel(tuple(float(c) for c in coefficients), reference_type=reference_type, fit_stats=stats)


def _deficient_directions(design: np.ndarray, num_types: int) -> list[str]:
    """Name the count columns involved in the design's null space."""
    _, s, vt = np.linalg.svd(design)
    tol = max(design.shape) * np.finfo(np.float64).eps * (s[0] if len(s) else 1.0)
    null_vectors = vt[len(s[s > tol]):]
    involved = sorted({
        f"type {j}" if j < num_types else "intercept"
        for vec in null_vectors
        for j in np.nonzero(np.abs(vec) > 1e-9)[0]
    })
    return involved


def cost_of_counts(counts: np.ndarray, model: CostModel) -> np.ndarray:
    """Vectorized normalized cost for an array of count rows."""
    return counts @ np.asarray(model.normalized_costs)


def pure_allocation(num_layers: int, num_types: int, type_index: int) -> Allocation:
    """Allocation with every layer on one type."""
    counts = [0] * num_types
    counts[type_index] = num_layers
    return Allocation(tuple(counts))


def record_from_placement(placement: Placement, throughput: float) -> ThroughputRecord:
    return ThroughputRecord(allocation_of(placement), throughput)


def cost_model_to_dict(model: CostModel, catalog: MixerCatalog) -> dict:
    """JSON artifact form, keyed by type name."""
    if catalog.num_types != model.num_types:
        raise ValueError("catalog does not match cost model")
    payload = {
        "coefficients": {n: c for n, c in zip(catalog.names, model.coefficients)},
        "normalized": {n: c for n, c in zip(catalog.names, model.normalized_costs)},
        "reference": catalog.names[model.reference_type],
    }
    if model.fit_stats is not None:
        payload["fit"] = {
            "r2": model.fit_stats.r_squared,
            "mae_frac": model.fit_stats.mean_abs_error_fraction,
            "n": model.fit_stats.n_records,
        }
    return payload


def cost_model_from_dict(payload: dict, catalog: MixerCatalog) -> CostModel:
    coeffs = payload["coefficients"]
    missing = [n for n in catalog.names if n not in coeffs]
    if missing:
        raise ValueError(f"cost model missing coefficients for {missing}")
    fit = payload.get("fit")
    stats = None
    if fit is not None:
        stats = FitStats(
            r_squared=fit["r2"],
            mean_abs_error_fraction=fit["mae_frac"],
            n_records=fit["n"],
        )
    return CostModel(
        tuple(float(coeffs[n]) for n in catalog.names),
        reference_type=catalog.index_of(payload["reference"]),
        fit_stats=stats,
    )
