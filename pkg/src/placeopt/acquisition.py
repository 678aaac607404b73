"""Risk-bucket candidate selection and the explore/exploit refinement loop.

Each round: pick the expansion by evidence, refit, generate an
allocation-diverse candidate pool from the DP, select a batch split between a
safe bucket (mean minus beta * scale) and an upside bucket (mean plus
beta * scale), evaluate, append, repeat.  The evaluator is a plug-in; a
subprocess line-protocol adapter is provided.
"""
from __future__ import annotations

import math
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .cost import CostModel, allocation_cost
from .dp import ParetoPoint, extract_potentials, pareto_frontier, solve_all_allocations
from .features import ExpansionConfig
from .placements import (
    Allocation,
    MixerCatalog,
    Placement,
    _randrange,
    compositions,
    derive_seed,
    placement_within_allocation,
)
from .surrogate import (
    EvaluationRecord,
    NIGPrior,
    SurrogatePosterior,
    default_expansion_candidates,
    fit,
    predict_batch,
    records_to_jsonl,
    select_expansion,
)


class EvaluatorError(RuntimeError):
    """An evaluator failed mid-round; partial records were persisted if possible."""


class Evaluator(Protocol):
    """Scores placements; `noisy` declares whether repeat calls may differ."""

    noisy: bool

    def evaluate(self, placements: Sequence[Placement]) -> list[float]: ...


@dataclass(frozen=True)
class AcquisitionConfig:
    beta: float = 1.0
    safe_fraction: float = 0.7
    mean_floor_quantile: float | None = None
    pool_target: int = 1000
    per_allocation_k: int | None = None
    candidate_min_count: int = 3
    rounds: int = 4
    evals_per_round: int = 500
    cost_band: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 <= self.safe_fraction <= 1.0:
            raise ValueError("safe_fraction must be in [0, 1]")
        if self.mean_floor_quantile is not None and not 0.0 <= self.mean_floor_quantile <= 1.0:
            raise ValueError("mean_floor_quantile must be in [0, 1]")
        if self.pool_target < 1 or self.rounds < 0 or self.evals_per_round < 0:
            raise ValueError("pool_target must be >= 1; rounds and evals_per_round >= 0")
        if self.candidate_min_count < 0:
            raise ValueError("candidate_min_count must be >= 0")


def _allocation_ok(counts: tuple[int, ...], config: AcquisitionConfig,
                   cost_model: CostModel | None) -> bool:
    if any(0 < n < config.candidate_min_count for n in counts):
        return False
    if config.cost_band is not None:
        if cost_model is None:
            raise ValueError("cost_band requires a cost model")
        lo, hi = config.cost_band
        cost = allocation_cost(Allocation(counts), cost_model)
        if not lo <= cost <= hi:
            return False
    return True


def generate_candidates(
    posterior: SurrogatePosterior,
    config: AcquisitionConfig,
    cost_model: CostModel | None = None,
    max_bytes: int = 2 ** 31,
) -> list[Placement]:
    """Allocation-diverse pool: top placements per feasible allocation.

    The per-allocation quota is ceil(pool_target / number of feasible
    allocations) unless per_allocation_k overrides it.  Allocations with a
    minority type below candidate_min_count are excluded, as are those
    outside the configured cost band.
    """
    L, M = posterior.num_layers, posterior.num_types
    eligible = [
        counts for counts in compositions(L, M)
        if _allocation_ok(counts, config, cost_model)
    ]
    if not eligible:
        raise ValueError("no allocation satisfies the candidate constraints")
    quota = config.per_allocation_k or max(1, math.ceil(config.pool_target / len(eligible)))

    potentials = extract_potentials(posterior)
    solutions = solve_all_allocations(potentials, k=quota, max_bytes=max_bytes)
    eligible_set = set(eligible)
    pool: list[Placement] = []
    for allocation, solution in solutions.items():
        if allocation.counts in eligible_set:
            pool.extend(solution.placements)
    return pool


def _ranked(indices, key):
    return sorted(indices, key=key)


def select_batch(
    pool: list[Placement],
    posterior: SurrogatePosterior,
    config: AcquisitionConfig,
    budget: int,
) -> list[Placement]:
    """Split the budget between the safe and upside risk buckets.

    floor(safe_fraction * budget) placements come from the safe ranking
    (mean - beta*scale), the remainder from the upside ranking
    (mean + beta*scale); ties break by mean, then placement.  The optional
    mean-floor filter demotes candidates below the pool's mean quantile to
    the back of each ranking, so quotas are always filled.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if len(pool) <= budget:
        return list(pool)
    means, scales = predict_batch(posterior, pool)

    above_floor = np.ones(len(pool), dtype=bool)
    if config.mean_floor_quantile is not None:
        floor = np.quantile(means, config.mean_floor_quantile)
        above_floor = means >= floor

    def bucket_key(sign: float):
        def key(i: int):
            return (
                not above_floor[i],
                -(means[i] + sign * config.beta * scales[i]),
                -means[i],
                pool[i].assignments,
            )
        return key

    safe_n = int(math.floor(config.safe_fraction * budget))
    upside_n = budget - safe_n

    indices = range(len(pool))
    selected: list[int] = []
    taken = set()
    for i in _ranked(indices, bucket_key(-1.0))[:safe_n]:
        selected.append(i)
        taken.add(i)
    for i in _ranked((i for i in indices if i not in taken), bucket_key(+1.0))[:upside_n]:
        selected.append(i)
        taken.add(i)
    return [pool[i] for i in selected]


@dataclass(eq=False)
class RefinementResult:
    posterior: SurrogatePosterior
    records: list[EvaluationRecord]
    frontier: list[ParetoPoint]
    expansion: ExpansionConfig


def refinement_loop(
    evaluator: Evaluator,
    initial_records: list[EvaluationRecord],
    prior: NIGPrior,
    config: AcquisitionConfig,
    cost_model: CostModel,
    expansion_candidates: list[ExpansionConfig] | None = None,
    guard_ratio: float = 2.0,
    campaign_dir: str | Path | None = None,
    catalog: MixerCatalog | None = None,
    max_bytes: int = 2 ** 31,
) -> RefinementResult:
    """Run the adaptive protocol: select expansion, fit, generate, select,
    evaluate, append; finish with a frontier from the final posterior.

    Fully deterministic given a deterministic evaluator.  For deterministic
    evaluators, already-scored placements are served from the record log
    instead of being re-evaluated.
    """
    if not initial_records:
        raise ValueError("initial_records must be non-empty (exploration seed)")
    if expansion_candidates is None:
        expansion_candidates = default_expansion_candidates()
    if campaign_dir is not None:
        campaign_dir = Path(campaign_dir)
        campaign_dir.mkdir(parents=True, exist_ok=True)
        if catalog is None:
            raise ValueError("campaign_dir requires a catalog for record files")

    records = list(initial_records)
    evaluated = {r.placement.assignments for r in records}

    def persist(name: str) -> None:
        if campaign_dir is not None:
            (campaign_dir / name).write_text(records_to_jsonl(records, catalog))

    for round_index in range(config.rounds):
        expansion = select_expansion(records, expansion_candidates, prior, guard_ratio)
        posterior = fit(records, expansion, prior)
        if config.evals_per_round == 0:
            persist(f"records_round{round_index:02d}.jsonl")
            continue
        pool = generate_candidates(posterior, config, cost_model, max_bytes=max_bytes)
        if not evaluator.noisy:
            pool = [p for p in pool if p.assignments not in evaluated]
        if not pool:
            persist(f"records_round{round_index:02d}.jsonl")
            continue
        batch = select_batch(pool, posterior, config, config.evals_per_round)
        try:
            scores = evaluator.evaluate(batch)
        except Exception as exc:
            persist("records_partial.jsonl")
            raise EvaluatorError(f"evaluator failed in round {round_index}: {exc}") from exc
        if len(scores) != len(batch):
            persist("records_partial.jsonl")
            raise EvaluatorError(
                f"evaluator returned {len(scores)} scores for {len(batch)} placements"
            )
        # merge in a deterministic order regardless of evaluator batching
        merged = sorted(zip(batch, scores), key=lambda bs: bs[0].assignments)
        for placement, score in merged:
            records.append(
                EvaluationRecord(
                    placement=placement,
                    score=float(score),
                    cost=allocation_cost_of(placement, cost_model),
                )
            )
            evaluated.add(placement.assignments)
        persist(f"records_round{round_index:02d}.jsonl")

    expansion = select_expansion(records, expansion_candidates, prior, guard_ratio)
    posterior = fit(records, expansion, prior)
    frontier = pareto_frontier(
        solve_all_allocations(extract_potentials(posterior), k=1, max_bytes=max_bytes),
        cost_model,
    )
    return RefinementResult(
        posterior=posterior, records=records, frontier=frontier, expansion=expansion
    )


def allocation_cost_of(placement: Placement, cost_model: CostModel) -> float:
    from .placements import allocation_of

    return allocation_cost(allocation_of(placement), cost_model)


def sample_exploration(
    n: int,
    num_layers: int,
    num_types: int,
    seed: int,
    cost_model: CostModel | None = None,
    cost_band: tuple[float, float] | None = None,
    min_count: int = 0,
) -> list[Placement]:
    """Cost-weighted exploration seed: allocation uniform over the feasible
    set (optionally restricted to a cost band), then uniform within.

    With no band and min_count 0 this is exactly global sampling.
    """
    feasible = []
    for counts in compositions(num_layers, num_types):
        if any(0 < c < min_count for c in counts):
            continue
        if cost_band is not None:
            if cost_model is None:
                raise ValueError("cost_band requires a cost model")
            lo, hi = cost_band
            if not lo <= allocation_cost(Allocation(counts), cost_model) <= hi:
                continue
        feasible.append(counts)
    if not feasible:
        raise ValueError("no allocation satisfies the exploration constraints")
    out = []
    for i in range(n):
        rng = np.random.default_rng(derive_seed(seed, i))
        counts = feasible[_randrange(rng, len(feasible))]
        out.append(placement_within_allocation(rng, Allocation(counts)))
    return out


class SubprocessEvaluator:
    """Line-protocol adapter: placement code strings in, one score per line out."""

    def __init__(self, command: list[str], catalog: MixerCatalog, noisy: bool = False):
        self.command = list(command)
        self.catalog = catalog
        self.noisy = noisy

    def evaluate(self, placements: Sequence[Placement]) -> list[float]:
        stdin = "".join(p.to_codes(self.catalog) + "\n" for p in placements)
        try:
            proc = subprocess.run(
                self.command, input=stdin, capture_output=True, text=True, check=False
            )
        except OSError as exc:
            raise EvaluatorError(f"cannot launch evaluator {self.command}: {exc}") from exc
        if proc.returncode != 0:
            raise EvaluatorError(
                f"evaluator exited with {proc.returncode}: {proc.stderr.strip()[:500]}"
            )
        lines = [line for line in proc.stdout.splitlines() if line.strip()]
        if len(lines) != len(placements):
            raise EvaluatorError(
                f"evaluator returned {len(lines)} lines for {len(placements)} placements"
            )
        try:
            return [float(line) for line in lines]
        except ValueError as exc:
            raise EvaluatorError(f"evaluator produced a non-numeric score: {exc}") from exc
