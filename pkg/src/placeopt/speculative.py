"""Acceptance-rate estimation for speculative decoding, and draft search.

The expected accepted tokens per step can be estimated without running the
draft: along a completion generated by the target, accumulate
prod_j min(q_j/p_j, 1) over draft/target log-probabilities.  The running
product telescopes into an unbiased estimate of the step acceptance count,
computed in log space so extreme ratios cannot overflow.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cost import CostModel
from .dp import extract_potentials, pareto_frontier, solve_all_allocations
from .features import ExpansionConfig
from .placements import Placement
from .surrogate import (
    EvaluationRecord,
    NIGPrior,
    default_expansion_candidates,
    fit,
    select_expansion,
)

DEFAULT_GAMMA = 8


@dataclass(frozen=True)
class TraceTokenLogProbs:
    """Per-token (log q, log p) pairs along one target-generated completion."""

    prompt_id: str
    log_q: tuple[float, ...]
    log_p: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.log_q) != len(self.log_p):
            raise ValueError("log_q and log_p must have equal length")
        for v in (*self.log_q, *self.log_p):
            if not np.isfinite(v):
                raise ValueError(f"log-probs must be finite, got {v}")


@dataclass(frozen=True)
class AcceptanceEstimate:
    n_bar: float
    acceptance_rate: float
    stderr: float
    n_steps: int
    gamma: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.n_bar <= self.gamma + 1e-12:
            raise ValueError(f"n_bar {self.n_bar} outside [0, gamma={self.gamma}]")


def step_estimates(trace: TraceTokenLogProbs, gamma: int) -> np.ndarray:
    """Per-step estimates sum_i prod_{j<=i} min(q/p, 1) for complete steps.

    Trailing groups shorter than gamma are dropped; a partial product would
    bias the estimate.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    ratios = np.minimum(np.asarray(trace.log_q) - np.asarray(trace.log_p), 0.0)
    n_steps = len(ratios) // gamma
    if n_steps == 0:
        return np.array([])
    groups = ratios[: n_steps * gamma].reshape(n_steps, gamma)
    return np.exp(np.cumsum(groups, axis=1)).sum(axis=1)


def estimate_acceptance(traces: list[TraceTokenLogProbs], gamma: int = DEFAULT_GAMMA) -> AcceptanceEstimate:
    """Mean of per-step estimates across traces, with its standard error."""
    if not traces:
        raise ValueError("no traces")
    parts = [step_estimates(t, gamma) for t in traces]
    steps = np.concatenate([p for p in parts if p.size]) if any(p.size for p in parts) else np.array([])
    if steps.size == 0:
        raise ValueError(f"no complete steps of {gamma} tokens in the traces")
    n_bar = float(steps.mean())
    stderr = float(steps.std(ddof=1) / math.sqrt(len(steps))) if len(steps) > 1 else 0.0
    return AcceptanceEstimate(
        n_bar=n_bar,
        acceptance_rate=n_bar / gamma,
        stderr=stderr,
        n_steps=int(len(steps)),
        gamma=gamma,
    )


def speculative_speedup(n_bar: float, draft_cost: float, target_cost: float, gamma: int) -> float:
    """Expected tokens per step valued at the target's per-token cost,
    over the per-step cost of gamma draft passes plus one target pass."""
    if draft_cost < 0 or target_cost <= 0:
        raise ValueError("costs must be positive (draft cost may be 0 only as a limit)")
    return n_bar * target_cost / (gamma * draft_cost + target_cost)


@dataclass(frozen=True)
class DraftPoint:
    cost: float
    placement: Placement
    predicted_acceptance: float
    predicted_speedup: float


def search_draft_placement(
    acceptance_records: list[EvaluationRecord],
    cost_model: CostModel,
    target_cost: float,
    gamma: int = DEFAULT_GAMMA,
    prior: NIGPrior = NIGPrior(),
    expansion_candidates: list[ExpansionConfig] | None = None,
    guard_ratio: float = 2.0,
    max_bytes: int = 2 ** 31,
) -> list[DraftPoint]:
    """Draft-placement speedup landscape from acceptance-rate observations.

    Fits the surrogate on acceptance rates, takes the per-cost-level optima
    from the DP, and maps each (cost, predicted acceptance) through the
    speedup formula.  Predicted acceptance is clamped to [0, 1] before the
    mapping.
    """
    if not acceptance_records:
        raise ValueError("no acceptance records")
    if expansion_candidates is None:
        expansion_candidates = default_expansion_candidates()
    expansion = select_expansion(acceptance_records, expansion_candidates, prior, guard_ratio)
    posterior = fit(acceptance_records, expansion, prior)
    solutions = solve_all_allocations(extract_potentials(posterior), k=1, max_bytes=max_bytes)
    frontier = pareto_frontier(solutions, cost_model)
    points = []
    for p in frontier:
        acceptance = min(max(p.predicted_score, 0.0), 1.0)
        points.append(
            DraftPoint(
                cost=p.cost,
                placement=p.placement,
                predicted_acceptance=acceptance,
                predicted_speedup=speculative_speedup(
                    acceptance * gamma, p.cost, target_cost, gamma
                ),
            )
        )
    return points


def traces_from_jsonl(text: str) -> list[TraceTokenLogProbs]:
    """Parse trace files; refuses traces not flagged target-generated.

    The change of measure behind the estimator only holds for completions
    sampled from the target.
    """
    traces = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            if row.get("target_generated") is not True:
                raise ValueError("trace not flagged target_generated")
            tokens = row["tokens"]
            log_q = tuple(float(t["logq"]) for t in tokens)
            log_p = tuple(float(t["logp"]) for t in tokens)
            for v in (*log_q, *log_p):
                if v > 0:
                    raise ValueError(f"log-prob {v} > 0")
            traces.append(TraceTokenLogProbs(str(row["prompt_id"]), log_q, log_p))
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise ValueError(f"bad trace on line {lineno}: {exc}") from exc
    return traces


def load_traces(path: str | Path) -> list[TraceTokenLogProbs]:
    return traces_from_jsonl(Path(path).read_text())
