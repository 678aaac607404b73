"""Exact cost-constrained optimization over placements via dynamic programming.

Surrogate coefficients decompose into chain MRF potentials (unary, short-range
pairwise, contiguous triplet).  The DP state at layer t is (partial allocation
counts, last `memory` assignments), so one forward pass solves every feasible
allocation simultaneously; per-allocation optima come out by backtracking, and
the Pareto frontier is a non-dominated filter over per-allocation bests.

Suffix encoding: the last w assignments (x_{t-w+1}..x_t) are packed into an
integer with x_t at digit 0 (base M), x_{t-1} at digit 1, and so on.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .cost import CostModel, allocation_cost
from .features import ExpansionConfig, _block_offsets
from .placements import (
    Allocation,
    Placement,
    composition_rank,
    compositions_array,
    count_compositions,
    rank_compositions_array,
)
from .surrogate import SurrogatePosterior


class InfeasibleBudgetError(ValueError):
    """Requested budget lies below every allocation's cost."""

    def __init__(self, budget: float, min_cost: float):
        super().__init__(
            f"budget {budget:g} is infeasible: minimum feasible cost is {min_cost:g}"
        )
        self.budget = budget
        self.min_cost = min_cost


class StateSpaceBudgetError(RuntimeError):
    """DP state space would exceed the configured memory budget."""

    def __init__(self, estimated_bytes: int, max_bytes: int):
        super().__init__(
            f"estimated DP memory {estimated_bytes} bytes exceeds budget {max_bytes} bytes; "
            "reduce the expansion range, k, or L, or raise max_bytes"
        )
        self.estimated_bytes = estimated_bytes
        self.max_bytes = max_bytes


@dataclass(eq=False)
class MRFPotentials:
    """Additive score terms on layer tuples; summing them scores a placement."""

    num_layers: int
    num_types: int
    unary: np.ndarray                  # (L, M)
    pairwise: dict[int, np.ndarray]    # distance d -> (L-d, M, M)
    triplet: np.ndarray | None         # (L-2, M, M, M)
    config: ExpansionConfig

    @property
    def memory(self) -> int:
        """Suffix window the DP must track: the longest interaction reach."""
        w = 1
        for d, arr in self.pairwise.items():
            if arr.size:
                w = max(w, d)
        if self.triplet is not None and self.triplet.size:
            w = max(w, 2)
        return w


@dataclass(frozen=True)
class AllocationSolution:
    """Best placements within one allocation, scores descending."""

    allocation: Allocation
    placements: tuple[Placement, ...]
    scores: tuple[float, ...]


@dataclass(frozen=True)
class ParetoPoint:
    cost: float
    placement: Placement
    predicted_score: float
    validated_score: float | None = None


class AllocationSolutions(dict):
    """Map Allocation -> AllocationSolution, annotated with DP diagnostics."""

    final_state_count: int = 0
    estimated_bytes: int = 0


def extract_potentials(posterior: SurrogatePosterior) -> MRFPotentials:
    """Read MRF potentials out of the posterior mean.

    Allocation-count coefficients fold into the unary terms (a count is a sum
    of unary indicators), so the potential sum reproduces the predictive mean
    exactly for every placement.
    """
    L, M = posterior.num_layers, posterior.num_types
    config = posterior.config
    offsets = _block_offsets(config, L, M)
    mu = posterior.mu

    unary = mu[: L * M].reshape(L, M).copy()
    if config.include_allocation_counts:
        base = offsets["counts"]
        unary += mu[base: base + M][None, :]

    pairwise: dict[int, np.ndarray] = {}
    for d in config.pairwise_distances:
        base = offsets[("pair", d)]
        span = max(L - d, 0)
        pairwise[d] = mu[base: base + span * M * M].reshape(span, M, M).copy()

    triplet = None
    if config.has_triplets:
        base = offsets["triplet"]
        span = max(L - 2, 0)
        triplet = mu[base: base + span * M ** 3].reshape(span, M, M, M).copy()

    return MRFPotentials(
        num_layers=L, num_types=M, unary=unary, pairwise=pairwise,
        triplet=triplet, config=config,
    )


def potential_sum(potentials: MRFPotentials, placement: Placement) -> float:
    """Direct evaluation of the additive objective for one placement."""
    x = placement.assignments
    total = float(np.sum(potentials.unary[np.arange(len(x)), list(x)]))
    for d, arr in potentials.pairwise.items():
        for i in range(len(x) - d):
            total += float(arr[i, x[i], x[i + d]])
    if potentials.triplet is not None:
        for i in range(len(x) - 2):
            total += float(potentials.triplet[i, x[i], x[i + 1], x[i + 2]])
    return total


@lru_cache(maxsize=256)
def _comps_cached(total: int, parts: int) -> np.ndarray:
    arr = compositions_array(total, parts)
    arr.setflags(write=False)
    return arr


def estimate_state_bytes(num_layers: int, num_types: int, memory: int, k: int) -> int:
    """Upper bound on DP memory: score buffers plus per-layer parent arrays."""
    L, M = num_layers, num_types
    total_parent = 0
    peak_layer = 0
    for t in range(L):
        n_t = count_compositions(t + 1, M)
        s_t = M ** min(memory, t + 1)
        states = n_t * s_t * k
        total_parent += states * 8
        peak_layer = max(peak_layer, states * 8)
    return total_parent + 2 * peak_layer


def solve_all_allocations(
    potentials: MRFPotentials,
    k: int = 1,
    max_bytes: int = 2 ** 31,
) -> AllocationSolutions:
    """True top-k placements for every allocation in one forward pass.

    Deterministic: exact score ties inside the DP resolve by a fixed candidate
    order, and each allocation's equal-score results are reported with the
    lexicographically smallest placement first.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    L, M = potentials.num_layers, potentials.num_types
    if L < 1:
        raise ValueError("need at least one layer")
    W = potentials.memory

    estimated = estimate_state_bytes(L, M, W, k)
    if estimated > max_bytes:
        raise StateSpaceBudgetError(estimated, max_bytes)

    unary = potentials.unary
    # layer 0: state (rank of one-hot composition, suffix = type)
    comps = _comps_cached(1, M)
    n0 = comps.shape[0]
    s0 = M
    scores = np.full((n0, s0, k), -np.inf)
    eye_ranks = rank_compositions_array(np.eye(M, dtype=np.int64), 1)
    for m in range(M):
        scores[eye_ranks[m], m, 0] = unary[0, m]
    parents: list[np.ndarray] = [np.full((n0, s0, k), -1, dtype=np.int64)]
    suffix_sizes = [s0]

    for t in range(L - 1):
        w_t = min(W, t + 1)
        s_t = M ** w_t
        w_next = min(W, t + 2)
        s_next = M ** w_next
        comps_next = _comps_cached(t + 2, M)
        n_next = comps_next.shape[0]

        gains = _suffix_gains(potentials, t, w_t)

        new_scores = np.full((n_next, s_next, k), -np.inf)
        new_parents = np.full((n_next, s_next, k), -1, dtype=np.int64)
        n_t = comps.shape[0]
        rows = np.arange(n_t)

        for m in range(M):
            add = rank_compositions_array(comps + np.eye(M, dtype=np.int64)[m][None, :], t + 2)
            if w_next == w_t + 1:
                # growing window: every predecessor state maps to a unique new state
                new_suffix = m + M * np.arange(s_t)
                new_scores[add[:, None], new_suffix[None, :], :] = (
                    scores + gains[None, :, m, None] + unary[t + 1, m]
                )
                flat_old = (
                    (rows[:, None, None] * s_t + np.arange(s_t)[None, :, None]) * k
                    + np.arange(k)[None, None, :]
                )
                new_parents[add[:, None], new_suffix[None, :], :] = flat_old
            else:
                # steady window: the oldest assignment drops out; merge over it
                core = s_t // M
                cand = scores + gains[None, :, m, None]
                cand = cand.reshape(n_t, M, core, k).transpose(0, 2, 1, 3).reshape(n_t, core, M * k)
                order = np.argsort(-cand, axis=2, kind="stable")[:, :, :k]
                best = np.take_along_axis(cand, order, axis=2)
                u = order // k
                j = order % k
                old_suffix = u * core + np.arange(core)[None, :, None]
                flat_old = (rows[:, None, None] * s_t + old_suffix) * k + j
                new_suffix = m + M * np.arange(core)
                new_scores[add[:, None], new_suffix[None, :], :] = best + unary[t + 1, m]
                new_parents[add[:, None], new_suffix[None, :], :] = np.where(
                    np.isfinite(best), flat_old, -1
                )

        scores = new_scores
        parents.append(new_parents)
        suffix_sizes.append(s_next)
        comps = comps_next

    return _backtrack(potentials, scores, parents, suffix_sizes, comps, k, estimated)


def _suffix_gains(potentials: MRFPotentials, t: int, w_t: int) -> np.ndarray:
    """Interaction gain of assigning type m at layer t+1 after suffix s: (S_t, M)."""
    M = potentials.num_types
    s_idx = np.arange(M ** w_t)
    gains = np.zeros((M ** w_t, M))
    for d, arr in potentials.pairwise.items():
        if d <= w_t and t + 1 - d >= 0 and arr.size:
            older = (s_idx // M ** (d - 1)) % M
            gains += arr[t + 1 - d][older, :]
    if potentials.triplet is not None and potentials.triplet.size and w_t >= 2:
        x_prev = (s_idx // M) % M
        x_cur = s_idx % M
        gains += potentials.triplet[t - 1][x_prev, x_cur, :]
    return gains


def _backtrack(
    potentials: MRFPotentials,
    final_scores: np.ndarray,
    parents: list[np.ndarray],
    suffix_sizes: list[int],
    final_comps: np.ndarray,
    k: int,
    estimated_bytes: int,
) -> AllocationSolutions:
    L, M = potentials.num_layers, potentials.num_types
    n_final, s_final, _ = final_scores.shape
    flat = final_scores.reshape(n_final, s_final * k)
    kk = min(k, s_final * k)
    order = np.argsort(-flat, axis=1, kind="stable")[:, :kk]
    sel_scores = np.take_along_axis(flat, order, axis=1)
    valid = np.isfinite(sel_scores)

    # walk every selected path backwards at once
    f = np.arange(n_final)[:, None] * (s_final * k) + order
    f = np.where(valid, f, 0)
    paths = np.empty((n_final, kk, L), dtype=np.int64)
    for t in range(L - 1, -1, -1):
        s_t = suffix_sizes[t]
        suffix = (f // k) % s_t
        paths[:, :, t] = suffix % M
        if t > 0:
            f = parents[t].reshape(-1)[f]

    result = AllocationSolutions()
    result.final_state_count = int(np.isfinite(final_scores[:, :, 0]).sum())
    result.estimated_bytes = estimated_bytes
    for r in range(n_final):
        entries = [
            (float(sel_scores[r, j]), tuple(int(v) for v in paths[r, j]))
            for j in range(kk)
            if valid[r, j]
        ]
        entries.sort(key=lambda e: (-e[0], e[1]))
        allocation = Allocation(tuple(int(c) for c in final_comps[r]))
        result[allocation] = AllocationSolution(
            allocation=allocation,
            placements=tuple(Placement(p, M) for _, p in entries),
            scores=tuple(s for s, _ in entries),
        )
    return result


def pareto_frontier(
    solutions: AllocationSolutions | dict,
    cost_model: CostModel,
) -> list[ParetoPoint]:
    """Non-dominated per-allocation bests, cost strictly increasing.

    A point survives iff no other has cost <= and score >= with one strict;
    exact (cost, score) duplicates keep the lexicographically smallest
    placement.
    """
    if not solutions:
        raise ValueError("no allocation solutions")
    points = []
    for allocation, solution in solutions.items():
        if not solution.placements:
            continue
        points.append(
            ParetoPoint(
                cost=allocation_cost(allocation, cost_model),
                placement=solution.placements[0],
                predicted_score=solution.scores[0],
            )
        )
    points.sort(key=lambda p: (p.cost, -p.predicted_score, p.placement.assignments))
    frontier = []
    best = -np.inf
    for p in points:
        if p.predicted_score > best:
            frontier.append(p)
            best = p.predicted_score
    return frontier


def constrained_optimum(
    potentials: MRFPotentials,
    cost_model: CostModel,
    budget: float,
    solutions: AllocationSolutions | None = None,
    max_bytes: int = 2 ** 31,
) -> ParetoPoint:
    """Exact best placement with cost <= budget.

    Cost is allocation-additive, so filtering allocations by cost and taking
    the best per-allocation optimum is exact.  Pass precomputed `solutions`
    to reuse a forward pass across budgets.
    """
    if solutions is None:
        solutions = solve_all_allocations(potentials, k=1, max_bytes=max_bytes)
    best_point: ParetoPoint | None = None
    min_cost = np.inf
    for allocation, solution in solutions.items():
        cost = allocation_cost(allocation, cost_model)
        min_cost = min(min_cost, cost)
        if cost > budget or not solution.placements:
            continue
        candidate = ParetoPoint(
            cost=cost,
            placement=solution.placements[0],
            predicted_score=solution.scores[0],
        )
        if (
            best_point is None
            or candidate.predicted_score > best_point.predicted_score
            or (
                candidate.predicted_score == best_point.predicted_score
                and (candidate.cost, candidate.placement.assignments)
                < (best_point.cost, best_point.placement.assignments)
            )
        ):
            best_point = candidate
    if best_point is None:
        raise InfeasibleBudgetError(budget, float(min_cost))
    return best_point
