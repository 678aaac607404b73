"""Ground-truth landscapes and brute-force references for tests and acceptance.

A synthetic landscape is a set of randomly drawn MRF potentials plus optional
Gaussian observation noise; it stands in for a real evaluation harness.  The
brute-force routines enumerate the whole placement space independently of the
DP, so agreement between the two is a meaningful check.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .artifacts import array_from_payload, array_to_payload
from .cost import CostModel
from .dp import MRFPotentials, ParetoPoint
from .features import ExpansionConfig
from .placements import Allocation, Placement


@dataclass(eq=False)
class SyntheticLandscape:
    """Frozen ground-truth potentials with a seeded observation-noise stream."""

    potentials: MRFPotentials
    noise_sigma: float
    seed: int
    _noise_rng: np.random.Generator = field(repr=False, default=None)

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self._noise_rng is None:
            self._noise_rng = np.random.default_rng([self.seed, 0x5EED])

    @property
    def num_layers(self) -> int:
        return self.potentials.num_layers

    @property
    def num_types(self) -> int:
        return self.potentials.num_types


def generate_landscape(
    num_layers: int,
    num_types: int,
    config: ExpansionConfig,
    seed: int,
    potential_scale: float = 1.0,
    noise_sigma: float = 0.0,
) -> SyntheticLandscape:
    """Potentials drawn i.i.d. from N(0, potential_scale^2)."""
    if potential_scale < 0:
        raise ValueError("potential_scale must be >= 0")
    rng = np.random.default_rng([seed, 0])
    L, M = num_layers, num_types
    unary = rng.normal(0.0, potential_scale, size=(L, M)) if potential_scale else np.zeros((L, M))

    pairwise: dict[int, np.ndarray] = {}
    for d in config.pairwise_distances:
        span = max(L - d, 0)
        pairwise[d] = (
            rng.normal(0.0, potential_scale, size=(span, M, M))
            if potential_scale
            else np.zeros((span, M, M))
        )

    triplet = None
    if config.has_triplets:
        span = max(L - 2, 0)
        triplet = (
            rng.normal(0.0, potential_scale, size=(span, M, M, M))
            if potential_scale
            else np.zeros((span, M, M, M))
        )

    potentials = MRFPotentials(
        num_layers=L, num_types=M, unary=unary, pairwise=pairwise,
        triplet=triplet, config=config,
    )
    return SyntheticLandscape(potentials=potentials, noise_sigma=noise_sigma, seed=seed)


def oracle_score(landscape: SyntheticLandscape, placement: Placement, with_noise: bool = False) -> float:
    """Potential sum, plus a fresh Gaussian noise draw when requested.

    The sum is evaluated directly from the definitions here, independent of
    the optimizer's vectorized evaluation paths.
    """
    if placement.num_layers != landscape.num_layers:
        raise ValueError("placement length does not match landscape")
    x = placement.assignments
    pot = landscape.potentials
    total = 0.0
    for i, t in enumerate(x):
        total += float(pot.unary[i, t])
    for d, arr in pot.pairwise.items():
        for i in range(len(x) - d):
            total += float(arr[i, x[i], x[i + d]])
    if pot.triplet is not None:
        for i in range(len(x) - 2):
            total += float(pot.triplet[i, x[i], x[i + 1], x[i + 2]])
    if with_noise and landscape.noise_sigma > 0:
        total += float(landscape._noise_rng.normal(0.0, landscape.noise_sigma))
    return total


class SyntheticOracleEvaluator:
    """Evaluator plug-in backed by a synthetic landscape."""

    def __init__(self, landscape: SyntheticLandscape, with_noise: bool | None = None):
        self.landscape = landscape
        self.with_noise = landscape.noise_sigma > 0 if with_noise is None else with_noise

    @property
    def noisy(self) -> bool:
        return self.with_noise and self.landscape.noise_sigma > 0

    def evaluate(self, placements: list[Placement]) -> list[float]:
        return [oracle_score(self.landscape, p, with_noise=self.with_noise) for p in placements]


def enumerate_placements(num_layers: int, num_types: int, cap: int = 10 ** 6) -> np.ndarray:
    """All M^L placements as an int8 array, one row per placement."""
    total = num_types ** num_layers
    if total > cap:
        raise ValueError(f"enumeration of {total} placements exceeds cap {cap}")
    powers = num_types ** np.arange(num_layers - 1, -1, -1, dtype=np.int64)
    return ((np.arange(total, dtype=np.int64)[:, None] // powers) % num_types).astype(np.int8)


def score_rows(potentials: MRFPotentials, rows: np.ndarray) -> np.ndarray:
    """Vectorized potential sums for an array of placement rows."""
    L = potentials.num_layers
    total = np.zeros(len(rows))
    for i in range(L):
        total += potentials.unary[i, rows[:, i]]
    for d, arr in potentials.pairwise.items():
        for i in range(L - d):
            total += arr[i, rows[:, i], rows[:, i + d]]
    if potentials.triplet is not None:
        for i in range(L - 2):
            total += potentials.triplet[i, rows[:, i], rows[:, i + 1], rows[:, i + 2]]
    return total


def brute_force_frontier(
    landscape: SyntheticLandscape,
    cost_model: CostModel,
    cap: int = 10 ** 6,
) -> list[ParetoPoint]:
    """Exhaustive per-allocation optima and Pareto frontier.

    Ties resolve toward the lexicographically smallest placement, matching
    the optimizer's reporting rule.
    """
    L, M = landscape.num_layers, landscape.num_types
    rows = enumerate_placements(L, M, cap=cap)
    scores = score_rows(landscape.potentials, rows)

    counts = np.stack([(rows == m).sum(axis=1) for m in range(M)], axis=1)
    costs = counts @ np.asarray(cost_model.normalized_costs)

    # group rows by allocation; within a group order by score desc, placement asc
    group = (counts * (L + 1) ** np.arange(M)).sum(axis=1)
    keys = [rows[:, i] for i in range(L - 1, -1, -1)] + [-scores, group]
    order = np.lexsort(keys)
    sorted_groups = group[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_groups[1:] != sorted_groups[:-1]
    best_idx = order[first]

    points = [
        ParetoPoint(
            cost=float(costs[i]),
            placement=Placement(tuple(int(v) for v in rows[i]), M),
            predicted_score=float(scores[i]),
        )
        for i in best_idx
    ]
    points.sort(key=lambda p: (p.cost, -p.predicted_score, p.placement.assignments))
    frontier = []
    best = -np.inf
    for p in points:
        if p.predicted_score > best:
            frontier.append(p)
            best = p.predicted_score
    return frontier


def best_per_allocation(
    landscape: SyntheticLandscape,
    cap: int = 10 ** 6,
) -> dict[Allocation, tuple[Placement, float]]:
    """Exhaustive per-allocation optimum, for comparing against the DP."""
    L, M = landscape.num_layers, landscape.num_types
    rows = enumerate_placements(L, M, cap=cap)
    scores = score_rows(landscape.potentials, rows)
    counts = np.stack([(rows == m).sum(axis=1) for m in range(M)], axis=1)
    group = (counts * (L + 1) ** np.arange(M)).sum(axis=1)
    keys = [rows[:, i] for i in range(L - 1, -1, -1)] + [-scores, group]
    order = np.lexsort(keys)
    sorted_groups = group[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_groups[1:] != sorted_groups[:-1]
    out = {}
    for i in order[first]:
        allocation = Allocation(tuple(int(c) for c in counts[i]))
        out[allocation] = (Placement(tuple(int(v) for v in rows[i]), M), float(scores[i]))
    return out


def landscape_to_dict(landscape: SyntheticLandscape) -> dict:
    pot = landscape.potentials
    return {
        "num_layers": pot.num_layers,
        "num_types": pot.num_types,
        "config": {
            "order": pot.config.order,
            "range": pot.config.range,
            "include_allocation_counts": pot.config.include_allocation_counts,
        },
        "seed": landscape.seed,
        "noise_sigma": landscape.noise_sigma,
        "unary": array_to_payload(pot.unary),
        "pairwise": {str(d): array_to_payload(arr) for d, arr in pot.pairwise.items()},
        "triplet": array_to_payload(pot.triplet) if pot.triplet is not None else None,
    }


def landscape_from_dict(payload: dict) -> SyntheticLandscape:
    cfg = payload["config"]
    potentials = MRFPotentials(
        num_layers=payload["num_layers"],
        num_types=payload["num_types"],
        unary=array_from_payload(payload["unary"]),
        pairwise={int(d): array_from_payload(a) for d, a in payload["pairwise"].items()},
        triplet=array_from_payload(payload["triplet"]) if payload["triplet"] is not None else None,
        config=ExpansionConfig(
            order=cfg["order"],
            range=cfg["range"],
            include_allocation_counts=cfg["include_allocation_counts"],
        ),
    )
    return SyntheticLandscape(
        potentials=potentials,
        noise_sigma=payload["noise_sigma"],
        seed=payload["seed"],
    )
