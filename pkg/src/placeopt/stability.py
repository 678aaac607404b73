"""Rank-stability analytics across training checkpoints.

Operates on a placements-by-checkpoints score matrix: Spearman correlation
against the final checkpoint, tiered multi-rater concordance (Kendall's W),
rolling cost-window correlations restricted to frontier or median score
bands, and top-k overlap.  All rank statistics use average ranks for ties.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .placements import MixerCatalog
from .surrogate import EvaluationRecord, ScoreNormalizer


@dataclass(frozen=True)
class Band:
    """Window membership rule: all placements, or within delta of the window's
    top (frontier) or median final-checkpoint score."""

    kind: str
    delta: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("all", "frontier", "median"):
            raise ValueError(f"unknown band kind {self.kind!r}")
        if self.kind != "all" and (self.delta is None or self.delta < 0):
            raise ValueError(f"band {self.kind!r} needs a non-negative delta")


@dataclass(eq=False)
class CheckpointScores:
    """Scores for a fixed placement set at every checkpoint, plus costs."""

    checkpoint_labels: tuple[str, ...]
    matrix: np.ndarray          # (n_placements, n_checkpoints)
    costs: np.ndarray           # (n_placements,)
    placement_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        n, k = self.matrix.shape
        if k != len(self.checkpoint_labels):
            raise ValueError("matrix width does not match checkpoint labels")
        if n != len(self.costs) or n != len(self.placement_ids):
            raise ValueError("matrix height does not match costs / placement ids")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("missing or non-finite scores in the analyzed subset")
        if not np.all(np.isfinite(self.costs)):
            raise ValueError("non-finite placement costs")

    @property
    def final(self) -> np.ndarray:
        return self.matrix[:, -1]


def checkpoint_scores_from_records(
    records: list[EvaluationRecord], catalog: MixerCatalog
) -> CheckpointScores:
    """Pivot tagged records into a matrix; any missing cell is a hard error."""
    labels: list[str] = []
    ids: list[str] = []
    cells: dict[tuple[str, str], float] = {}
    costs: dict[str, float] = {}
    for r in records:
        if r.checkpoint_tag is None:
            raise ValueError("record without a checkpoint tag")
        pid = r.placement.to_codes(catalog)
        if r.checkpoint_tag not in labels:
            labels.append(r.checkpoint_tag)
        if pid not in costs:
            ids.append(pid)
            costs[pid] = r.cost if r.cost is not None else math.nan
        elif r.cost is not None:
            if math.isnan(costs[pid]):
                costs[pid] = r.cost
            elif abs(costs[pid] - r.cost) > 1e-9:
                raise ValueError(f"conflicting costs for placement {pid}")
        key = (pid, r.checkpoint_tag)
        if key in cells:
            raise ValueError(f"duplicate score for {pid} at checkpoint {r.checkpoint_tag}")
        cells[key] = r.score
    matrix = np.empty((len(ids), len(labels)))
    for i, pid in enumerate(ids):
        for j, label in enumerate(labels):
            if (pid, label) not in cells:
                raise ValueError(f"missing score for {pid} at checkpoint {label}")
            matrix[i, j] = cells[(pid, label)]
    return CheckpointScores(
        checkpoint_labels=tuple(labels),
        matrix=matrix,
        costs=np.array([costs[p] for p in ids]),
        placement_ids=tuple(ids),
    )


def spearman_rho(a, b) -> float:
    """Rank correlation with average-rank tie handling."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length vectors of length >= 2")
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    if np.ptp(ra) == 0 or np.ptp(rb) == 0:
        raise ValueError("rank correlation undefined: a vector has zero rank variance")
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra @ rb) / math.sqrt((ra @ ra) * (rb @ rb)))


def _spearman_or_nan(a, b) -> float:
    try:
        return spearman_rho(a, b)
    except ValueError:
        return math.nan


def kendalls_w(matrix, tier: float | None = None, ids: tuple[str, ...] | None = None) -> float:
    """Tie-corrected multi-rater concordance, raters in columns.

    W = 12 S / (k^2 (n^3 - n) - k T) with S the variance of rank sums and T
    the standard tie correction.  `tier` keeps only the top fraction of rows
    by the final rater before computing W.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] < 2:
        raise ValueError("need a 2-D matrix with at least two raters")
    if tier is not None:
        if not 0 < tier <= 1:
            raise ValueError("tier must be in (0, 1]")
        n_keep = max(int(math.ceil(tier * matrix.shape[0])), 0)
        final = matrix[:, -1]
        tie_break = np.asarray(ids) if ids is not None else np.arange(matrix.shape[0])
        order = np.lexsort((tie_break, -final))
        matrix = matrix[order[:n_keep]]
    n, k = matrix.shape
    if n < 2:
        raise ValueError("fewer than two placements after the tier filter")
    ranks = np.column_stack([rankdata(matrix[:, j], method="average") for j in range(k)])
    rank_sums = ranks.sum(axis=1)
    s = float(np.sum((rank_sums - rank_sums.mean()) ** 2))
    tie_term = 0.0
    for j in range(k):
        _, counts = np.unique(matrix[:, j], return_counts=True)
        tie_term += float(np.sum(counts ** 3 - counts))
    denom = k * k * (n ** 3 - n) - k * tie_term
    if denom <= 0:
        raise ValueError("degenerate matrix: all raters fully tied")
    return 12.0 * s / denom


@dataclass(eq=False)
class WindowStability:
    """Per-window Spearman curves: one row per checkpoint (vs. the final)."""

    band: Band
    window_starts: np.ndarray
    window_costs: np.ndarray    # median cost per window
    rho: np.ndarray             # (n_checkpoints, n_windows), NaN where undefined


def _window_starts(n: int, window: int, stride: int) -> list[int]:
    if window >= n:
        return [0]
    return list(range(0, n - window + 1, stride))


def rolling_window_stability(
    scores: CheckpointScores,
    window: int = 200,
    band: Band = Band("all"),
    stride: int = 1,
) -> WindowStability:
    """Spearman vs. final within rolling cost windows, restricted to a band.

    Placements are sorted by cost; band membership is decided by the final
    checkpoint's scores within each window.  Windows whose band has fewer
    than two members yield NaN rather than being dropped.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    order = np.lexsort((np.asarray(scores.placement_ids), scores.costs))
    matrix = scores.matrix[order]
    costs = scores.costs[order]
    n, k = matrix.shape
    starts = _window_starts(n, window, stride)
    rho = np.full((k, len(starts)), np.nan)
    window_costs = np.empty(len(starts))
    for w, start in enumerate(starts):
        stop = min(start + window, n)
        sub = matrix[start:stop]
        window_costs[w] = float(np.median(costs[start:stop]))
        final = sub[:, -1]
        if band.kind == "all":
            members = np.ones(len(sub), dtype=bool)
        elif band.kind == "frontier":
            members = final >= final.max() - band.delta
        else:
            members = np.abs(final - np.median(final)) <= band.delta
        if members.sum() < 2:
            continue
        chosen = sub[members]
        for j in range(k):
            rho[j, w] = _spearman_or_nan(chosen[:, j], chosen[:, -1])
    return WindowStability(
        band=band,
        window_starts=np.asarray(starts),
        window_costs=window_costs,
        rho=rho,
    )


def _top_k_set(values: np.ndarray, k: int, ids) -> set:
    order = np.lexsort((np.asarray(ids), -values))
    return set(order[:k].tolist())


def top_k_overlap(
    early,
    final,
    k: int,
    ids: tuple[str, ...] | None = None,
) -> float:
    """|top-k(early) intersect top-k(final)| / k, ties at rank k broken by id."""
    early = np.asarray(early, dtype=np.float64)
    final = np.asarray(final, dtype=np.float64)
    if early.shape != final.shape or early.ndim != 1:
        raise ValueError("need two equal-length score vectors")
    if not 1 <= k <= len(early):
        raise ValueError(f"k={k} out of range for {len(early)} placements")
    tie_break = ids if ids is not None else np.arange(len(early))
    a = _top_k_set(early, k, tie_break)
    b = _top_k_set(final, k, tie_break)
    return len(a & b) / k


def rolling_top_k_overlap(
    scores: CheckpointScores,
    k: int,
    window: int = 200,
    stride: int = 1,
    checkpoint: int | str = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-window top-k overlap between one checkpoint and the final."""
    if isinstance(checkpoint, str):
        checkpoint = scores.checkpoint_labels.index(checkpoint)
    order = np.lexsort((np.asarray(scores.placement_ids), scores.costs))
    matrix = scores.matrix[order]
    ids = np.asarray(scores.placement_ids)[order]
    n = matrix.shape[0]
    starts = _window_starts(n, window, stride)
    overlaps = np.empty(len(starts))
    for w, start in enumerate(starts):
        stop = min(start + window, n)
        sub = matrix[start:stop]
        overlaps[w] = top_k_overlap(
            sub[:, checkpoint], sub[:, -1], min(k, stop - start), tuple(ids[start:stop])
        )
    return np.asarray(starts), overlaps


def normalize_scores(scores, reference) -> np.ndarray:
    """Affine map sending the reference min to 0 and max to 1.

    Values outside [0, 1] are permitted for scores outside the reference
    range; rank statistics are unaffected by this monotone transform.
    """
    return ScoreNormalizer.from_reference(reference).apply(scores)


@dataclass(eq=False)
class StabilityReport:
    checkpoint_labels: tuple[str, ...]
    spearman_vs_final: np.ndarray          # (n_checkpoints,)
    tiers: tuple[float, ...]
    kendalls_w_by_tier: np.ndarray         # (n_tiers,)
    window_stability: dict[str, WindowStability]
    top_k: tuple[int, ...]
    top_k_overlap_vs_final: np.ndarray     # (n_checkpoints, n_k)


def analyze(
    scores: CheckpointScores,
    tiers: tuple[float, ...] = (1.0, 0.5, 0.25, 0.1, 0.05),
    bands: tuple[Band, ...] = (Band("all"),),
    window: int = 200,
    stride: int = 1,
    top_k: tuple[int, ...] = (10, 50),
) -> StabilityReport:
    """The full report behind the stability CLI command."""
    n_ckpt = len(scores.checkpoint_labels)
    spearman = np.array([
        _spearman_or_nan(scores.matrix[:, j], scores.final) for j in range(n_ckpt)
    ])
    w_by_tier = np.array([
        kendalls_w(scores.matrix, tier=t, ids=scores.placement_ids) for t in tiers
    ])
    windows = {
        band.kind if band.delta is None else f"{band.kind}:{band.delta:g}":
            rolling_window_stability(scores, window=window, band=band, stride=stride)
        for band in bands
    }
    overlap = np.array([
        [
            top_k_overlap(scores.matrix[:, j], scores.final, min(kk, len(scores.final)),
                          scores.placement_ids)
            for kk in top_k
        ]
        for j in range(n_ckpt)
    ])
    return StabilityReport(
        checkpoint_labels=scores.checkpoint_labels,
        spearman_vs_final=spearman,
        tiers=tuple(tiers),
        kendalls_w_by_tier=w_by_tier,
        window_stability=windows,
        top_k=tuple(top_k),
        top_k_overlap_vs_final=overlap,
    )
