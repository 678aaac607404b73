"""Indicator-feature encoding of placements at configurable order and range.

Feature id layout (fixed; persisted artifacts depend on it):

    [0, L*M)                    unary indicators, id = layer*M + type
    [L*M, L*M + M)              allocation counts (when enabled), id = base + type
    pairwise, distance d=1..r   blocks of (L-d)*M*M, id = base + layer*M*M + m*M + m'
                                for the pair (layer, layer+d)
    triplets (order 3)          block of (L-2)*M**3, id = base + layer*M**3
                                + m*M*M + m'*M + m''   for (layer, layer+1, layer+2)

Pairwise blocks include every distance up to the configured range; order-3
terms cover contiguous triplets only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .placements import Placement

#: Bump when the id layout above changes; persisted posteriors carry it.
FEATURE_LAYOUT_VERSION = "ce-1"


@dataclass(frozen=True)
class ExpansionConfig:
    """Cluster-expansion truncation: interaction order and pairwise range."""

    order: int
    range: int = 1
    include_allocation_counts: bool = True

    def __post_init__(self) -> None:
        if self.order not in (1, 2, 3):
            raise ValueError(f"order must be 1, 2 or 3, got {self.order}")
        if self.range < 1:
            raise ValueError(f"range must be >= 1, got {self.range}")

    @property
    def pairwise_distances(self) -> range:
        return range(1, self.range + 1) if self.order >= 2 else range(0)

    @property
    def has_triplets(self) -> bool:
        return self.order == 3

    def label(self) -> str:
        tag = f"order{self.order}"
        if self.order >= 2:
            tag += f"-range{self.range}"
        if not self.include_allocation_counts:
            tag += "-nocounts"
        return tag


@dataclass(frozen=True)
class FeatureVector:
    """Sparse active features of one placement: sorted ids with values."""

    indices: np.ndarray
    values: np.ndarray
    dimension: int

    def dot(self, dense: np.ndarray) -> float:
        return float(dense[self.indices] @ self.values)


def feature_count(config: ExpansionConfig, num_layers: int, num_types: int) -> int:
    """Total feature dimension for the given expansion."""
    L, M = num_layers, num_types
    count = L * M
    if config.include_allocation_counts:
        count += M
    for d in config.pairwise_distances:
        count += max(L - d, 0) * M * M
    if config.has_triplets:
        count += max(L - 2, 0) * M ** 3
    return count


def _block_offsets(config: ExpansionConfig, L: int, M: int) -> dict:
    offsets = {"unary": 0}
    pos = L * M
    if config.include_allocation_counts:
        offsets["counts"] = pos
        pos += M
    for d in config.pairwise_distances:
        offsets[("pair", d)] = pos
        pos += max(L - d, 0) * M * M
    if config.has_triplets:
        offsets["triplet"] = pos
        pos += max(L - 2, 0) * M ** 3
    offsets["end"] = pos
    return offsets


def encode(placement: Placement, config: ExpansionConfig) -> FeatureVector:
    """Active indicator ids (plus allocation counts) for one placement."""
    L = placement.num_layers
    M = placement.num_types
    x = placement.assignments
    offsets = _block_offsets(config, L, M)

    indices: list[int] = [i * M + x[i] for i in range(L)]
    values: list[float] = [1.0] * L

    if config.include_allocation_counts:
        base = offsets["counts"]
        counts = [0] * M
        for t in x:
            counts[t] += 1
        for m in range(M):
            if counts[m]:
                indices.append(base + m)
                values.append(float(counts[m]))

    for d in config.pairwise_distances:
        base = offsets[("pair", d)]
        for i in range(L - d):
            indices.append(base + i * M * M + x[i] * M + x[i + d])
            values.append(1.0)

    if config.has_triplets:
        base = offsets["triplet"]
        for i in range(L - 2):
            indices.append(base + i * M ** 3 + x[i] * M * M + x[i + 1] * M + x[i + 2])
            values.append(1.0)

    order = np.argsort(np.asarray(indices, dtype=np.int64), kind="stable")
    return FeatureVector(
        indices=np.asarray(indices, dtype=np.int64)[order],
        values=np.asarray(values, dtype=np.float64)[order],
        dimension=offsets["end"],
    )


def design_matrix(placements: list[Placement], config: ExpansionConfig):
    """Sparse CSR matrix with one encoded placement per row."""
    from scipy import sparse

    if not placements:
        raise ValueError("need at least one placement")
    L = placements[0].num_layers
    M = placements[0].num_types
    for p in placements:
        if p.num_layers != L or p.num_types != M:
            raise ValueError("all placements must share the same L and type count")
    dim = feature_count(config, L, M)
    data: list[float] = []
    cols: list[np.ndarray] = []
    indptr = [0]
    for p in placements:
        fv = encode(p, config)
        cols.append(fv.indices)
        data.extend(fv.values)
        indptr.append(indptr[-1] + len(fv.indices))
    return sparse.csr_matrix(
        (np.asarray(data), np.concatenate(cols), np.asarray(indptr)),
        shape=(len(placements), dim),
    )
