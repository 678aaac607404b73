"""Placement and allocation types, combinatorial counts, and sampling schemes.

A placement assigns one mixer type to each of L layers; an allocation is its
per-type layer-count vector.  Sampling comes in two flavors: local (each
layer i.i.d. uniform over types) and global (allocation drawn uniformly over
all compositions first, then a placement uniformly within it).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator

import numpy as np


@dataclass(frozen=True)
class MixerCatalog:
    """Ordered vocabulary of mixer types with one single-character code each."""

    names: tuple[str, ...]
    short_codes: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.names) < 1:
            raise ValueError("catalog needs at least one mixer type")
        if len(self.short_codes) != len(self.names):
            raise ValueError("one short code per type required")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate type names: {self.names}")
        if len(set(self.short_codes)) != len(self.short_codes):
            raise ValueError(f"duplicate short codes: {self.short_codes}")
        for code in self.short_codes:
            if len(code) != 1:
                raise ValueError(f"short codes must be single characters, got {code!r}")

    @property
    def num_types(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown mixer type {name!r}; catalog has {self.names}") from None


#: Default four-type catalog: full attention, sliding-window attention,
#: channel-gated delta recurrence, gated delta recurrence.
DEFAULT_CATALOG = MixerCatalog(
    names=("FA", "SWA", "KDA", "GDN"),
    short_codes=("A", "S", "K", "G"),
)


@dataclass(frozen=True)
class Placement:
    """A length-L sequence of mixer-type indices, each in [0, num_types)."""

    assignments: tuple[int, ...]
    num_types: int

    def __post_init__(self) -> None:
        if self.num_types < 1:
            raise ValueError("num_types must be >= 1")
        for x in self.assignments:
            if not 0 <= x < self.num_types:
                raise ValueError(
                    f"type index {x} out of range for {self.num_types} types"
                )

    @property
    def num_layers(self) -> int:
        return len(self.assignments)

    def to_codes(self, catalog: MixerCatalog) -> str:
        """Comma-free string of short codes, one per layer."""
        self._check_catalog(catalog)
        return "".join(catalog.short_codes[x] for x in self.assignments)

    def to_names(self, catalog: MixerCatalog) -> list[str]:
        """JSON form: list of type names, one per layer."""
        self._check_catalog(catalog)
        return [catalog.names[x] for x in self.assignments]

    @classmethod
    def from_codes(cls, text: str, catalog: MixerCatalog) -> "Placement":
        lookup = {c: i for i, c in enumerate(catalog.short_codes)}
        try:
            assignments = tuple(lookup[c] for c in text)
        except KeyError as exc:
            raise ValueError(f"unknown short code {exc.args[0]!r} in {text!r}") from None
        return cls(assignments, catalog.num_types)

    @classmethod
    def from_names(cls, names: list[str], catalog: MixerCatalog) -> "Placement":
        return cls(tuple(catalog.index_of(n) for n in names), catalog.num_types)

    def _check_catalog(self, catalog: MixerCatalog) -> None:
        if catalog.num_types != self.num_types:
            raise ValueError(
                f"placement expects {self.num_types} types, catalog has {catalog.num_types}"
            )


@dataclass(frozen=True)
class Allocation:
    """Per-type layer counts; the counts sum to the number of layers L."""

    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.counts) < 1:
            raise ValueError("allocation needs at least one type")
        for n in self.counts:
            if n < 0:
                raise ValueError(f"negative count in allocation {self.counts}")

    @property
    def num_layers(self) -> int:
        return sum(self.counts)

    @property
    def num_types(self) -> int:
        return len(self.counts)


def allocation_of(placement: Placement) -> Allocation:
    """Count how many layers each type occupies."""
    counts = [0] * placement.num_types
    for x in placement.assignments:
        counts[x] += 1
    return Allocation(tuple(counts))


def count_compositions(num_layers: int, num_types: int) -> int:
    """Number of allocations of L layers over M types: C(L+M-1, M-1).

    Exact arbitrary-precision arithmetic; the result cannot silently wrap.
    """
    if num_layers < 0:
        raise ValueError("num_layers must be >= 0")
    if num_types < 1:
        raise ValueError("num_types must be >= 1")
    return math.comb(num_layers + num_types - 1, num_types - 1)


def count_placements_in_allocation(allocation: Allocation) -> int:
    """Multinomial coefficient L! / prod(n_m!) as an exact big integer."""
    result = math.factorial(allocation.num_layers)
    for n in allocation.counts:
        result //= math.factorial(n)
    return result


def compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    """All compositions of `total` into `parts` non-negative parts, lex order."""
    if parts < 1:
        raise ValueError("parts must be >= 1")
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in compositions(total - first, parts - 1):
            yield (first,) + rest


def composition_rank(comp: tuple[int, ...], total: int | None = None) -> int:
    """Lexicographic rank of a composition among compositions of its total."""
    if total is None:
        total = sum(comp)
    parts = len(comp)
    rank = 0
    remaining = total
    for j in range(parts - 1):
        free = parts - 1 - j
        rank += math.comb(remaining + free, free) - math.comb(remaining - comp[j] + free, free)
        remaining -= comp[j]
    return rank


def composition_unrank(index: int, total: int, parts: int) -> tuple[int, ...]:
    """Inverse of composition_rank: index -> composition, lex order."""
    if not 0 <= index < count_compositions(total, parts):
        raise ValueError(f"index {index} out of range for ({total}, {parts})")
    comp = []
    remaining = total
    for j in range(parts - 1):
        free = parts - 1 - j
        value = 0
        while True:
            block = math.comb(remaining - value + free - 1, free - 1)
            if index < block:
                break
            index -= block
            value += 1
        comp.append(value)
        remaining -= value
    comp.append(remaining)
    return tuple(comp)


def compositions_array(total: int, parts: int) -> np.ndarray:
    """All compositions of `total` into `parts`, lex order, as an int array."""
    count = count_compositions(total, parts)
    out = np.empty((count, parts), dtype=np.int64)
    for i, comp in enumerate(compositions(total, parts)):
        out[i] = comp
    return out


def rank_compositions_array(comps: np.ndarray, total: int) -> np.ndarray:
    """Vectorized composition_rank over the rows of `comps`."""
    parts = comps.shape[1]
    # binomials C(n, k) for all n up to total+parts, k up to parts
    table = np.zeros((total + parts + 1, parts + 1), dtype=np.int64)
    table[:, 0] = 1
    for n in range(1, total + parts + 1):
        for k in range(1, parts + 1):
            table[n, k] = table[n - 1, k - 1] + table[n - 1, k]
    ranks = np.zeros(len(comps), dtype=np.int64)
    remaining = np.full(len(comps), total, dtype=np.int64)
    for j in range(parts - 1):
        free = parts - 1 - j
        ranks += table[remaining + free, free] - table[remaining - comps[:, j] + free, free]
        remaining -= comps[:, j]
    return ranks


def derive_seed(global_seed: int, draw_index: int) -> int:
    """Per-draw sampling seed: first 8 bytes of SHA-256("placeopt:<seed>:<index>").

    Fixed here so identical (global_seed, draw_index) pairs reproduce the same
    placement on any platform.
    """
    digest = hashlib.sha256(f"placeopt:{global_seed}:{draw_index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _randrange(rng: np.random.Generator, n: int) -> int:
    """Uniform integer in [0, n) for arbitrary-precision n, via bit rejection."""
    if n <= 0:
        raise ValueError("n must be positive")
    bits = n.bit_length()
    nbytes = (bits + 7) // 8
    mask = (1 << bits) - 1
    while True:
        value = int.from_bytes(rng.bytes(nbytes), "little") & mask
        if value < n:
            return value


def sample_local(seed: int, num_layers: int, num_types: int) -> Placement:
    """Each layer's type i.i.d. uniform over the catalog."""
    if num_types < 1:
        raise ValueError("num_types must be >= 1")
    rng = np.random.default_rng(seed)
    assignments = rng.integers(0, num_types, size=num_layers)
    return Placement(tuple(int(x) for x in assignments), num_types)


def sample_global(seed: int, num_layers: int, num_types: int) -> Placement:
    """Allocation uniform over all compositions, then uniform within it.

    The allocation is unranked from a uniform index, so uniformity over the
    C(L+M-1, M-1) compositions is exact rather than rejection-based.
    """
    if num_types < 1:
        raise ValueError("num_types must be >= 1")
    rng = np.random.default_rng(seed)
    index = _randrange(rng, count_compositions(num_layers, num_types))
    counts = composition_unrank(index, num_layers, num_types)
    return placement_within_allocation(rng, Allocation(counts))


def placement_within_allocation(rng: np.random.Generator, allocation: Allocation) -> Placement:
    """Uniform placement among the L!/prod(n_m!) compatible with `allocation`."""
    pool = np.repeat(np.arange(allocation.num_types), allocation.counts)
    shuffled = pool[rng.permutation(len(pool))]
    return Placement(tuple(int(x) for x in shuffled), allocation.num_types)


def conditional_same_type_probability(num_layers: int, num_types: int, scheme: str) -> float:
    """Exact P(x_j = m | x_i = m) for j != i under a sampling scheme.

    Local sampling: layers independent, so 1/M.  Global sampling: computed by
    exact summation over all allocations with uniform weight:
    the joint P(x_i = m, x_j = m) is the allocation-average of
    n_m(n_m - 1) / (L(L-1)), the marginal is the allocation-average of n_m/L.
    """
    if num_layers < 2:
        raise ValueError("need at least two layers")
    if num_types < 1:
        raise ValueError("num_types must be >= 1")
    if scheme == "local":
        return 1.0 / num_types
    if scheme != "global":
        raise ValueError(f"unknown scheme {scheme!r}; expected 'local' or 'global'")
    sum_pairs = 0
    sum_singles = 0
    n_alloc = 0
    for comp in compositions(num_layers, num_types):
        n_alloc += 1
        for n in comp:
            sum_pairs += n * (n - 1)
            sum_singles += n
    joint = Fraction(sum_pairs, n_alloc * num_types * num_layers * (num_layers - 1))
    marginal = Fraction(sum_singles, n_alloc * num_types * num_layers)
    return float(joint / marginal)
