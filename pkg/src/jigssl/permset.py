"""Tile permutations and the jigsaw pseudo-label space.

Label 0 is always the identity ordering; labels 1..P index the scrambled
permutations chosen by greedy max-min Hamming selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations as _all_permutations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_POOL_SIZE = 10_000


class CapacityError(ValueError):
    """More permutations requested than the tile grid can provide."""


@dataclass(frozen=True)
class Permutation:
    """An ordering of ``len(order)`` tiles; ``order[i]`` is the tile placed at position ``i``."""

    order: tuple[int, ...]

    def __post_init__(self):
        order = tuple(int(v) for v in self.order)
        if sorted(order) != list(range(len(order))):
            raise ValueError(f"not a permutation of 0..{len(order) - 1}: {order}")
        object.__setattr__(self, "order", order)

    @classmethod
    def identity(cls, n: int) -> Permutation:
        return cls(tuple(range(n)))

    def __len__(self) -> int:
        return len(self.order)

    def __iter__(self):
        return iter(self.order)

    def __getitem__(self, i: int) -> int:
        return self.order[i]

    @property
    def is_identity(self) -> bool:
        return all(i == v for i, v in enumerate(self.order))


def hamming_distance(a: Sequence[int], b: Sequence[int]) -> int:
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    return int(sum(x != y for x, y in zip(a, b)))


def compose(p: Permutation, q: Permutation) -> Permutation:
    """Return ``p ∘ q``, i.e. ``(p ∘ q)[i] = p[q[i]]``."""
    if len(p) != len(q):
        raise ValueError(f"length mismatch: {len(p)} vs {len(q)}")
    return Permutation(tuple(p.order[i] for i in q.order))


def inverse(p: Permutation) -> Permutation:
    inv = [0] * len(p)
    for i, v in enumerate(p.order):
        inv[v] = i
    return Permutation(tuple(inv))


@dataclass(frozen=True)
class PermutationSet:
    grid_size: int
    scrambled: tuple[Permutation, ...]
    generation_seed: int
    min_pairwise_hamming: int
    pool_size: int | None = field(default=None, compare=False)

    def __post_init__(self):
        n = self.grid_size**2
        if any(len(p) != n for p in self.scrambled):
            raise ValueError(f"all permutations must have length {n}")
        if len(set(self.scrambled)) != len(self.scrambled):
            raise ValueError("scrambled permutations must be distinct")
        if any(p.is_identity for p in self.scrambled):
            raise ValueError("identity is reserved for label 0")

    @property
    def num_tiles(self) -> int:
        return self.grid_size**2

    @property
    def P(self) -> int:
        return len(self.scrambled)

    @property
    def num_classes(self) -> int:
        """Size of the pseudo-label space ``{0, ..., P}``."""
        return self.P + 1

    def __len__(self) -> int:
        return self.num_classes

    def __getitem__(self, label: int) -> Permutation:
        if not 0 <= label <= self.P:
            raise IndexError(f"pseudo-label {label} outside 0..{self.P}")
        if label == 0:
            return Permutation.identity(self.num_tiles)
        return self.scrambled[label - 1]

    def as_array(self) -> np.ndarray:
        """All ``P + 1`` orderings stacked by label (row 0 is identity)."""
        return np.array([self[i].order for i in range(self.num_classes)], dtype=np.int64)

    def pairwise_hamming(self) -> np.ndarray:
        arr = np.array([p.order for p in self.scrambled], dtype=np.int64)
        return (arr[:, None, :] != arr[None, :, :]).sum(-1)

    def save(self, path: str | Path) -> None:
        lines = [f"grid={self.grid_size} P={self.P} seed={self.generation_seed}"]
        lines += [" ".join(str(v) for v in p.order) for p in self.scrambled]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> PermutationSet:
        text = Path(path).read_text().splitlines()
        if not text:
            raise ValueError(f"{path}: empty permutation file")
        header = dict(tok.split("=", 1) for tok in text[0].split())
        try:
            grid, count, seed = int(header["grid"]), int(header["P"]), int(header["seed"])
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}: bad header {text[0]!r}") from exc
        perms = tuple(Permutation(tuple(int(v) for v in line.split())) for line in text[1:] if line.strip())
        if len(perms) != count:
            raise ValueError(f"{path}: header says P={count} but found {len(perms)} rows")
        return cls.from_permutations(grid, perms, seed)

    @classmethod
    def from_permutations(cls, grid_size: int, perms: Iterable[Permutation], seed: int = 0,
                          pool_size: int | None = None) -> PermutationSet:
        perms = tuple(perms)
        arr = np.array([p.order for p in perms], dtype=np.int64)
        if len(perms) > 1:
            d = (arr[:, None, :] != arr[None, :, :]).sum(-1)
            d[np.diag_indices_from(d)] = np.iinfo(np.int64).max
            min_d = int(d.min())
        else:
            min_d = grid_size**2
        return cls(grid_size, perms, int(seed), min_d, pool_size)


def _default_pool_size(n_tiles: int) -> int:
    return math.factorial(n_tiles) - 1 if n_tiles <= 4 else DEFAULT_POOL_SIZE


def candidate_pool(grid_size: int, pool_size: int | None, seed: int) -> np.ndarray:
    """Lexicographically sorted non-identity candidate orderings.

    The whole space is enumerated when ``pool_size`` covers it; otherwise a
    uniform sample of distinct orderings is drawn. The returned rng state is
    not shared, so the greedy first pick can be replayed from ``seed``.
    """
    n = grid_size**2
    available = math.factorial(n) - 1
    if pool_size is None:
        pool_size = _default_pool_size(n)
    if pool_size >= available:
        pool = np.array(list(_all_permutations(range(n)))[1:], dtype=np.int64)
        return pool
    rng = np.random.default_rng([seed, 0])
    identity = np.arange(n)
    seen: set[bytes] = set()
    rows = []
    while len(rows) < pool_size:
        batch = rng.permuted(np.tile(identity, (pool_size, 1)), axis=1)
        for row in batch:
            key = row.tobytes()
            if key in seen or np.array_equal(row, identity):
                continue
            seen.add(key)
            rows.append(row)
            if len(rows) == pool_size:
                break
    pool = np.array(rows, dtype=np.int64)
    return pool[np.lexsort(pool.T[::-1])]


def _greedy_select(pool: np.ndarray, count: int, seed: int) -> tuple[list[int], list[int]]:
    """Greedy max-min selection; returns picked pool indices and the min-distance each pick achieved."""
    rng = np.random.default_rng([seed, 1])
    first = int(rng.integers(len(pool)))
    picks = [first]
    achieved = [pool.shape[1]]
    min_dist = (pool != pool[first]).sum(1)
    min_dist[first] = -1
    for _ in range(count - 1):
        # argmax returns the first maximizer, which is the lexicographically lowest
        j = int(np.argmax(min_dist))
        picks.append(j)
        achieved.append(int(min_dist[j]))
        min_dist = np.minimum(min_dist, (pool != pool[j]).sum(1))
        min_dist[picks] = -1
    return picks, achieved


def generate_permutation_set(grid_size: int = 3, P: int = 30, pool_size: int | None = None,
                             seed: int = 0) -> PermutationSet:
    """Pick ``P`` scrambled orderings with large pairwise Hamming distance.

    The first ordering is drawn uniformly from the candidate pool; every later
    one maximizes the minimum distance to those already chosen, ties going to
    the lexicographically lowest candidate.
    """
    if P < 1:
        raise ValueError("P must be at least 1")
    n = grid_size**2
    available = math.factorial(n) - 1
    if P > available:
        raise CapacityError(f"P={P} exceeds the {available} non-identity orderings of {n} tiles")
    if pool_size is None:
        pool_size = _default_pool_size(n)
    if pool_size < P:
        raise ValueError(f"pool_size={pool_size} smaller than P={P}")
    pool = candidate_pool(grid_size, pool_size, seed)
    picks, _ = _greedy_select(pool, P, seed)
    perms = [Permutation(tuple(pool[j])) for j in picks]
    return PermutationSet.from_permutations(grid_size, perms, seed, pool_size=min(pool_size, available))


def greedy_audit(permset: PermutationSet) -> list[str]:
    """Replay the candidate pool from the set's seed and report any pick that was not a max-min choice.

    An empty list means the set is consistent with greedy selection.
    """
    pool = candidate_pool(permset.grid_size, permset.pool_size, permset.generation_seed)
    index = {row.tobytes(): i for i, row in enumerate(pool)}
    problems = []
    chosen: list[int] = []
    for label, perm in enumerate(permset.scrambled, start=1):
        key = np.array(perm.order, dtype=np.int64).tobytes()
        if key not in index:
            problems.append(f"label {label}: permutation not in the replayed pool")
            return problems
        j = index[key]
        if chosen:
            selected = pool[chosen]
            dists = (pool[:, None, :] != selected[None, :, :]).sum(-1).min(1)
            dists[chosen] = -1
            if dists[j] < dists.max():
                problems.append(
                    f"label {label}: min distance {dists[j]} but a remaining candidate reached {dists.max()}"
                )
        chosen.append(j)
    return problems
