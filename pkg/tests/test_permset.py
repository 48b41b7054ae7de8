import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jigssl.permset import (CapacityError, Permutation, PermutationSet, compose, generate_permutation_set,
                            greedy_audit, hamming_distance, inverse)


def _tally(a, b):
    count = 0
    for i in range(len(a)):
        if a[i] != b[i]:
            count += 1
    return count


perms9 = st.permutations(list(range(9)))


def test_hamming_examples():
    ident = tuple(range(9))
    assert hamming_distance(ident, ident) == 0
    assert hamming_distance(tuple(range(9)), tuple(range(8, -1, -1))) == 8


def test_hamming_length_mismatch():
    with pytest.raises(ValueError):
        hamming_distance((0, 1), (0, 1, 2))


@given(st.permutations(list(range(4))), st.permutations(list(range(4))))
def test_hamming_matches_tally(a, b):
    assert hamming_distance(a, b) == _tally(a, b)


@given(perms9, perms9)
def test_hamming_properties(a, b):
    d = hamming_distance(a, b)
    assert d == hamming_distance(b, a)
    assert hamming_distance(a, a) == 0
    assert (d == 0) == (tuple(a) == tuple(b))
    assert d != 1
    assert 0 <= d <= 9


def test_inverse_examples():
    assert inverse(Permutation.identity(9)) == Permutation.identity(9)
    assert inverse(Permutation((1, 2, 0))) == Permutation((2, 0, 1))


@given(perms9)
def test_inverse_round_trip(order):
    p = Permutation(tuple(order))
    assert compose(inverse(p), p).is_identity
    assert compose(p, inverse(p)).is_identity


def test_permutation_rejects_non_bijection():
    with pytest.raises(ValueError):
        Permutation((0, 0, 1))


def _exhaustive_best_min(n_tiles, count):
    cands = [p for p in itertools.permutations(range(n_tiles)) if p != tuple(range(n_tiles))]
    best = 0
    for subset in itertools.combinations(cands, count):
        m = min(_tally(a, b) for a, b in itertools.combinations(subset, 2))
        best = max(best, m)
    return best


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_greedy_matches_exhaustive_g2(seed):
    ps = generate_permutation_set(grid_size=2, P=3, seed=seed)
    assert ps.pool_size == 23
    assert ps.min_pairwise_hamming == _exhaustive_best_min(4, 3)


def test_clinical_scale_set():
    ps = generate_permutation_set(grid_size=3, P=30, seed=0)
    assert ps.P == 30 and ps.num_classes == 31
    assert len(set(ps.scrambled)) == 30
    assert not any(p.is_identity for p in ps.scrambled)
    d = ps.pairwise_hamming()
    off = d[~np.eye(30, dtype=bool)]
    assert off.min() >= 2 and (off != 1).all()
    assert off.min() == ps.min_pairwise_hamming
    assert greedy_audit(ps) == []


def test_determinism():
    a = generate_permutation_set(3, 30, seed=5)
    b = generate_permutation_set(3, 30, seed=5)
    assert a == b
    assert a != generate_permutation_set(3, 30, seed=6)


def test_capacity_error():
    with pytest.raises(CapacityError):
        generate_permutation_set(2, 24)
    generate_permutation_set(2, 23)


def test_pool_smaller_than_p():
    with pytest.raises(ValueError):
        generate_permutation_set(3, 30, pool_size=10)


def test_label_zero_is_identity():
    ps = generate_permutation_set(3, 5, seed=0)
    assert ps[0].is_identity
    assert ps[1] == ps.scrambled[0]
    with pytest.raises(IndexError):
        ps[6]


def test_audit_flags_tampered_set():
    ps = generate_permutation_set(3, 10, seed=0)
    first = list(ps.scrambled[0].order)
    first[0], first[1] = first[1], first[0]
    near = Permutation(tuple(first))
    bad = PermutationSet.from_permutations(3, (ps.scrambled[0], near), seed=0, pool_size=ps.pool_size)
    assert bad.min_pairwise_hamming == 2
    assert greedy_audit(bad) != []


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**16))
def test_min_distance_attained(P, seed):
    ps = generate_permutation_set(3, P, pool_size=500, seed=seed)
    if P > 1:
        d = ps.pairwise_hamming()
        off = d[~np.eye(P, dtype=bool)]
        assert off.min() == ps.min_pairwise_hamming
    assert greedy_audit(ps) == []


def test_file_round_trip(tmp_path):
    ps = generate_permutation_set(3, 30, seed=3)
    path = tmp_path / "perms.txt"
    ps.save(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "grid=3 P=30 seed=3"
    assert len(lines) == 31
    assert lines[1] == " ".join(map(str, ps.scrambled[0].order))
    loaded = PermutationSet.load(path)
    assert loaded == ps
    assert loaded.min_pairwise_hamming == ps.min_pairwise_hamming
