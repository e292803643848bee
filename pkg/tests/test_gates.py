import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgconv import gates as G
from dgconv.errors import ConfigurationError

gate_vectors = st.integers(0, 6).flatmap(lambda k: st.lists(st.integers(0, 1), min_size=k, max_size=k))


def kron_oracle(g):
    """Explicit Kronecker chain, first gate outermost."""
    u = np.ones((1, 1), dtype=np.uint8)
    for b in g:
        u = np.kron(u, np.ones((2, 2), np.uint8) if b else np.eye(2, dtype=np.uint8))
    return u


def test_binarize_sign_convention():
    assert G.binarize([-1e-8, 1e-8, 0.0, -0.0, 3.0]).tolist() == [0, 1, 1, 1, 1]
    with pytest.raises(ValueError):
        G.binarize([np.nan])


def test_worked_examples():
    u = G.build_relationship_matrix([1, 1, 0]).dense()
    assert np.array_equal(u, np.kron(np.ones((4, 4)), np.eye(2)))
    assert G.group_count([1, 1, 0]) == 2
    u = G.build_relationship_matrix([0, 1, 0]).dense()
    assert np.array_equal(u, np.kron(np.eye(2), np.kron(np.ones((2, 2)), np.eye(2))))
    assert G.group_count([0, 1, 0]) == 4
    assert G.layer_complexity([0, 1, 0], 8) == 16
    assert np.array_equal(G.build_relationship_matrix([0, 0, 0]).dense(), np.eye(8))
    assert G.build_relationship_matrix([1, 1, 1]).dense().sum() == 64


@settings(max_examples=60, deadline=None)
@given(gate_vectors)
def test_matrix_matches_kron_oracle(g):
    rm = G.build_relationship_matrix(g)
    assert np.array_equal(rm.dense(), kron_oracle(g))
    assert np.array_equal(rm.mask, kron_oracle(g).astype(bool))
    assert G.group_count(g) == 2 ** (len(g) - sum(g))


@settings(max_examples=60, deadline=None)
@given(gate_vectors)
def test_permutation_gives_block_diagonal(g):
    u = G.build_relationship_matrix(g).dense()
    p = G.block_diagonal_permutation(g)
    assert sorted(p.tolist()) == list(range(u.shape[0]))
    assert G.is_block_diagonal(u[np.ix_(p, p)], G.group_count(g))


def test_permutation_small_case():
    assert G.block_diagonal_permutation([1, 0]).tolist() == [0, 2, 1, 3]
    assert G.block_diagonal_permutation([0, 1]).tolist() == [0, 1, 2, 3]


def test_find_block_structure_rejects_unstructured():
    m = np.eye(4, dtype=np.uint8)
    m[0, 1] = 1
    assert G.find_block_structure(m) is None
    # unequal blocks are not a group convolution either
    m = np.zeros((3, 3), dtype=np.uint8)
    m[:2, :2] = 1
    m[2, 2] = 1
    assert G.find_block_structure(m) is None


def test_relaxed_matrix_and_derivative():
    g = np.array([1.0, 0.0, 1.0])
    assert np.array_equal(G.relaxed_relationship_matrix(g), G.build_relationship_matrix([1, 0, 1]).dense())
    # the relaxed construction is multilinear, so a finite step is exact
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        diff = G.relaxed_relationship_matrix(g + 0.5 * e) - G.relaxed_relationship_matrix(g - 0.5 * e)
        assert np.allclose(diff, G.du_dgk([1, 0, 1], k))
    with pytest.raises(IndexError):
        G.du_dgk([1, 0], 2)


def test_non_square_expansion():
    rm = G.build_relationship_matrix([0, 1], 4, 8)
    assert rm.shape == (4, 8)
    assert np.array_equal(rm.dense(), np.kron(kron_oracle([0, 1]), np.ones((1, 2), np.uint8)))
    assert G.layer_complexity([0, 1], 4, 8) == G.nnz_oracle(rm) == 16
    assert G.gate_count(4, 8) == 2
    pin, pout = G.expanded_permutations([0, 1], 4, 8)
    assert G.is_block_diagonal(rm.mask[np.ix_(pin, pout)], 2)


def test_invalid_channels():
    with pytest.raises(ConfigurationError):
        G.gate_count(12)
    with pytest.raises(ValueError):
        G.build_relationship_matrix([0, 2])


def test_exhaustive_block_recovery():
    for k in range(5):
        for g in itertools.product((0, 1), repeat=k):
            found = G.find_block_structure(G.build_relationship_matrix(g).dense())
            assert found is not None and found[2] == G.group_count(g)
