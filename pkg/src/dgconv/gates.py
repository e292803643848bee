"""Algebra of gate vectors and Kronecker-structured relationship matrices.

A layer with ``C`` channels (``C`` a power of two) owns ``K = log2(C)``
continuous gates. Their binarization ``g`` selects, per 2x2 Kronecker factor,
either the all-ones matrix (``g_k = 1``) or the identity (``g_k = 0``):

    U = (g_1 J + (1 - g_1) I) kron ... kron (g_K J + (1 - g_K) I)

Factor ``k`` (0-based) addresses bit ``K - 1 - k`` of a channel index, i.e.
the first factor is the most significant bit. Two channels are connected iff
their bits agree at every identity factor, so the group id of a channel is
formed from its identity-factor bits.

Layers whose channel counts differ by a power-of-two ratio ``r`` use
``U_square(C_min) kron ones(1, r)`` (wide) or its transpose (narrow).
"""

from dataclasses import dataclass, field
from functools import reduce

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ConfigurationError

ONES = np.ones((2, 2), dtype=np.uint8)
IDENTITY = np.eye(2, dtype=np.uint8)


def is_power_of_two(n):
    return isinstance(n, (int, np.integer)) and n >= 1 and (n & (n - 1)) == 0


def log2_channels(c):
    if not is_power_of_two(c):
        raise ConfigurationError(f"channel count must be a power of two, got {c}")
    return int(c).bit_length() - 1


def gate_count(in_channels, out_channels=None):
    """Number of learnable gates for a layer: ``log2(min(C_in, C_out))``."""
    out_channels = in_channels if out_channels is None else out_channels
    ki, ko = log2_channels(in_channels), log2_channels(out_channels)
    return min(ki, ko)


def binarize(tilde_g):
    """Binary gates: 1 where ``tilde_g >= 0`` and 0 where it is negative."""
    x = np.asarray(tilde_g, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("gate values must not be NaN")
    return (x >= 0).astype(np.uint8)


def _as_binary(g):
    g = np.asarray(g)
    if g.ndim != 1:
        raise ValueError(f"gate vector must be one-dimensional, got shape {g.shape}")
    if g.size and not np.isin(g, (0, 1)).all():
        raise ValueError("binary gate vector must contain only 0 and 1")
    return g.astype(np.uint8)


def _expansion(k, in_channels, out_channels):
    c = 1 << k
    in_channels = c if in_channels is None else in_channels
    out_channels = in_channels if out_channels is None else out_channels
    if min(in_channels, out_channels) != c:
        raise ConfigurationError(
            f"{k} gates describe {c} channels, layer has {in_channels} in / {out_channels} out"
        )
    for n in (in_channels, out_channels):
        log2_channels(n)
    return in_channels, out_channels


@dataclass(frozen=True, eq=False)
class RelationshipMatrix:
    """Immutable binary connectivity ``U`` stored as a packed bitset."""

    gates: tuple
    in_channels: int
    out_channels: int
    packed: np.ndarray = field(repr=False)

    @property
    def shape(self):
        return (self.in_channels, self.out_channels)

    @property
    def factors(self):
        return tuple("ones" if b else "identity" for b in self.gates)

    @property
    def mask(self):
        """Boolean ``C_in x C_out`` view of the bitset (computed once)."""
        cached = self.__dict__.get("_mask")
        if cached is None:
            n = self.in_channels * self.out_channels
            cached = np.unpackbits(self.packed, count=n).astype(bool).reshape(self.shape)
            cached.setflags(write=False)
            object.__setattr__(self, "_mask", cached)
        return cached

    def dense(self, dtype=np.uint8):
        return self.mask.astype(dtype)


def kron_factors(g, in_channels=None, out_channels=None, dtype=np.uint8):
    """The Kronecker factors of ``U`` in order, including the non-square expansion."""
    g = np.asarray(g)
    k = g.size
    cin, cout = _expansion(k, in_channels, out_channels)
    one, eye = np.ones((2, 2), dtype=dtype), np.eye(2, dtype=dtype)
    factors = [gk * one + (1 - gk) * eye for gk in g]
    if cout > cin:
        factors.append(np.ones((1, cout // cin), dtype=dtype))
    elif cin > cout:
        factors.append(np.ones((cin // cout, 1), dtype=dtype))
    return factors


def _kron_all(factors, dtype):
    return reduce(np.kron, factors, np.ones((1, 1), dtype=dtype))


def build_relationship_matrix(g, in_channels=None, out_channels=None):
    """Construct ``U`` from a binary gate vector."""
    g = _as_binary(g)
    u = _kron_all(kron_factors(g, in_channels, out_channels), np.uint8)
    cin, cout = u.shape
    return RelationshipMatrix(
        gates=tuple(int(b) for b in g),
        in_channels=cin,
        out_channels=cout,
        packed=np.packbits(u.astype(bool).ravel()),
    )


def relaxed_relationship_matrix(g, in_channels=None, out_channels=None):
    """Real-valued ``U(g)`` for continuous ``g``; agrees with the binary one on {0,1}."""
    g = np.asarray(g, dtype=np.float64)
    return _kron_all(kron_factors(g, in_channels, out_channels, np.float64), np.float64)


def du_dgk(g, k, in_channels=None, out_channels=None):
    """Derivative of the relaxed ``U`` with respect to gate ``k`` (0-based).

    Factor ``k`` is replaced by ``J - I``; the others keep their value at ``g``.
    """
    g = np.asarray(g, dtype=np.float64)
    if not 0 <= k < g.size:
        raise IndexError(f"gate index {k} out of range for {g.size} gates")
    factors = kron_factors(g, in_channels, out_channels, np.float64)
    factors[k] = np.ones((2, 2)) - np.eye(2)
    return _kron_all(factors, np.float64)


def group_count(g):
    g = _as_binary(g)
    return 1 << int(g.size - g.sum())


def layer_complexity(g, channels, out_channels=None):
    """Connections kept by ``U``: ``max(C_in, C_out) * prod(1 + g_k)``."""
    g = _as_binary(g)
    out_channels = channels if out_channels is None else out_channels
    cin, cout = _expansion(g.size, channels, out_channels)
    return max(cin, cout) << int(g.sum())


def nnz_oracle(u):
    """Brute-force count of ones in a relationship matrix (or plain 0/1 array)."""
    dense = u.dense() if isinstance(u, RelationshipMatrix) else np.asarray(u)
    total = 0
    for row in dense:
        for v in row:
            total += int(v != 0)
    return total


def channel_bits(k):
    """``bits[c, j]`` is the bit of channel ``c`` addressed by factor ``j``."""
    c = np.arange(1 << k)
    shifts = np.arange(k - 1, -1, -1)
    return (c[:, None] >> shifts[None, :]) & 1


def group_ids(g):
    """Group index of each channel of the square part of ``U``."""
    g = _as_binary(g)
    bits = channel_bits(g.size)
    ident = bits[:, g == 0]
    weights = 1 << np.arange(ident.shape[1] - 1, -1, -1)
    return ident @ weights if ident.shape[1] else np.zeros(1 << g.size, dtype=np.int64)


def block_diagonal_permutation(g):
    """Channel order under which ``U`` becomes contiguous equal all-ones blocks.

    Channels are sorted by their identity-factor bits (the group id) and then
    by their ones-factor bits. ``U[perm][:, perm]`` is block diagonal.
    """
    g = _as_binary(g)
    bits = channel_bits(g.size)
    ones = bits[:, g == 1]
    within = ones @ (1 << np.arange(ones.shape[1] - 1, -1, -1)) if ones.shape[1] else 0
    within = np.broadcast_to(within, (1 << g.size,))
    return np.lexsort((within, group_ids(g))).astype(np.int64)


def expanded_permutations(g, in_channels=None, out_channels=None):
    """Input and output channel orders for a possibly non-square layer."""
    g = _as_binary(g)
    cin, cout = _expansion(g.size, in_channels, out_channels)
    perm = block_diagonal_permutation(g)
    if cout > cin:
        r = cout // cin
        return perm, (perm[:, None] * r + np.arange(r)[None, :]).ravel()
    if cin > cout:
        r = cin // cout
        return (perm[:, None] * r + np.arange(r)[None, :]).ravel(), perm
    return perm, perm


def is_block_diagonal(matrix, groups=None):
    """True iff ``matrix`` equals ``kron(I_G, ones)`` for some (or the given) ``G``."""
    m = np.asarray(matrix) != 0
    rows, cols = m.shape
    if groups is None:
        width = int(m[0].sum())
        if width == 0 or cols % width:
            return False
        groups = cols // width
    if rows % groups or cols % groups:
        return False
    expected = np.kron(np.eye(groups, dtype=bool), np.ones((rows // groups, cols // groups), dtype=bool))
    return bool(np.array_equal(m, expected))


def bipartite_components(matrix):
    """Connected components of the bipartite row/column graph of ``matrix``.

    Returns ``(row_labels, col_labels)``.
    """
    m = np.asarray(matrix) != 0
    rows, cols = m.shape
    adj = np.zeros((rows + cols, rows + cols), dtype=bool)
    adj[:rows, rows:] = m
    adj[rows:, :rows] = m.T
    _, labels = connected_components(csr_matrix(adj), directed=False)
    return labels[:rows], labels[rows:]


def find_block_structure(matrix):
    """Recover ``(row_perm, col_perm, G)`` making ``matrix`` block diagonal.

    Works on any binary matrix without knowing its gates. Returns ``None``
    when the matrix is not a union of equal-sized complete bipartite blocks,
    i.e. when no row/column permutation turns it into a group convolution.
    """
    m = np.asarray(matrix) != 0
    row_lab, col_lab = bipartite_components(m)
    labels = np.unique(np.concatenate([row_lab, col_lab]))
    row_perm, col_perm, sizes = [], [], set()
    for lab in labels:
        r = np.flatnonzero(row_lab == lab)
        c = np.flatnonzero(col_lab == lab)
        if r.size == 0 or c.size == 0 or not m[np.ix_(r, c)].all():
            return None
        sizes.add((r.size, c.size))
        row_perm.append(r)
        col_perm.append(c)
    if len(sizes) != 1:
        return None
    return np.concatenate(row_perm), np.concatenate(col_perm), len(labels)
