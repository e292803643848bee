"""One-shot oracle suite behind ``dgconv verify``.

Each check raises ``AssertionError`` on failure. Gate helpers are looked up
through the :mod:`dgconv.gates` module at call time so that a patched sign
convention is exercised everywhere it is used.
"""

import itertools
import math
import time

import numpy as np

from . import complexity as Z
from . import gates as G
from . import tensor as T
from .compiler import compile_layer
from .gradcheck import numerical_gradient, rel_error
from .layer import DGConv2d, dgconv_backward, dgconv_forward, effective_kernel

CHECKS = []


def check(fn):
    CHECKS.append(fn)
    return fn


def _all_gates(max_k):
    for k in range(max_k + 1):
        for bits in itertools.product((0, 1), repeat=k):
            yield np.array(bits, dtype=np.uint8)


def _layer_with_gates(g, rng, k=3, dtype=np.float64):
    c = 1 << len(g)
    layer = DGConv2d(c, c, k, dtype=dtype)
    layer.weight.data = rng.normal(size=layer.weight.shape).astype(dtype)
    layer.gates.data = np.where(np.asarray(g) == 1, 1e-8, -1e-8)
    return layer


@check
def binarize_sign_convention():
    got = G.binarize([-1e-8, 1e-8, 0.0, 0.5, -0.2])
    assert list(got) == [0, 1, 1, 1, 0], f"binarize gave {list(got)}"


@check
def binarize_zero_gate_layer_is_dense():
    rng = np.random.default_rng(0)
    layer = DGConv2d(4, 4, 1, dtype=np.float64)
    layer.weight.data = rng.normal(size=layer.weight.shape)
    layer.gates.data = np.zeros(2)
    assert np.array_equal(effective_kernel(layer), layer.weight.data), "zero gates must select the ones factor"


@check
def relationship_worked_examples():
    u = G.build_relationship_matrix([1, 1, 0]).dense()
    assert np.array_equal(u, np.kron(np.ones((4, 4)), np.eye(2))) and G.group_count([1, 1, 0]) == 2
    u = G.build_relationship_matrix([0, 1, 0]).dense()
    assert np.array_equal(u, np.kron(np.kron(np.eye(2), np.ones((2, 2))), np.eye(2)))
    assert G.group_count([0, 1, 0]) == 4
    assert np.array_equal(G.build_relationship_matrix([0, 0, 0]).dense(), np.eye(8))
    assert G.build_relationship_matrix([1, 1, 1]).dense().all()


@check
def complexity_identities_exhaustive():
    for g in _all_gates(6):
        c = 1 << g.size
        u = G.build_relationship_matrix(g).dense()
        row = int(np.prod(1 + g.astype(int)))
        assert G.layer_complexity(g, c) == G.nnz_oracle(u), f"zeta mismatch at g={g}"
        assert np.array_equal(u, u.T) and u.diagonal().all(), f"U not symmetric/unit-diagonal at g={g}"
        assert (u.sum(0) == row).all() and (u.sum(1) == row).all(), f"row/col sums wrong at g={g}"


@check
def block_permutation_exhaustive():
    for g in _all_gates(5):
        u = G.build_relationship_matrix(g).dense()
        p = G.block_diagonal_permutation(g)
        assert G.is_block_diagonal(u[np.ix_(p, p)], G.group_count(g)), f"not block diagonal at g={g}"
        found = G.find_block_structure(u)
        assert found is not None and found[2] == G.group_count(g), f"component count wrong at g={g}"
    bad = np.eye(4, dtype=np.uint8)
    bad[0, 1] = 1
    assert G.find_block_structure(bad) is None, "unstructured matrix was accepted"


@check
def gate_parameter_count():
    assert G.gate_count(1024) == 10


@check
def conv_matches_nested_loops():
    rng = np.random.default_rng(1)
    x, k = rng.normal(size=(2, 4, 5, 5)), rng.normal(size=(3, 3, 4, 4))
    for stride, pad in [(1, None), (2, 1), (1, 0)]:
        e = rel_error(T.conv2d_forward(x, k, stride, pad), T.conv2d_naive(x, k, stride, pad))
        assert e <= 1e-6, f"conv rel err {e}"


@check
def conv_adjoint_identity():
    rng = np.random.default_rng(2)
    x, k = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(3, 3, 3, 5))
    for stride in (1, 2):
        y = T.conv2d_forward(x, k, stride)
        v = rng.normal(size=y.shape)
        gx, gk = T.conv2d_backward(x, k, v, stride)
        lhs = np.vdot(y, v)
        assert abs(lhs - np.vdot(x, gx)) <= 1e-6 * abs(lhs), "input adjoint mismatch"
        assert abs(lhs - np.vdot(k, gk)) <= 1e-6 * abs(lhs), "kernel adjoint mismatch"


@check
def group_conv_matches_masked_dense():
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=(2, 8, 5, 5)), rng.normal(size=(3, 3, 8, 8))
    for groups in (1, 2, 4, 8):
        spec = T.GroupSpec(groups, 8, 8)
        e = rel_error(T.group_conv_forward(x, k, spec), T.conv2d_forward(x, k * spec.block_mask()))
        assert e <= 1e-10, f"G={groups}: rel err {e}"


@check
def dgconv_equivalence_family():
    rng = np.random.default_rng(4)
    for dtype, tol in ((np.float64, 1e-10), (np.float32, 1e-5)):
        for g in _all_gates(5):
            layer = _layer_with_gates(g, rng, dtype=dtype)
            x = rng.normal(size=(2, layer.in_channels, 4, 4)).astype(dtype)
            w = layer.weight.data.astype(np.float64)
            ref = T.conv2d_forward(x.astype(np.float64), w * G.build_relationship_matrix(g).dense())
            e1 = rel_error(dgconv_forward(layer, x), ref)
            e2 = rel_error(compile_layer(layer).forward(x), ref)
            assert max(e1, e2) <= tol, f"{np.dtype(dtype).name} g={g}: errors {e1}, {e2}"


@check
def dgconv_gradients_finite_difference():
    rng = np.random.default_rng(5)
    for g in ([1, 0], [0, 1], [1, 1, 0]):
        layer = _layer_with_gates(g, rng)
        c = layer.in_channels
        x = rng.normal(size=(2, c, 4, 4))
        v = rng.normal(size=(2, c, 4, 4))
        gx, gk, gg = dgconv_backward(layer, x, v)
        w = layer.weight.data

        def loss_x():
            return np.vdot(T.conv2d_forward(x, w * G.build_relationship_matrix(g).dense()), v)

        assert rel_error(gx, numerical_gradient(loss_x, x)) <= 1e-4, "input gradient"
        assert rel_error(gk, numerical_gradient(loss_x, w) * G.build_relationship_matrix(g).dense()) <= 1e-4
        gr = np.array(g, dtype=np.float64)

        def loss_g():
            return np.vdot(T.conv2d_forward(x, w * G.relaxed_relationship_matrix(gr)), v)

        assert rel_error(gg.task, numerical_gradient(loss_g, gr)) <= 1e-3, "gate gradient"
        mask = G.build_relationship_matrix(g).mask
        assert not gk[:, :, ~mask].any(), "masked kernel entries received gradient"


@check
def primitive_gradients_finite_difference():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 3, 2, 2))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    v = rng.normal(size=x.shape)

    def bn_loss():
        out, _ = T.batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), train=True)
        return np.vdot(out, v)

    _, cache = T.batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), train=True)
    dx, dgamma, _ = T.batchnorm_backward(v, cache)
    assert rel_error(dx, numerical_gradient(bn_loss, x)) <= 1e-4, "batchnorm input gradient"
    assert rel_error(dgamma, numerical_gradient(bn_loss, gamma)) <= 1e-4, "batchnorm gamma gradient"
    logits, labels = rng.normal(size=(5, 4)), rng.integers(0, 4, size=5)
    _, dl = T.softmax_xent(logits, labels)
    assert rel_error(dl, numerical_gradient(lambda: T.softmax_xent(logits, labels)[0], logits)) <= 1e-4
    assert abs(T.softmax_xent(np.zeros((3, 10)), np.zeros(3, dtype=int))[0] - math.log(10)) < 1e-12


@check
def penalty_multiplier():
    for ratio in (1.5, 2.0, 4.0):
        state = Z.ComplexityState(layer_zetas=[int(64 * ratio)], gates=[np.ones(6, np.uint8)], o=64.0)
        expected = ratio**0.02
        assert abs(state.multiplier - expected) <= 1e-12 * expected, f"ratio {ratio}"
    state = Z.ComplexityState(layer_zetas=[64], gates=[np.ones(6, np.uint8)], o=64.0)
    assert state.multiplier == 1.0


def run_checks(selected=None, out=print):
    """Run every registered check; returns ``[(name, ok, detail, seconds)]``."""
    results = []
    for fn in CHECKS:
        if selected and fn.__name__ not in selected:
            continue
        t0 = time.perf_counter()
        try:
            fn()
            ok, detail = True, ""
        except Exception as e:  # report every failure, keep going
            ok, detail = False, f"{type(e).__name__}: {e}"
        dt = time.perf_counter() - t0
        results.append((fn.__name__, ok, detail, dt))
        if out:
            status = "PASS" if ok else "FAIL"
            out(f"{status} {fn.__name__} ({dt:.2f}s){' - ' + detail if detail else ''}")
    return results
