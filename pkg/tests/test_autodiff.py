"""Unit tests for the reverse-mode autodiff engine.

Gradient correctness is established against central finite differences,
which are computed from forward evaluations only and share no code with
the backward pass.
"""

import numpy as np
import pytest

from ilgd import autodiff as ad
from ilgd.autodiff import (
    Tensor, record, apply_primitive, finite_difference_check,
    matmul, add, sub, mul, scale, exp, log, sum_, mean, max_, softmax,
    reshape, slice_, concat, transpose, area_resize,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# --- forward values -------------------------------------------------------

def test_softmax_reference_values():
    # Independently derived: exp([1,2,3]) / sum = [0.09003057, 0.24472847, 0.66524096]
    out = softmax(Tensor([1.0, 2.0, 3.0]), axis=-1)
    np.testing.assert_allclose(
        out.data, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)
    assert abs(out.data.sum() - 1.0) < 1e-12


def test_softmax_rows_sum_to_one():
    x = rng(1).normal(size=(7, 5)) * 10
    out = softmax(Tensor(x), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(7), atol=1e-12)


def test_softmax_extreme_logits_stable():
    x = np.array([[1000.0, 0.0, -1000.0]])
    out = softmax(Tensor(x), axis=-1)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data.sum(axis=-1), [1.0], atol=1e-12)


def test_forward_deterministic_bitwise():
    x = rng(2).normal(size=(4, 4))
    a = softmax(matmul(Tensor(x), Tensor(x.T)), axis=-1).data
    b = softmax(matmul(Tensor(x), Tensor(x.T)), axis=-1).data
    assert np.array_equal(a, b)


def test_record_mode_matches_norecord_bitwise():
    x = rng(3).normal(size=(5, 3))
    plain = softmax(Tensor(x), axis=0).data
    with record():
        rec = softmax(Tensor(x), axis=0).data
    assert np.array_equal(plain, rec)


def test_area_resize_forward_values():
    # 4x4 -> 2x2 block means.
    x = np.arange(16, dtype=np.float64).reshape(16, 1)
    out = area_resize(Tensor(x), (4, 4), (2, 2))
    np.testing.assert_allclose(out.data[:, 0], [2.5, 4.5, 10.5, 12.5])
    # identity
    same = area_resize(Tensor(x), (4, 4), (4, 4))
    assert np.array_equal(same.data, x)
    # upsample replicates
    up = area_resize(Tensor(np.array([[1.0], [2.0], [3.0], [4.0]])), (2, 2), (4, 4))
    np.testing.assert_allclose(up.data[:, 0],
                               [1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4])


def test_apply_primitive_dispatch_and_unknown_kind():
    out = apply_primitive("add", [Tensor([1.0]), Tensor([2.0])])
    assert out.data[0] == 3.0
    with pytest.raises(ValueError, match="unknown op kind"):
        apply_primitive("conv2d", [Tensor([1.0])])


# --- error contracts ------------------------------------------------------

def test_matmul_shape_mismatch_diagnostic():
    with pytest.raises(ValueError, match="matmul"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError, match="positive"):
        log(Tensor([1.0, 0.0]))


def test_backward_requires_scalar_root():
    with record() as g:
        y = mul(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    with pytest.raises(ValueError, match="scalar"):
        g.backward(y)


def test_backward_requires_recorded_root():
    with record() as g:
        pass
    with pytest.raises(ValueError):
        g.backward(Tensor([1.0]))


# --- graph structure ------------------------------------------------------

def test_detached_constants_have_no_node():
    t = Tensor([1.0, 2.0])
    assert t.node is None
    out = add(t, t)  # outside any recording scope
    assert out.node is None


def test_tape_is_topologically_ordered():
    with record() as g:
        x = Tensor(rng(4).normal(size=(3, 3)))
        y = matmul(x, x)
        z = softmax(y, axis=-1)
        w = sum_(mul(z, y))
    seen = set()
    for node in g.nodes:
        for in_id, _ in node.inputs:
            # every non-leaf input must already have been produced
            if in_id not in g._leaves:
                assert in_id in seen
        seen.add(node.out_id)
    assert w.node in seen


def test_no_recording_outside_scope():
    with record() as g:
        pass
    x = Tensor(rng(5).normal(size=(2, 2)))
    softmax(matmul(x, x), axis=-1)
    assert len(g.nodes) == 0


def test_reuse_across_graphs():
    # A tensor produced on one graph acts as a leaf of the next graph.
    w = Tensor(rng(6).normal(size=(3, 3)))
    with record() as g1:
        y = matmul(w, w)
        g1.backward(sum_(y))
    grad1 = w.grad.copy()
    with record() as g2:
        y2 = matmul(w, w)
        g2.backward(sum_(y2))
    np.testing.assert_allclose(w.grad, grad1, atol=0)


def test_diamond_graph_accumulates_both_paths():
    # f(x) = sum((x + x) * x) = 2 * sum(x^2), df/dx = 4x
    x = Tensor(np.array([1.0, -2.0, 3.0]))
    with record() as g:
        y = add(x, x)
        z = mul(y, x)
        out = sum_(z)
        g.backward(out)
    np.testing.assert_allclose(x.grad, 4 * x.data, atol=1e-12)


def test_wrt_pruning_matches_full_backward():
    r = rng(7)
    x = r.normal(size=(4, 3))
    w = r.normal(size=(3, 5))

    def run(wrt_only):
        xt, wt = Tensor(x), Tensor(w)
        with record() as g:
            out = sum_(softmax(matmul(xt, wt), axis=-1))
            g.backward(out, wrt=[xt] if wrt_only else None)
        return xt.grad, wt.grad

    gx_pruned, gw_pruned = run(True)
    gx_full, gw_full = run(False)
    np.testing.assert_allclose(gx_pruned, gx_full, atol=0)
    assert gw_pruned is None  # pruned path never touches w
    assert gw_full is not None


# --- gradient checks against finite differences ---------------------------

def _scalarize(op, seed):
    """Wrap an array-valued op into a scalar via a fixed random projection."""
    c = {}

    def f(x):
        y = op(x)
        key = y.data.shape
        if key not in c:
            c[key] = rng(seed).normal(size=key)
        return sum_(mul(y, Tensor(c[key])))

    return f


@pytest.mark.parametrize("name,builder,shape", [
    ("exp", lambda x: exp(x), (3, 4)),
    ("log", lambda x: log(exp(x)), (3, 4)),
    ("softmax0", lambda x: softmax(x, axis=0), (4, 3)),
    ("softmax1", lambda x: softmax(x, axis=-1), (4, 3)),
    ("sum_axis", lambda x: sum_(x, axis=1), (3, 4)),
    ("sum_keep", lambda x: sum_(x, axis=0, keepdims=True), (3, 4)),
    ("mean_all", lambda x: mean(x), (3, 4)),
    ("mean_axis", lambda x: mean(x, axis=-1, keepdims=True), (2, 5)),
    ("max_axis", lambda x: max_(x, axis=1), (3, 4)),
    ("reshape", lambda x: reshape(x, (4, 3)), (3, 4)),
    ("transpose", lambda x: transpose(x, (1, 0)), (3, 4)),
    ("slice", lambda x: slice_(x, (slice(1, 3), slice(None, 2))), (4, 5)),
    ("scale", lambda x: scale(x, -2.5), (3, 3)),
    ("resize_down", lambda x: area_resize(x, (4, 4), (2, 2)), (16, 3)),
    ("resize_up", lambda x: area_resize(x, (2, 2), (4, 4)), (4, 3)),
])
def test_primitive_gradients_match_fd(name, builder, shape):
    x = rng(hash(name) % 2**32).normal(size=shape)
    err = finite_difference_check(_scalarize(builder, seed=11), x)
    assert err < 1e-6, f"{name}: max rel err {err}"


def test_binary_op_gradients_with_broadcasting():
    r = rng(8)
    a = r.normal(size=(4, 1, 3))
    b = r.normal(size=(5, 3)) + 3.0  # offset keeps grads well-scaled

    for op in (add, sub, mul):
        err_a = finite_difference_check(
            _scalarize(lambda x: op(x, Tensor(b)), seed=12), a)
        err_b = finite_difference_check(
            _scalarize(lambda x: op(Tensor(a), x), seed=12), b)
        assert err_a < 1e-6 and err_b < 1e-6, op.__name__


def test_matmul_gradients_match_fd():
    r = rng(9)
    a = r.normal(size=(4, 3))
    b = r.normal(size=(3, 5))
    err_a = finite_difference_check(
        _scalarize(lambda x: matmul(x, Tensor(b)), seed=13), a)
    err_b = finite_difference_check(
        _scalarize(lambda x: matmul(Tensor(a), x), seed=13), b)
    assert err_a < 1e-6 and err_b < 1e-6


def test_batched_matmul_gradients_match_fd():
    r = rng(10)
    a = r.normal(size=(2, 3, 4))  # batched @ 2-D fast path
    b = r.normal(size=(4, 5))
    err = finite_difference_check(
        _scalarize(lambda x: matmul(x, Tensor(b)), seed=14), a)
    assert err < 1e-6
    c = r.normal(size=(2, 4, 3))  # batched @ batched
    err2 = finite_difference_check(
        _scalarize(lambda x: matmul(Tensor(a), x), seed=15), c)
    assert err2 < 1e-6


def test_concat_gradients_match_fd():
    r = rng(11)
    a = r.normal(size=(2, 3))
    b = r.normal(size=(4, 3))

    err = finite_difference_check(
        _scalarize(lambda x: concat([x, Tensor(b)], axis=0), seed=16), a)
    assert err < 1e-6


def test_masked_attention_pipeline_gradient():
    # sum(mask_bar * softmax(Q K^T / sqrt(dk))) : the shape of the layout
    # loss, differentiated through the attention softmax.
    r = rng(12)
    dk = 4
    K = r.normal(size=(6, dk))
    # Rows must mix masked and unmasked keys: an all-constant row weights a
    # full softmax row (identically 1), whose true gradient is exactly zero,
    # and the relative-error denominator floor then magnifies FD noise.
    while True:
        m = (r.random(size=(8, 6)) < 0.3).astype(np.float64)
        if np.all((m.sum(axis=1) > 0) & (m.sum(axis=1) < 6)):
            break
    m_bar = 1.0 - m

    def f(q):
        logits = scale(matmul(q, Tensor(K.T)), 1.0 / np.sqrt(dk))
        att = softmax(logits, axis=-1)
        return sum_(mul(att, Tensor(m_bar - m)))

    q0 = r.normal(size=(8, dk))
    err = finite_difference_check(f, q0)
    assert err < 1e-6


def test_max_gradient_splits_ties_equally():
    x = Tensor(np.array([2.0, 2.0, 1.0]))
    with record() as g:
        y = max_(x)
        g.backward(y)
    np.testing.assert_allclose(x.grad, [0.5, 0.5, 0.0], atol=0)
