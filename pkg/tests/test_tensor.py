"""Engine tests: every primitive against hand cases and the FD oracle."""

import numpy as np
import pytest

import advlab.tensor as T
from oracles import (conv2d_ref, cross_entropy_ref, fd_grad, maxpool2d_ref,
                     relerr, softmax_ref)

RNG = np.random.default_rng(20240817)


def t64(arr, rg=False):
    return T.tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg)


def away_from_kinks(shape, margin=0.1):
    """Random values with |x| >= margin so FD never straddles a relu/abs/max
    kink, and with distinct entries so pooling argmaxes are stable."""
    x = RNG.standard_normal(shape)
    x = np.where(np.abs(x) < margin, margin * np.sign(x) + (x == 0), x)
    x += RNG.uniform(1e-4, 2e-4, size=shape)  # break exact ties
    return x


# ------------------------------------------------------------- hand examples

def test_matmul_identity():
    out = T.matmul(t64([[1.0, 0.0], [0.0, 1.0]]), t64([[3.0], [4.0]]))
    assert out.data.tolist() == [[3.0], [4.0]]


def test_matmul_hand():
    out = T.matmul(t64([[1.0, 2.0]]), t64([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error():
    with pytest.raises(ValueError):
        T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_conv2d_all_ones():
    x = t64(np.ones((1, 1, 3, 3)))
    w = t64(np.ones((1, 1, 3, 3)))
    b = t64(np.zeros(1))
    out = T.conv2d(x, w, b, stride=1, padding=0)
    assert out.data.shape == (1, 1, 1, 1)
    assert out.data.reshape(-1)[0] == 9.0


def test_conv2d_zero_kernel():
    x = t64(RNG.standard_normal((2, 3, 6, 6)))
    w = t64(np.zeros((4, 3, 3, 3)))
    b = t64(np.zeros(4))
    out = T.conv2d(x, w, b, stride=1, padding=1)
    assert np.all(out.data == 0.0)


def test_conv2d_bad_dims():
    with pytest.raises(ValueError):
        T.conv2d(t64(np.ones((1, 1, 2, 2))), t64(np.ones((1, 1, 5, 5))),
                 t64(np.zeros(1)), stride=1, padding=0)


def test_maxpool_hand():
    x = t64(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = T.maxpool2d(x, 2, 2)
    assert out.data.reshape(-1)[0] == 4.0


def test_maxpool_tie_routes_to_first():
    x = t64(np.full((1, 1, 2, 2), 7.0), rg=True)
    out = T.maxpool2d(x, 2, 2)
    assert out.data.reshape(-1)[0] == 7.0
    T.sum_all(out).backward()
    g = x.grad.reshape(-1)
    assert g.tolist() == [1.0, 0.0, 0.0, 0.0]


def test_softmax_symmetry():
    out = T.softmax(t64([[0.0, 0.0, 0.0, 0.0]]))
    assert np.allclose(out.data, 0.25)
    assert out.data.sum() == pytest.approx(1.0)


def test_l2_squared_identity():
    v = t64(RNG.standard_normal((5, 7)))
    assert float(T.l2_squared(v, v).data) == 0.0


def test_cross_entropy_matches_reference():
    z = RNG.standard_normal((6, 10))
    y = RNG.integers(0, 10, size=6)
    got = float(T.cross_entropy(t64(z), y).data)
    assert got == pytest.approx(cross_entropy_ref(z, y), rel=1e-12)


def test_cross_entropy_label_range_and_empty():
    with pytest.raises(ValueError):
        T.cross_entropy(t64(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(ValueError):
        T.cross_entropy(t64(np.zeros((0, 3))), np.array([], dtype=int))


# -------------------------------------------------------------- backward API

def test_backward_sum_gives_ones():
    x = t64(RNG.standard_normal((3, 4, 2)), rg=True)
    T.sum_all(x).backward()
    assert np.all(x.grad == 1.0)


def test_backward_disconnected_gives_zero_not_error():
    x = t64(RNG.standard_normal((2, 2)), rg=True)
    y = t64(RNG.standard_normal((2, 2)), rg=True)
    T.sum_all(x * x).backward()
    assert y.grad is None  # unreachable tensors are simply untouched
    loss = T.sum_all(x)
    g = T.grad_of(loss, y.mark_capture())
    assert np.all(g.data == 0.0)


def test_backward_scalar_only():
    x = t64(RNG.standard_normal((2, 2)), rg=True)
    with pytest.raises(ValueError):
        (x * x).backward()


def test_grad_accumulates_until_zeroed():
    x = t64(RNG.standard_normal(5), rg=True)
    T.sum_all(x).backward()
    T.sum_all(x).backward()
    assert np.all(x.grad == 2.0)
    T.zero_grads([x])
    assert x.grad is None
    T.sum_all(x).backward()
    assert np.all(x.grad == 1.0)


def test_grad_of_loss_itself_is_one():
    x = t64(RNG.standard_normal(4), rg=True)
    loss = T.mean_all(x * x).mark_capture()
    g = T.grad_of(loss, loss)
    assert float(g.data) == 1.0


def test_grad_of_requires_capture_mark():
    x = t64(RNG.standard_normal(4), rg=True)
    mid = x * x
    loss = T.sum_all(mid)
    with pytest.raises(ValueError):
        T.grad_of(loss, mid)


def test_grad_of_does_not_touch_grad_fields():
    x = t64(RNG.standard_normal(4), rg=True)
    mid = (x * x).mark_capture()
    loss = T.sum_all(mid)
    g = T.grad_of(loss, mid)
    assert np.all(g.data == 1.0)
    assert x.grad is None and mid.grad is None


def test_backward_prunes_unrequested_paths():
    # input-gradient query must not produce weight grads as a side effect
    x = t64(away_from_kinks((3, 4)), rg=False).mark_capture()
    w = t64(RNG.standard_normal((4, 2)), rg=True)
    b = t64(np.zeros(2), rg=True)
    loss = T.mean_all(T.relu(T.dense(x, w, b)))
    gx = T.grad_of(loss, x)
    assert gx.data.shape == (3, 4)
    assert w.grad is None and b.grad is None


def test_linearity_of_backward():
    x = t64(away_from_kinks((4, 3)), rg=True)
    w = t64(RNG.standard_normal((3, 3)))

    def build():
        h = T.relu(T.matmul(x, w))
        return T.mean_all(h * h), T.sum_all(h)

    a, b = 0.7, -1.3
    l1, l2 = build()
    combo = T.add(T.scale(l1, a), T.scale(l2, b))
    combo.backward()
    g_combo = x.grad.copy()
    T.zero_grads([x])
    l1, l2 = build()
    l1.backward()
    g1 = x.grad.copy()
    T.zero_grads([x])
    l1, l2 = build()
    l2.backward()
    g2 = x.grad.copy()
    assert np.max(np.abs(g_combo - (a * g1 + b * g2))) < 1e-10


def test_shared_input_fan_out_accumulates():
    x = t64(RNG.standard_normal((3, 3)), rg=True)
    loss = T.add(T.sum_all(x * x), T.scale(T.sum_all(x), 3.0))
    loss.backward()
    assert np.allclose(x.grad, 2.0 * x.data + 3.0, atol=1e-12)


def test_no_grad_records_nothing():
    x = t64(RNG.standard_normal(4), rg=True)
    with T.no_grad():
        y = x * x
    assert y._vjp is None
    loss = T.sum_all(y)
    assert loss._vjp is None


def test_determinism_bitwise():
    x = np.asarray(RNG.standard_normal((4, 3)), dtype=np.float32)
    w = np.asarray(RNG.standard_normal((3, 5)), dtype=np.float32)

    def run():
        xt = T.tensor(x.copy(), requires_grad=True)
        out = T.mean_all(T.relu(T.matmul(xt, T.tensor(w.copy()))))
        out.backward()
        return out.data.copy(), xt.grad.copy()

    v1, g1 = run()
    v2, g2 = run()
    assert v1.tobytes() == v2.tobytes()
    assert g1.tobytes() == g2.tobytes()


# --------------------------------------------------------------- FD sweeps

def fd_check(build, x0, tol=1e-6, h=1e-5):
    """build(Tensor) -> scalar loss Tensor; checks grad at x0 against FD."""
    xt = T.tensor(x0.copy(), requires_grad=True)
    build(xt).backward()

    def f(xv):
        return float(build(T.tensor(xv)).data)

    num = fd_grad(f, x0, h=h)
    err = relerr(xt.grad, num)
    assert err < tol, f"relerr {err}"


def test_fd_matmul():
    b = t64(RNG.standard_normal((4, 2)))
    fd_check(lambda a: T.mean_all(T.matmul(a, b)), RNG.standard_normal((3, 4)))
    a = t64(RNG.standard_normal((3, 4)))
    fd_check(lambda bb: T.mean_all(T.matmul(a, bb)), RNG.standard_normal((4, 2)))


def test_fd_dense_all_parents():
    x0 = RNG.standard_normal((3, 5))
    w0 = RNG.standard_normal((5, 4))
    b0 = RNG.standard_normal(4)
    w = t64(w0)
    b = t64(b0)
    fd_check(lambda x: T.mean_all(T.dense(x, w, b)), x0)
    x = t64(x0)
    fd_check(lambda ww: T.mean_all(T.dense(x, ww, b)), w0)
    fd_check(lambda bb: T.mean_all(T.dense(x, w, bb)), b0)


def test_fd_elementwise():
    s = RNG.standard_normal((3, 4))
    other = t64(RNG.standard_normal((3, 4)))
    fd_check(lambda x: T.sum_all(T.add(x, other)), s)
    fd_check(lambda x: T.sum_all(T.sub(other, x)), s)
    fd_check(lambda x: T.mean_all(T.mul(x, other)), s)
    fd_check(lambda x: T.mean_all(T.scale(x, -2.5)), s)
    fd_check(lambda x: T.mean_all(T.abs_(x)), away_from_kinks((3, 4)))
    fd_check(lambda x: T.sum_all(T.log(x)), np.abs(s) + 0.5)
    fd_check(lambda x: T.mean_all(x), s)


def test_fd_relu():
    fd_check(lambda x: T.mean_all(T.relu(x)), away_from_kinks((4, 6)))


def test_fd_softmax_family():
    z0 = RNG.standard_normal((4, 10))
    v = t64(RNG.standard_normal((4, 10)))
    fd_check(lambda z: T.sum_all(T.mul(T.softmax(z), v)), z0)
    fd_check(lambda z: T.sum_all(T.mul(T.log_softmax(z), v)), z0)


def test_fd_cross_entropy():
    y = RNG.integers(0, 10, size=4)
    fd_check(lambda z: T.cross_entropy(z, y), RNG.standard_normal((4, 10)))


def test_fd_pairing_ops():
    b0 = RNG.standard_normal((5, 10))
    bb = t64(b0)
    w = RNG.uniform(0.1, 1.0, size=5)
    fd_check(lambda a: T.weighted_mean(T.sq_dist_rows(a, bb), w),
             RNG.standard_normal((5, 10)))
    aa = t64(RNG.standard_normal((5, 10)))
    fd_check(lambda b: T.l2_squared(aa, b), b0)


def test_fd_margin_rows():
    y = np.array([0, 3, 2, 1])
    z0 = away_from_kinks((4, 5)) * 3  # well-separated logits
    fd_check(lambda z: T.mean_all(T.margin_rows(z, y)), z0)


def test_fd_mul_rowvec_and_mean_rows():
    v = RNG.uniform(0.5, 1.5, size=6)
    fd_check(lambda x: T.mean_all(T.mul_rowvec(x, v)),
             RNG.standard_normal((4, 6)))
    s = t64(RNG.standard_normal(6))
    fd_check(lambda x: T.sum_all(T.mul(T.mean_rows(x), s)),
             RNG.standard_normal((4, 6)))


def test_fd_conv2d_spec_case():
    # random 2x3x8x8 with 4 filters 3x3, grads for x, w and bias
    x0 = RNG.standard_normal((2, 3, 8, 8))
    w0 = RNG.standard_normal((4, 3, 3, 3))
    b0 = RNG.standard_normal(4)
    w = t64(w0)
    b = t64(b0)
    fd_check(lambda x: T.mean_all(T.conv2d(x, w, b, 1, 1)), x0, tol=1e-5)
    x = t64(x0)
    fd_check(lambda ww: T.mean_all(T.conv2d(x, ww, b, 1, 1)), w0, tol=1e-5)
    fd_check(lambda bb: T.mean_all(T.conv2d(x, w, bb, 1, 1)), b0, tol=1e-5)


def test_fd_conv2d_stride2_no_pad():
    w = t64(RNG.standard_normal((2, 3, 3, 3)))
    b = t64(RNG.standard_normal(2))
    fd_check(lambda x: T.mean_all(T.conv2d(x, w, b, 2, 0)),
             RNG.standard_normal((2, 3, 7, 7)), tol=1e-5)


def test_fd_conv2d_single_channel_path():
    w = t64(RNG.standard_normal((1, 1, 2, 5, 5)).reshape(2, 1, 5, 5))
    b = t64(RNG.standard_normal(2))
    fd_check(lambda x: T.mean_all(T.conv2d(x, w, b, 1, 2)),
             RNG.standard_normal((2, 1, 8, 8)), tol=1e-5)


def test_fd_maxpool_spec_case():
    fd_check(lambda x: T.mean_all(T.maxpool2d(x, 2, 2)),
             away_from_kinks((1, 1, 4, 4)))


def test_fd_maxpool_window3_stride1():
    fd_check(lambda x: T.mean_all(T.maxpool2d(x, 3, 1)),
             away_from_kinks((2, 2, 5, 5)))


def test_fd_relu_maxpool_fused():
    fd_check(lambda x: T.sum_all(T.relu_maxpool2(x)),
             away_from_kinks((2, 4, 4, 3)))


def test_fd_shape_ops():
    fd_check(lambda x: T.mean_all(T.flatten2d(T.to_nhwc(x))),
             RNG.standard_normal((2, 3, 4, 4)))


# --------------------------------------------------- forward value oracles

def test_conv2d_value_vs_reference():
    for stride, pad in [(1, 0), (1, 2), (2, 1)]:
        x = RNG.standard_normal((2, 3, 9, 9))
        w = RNG.standard_normal((4, 3, 3, 3))
        b = RNG.standard_normal(4)
        got = T.conv2d(t64(x), t64(w), t64(b), stride, pad).data
        assert np.allclose(got, conv2d_ref(x, w, b, stride, pad), atol=1e-10)


def test_maxpool_value_vs_reference():
    x = RNG.standard_normal((2, 3, 8, 8))
    got = T.maxpool2d(t64(x), 2, 2).data
    assert np.allclose(got, maxpool2d_ref(x, 2, 2))
    got = T.maxpool2d(t64(x), 3, 2).data
    assert np.allclose(got, maxpool2d_ref(x, 3, 2))


def test_softmax_value_vs_reference():
    z = RNG.standard_normal((5, 7)) * 4
    assert np.allclose(T.softmax(t64(z)).data, softmax_ref(z), atol=1e-12)


def test_fused_relu_pool_equals_composition():
    cases = [RNG.standard_normal((2, 6, 6, 4))]
    tied = np.zeros((1, 4, 4, 2))
    tied[0, :2, :2, 0] = 3.0            # four-way positive tie
    tied[0, 2:, 2:, 1] = -1.0           # all-negative window
    cases.append(tied)
    for arr in cases:
        fused_in = T.tensor(arr.astype(np.float64), requires_grad=True)
        comp_in = T.tensor(arr.astype(np.float64), requires_grad=True)
        fused = T.relu_maxpool2(fused_in)
        comp = T.maxpool2d_nhwc(T.relu(comp_in), 2, 2)
        assert np.array_equal(fused.data, comp.data)
        T.sum_all(fused).backward()
        T.sum_all(comp).backward()
        assert np.array_equal(fused_in.grad, comp_in.grad)


def test_margin_rows_tie_uses_first_other_class():
    z = t64(np.array([[1.0, 5.0, 5.0, 0.0]]), rg=True)
    out = T.margin_rows(z, np.array([2]))
    assert float(out.data[0]) == 0.0  # 5 - max(1,5,0) = 0
    T.sum_all(out).backward()
    # +1 at the label, -1 at the first occurrence of the competing max
    assert z.grad.tolist() == [[0.0, -1.0, 1.0, 0.0]]


def test_weighted_mean_matches_plain_mean_with_unit_weights():
    rows = RNG.standard_normal(33).astype(np.float32)
    ones = np.ones(33, np.float32)
    a = float(T.weighted_mean(T.tensor(rows.copy()), ones).data)
    b = float(T.weighted_mean(T.tensor(rows.copy()),
                              np.full(33, 1.0, np.float32)).data)
    assert a == b  # identical code path, bit-identical result


# --------------------------------------------------------------- tape/pool

def test_tape_numerics_identical_and_buffers_recycled():
    x = np.asarray(RNG.standard_normal((8, 1, 12, 12)), dtype=np.float32)
    w = np.asarray(RNG.standard_normal((4, 1, 5, 5)), dtype=np.float32)
    b = np.zeros(4, np.float32)

    def run(use_tape):
        def body():
            xt = T.tensor(x.copy(), requires_grad=True)
            y = T.conv2d(xt, T.tensor(w.copy()), T.tensor(b.copy()), 1, 2)
            loss = T.mean_all(T.relu(y))
            loss.backward()
            return float(loss.data), xt.grad.copy()
        if use_tape:
            with T.Tape() as tp:
                out = body()
                tp.close()
            return out
        return body()

    v0, g0 = run(False)
    v1, g1 = run(True)
    v2, g2 = run(True)
    assert v0 == v1 == v2
    assert g0.tobytes() == g1.tobytes() == g2.tobytes()


def test_grad_escapes_tape_storage():
    x = np.asarray(RNG.standard_normal((4, 8)), dtype=np.float32)
    with T.Tape() as tp:
        xt = T.tensor(x, requires_grad=True)
        T.mean_all(T.relu(T.matmul(xt, T.tensor(np.ones((8, 3), np.float32))))).backward()
        g = xt.grad
        snap = g.copy()
        tp.close()
        # churn the pool so stale storage would be overwritten
        for _ in range(4):
            junk = T.relu(T.tensor(np.full((4, 3), -1.0, np.float32)))
    assert np.array_equal(g, snap)
