"""Tensor, tape, ops and AdamW checked against independent reference code."""
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kiprn import ops
from kiprn.gradcheck import check_grads, rel_err
from kiprn.optim import AdamW, AdamWState, adamw_step
from kiprn.tensor import ShapeError, Tape, Tensor, backward
from oracles import adamw_scalar, bilinear_scalar, conv_loop


# ---------------------------------------------------------------- tape

class TestTape:
    def test_no_recording_outside_tape(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = ops.relu(x)
        with Tape() as tape:
            ops.add(y, y)
        assert len(tape) == 0

    def test_constants_not_recorded(self):
        with Tape() as tape:
            ops.mul(Tensor(np.ones(3)), Tensor(np.ones(3)))
        assert len(tape) == 0

    def test_fanout_accumulates(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        with Tape() as tape:
            y = ops.total(ops.mul(x, x))
        g = tape.backward(y)[x]
        np.testing.assert_allclose(g, 2 * x.data)

    def test_backward_replayable_and_unused_leaf_zero(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        unused = Tensor(np.zeros((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = ops.total(ops.mul(x, Tensor(np.array([4.0]))))
            ops.relu(unused)
        g1 = tape.backward(y)
        g2 = backward(tape, y)
        assert g1[x][0] == 4.0 and g2[x][0] == 4.0
        assert np.array_equal(g1[unused], np.zeros((2, 2)))

    def test_nonscalar_root_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ops.relu(x)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y)

    def test_non_float_cast(self):
        assert Tensor(np.arange(3)).dtype == np.float32


# ---------------------------------------------------------------- conv2d

CONV_GRID = [
    (n, c, o, k, s, p, h)
    for n, c, o, k, s, p, h in itertools.product((1, 2), (1, 3), (1, 2), (1, 3, 5), (1, 2), (0, 1, 2), (5, 7))
    if h + 2 * p >= k
]


@pytest.mark.parametrize("path", ["im2col", "fft"])
def test_conv2d_matches_loop_oracle_on_grid(path):
    rng = np.random.default_rng(11)
    worst = 0.0
    for n, c, o, k, s, p, h in CONV_GRID:
        if path == "fft" and s != 1:
            continue
        x = rng.standard_normal((n, c, h, h + 1)).astype(np.float32)
        w = rng.standard_normal((o, c, k, k)).astype(np.float32)
        b = rng.standard_normal(o).astype(np.float32)
        with ops.conv_path(path):
            y = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=s, padding=p).data
        assert y.dtype == np.float32
        worst = max(worst, rel_err(y, conv_loop(x, w, b, s, p)))
    assert worst < 1e-5


def test_conv2d_paths_agree_f64():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 11, 9)))
    w = Tensor(rng.standard_normal((4, 3, 7, 7)))
    with ops.conv_path("im2col"):
        a = ops.conv2d(x, w, padding=3).data
    with ops.conv_path("fft"):
        b = ops.conv2d(x, w, padding=3).data
    assert rel_err(a, b) < 1e-12


def test_conv2d_known_values():
    # 3x3 ones kernel, "same" padding, over a 3x3 ramp: border sums by hand
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    y = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    np.testing.assert_array_equal(y, [[8, 15, 12], [21, 36, 27], [20, 33, 24]])


class TestConvErrors:
    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 3, 5, 5\).*\(2, 4, 3, 3\)"):
            ops.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_even_kernel(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_empty_output(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_rank(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.zeros((3, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_unknown_path(self):
        with pytest.raises(ValueError):
            with ops.conv_path("winograd"):
                pass


# ---------------------------------------------------------------- bilinear

def test_bilinear_upsample_frozen_values():
    # half-pixel centres: 2 -> 4 gives quarter steps, ends clamp
    y = ops.bilinear_resize(Tensor(np.array([[[[0.0, 1.0]]]])), 1, 4).data[0, 0, 0]
    np.testing.assert_allclose(y, [0.0, 0.25, 0.75, 1.0], atol=1e-15)


def test_bilinear_downsample_by_two_is_box_average():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    y = ops.bilinear_resize(Tensor(x), 2, 2).data[0, 0]
    np.testing.assert_allclose(y, [[2.5, 4.5], [10.5, 12.5]])


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), oh=st.integers(1, 13), ow=st.integers(1, 13),
       seed=st.integers(0, 2**31))
def test_bilinear_matches_scalar_oracle(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).random((h, w)).astype(np.float32)
    y = ops.bilinear_resize(Tensor(img[None, None]), oh, ow).data[0, 0]
    assert np.abs(y - bilinear_scalar(img.astype(np.float64), oh, ow)).max() <= 1e-6


def test_bilinear_identity_exact():
    x = np.random.default_rng(3).standard_normal((2, 3, 5, 6)).astype(np.float32)
    assert np.array_equal(ops.bilinear_resize(Tensor(x), 5, 6).data, x)


def test_bilinear_rejects_empty_target():
    with pytest.raises(ValueError):
        ops.bilinear_resize(Tensor(np.zeros((1, 1, 3, 3))), 0, 3)


# ---------------------------------------------------------------- group norm, losses

def test_group_norm_moments():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 6, 4, 5)) * 3 + 7
    y = ops.group_norm(Tensor(x), 3, Tensor(np.ones(6)), Tensor(np.zeros(6)), eps=1e-5).data
    g = y.reshape(2, 3, -1)
    np.testing.assert_allclose(g.mean(axis=2), 0, atol=1e-12)
    var = x.reshape(2, 3, -1).var(axis=2)
    np.testing.assert_allclose(g.var(axis=2), var / (var + 1e-5), rtol=1e-10)


def test_group_norm_affine_and_divisibility():
    x = Tensor(np.random.default_rng(1).standard_normal((1, 4, 3, 3)))
    y = ops.group_norm(x, 2, Tensor(np.full(4, 2.0)), Tensor(np.full(4, 0.5))).data
    np.testing.assert_allclose(y.reshape(1, 2, -1).mean(axis=2), 0.5, atol=1e-12)
    with pytest.raises(ValueError):
        ops.group_norm(x, 3, Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_cross_entropy_frozen_values():
    assert ops.softmax_cross_entropy(Tensor(np.zeros((1, 2))), np.array([0])).item() == pytest.approx(math.log(2), abs=1e-12)
    tiny = ops.softmax_cross_entropy(Tensor(np.array([[20.0, 0.0]])), np.array([0])).item()
    assert tiny == pytest.approx(2.061153622438558e-09, rel=1e-6)
    # stable for huge logits
    big = ops.softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0]])), np.array([1])).item()
    assert big == pytest.approx(1000.0)


def test_cross_entropy_gradient_formula():
    logits = Tensor(np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]), requires_grad=True)
    labels = np.array([2, 0])
    with Tape() as tape:
        loss = ops.softmax_cross_entropy(logits, labels)
    g = tape.backward(loss)[logits]
    p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(g, (p - np.eye(3)[labels]) / 2, atol=1e-15)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        ops.softmax_cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


def test_softmax_rows_sum_to_one():
    p = ops.softmax(np.array([[1000.0, 1000.0], [-5.0, 5.0]]))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(p[0], 0.5)


# ---------------------------------------------------------------- AdamW

def test_adamw_matches_scalar_transcription():
    rng = np.random.default_rng(9)
    p0 = rng.standard_normal(7)
    grads = rng.standard_normal((5, 7))
    hp = dict(lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.1)
    param = Tensor(p0.copy())
    state = AdamWState.like(param, **hp)
    ref = [(float(p), 0.0, 0.0) for p in p0]
    for t, g in enumerate(grads, start=1):
        adamw_step(param, g, state)
        ref = [adamw_scalar(p, float(gi), m, v, t, hp["lr"], hp["beta1"], hp["beta2"], hp["eps"],
                            hp["weight_decay"]) for (p, m, v), gi in zip(ref, g)]
        assert np.abs(param.data - np.array([r[0] for r in ref])).max() <= 1e-7
    assert state.t == 5


def test_adamw_first_step_moves_by_lr():
    # bias correction makes the first step exactly lr*sign(g) up to eps
    param = Tensor(np.zeros(3))
    adamw_step(param, np.array([2.0, -0.5, 1e-3]), AdamWState.like(param, lr=0.1, eps=0.0))
    np.testing.assert_allclose(param.data, [-0.1, 0.1, -0.1])


def test_adamw_decay_only_on_selected_names():
    w, b = Tensor(np.ones(2)), Tensor(np.ones(2))
    opt = AdamW({"w.weight": w, "b.bias": b}, lr=0.5, weight_decay=0.1, decay={"w.weight"})
    opt.step({})
    np.testing.assert_allclose(w.data, 0.95)
    np.testing.assert_allclose(b.data, 1.0)
    assert opt.t == 1


def test_adamw_shape_mismatch():
    param = Tensor(np.zeros(3))
    with pytest.raises(ShapeError):
        adamw_step(param, np.zeros(4), AdamWState.like(param))


# ---------------------------------------------------------------- gradient checker itself

def test_gradcheck_catches_wrong_backward():
    from kiprn.tensor import record

    def bad_square(x):
        out = Tensor(x.data ** 2)
        return record("bad", out, (x,), lambda g: (g * x.data,))  # missing factor 2

    x = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True)
    err, checked, _ = check_grads(lambda: ops.total(bad_square(x)), [x], np.random.default_rng(1))
    assert checked == 5 and err > 0.4


def test_gradcheck_skips_kinks():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    _, checked, skipped = check_grads(lambda: ops.total(ops.relu(x)), [x], np.random.default_rng(0))
    assert (checked, skipped) == (1, 1)
