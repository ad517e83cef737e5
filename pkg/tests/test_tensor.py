"""Tensor core: forward examples, backward rules, tape semantics."""

import numpy as np
import pytest

import hsmtl.tensor as T
from hsmtl.tensor import GradientTape, ShapeError, Tensor


def _param(arr, name="p"):
    return Tensor(np.asarray(arr, dtype=np.float64), is_param=True, name=name)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def sliding_window_conv(x, kernel, bias):
    """Independent oracle: direct translation of the sliding-window sum."""
    b, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((b, h, w, cout))
    for n in range(b):
        for i in range(h):
            for j in range(w):
                for o in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            ii, jj = i + di - ph, j + dj - pw
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += float(x[n, ii, jj] @ kernel[di, dj, :, o])
                    out[n, i, j, o] = acc + bias[o]
    return out


def test_conv_identity_kernel_is_bitwise_identity():
    x = Tensor(np.full((1, 3, 3, 1), 2.0, dtype=np.float32))
    k = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    b = Tensor(np.zeros(1, dtype=np.float32))
    out = T.conv2d(x, k, b)
    assert np.array_equal(out.data, x.data)


def test_conv_multichannel_identity_kernel_bitwise():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 4, 5, 3)).astype(np.float32))
    k = Tensor(np.eye(3, dtype=np.float32).reshape(1, 1, 3, 3))
    b = Tensor(np.zeros(3, dtype=np.float32))
    assert np.array_equal(T.conv2d(x, k, b).data, x.data)


def test_conv_zero_padded_full_sums():
    x = Tensor(np.array([[1, 2], [3, 4]], dtype=np.float32).reshape(1, 2, 2, 1))
    k = Tensor(np.ones((3, 3, 1, 1), dtype=np.float32))
    b = Tensor(np.zeros(1, dtype=np.float32))
    out = T.conv2d(x, k, b)
    assert np.allclose(out.data.reshape(2, 2), [[10.0, 10.0], [10.0, 10.0]])


def test_conv_matches_sliding_window_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 4, 3))
    k = rng.normal(size=(3, 3, 3, 2))
    b = rng.normal(size=2)
    got = T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    assert np.allclose(got, sliding_window_conv(x, k, b), atol=1e-10)


def test_conv_channel_mismatch_names_both_shapes():
    x = Tensor(np.zeros((1, 4, 4, 5), dtype=np.float32))
    k = Tensor(np.zeros((3, 3, 4, 8), dtype=np.float32))
    b = Tensor(np.zeros(8, dtype=np.float32))
    with pytest.raises(ShapeError) as err:
        T.conv2d(x, k, b)
    assert "(1, 4, 4, 5)" in str(err.value) and "(3, 3, 4, 8)" in str(err.value)


def test_conv_even_kernel_rejected():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 4, 4, 1))), Tensor(np.zeros((2, 2, 1, 1))),
                 Tensor(np.zeros(1)))


# ---------------------------------------------------------------------------
# batch_norm
# ---------------------------------------------------------------------------

def test_batch_norm_train_normalizes():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(3.0, 2.0, size=(4, 3, 3, 2)))
    g = Tensor(np.ones(2))
    b = Tensor(np.zeros(2))
    out = T.batch_norm(x, g, b, T.BatchNormState(2, dtype=np.float64), training=True)
    mean = out.data.mean(axis=(0, 1, 2))
    var = out.data.var(axis=(0, 1, 2))
    assert np.all(np.abs(mean) < 1e-5)
    assert np.all(np.abs(var - 1.0) < 1e-4)


def test_batch_norm_zero_gamma_gives_beta():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 3, 3, 2)))
    g = Tensor(np.array([0.0, 1.0]))
    b = Tensor(np.array([0.7, 0.0]))
    out = T.batch_norm(x, g, b, T.BatchNormState(2, dtype=np.float64), training=True)
    assert np.allclose(out.data[..., 0], 0.7)


def normalize_oracle(values, eps=1e-5, momentum=0.9):
    """Scalar transcription of the train-then-infer behavior for one channel."""
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / len(values)
    run_mean = momentum * 0.0 + (1 - momentum) * mean
    run_var = momentum * 1.0 + (1 - momentum) * var
    train_out = [(v - mean) / (var + eps) ** 0.5 for v in values]
    infer_out = [(v - run_mean) / (run_var + eps) ** 0.5 for v in values]
    return train_out, infer_out


def test_batch_norm_train_then_infer_matches_scalar_oracle():
    values = [0.5, -1.25, 2.0, 0.0, 3.5, -0.75, 1.0, 0.25]
    x = Tensor(np.array(values, dtype=np.float64).reshape(2, 2, 2, 1))
    g = Tensor(np.ones(1))
    b = Tensor(np.zeros(1))
    state = T.BatchNormState(1, dtype=np.float64)
    train_out = T.batch_norm(x, g, b, state, training=True)
    infer_out = T.batch_norm(x, g, b, state, training=False)
    want_train, want_infer = normalize_oracle(values)
    assert np.allclose(train_out.data.reshape(-1), want_train, atol=1e-5)
    assert np.allclose(infer_out.data.reshape(-1), want_infer, atol=1e-5)


def test_batch_norm_infer_before_train_errors():
    x = Tensor(np.zeros((2, 2, 2, 1)))
    with pytest.raises(RuntimeError, match="uninitialized statistics"):
        T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                     T.BatchNormState(1), training=False)


def test_batch_norm_single_value_per_channel_rejected():
    x = Tensor(np.zeros((1, 1, 1, 2)))
    with pytest.raises(ShapeError):
        T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                     T.BatchNormState(2), training=True)


# ---------------------------------------------------------------------------
# relu / add / pooling / dense
# ---------------------------------------------------------------------------

def test_relu_examples():
    out = T.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])
    x = Tensor(np.array([0.5, 1.5, 9.0]))
    assert np.array_equal(T.relu(x).data, x.data)


def test_relu_gradient_mask():
    x = _param([[-1.0, 2.0]])
    w = Tensor(np.ones((2, 1)))
    b = Tensor(np.zeros(1))
    with GradientTape() as tape:
        loss = T.dense(T.relu(x), w, b)  # loss = sum(relu(x))
    grads = T.backward(tape, loss, params=[x])
    assert np.array_equal(grads[x], [[0.0, 1.0]])


def test_global_avg_pool_mean_and_gradient():
    x = Tensor(np.array([[1, 2], [3, 4]], dtype=np.float64).reshape(1, 2, 2, 1))
    assert np.allclose(T.global_avg_pool(x).data, [[2.5]])
    const = Tensor(np.full((3, 4, 4, 2), 7.0))
    assert np.allclose(T.global_avg_pool(const).data, 7.0)

    p = _param(np.arange(8.0).reshape(1, 2, 2, 2))
    w = _param(np.ones((2, 1)), "w")
    b = _param([0.0], "b")
    with GradientTape() as tape:
        loss = T.dense(T.global_avg_pool(p), w, b)
    grads = T.backward(tape, loss, params=[p])
    assert np.allclose(grads[p], 1.0 / 4.0)


def test_global_avg_pool_times_area_equals_spatial_sum():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 5, 7, 4)).astype(np.float32)
    pooled = T.global_avg_pool(Tensor(x)).data
    assert np.allclose(pooled * (5 * 7), x.sum(axis=(1, 2)), atol=1e-5)


def test_dense_examples():
    v = Tensor(np.array([[1.0, 0.0]]))
    w = Tensor(np.eye(2))
    b = Tensor(np.zeros(2))
    assert np.allclose(T.dense(v, w, b).data, [[1.0, 0.0]])

    v = Tensor(np.array([[1.0, 1.0]]))
    w = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Tensor(np.array([1.0, 1.0]))
    assert np.allclose(T.dense(v, w, b).data, [[5.0, 7.0]])  # by-hand product

    v = Tensor(np.zeros((20, 3)))
    out = T.dense(v, Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)))
    assert out.shape == (20, 4)


def test_dense_dimension_mismatch():
    with pytest.raises(ShapeError):
        T.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))


# ---------------------------------------------------------------------------
# softmax / cross entropy
# ---------------------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor(np.zeros((1, 3)))).data, 1.0 / 3.0)
    out = T.softmax(Tensor(np.array([[np.log(2.0), 0.0]])))
    assert np.allclose(out.data, [[2.0 / 3.0, 1.0 / 3.0]])
    out = T.softmax(Tensor(np.array([[1000.0, 0.0]])))
    assert np.all(np.isfinite(out.data))
    assert out.data[0, 0] > 0.999999


def test_softmax_rows_sum_to_one_large_logits():
    rng = np.random.default_rng(6)
    for _ in range(50):
        logits = rng.uniform(-1e4, 1e4, size=(4, 5))
        probs = T.softmax(Tensor(logits)).data
        assert np.all(probs >= 0)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_cross_entropy_examples():
    probs = Tensor(np.array([[1.0, 0.0]]))
    assert float(T.cross_entropy_loss(probs, np.array([0])).data) == 0.0

    probs = Tensor(np.full((1, 4), 0.25))
    assert np.isclose(float(T.cross_entropy_loss(probs, np.array([2])).data), np.log(4.0))

    probs = Tensor(np.array([[0.5, 0.5], [0.9, 0.1]]))
    loss = T.cross_entropy_loss(probs, np.array([0, 1]))
    assert np.isclose(float(loss.data), (-np.log(0.5) - np.log(0.1)) / 2.0)


def test_cross_entropy_bad_label_names_sample_index():
    probs = Tensor(np.full((3, 2), 0.5))
    with pytest.raises(ValueError, match="index 1"):
        T.cross_entropy_loss(probs, np.array([0, 2, 1]))


def test_softmax_cross_entropy_composition_gradient():
    """Combined backward through softmax + loss is (p - onehot) / B on logits."""
    rng = np.random.default_rng(7)
    logits = _param(rng.normal(size=(4, 3)), "logits")
    labels = np.array([0, 2, 1, 1])
    with GradientTape() as tape:
        probs = T.softmax(logits)
        loss = T.cross_entropy_loss(probs, labels)
    grads = T.backward(tape, loss, params=[logits])
    onehot = np.eye(3)[labels]
    want = (probs.data - onehot) / 4.0
    assert np.allclose(grads[logits], want, atol=1e-12)


# ---------------------------------------------------------------------------
# tape mechanics
# ---------------------------------------------------------------------------

def test_backward_sum_of_parameter_gives_ones():
    p = _param(np.arange(6.0).reshape(1, 6))
    w = Tensor(np.ones((6, 1)), name="sum_w")
    b = Tensor(np.zeros(1), name="sum_b")
    with GradientTape() as tape:
        loss = T.dense(p, w, b)
    grads = T.backward(tape, loss, params=[p])
    assert np.array_equal(grads[p], np.ones((1, 6)))


def test_backward_unused_parameter_gets_zeros():
    used = _param(np.ones((1, 2)), "used")
    unused = _param(np.ones((3, 3)), "unused")
    w = Tensor(np.ones((2, 1)))
    b = Tensor(np.zeros(1))
    with GradientTape() as tape:
        loss = T.dense(used, w, b)
    grads = T.backward(tape, loss, params=[used, unused])
    assert np.array_equal(grads[unused], np.zeros((3, 3)))
    assert grads[used].shape == used.shape


def test_backward_twice_on_one_tape_errors():
    p = _param(np.ones((1, 2)))
    with GradientTape() as tape:
        loss = T.dense(p, Tensor(np.ones((2, 1))), Tensor(np.zeros(1)))
    T.backward(tape, loss, params=[p])
    with pytest.raises(RuntimeError, match="already"):
        T.backward(tape, loss, params=[p])


def test_backward_requires_scalar_loss():
    p = _param(np.ones((2, 2)))
    with GradientTape() as tape:
        out = T.relu(p)
    with pytest.raises(ShapeError):
        T.backward(tape, out, params=[p])


def test_parameter_used_twice_accumulates_once_per_use():
    p = _param(np.array([[1.0, 2.0]]), "p")
    w = Tensor(np.ones((2, 1)))
    b = Tensor(np.zeros(1))
    with GradientTape() as tape:
        doubled = T.add(p, p)
        loss = T.dense(doubled, w, b)
    grads = T.backward(tape, loss, params=[p])
    assert np.array_equal(grads[p], np.full((1, 2), 2.0))


def test_concat_and_slice_batch_roundtrip_gradients():
    a = _param(np.ones((2, 3)), "a")
    c = _param(np.full((1, 3), 2.0), "c")
    w = Tensor(np.ones((3, 1)))
    b = Tensor(np.zeros(1))
    with GradientTape() as tape:
        joined = T.concat_batch([a, c])
        top = T.slice_batch(joined, 0, 2)
        loss = T.dense(T.slice_batch(top, 0, 1), w, b)
    grads = T.backward(tape, loss, params=[a, c])
    assert np.array_equal(grads[a], [[1, 1, 1], [0, 0, 0]])
    assert np.array_equal(grads[c], np.zeros((1, 3)))


def test_no_nan_in_forward_with_debug_checks(monkeypatch):
    monkeypatch.setattr(T, "DEBUG_CHECKS", True)
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(2, 4, 4, 3)).astype(np.float32))
    k = Tensor(rng.normal(size=(3, 3, 3, 4)).astype(np.float32))
    b = Tensor(np.zeros(4, dtype=np.float32))
    out = T.relu(T.conv2d(x, k, b))
    assert np.all(np.isfinite(out.data))


def test_forward_deterministic_bitwise():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 5, 5, 3)).astype(np.float32)
    k = rng.normal(size=(3, 3, 3, 4)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    c = T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    assert np.array_equal(a, c)


# ---------------------------------------------------------------------------
# per-op gradient checks (finite differences; 5 seeds)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_per_op_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 5, 5, 2)))
    k = _param(rng.normal(size=(3, 3, 2, 4)), "k")
    kb = _param(rng.normal(size=4), "kb")
    g = _param(rng.normal(size=4) + 1.5, "g")
    be = _param(rng.normal(size=4), "be")
    state = T.BatchNormState(4, dtype=np.float64)
    w = _param(rng.normal(size=(4, 3)), "w")
    b = _param(rng.normal(size=3), "b")
    labels = rng.integers(0, 3, size=3)

    def loss_fn():
        h = T.conv2d(x, k, kb)
        h = T.batch_norm(h, g, be, state, training=True)
        h = T.relu(h)
        h = T.global_avg_pool(h)
        probs = T.softmax(T.dense(h, w, b))
        return T.cross_entropy_loss(probs, labels)

    err = T.grad_check(loss_fn, [k, kb, g, be, w, b], samples_per_param=25, seed=seed)
    assert err < 1e-4


def test_linear_net_gradient_near_exact():
    rng = np.random.default_rng(11)
    v = Tensor(rng.normal(size=(1, 6)))
    w1 = _param(rng.normal(size=(6, 5)), "w1")
    b1 = _param(rng.normal(size=5), "b1")
    w2 = _param(rng.normal(size=(5, 1)), "w2")
    b2 = _param(np.zeros(1), "b2")

    def loss_fn():
        return T.dense(T.dense(v, w1, b1), w2, b2)

    err = T.grad_check(loss_fn, [w1, b1, w2, b2], samples_per_param=50, seed=0)
    assert err < 1e-7
