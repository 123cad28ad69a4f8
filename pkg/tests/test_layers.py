import numpy as np
import pytest
from scipy.special import expit

from backend.errors import ShapeError
from backend.layers import (BatchNormParams, Conv2dParams, LstmCellParams, batch_norm, channel_pool, conv2d,
                            dense, global_pool, lstm_cell, pool2d, softmax_cross_entropy)
from backend.numerics import GradRecord, grad_check

SEEDS = range(20)


def naive_conv(x, kernel, bias, stride, padding):
    n, c, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    total = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                total += xp[b, ci, i * stride + u, j * stride + v] * kernel[o, ci, u, v]
                    out[b, o, i, j] = total + (bias[o] if bias is not None else 0.0)
    return out


def naive_pool(x, kind, kh, kw, stride, padding):
    n, c, h, w = x.shape
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    window = [xp[b, ci, i * stride + u, j * stride + v] for u in range(kh) for v in range(kw)]
                    out[b, ci, i, j] = max(window) if kind == "max" else sum(window) / (kh * kw)
    return out


def random_cell(rng, dim, hidden):
    return LstmCellParams(*(rng.standard_normal((hidden, dim)) * 0.5 for _ in range(4)),
                          *(rng.standard_normal((hidden, hidden)) * 0.5 for _ in range(4)),
                          *(rng.standard_normal(hidden) * 0.5 for _ in range(4)))


def conv_op(stride, padding, with_bias=True):
    def op(x, kernel, *bias):
        return conv2d(x, Conv2dParams(kernel, bias[0] if with_bias else None, stride, padding))
    return op


def test_conv_reference_example(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    kernel = rng.standard_normal((3, 2, 3, 3))
    assert grad_check(conv_op(1, 0, with_bias=False), [x, kernel], eps=1e-5) <= 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_matches_loops(seed):
    rng = np.random.default_rng(seed)
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.standard_normal((2, int(rng.integers(1, 4)), 6, 7))
    kernel = rng.standard_normal((int(rng.integers(1, 4)), x.shape[1], 3, 3))
    bias = rng.standard_normal(kernel.shape[0])
    out, _ = conv2d(x, Conv2dParams(kernel, bias, stride, padding))
    assert np.allclose(out, naive_conv(x, kernel, bias, stride, padding), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.standard_normal((1, 2, 5, 5))
    kernel = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    assert grad_check(conv_op(stride, padding), [x, kernel, bias], seed=seed) <= 1e-5


def test_conv_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        conv2d(rng.standard_normal((1, 3, 5, 5)), Conv2dParams(rng.standard_normal((2, 2, 3, 3))))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_gradients(mode, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 2, 3, 3)) * 2 + 1
    base = BatchNormParams.identity(2)
    base.running_mean[:] = rng.standard_normal(2)
    base.running_var[:] = rng.uniform(0.5, 2.0, 2)

    def op(x_, gamma, beta):
        params = BatchNormParams(gamma, beta, base.running_mean.copy(), base.running_var.copy())
        return batch_norm(x_, params, mode)

    inputs = [x, rng.standard_normal(2), rng.standard_normal(2)]
    assert grad_check(op, inputs, seed=seed) <= 1e-5


def test_batch_norm_train_normalizes_and_updates_running_stats(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    p = BatchNormParams.identity(3, momentum=0.1)
    out, _ = batch_norm(x, p, "train")
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    assert np.allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
    m = 4 * 5 * 5
    assert np.allclose(p.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(p.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batch_norm_eval_leaves_running_stats(rng):
    p = BatchNormParams.identity(2)
    before = (p.running_mean.copy(), p.running_var.copy())
    batch_norm(rng.standard_normal((2, 2, 3, 3)), p, "eval")
    assert np.array_equal(p.running_mean, before[0]) and np.array_equal(p.running_var, before[1])


def test_batch_norm_train_needs_two_values():
    with pytest.raises(ShapeError):
        batch_norm(np.ones((1, 2, 1, 1)), BatchNormParams.identity(2), "train")


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["max", "avg"])
def test_pool_matches_loops(kind, seed):
    rng = np.random.default_rng(seed)
    k, stride, padding = int(rng.integers(2, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.standard_normal((2, 2, 7, 6))
    out, _ = pool2d(x, kind, k, k, stride, padding)
    assert np.allclose(out, naive_pool(x, kind, k, k, stride, padding), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["max", "avg"])
def test_pool_gradients(kind, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 6, 6))
    assert grad_check(lambda a: pool2d(a, kind, 3, 3, 2, 1), [x], seed=seed) <= 1e-5


def test_max_pool_routes_ties_to_first_element():
    x = np.ones((1, 1, 2, 2))
    out, record = pool2d(x, "max", 2, 2, 2)
    (dx,) = record.backward(np.ones_like(out))
    assert np.array_equal(dx[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_padded_pooling_edges():
    x = np.full((1, 1, 2, 2), -3.0)
    avg, _ = pool2d(x, "avg", 3, 3, 1, 1)
    assert np.allclose(avg, -3.0 * 4 / 9)
    peak, _ = pool2d(x, "max", 3, 3, 1, 1)
    assert np.all(peak == -3.0)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["max", "avg"])
def test_global_and_channel_pool(kind, seed):
    x = np.random.default_rng(seed).standard_normal((2, 3, 4, 5))
    reduce = np.max if kind == "max" else np.mean
    g_out, _ = global_pool(x, kind)
    c_out, _ = channel_pool(x, kind)
    assert g_out.shape == (2, 3, 1, 1) and c_out.shape == (2, 1, 4, 5)
    for b in range(2):
        for c in range(3):
            assert abs(g_out[b, c, 0, 0] - reduce(x[b, c])) <= 1e-10
        for i in range(4):
            for j in range(5):
                assert abs(c_out[b, 0, i, j] - reduce(x[b, :, i, j])) <= 1e-10
    assert grad_check(lambda a: global_pool(a, kind), [x], seed=seed) <= 1e-5
    assert grad_check(lambda a: channel_pool(a, kind), [x], seed=seed) <= 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_dense_matches_loops_and_gradients(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)
    out, _ = dense(x, w, b)
    expected = np.array([[sum(x[n, d] * w[k, d] for d in range(5)) + b[k] for k in range(4)] for n in range(3)])
    assert np.allclose(out, expected, rtol=0, atol=1e-10)
    assert grad_check(dense, [x, w, b], seed=seed) <= 1e-5


def test_softmax_cross_entropy_uniform_logits():
    loss, grad = softmax_cross_entropy(np.zeros((4, 7)), [0, 1, 2, 3], [True] * 4)
    assert loss == pytest.approx(np.log(7))
    assert np.allclose(grad.sum(axis=1), 0)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 7, 6)
    mask = rng.random(6) < 0.7
    mask[0] = True

    def op(logits):
        loss, grad = softmax_cross_entropy(logits, labels, mask)
        out = np.array(loss)
        return out, GradRecord("ce", (logits,), out, lambda g: (g * grad,))

    assert grad_check(op, [rng.standard_normal((6, 7))], seed=seed) <= 1e-5


def test_softmax_cross_entropy_masked_rows_get_no_gradient(rng):
    mask = np.array([True, False, True])
    _, grad = softmax_cross_entropy(rng.standard_normal((3, 7)), [1, -1, 4], mask)
    assert np.all(grad[1] == 0)


def test_softmax_cross_entropy_rejects_empty_mask_and_bad_labels(rng):
    with pytest.raises(ValueError):
        softmax_cross_entropy(rng.standard_normal((2, 7)), [0, 1], [False, False])
    with pytest.raises(ValueError):
        softmax_cross_entropy(rng.standard_normal((2, 7)), [0, 7], [True, True])


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_cell_matches_scalar_recurrence(seed):
    rng = np.random.default_rng(seed)
    p = random_cell(rng, 3, 2)
    x, h, c = rng.standard_normal(3), rng.standard_normal(2), rng.standard_normal(2)
    (h_t, c_t), _ = lstm_cell(x, h, c, p)
    for k in range(2):
        def gate(name):
            w, u, b = getattr(p, f"w_{name}"), getattr(p, f"u_{name}"), getattr(p, f"b_{name}")
            return sum(w[k, d] * x[d] for d in range(3)) + sum(u[k, j] * h[j] for j in range(2)) + b[k]
        i, f, o = expit(gate("i")), expit(gate("f")), expit(gate("o"))
        cell = f * c[k] + i * np.tanh(gate("g"))
        assert abs(c_t[k] - cell) <= 1e-10
        assert abs(h_t[k] - o * np.tanh(cell)) <= 1e-10


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("batched", [False, True])
def test_lstm_cell_gradients(batched, seed):
    rng = np.random.default_rng(seed)
    p = random_cell(rng, 3, 4)
    lead = (2,) if batched else ()
    inputs = [rng.standard_normal(lead + (3,)), rng.standard_normal(lead + (4,)), rng.standard_normal(lead + (4,)),
              *p.arrays()]

    def op(x, h, c, *arrays):
        return lstm_cell(x, h, c, LstmCellParams.from_arrays(arrays))

    assert grad_check(op, inputs, seed=seed) <= 1e-5


def layer_cases(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    bn = BatchNormParams(gamma=rng.uniform(0.5, 1.5, 3), beta=rng.standard_normal(3),
                         running_mean=rng.standard_normal(3), running_var=rng.uniform(0.5, 2.0, 3))
    cell = random_cell(rng, 4, 3)
    return {
        "conv2d": lambda: conv2d(x, Conv2dParams(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4), 2, 1)),
        "batch_norm_train": lambda: batch_norm(x, bn, "train"),
        "batch_norm_eval": lambda: batch_norm(x, bn, "eval"),
        "pool2d_max": lambda: pool2d(x, "max", 3, 3, 2, 1),
        "pool2d_avg": lambda: pool2d(x, "avg", 2, 2, 2),
        "dense": lambda: dense(rng.standard_normal((5, 4)), rng.standard_normal((3, 4)), rng.standard_normal(3)),
        "lstm_cell": lambda: lstm_cell(rng.standard_normal((2, 4)), rng.standard_normal((2, 3)),
                                       rng.standard_normal((2, 3)), cell),
    }


LAYER_CASES = ["conv2d", "batch_norm_train", "batch_norm_eval", "pool2d_max", "pool2d_avg", "dense", "lstm_cell"]


def output_tuple(out):
    return out if isinstance(out, tuple) else (out,)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("case", LAYER_CASES)
def test_layer_backward_is_linear_in_cotangent(case, seed):
    rng = np.random.default_rng(seed)
    out, record = layer_cases(rng)[case]()
    outs = output_tuple(out)
    g1 = [rng.standard_normal(o.shape) for o in outs]
    g2 = [rng.standard_normal(o.shape) for o in outs]
    combined = record.backward(*(1.5 * a - 0.25 * b for a, b in zip(g1, g2)))
    for got, d1, d2 in zip(combined, record.backward(*g1), record.backward(*g2)):
        if got is None:
            continue
        assert np.allclose(got, 1.5 * d1 - 0.25 * d2, rtol=0, atol=1e-10)


@pytest.mark.parametrize("case", LAYER_CASES)
def test_layer_zero_cotangent_gives_zero_gradients(case, rng):
    out, record = layer_cases(rng)[case]()
    grads = record.backward(*(np.zeros_like(o) for o in output_tuple(out)))
    assert all(np.all(g == 0) for g in grads if g is not None)
