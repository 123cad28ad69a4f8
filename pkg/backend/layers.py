"""
Layers Module

This module provides the parametric and pooling layers of the frame encoder
and the sequence model: convolution, batch normalization, spatial and
channel-wise pooling, dense layers, masked softmax cross-entropy and the LSTM
cell. Every differentiable layer returns (output, GradRecord).
"""

import logging
from dataclasses import dataclass, field, fields
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax

from .errors import ShapeError
from .numerics import GradRecord, Tensor

logger = logging.getLogger(__name__)

PoolKind = Literal["max", "avg"]


@dataclass
class Conv2dParams:
    """Convolution kernel [Cout,Cin,kh,kw], optional bias [Cout], stride and symmetric zero padding"""

    kernel: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0


@dataclass
class BatchNormParams:
    """Per-channel affine parameters and running statistics"""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray = field(metadata={"buffer": True})
    running_var: np.ndarray = field(metadata={"buffer": True})
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: Literal["train", "eval"] = "train"

    @classmethod
    def identity(cls, channels: int, dtype: np.dtype = np.float64, momentum: float = 0.1,
                 epsilon: float = 1e-5, gamma: float = 1.0) -> "BatchNormParams":
        """Fresh statistics: gamma constant, beta 0, running mean 0, running var 1"""
        return cls(
            gamma=np.full(channels, gamma, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


@dataclass
class LstmCellParams:
    """Input, forget, output and candidate gate weights W [H,D], U [H,H] and biases [H]"""

    w_i: np.ndarray
    w_f: np.ndarray
    w_o: np.ndarray
    w_g: np.ndarray
    u_i: np.ndarray
    u_f: np.ndarray
    u_o: np.ndarray
    u_g: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_g: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.w_i.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_i.shape[1]

    def arrays(self) -> List[np.ndarray]:
        """Parameter tensors in field order"""
        return [getattr(self, f.name) for f in fields(self)]

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "LstmCellParams":
        return cls(*arrays)


def _output_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _strided_windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of every kh x kw window: [N,C,H',W',kh,kw]"""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(dxp: np.ndarray, dwin: np.ndarray, stride: int) -> None:
    """Accumulate per-window cotangents [N,C,H',W',kh,kw] back into the padded input"""
    _, _, ho, wo, kh, kw = dwin.shape
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dwin[:, :, :, :, i, j]


def conv2d(x: Tensor, p: Conv2dParams) -> Tuple[Tensor, GradRecord]:
    """
    Cross-correlate a batch with a kernel using zero padding

    Args:
        x: Input [N,Cin,H,W]
        p: Convolution parameters

    Returns:
        Tuple of (output [N,Cout,H',W'], GradRecord over (x, kernel, bias))
    """
    if x.ndim != 4 or p.kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel", x.shape, p.kernel.shape)
    n, c, h, w = x.shape
    cout, cin, kh, kw = p.kernel.shape
    if c != cin:
        raise ShapeError("conv2d channel mismatch", x.shape, p.kernel.shape)
    s, pad = p.stride, p.padding
    ho, wo = _output_extent(h, kh, s, pad), _output_extent(w, kw, s, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d degenerate output (stride {s}, padding {pad})", x.shape, p.kernel.shape)

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _strided_windows(xp, kh, kw, s)
    out = np.tensordot(win, p.kernel, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if p.bias is not None:
        out = out + p.bias.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray):
        dkernel = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        dbias = g.sum(axis=(0, 2, 3)) if p.bias is not None else None
        dwin = np.tensordot(g, p.kernel, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        _scatter_windows(dxp, dwin, s)
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return np.ascontiguousarray(dx), dkernel, dbias

    return out, GradRecord("conv2d", (x, p.kernel, p.bias), out, backward)


def batch_norm(x: Tensor, p: BatchNormParams,
               mode: Optional[Literal["train", "eval"]] = None) -> Tuple[Tensor, GradRecord]:
    """
    Normalize each channel

    Train mode uses batch statistics and updates the running statistics in
    place (unbiased variance); eval mode applies the running statistics only.

    Args:
        x: Input [N,C,H,W]
        p: Batch-norm parameters; its running statistics are mutated in train mode
        mode: Overrides p.mode when given

    Returns:
        Tuple of (output, GradRecord over (x, gamma, beta))
    """
    mode = mode or p.mode
    if x.ndim != 4 or x.shape[1] != p.gamma.shape[0]:
        raise ShapeError("batch_norm channel mismatch", x.shape, p.gamma.shape)
    n, c, h, w = x.shape
    axes = (0, 2, 3)
    gamma = p.gamma.reshape(1, c, 1, 1)
    beta = p.beta.reshape(1, c, 1, 1)

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ShapeError("batch_norm train mode needs at least two values per channel", x.shape)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + p.epsilon)
        xhat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = gamma * xhat + beta

        # running variance takes the unbiased estimate
        p.running_mean *= 1 - p.momentum
        p.running_mean += p.momentum * mean
        p.running_var *= 1 - p.momentum
        p.running_var += p.momentum * var * (m / (m - 1))

        def backward(g: np.ndarray):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            gx = g * gamma
            dx = (inv_std.reshape(1, c, 1, 1) / m) * (
                m * gx - gx.sum(axis=axes, keepdims=True) - xhat * (gx * xhat).sum(axis=axes, keepdims=True)
            )
            return dx, dgamma, dbeta
    elif mode == "eval":
        # running statistics only; p is not mutated
        inv_std = (1.0 / np.sqrt(p.running_var + p.epsilon)).reshape(1, c, 1, 1)
        xhat = (x - p.running_mean.reshape(1, c, 1, 1)) * inv_std
        out = gamma * xhat + beta

        def backward(g: np.ndarray):
            return g * gamma * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    out = out.astype(x.dtype, copy=False)
    return out, GradRecord("batch_norm", (x, p.gamma, p.beta), out, backward)


def pool2d(x: Tensor, kind: PoolKind, kh: int, kw: int, stride: int,
           padding: int = 0) -> Tuple[Tensor, GradRecord]:
    """
    Max or average pooling over kh x kw windows

    Max pooling pads with -inf and routes the cotangent to the first
    maximal element of each window in row-major order. Average pooling pads
    with zeros and always divides by kh * kw.

    Args:
        x: Input [N,C,H,W]
        kind: "max" or "avg"
        kh: Window height
        kw: Window width
        stride: Window stride
        padding: Symmetric padding

    Returns:
        Tuple of (output, GradRecord over (x,))
    """
    if x.ndim != 4:
        raise ShapeError("pool2d expects 4-D input", x.shape)
    n, c, h, w = x.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"pool2d window {kh}x{kw} larger than padded input (padding {padding})", x.shape)
    # -inf padding never wins a max window
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=fill) if padding else x
    win = _strided_windows(xp, kh, kw, stride)
    ho, wo = win.shape[2], win.shape[3]

    if kind == "max":
        flat = win.reshape(n, c, ho, wo, kh * kw)
        # argmax keeps the first maximum in row-major window order
        argmax = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

        def backward(g: np.ndarray):
            dwin = np.zeros((n, c, ho, wo, kh * kw), dtype=g.dtype)
            np.put_along_axis(dwin, argmax[..., None], g[..., None], axis=-1)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            _scatter_windows(dxp, dwin.reshape(n, c, ho, wo, kh, kw), stride)
            return (np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w]),)
    elif kind == "avg":
        # padded zeros count toward the mean
        out = win.mean(axis=(4, 5))

        def backward(g: np.ndarray):
            dwin = np.broadcast_to((g / (kh * kw))[..., None, None], (n, c, ho, wo, kh, kw))
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            _scatter_windows(dxp, dwin, stride)
            return (np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w]),)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")

    out = np.ascontiguousarray(out, dtype=x.dtype)
    return out, GradRecord(f"pool2d_{kind}", (x,), out, backward)


def global_pool(x: Tensor, kind: PoolKind) -> Tuple[Tensor, GradRecord]:
    """
    Pool each channel over its whole spatial extent

    Args:
        x: Input [N,C,H,W]
        kind: "avg" or "max" (ties go to the first element)

    Returns:
        Tuple of (output [N,C,1,1], GradRecord over (x,))
    """
    if x.ndim != 4:
        raise ShapeError("global_pool expects 4-D input", x.shape)
    n, c, h, w = x.shape
    if kind == "avg":
        out = x.mean(axis=(2, 3), keepdims=True)

        def backward(g: np.ndarray):
            return (np.broadcast_to(g / (h * w), x.shape).copy(),)
    elif kind == "max":
        flat = x.reshape(n, c, h * w)
        argmax = flat.argmax(axis=-1)[..., None]
        out = np.take_along_axis(flat, argmax, axis=-1).reshape(n, c, 1, 1)

        def backward(g: np.ndarray):
            dx = np.zeros((n, c, h * w), dtype=g.dtype)
            np.put_along_axis(dx, argmax, g.reshape(n, c, 1), axis=-1)
            return (dx.reshape(x.shape),)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return out, GradRecord(f"global_pool_{kind}", (x,), out, backward)


def channel_pool(x: Tensor, kind: PoolKind) -> Tuple[Tensor, GradRecord]:
    """
    Pool across channels at every spatial position

    Args:
        x: Input [N,C,H,W]
        kind: "avg" or "max" (ties go to the lowest channel)

    Returns:
        Tuple of (output [N,1,H,W], GradRecord over (x,))
    """
    if x.ndim != 4:
        raise ShapeError("channel_pool expects 4-D input", x.shape)
    c = x.shape[1]
    if kind == "avg":
        out = x.mean(axis=1, keepdims=True)

        def backward(g: np.ndarray):
            return (np.broadcast_to(g / c, x.shape).copy(),)
    elif kind == "max":
        argmax = x.argmax(axis=1)[:, None]
        out = np.take_along_axis(x, argmax, axis=1)

        def backward(g: np.ndarray):
            dx = np.zeros(x.shape, dtype=g.dtype)
            np.put_along_axis(dx, argmax, g, axis=1)
            return (dx,)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return out, GradRecord(f"channel_pool_{kind}", (x,), out, backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tuple[Tensor, GradRecord]:
    """
    Fully connected layer y = x W^T + b

    Args:
        x: Input [N,D]
        weight: Weight [K,D]
        bias: Bias [K]

    Returns:
        Tuple of (output [N,K], GradRecord over (x, weight, bias))
    """
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("dense input/weight mismatch", x.shape, weight.shape)
    if bias.shape != (weight.shape[0],):
        raise ShapeError("dense bias mismatch", bias.shape, weight.shape)
    out = x @ weight.T + bias

    def backward(g: np.ndarray):
        return g @ weight, g.T @ x, g.sum(axis=0)

    return out, GradRecord("dense", (x, weight, bias), out, backward)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int],
                          mask: Sequence[bool]) -> Tuple[float, Tensor]:
    """
    Mean negative log-likelihood over the masked rows

    Args:
        logits: Scores [M,K]
        labels: Integer class per row; only rows with mask true are read
        mask: Boolean per row

    Returns:
        Tuple of (loss, gradient w.r.t. logits); masked-out rows get zero gradient
    """
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],) or mask.shape != labels.shape:
        raise ShapeError("softmax_cross_entropy expects logits [M,K] with M labels and mask entries",
                         logits.shape, labels.shape, mask.shape)
    if not mask.any():
        raise ValueError("softmax_cross_entropy: mask selects no rows")
    num_classes = logits.shape[1]
    selected = labels[mask]
    if np.any(selected < 0) or np.any(selected >= num_classes):
        raise ValueError(f"softmax_cross_entropy: label outside 0..{num_classes - 1}: {selected.tolist()}")

    rows = np.arange(logits.shape[0])
    safe_labels = np.where(mask, labels, 0)
    log_probs = log_softmax(logits, axis=1)
    count = int(mask.sum())
    loss = float(-log_probs[rows[mask], selected].sum() / count)

    grad = np.exp(log_probs)
    grad[rows, safe_labels] -= 1
    grad *= mask[:, None] / count
    return loss, grad.astype(logits.dtype, copy=False)


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor,
              p: LstmCellParams) -> Tuple[Tuple[Tensor, Tensor], GradRecord]:
    """
    One step of a forget-gate LSTM without peepholes

    c_t = f * c_prev + i * g and h_t = o * tanh(c_t), with sigmoid gates
    i, f, o and tanh candidate g. Accepts a single vector or a [B, .] batch.

    Args:
        x_t: Input [D] or [B,D]
        h_prev: Previous hidden state [H] or [B,H]
        c_prev: Previous cell state [H] or [B,H]
        p: Cell parameters

    Returns:
        Tuple of ((h_t, c_t), GradRecord over (x_t, h_prev, c_prev, *p.arrays()))
    """
    hidden, dim = p.hidden_size, p.input_dim
    if x_t.shape[-1] != dim or h_prev.shape[-1] != hidden or c_prev.shape[-1] != hidden:
        raise ShapeError("lstm_cell dimension mismatch", x_t.shape, h_prev.shape, c_prev.shape, p.w_i.shape)
    for gate in "ifog":
        if getattr(p, f"w_{gate}").shape != (hidden, dim) or getattr(p, f"u_{gate}").shape != (hidden, hidden) \
                or getattr(p, f"b_{gate}").shape != (hidden,):
            raise ShapeError(f"lstm_cell gate {gate} has inconsistent shapes", getattr(p, f"w_{gate}").shape)

    single = x_t.ndim == 1
    x2, h2, c2 = np.atleast_2d(x_t), np.atleast_2d(h_prev), np.atleast_2d(c_prev)

    i = expit(x2 @ p.w_i.T + h2 @ p.u_i.T + p.b_i)
    f = expit(x2 @ p.w_f.T + h2 @ p.u_f.T + p.b_f)
    o = expit(x2 @ p.w_o.T + h2 @ p.u_o.T + p.b_o)
    g = np.tanh(x2 @ p.w_g.T + h2 @ p.u_g.T + p.b_g)
    c = f * c2 + i * g
    tc = np.tanh(c)
    h = o * tc

    h_out, c_out = (h[0], c[0]) if single else (h, c)

    def backward(dh: np.ndarray, dc: np.ndarray):
        dh2, dc2 = np.atleast_2d(dh), np.atleast_2d(dc)
        dc_total = dc2 + dh2 * o * (1 - tc * tc)
        da = {
            "i": dc_total * g * i * (1 - i),
            "f": dc_total * c2 * f * (1 - f),
            "o": dh2 * tc * o * (1 - o),
            "g": dc_total * i * (1 - g * g),
        }
        dx = sum(da[k] @ getattr(p, f"w_{k}") for k in "ifog")
        dh_prev = sum(da[k] @ getattr(p, f"u_{k}") for k in "ifog")
        dc_prev = dc_total * f
        dw = [da[k].T @ x2 for k in "ifog"]
        du = [da[k].T @ h2 for k in "ifog"]
        db = [da[k].sum(axis=0) for k in "ifog"]
        if single:
            dx, dh_prev, dc_prev = dx[0], dh_prev[0], dc_prev[0]
        return (dx, dh_prev, dc_prev, *dw, *du, *db)

    return (h_out, c_out), GradRecord("lstm_cell", (x_t, h_prev, c_prev, *p.arrays()), (h_out, c_out), backward)
