"""
Attention Module

This module implements the convolutional block attention module: channel
attention (a shared two-layer MLP over the average- and max-pooled channel
descriptors) followed by spatial attention (a k x k convolution over the
channel-wise average and max maps). Each stage produces a sigmoid mask that
rescales the feature map; the output keeps the input's shape.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .errors import ShapeError
from .layers import Conv2dParams, channel_pool, conv2d, global_pool
from .numerics import Backprop, Tensor, elementwise

logger = logging.getLogger(__name__)


@dataclass
class CbamParams:
    """Shared bias-free MLP (W0 [C/r,C], W1 [C,C/r]) and spatial conv ([1,2,k,k] + bias [1])"""

    mlp_w0: np.ndarray
    mlp_w1: np.ndarray
    spatial_kernel: np.ndarray
    spatial_bias: np.ndarray

    @property
    def channels(self) -> int:
        return self.mlp_w0.shape[1]

    @property
    def reduction_ratio(self) -> int:
        return self.mlp_w0.shape[1] // self.mlp_w0.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.spatial_kernel.shape[-1]

    def validate(self, channels: int) -> None:
        hidden = self.mlp_w0.shape[0]
        if hidden < 1 or channels % hidden or self.mlp_w0.shape != (hidden, channels) \
                or self.mlp_w1.shape != (channels, hidden):
            raise ShapeError(f"CBAM MLP does not fit {channels} channels", self.mlp_w0.shape, self.mlp_w1.shape)
        k = self.kernel_size
        if self.spatial_kernel.shape != (1, 2, k, k) or k % 2 == 0 or self.spatial_bias.shape != (1,):
            raise ShapeError("CBAM spatial conv must be [1,2,k,k] with odd k and a [1] bias",
                             self.spatial_kernel.shape, self.spatial_bias.shape)


def _check_ratio(channels: int, reduction_ratio: int) -> None:
    if reduction_ratio < 1 or channels % reduction_ratio:
        raise ShapeError(f"reduction ratio {reduction_ratio} does not divide {channels} channels", (channels,))


def init_cbam(channels: int, reduction_ratio: int, kernel_size: int, rng: np.random.Generator,
              dtype: np.dtype = np.float64) -> CbamParams:
    """
    Randomly initialize CBAM parameters with fan-in scaled normals

    Args:
        channels: Feature channels C
        reduction_ratio: r, must divide C
        kernel_size: Odd spatial kernel size k
        rng: Random generator
        dtype: Parameter dtype

    Returns:
        Fresh CbamParams
    """
    _check_ratio(channels, reduction_ratio)
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ShapeError(f"spatial kernel size must be odd, got {kernel_size}", (kernel_size,))
    hidden = channels // reduction_ratio
    return CbamParams(
        mlp_w0=(rng.standard_normal((hidden, channels)) * np.sqrt(2.0 / channels)).astype(dtype),
        mlp_w1=(rng.standard_normal((channels, hidden)) * np.sqrt(2.0 / hidden)).astype(dtype),
        spatial_kernel=(rng.standard_normal((1, 2, kernel_size, kernel_size))
                        * np.sqrt(1.0 / (2 * kernel_size * kernel_size))).astype(dtype),
        spatial_bias=np.zeros(1, dtype=dtype),
    )


def zero_cbam(channels: int, reduction_ratio: int, kernel_size: int, dtype: np.dtype = np.float64) -> CbamParams:
    """All-zero CBAM parameters; both masks are then exactly 0.5"""
    _check_ratio(channels, reduction_ratio)
    hidden = channels // reduction_ratio
    return CbamParams(
        mlp_w0=np.zeros((hidden, channels), dtype=dtype),
        mlp_w1=np.zeros((channels, hidden), dtype=dtype),
        spatial_kernel=np.zeros((1, 2, kernel_size, kernel_size), dtype=dtype),
        spatial_bias=np.zeros(1, dtype=dtype),
    )


def _shared_mlp(v: np.ndarray, p: CbamParams):
    """W1 relu(W0 v) on rows of v [N,C]"""
    hidden, relu_record = elementwise("relu", v @ p.mlp_w0.T)
    out = hidden @ p.mlp_w1.T

    def backward(g: np.ndarray):
        dw1 = g.T @ hidden
        (dz,) = relu_record.backward(g @ p.mlp_w1)
        return dz @ p.mlp_w0, dz.T @ v, dw1

    return out, backward


def channel_attention(F: Tensor, p: CbamParams) -> Tuple[Tensor, Backprop]:
    """
    Channel mask Mc = sigmoid(MLP(avgpool(F)) + MLP(maxpool(F)))

    Args:
        F: Feature map [N,C,H,W]
        p: CBAM parameters

    Returns:
        Tuple of (Mc [N,C,1,1], backprop)
    """
    n, c = F.shape[:2]
    p.validate(c)
    avg, avg_record = global_pool(F, "avg")
    mx, max_record = global_pool(F, "max")
    avg_out, avg_back = _shared_mlp(avg.reshape(n, c), p)
    max_out, max_back = _shared_mlp(mx.reshape(n, c), p)
    mc, sigmoid_record = elementwise("sigmoid", (avg_out + max_out).reshape(n, c, 1, 1))

    def backprop(g: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        (ds,) = sigmoid_record.backward(g)
        ds = ds.reshape(n, c)
        dv_avg, dw0_avg, dw1_avg = avg_back(ds)
        dv_max, dw0_max, dw1_max = max_back(ds)
        (dF_avg,) = avg_record.backward(dv_avg.reshape(n, c, 1, 1))
        (dF_max,) = max_record.backward(dv_max.reshape(n, c, 1, 1))
        return dF_avg + dF_max, {"mlp_w0": dw0_avg + dw0_max, "mlp_w1": dw1_avg + dw1_max}

    return mc, backprop


def spatial_attention(F: Tensor, p: CbamParams) -> Tuple[Tensor, Backprop]:
    """
    Spatial mask Ms = sigmoid(conv_kxk([channel_avg(F); channel_max(F)]))

    Args:
        F: Feature map [N,C,H,W]
        p: CBAM parameters

    Returns:
        Tuple of (Ms [N,1,H,W], backprop)
    """
    p.validate(F.shape[1])
    avg, avg_record = channel_pool(F, "avg")
    mx, max_record = channel_pool(F, "max")
    stacked = np.concatenate([avg, mx], axis=1)
    conv_params = Conv2dParams(p.spatial_kernel, p.spatial_bias, stride=1, padding=(p.kernel_size - 1) // 2)
    logits, conv_record = conv2d(stacked, conv_params)
    ms, sigmoid_record = elementwise("sigmoid", logits)

    def backprop(g: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        (dlogits,) = sigmoid_record.backward(g)
        dstacked, dkernel, dbias = conv_record.backward(dlogits)
        (dF_avg,) = avg_record.backward(dstacked[:, :1])
        (dF_max,) = max_record.backward(dstacked[:, 1:])
        return dF_avg + dF_max, {"spatial_kernel": dkernel, "spatial_bias": dbias}

    return ms, backprop


def cbam(F: Tensor, p: CbamParams) -> Tuple[Tensor, Backprop]:
    """
    Sequential attention: F' = Mc(F) * F, then F'' = Ms(F') * F'

    Args:
        F: Feature map [N,C,H,W]
        p: CBAM parameters

    Returns:
        Tuple of (F'' with F's shape, backprop yielding dF and named parameter grads)
    """
    mc, channel_back = channel_attention(F, p)
    refined, channel_mul = elementwise("mul", F, mc)
    ms, spatial_back = spatial_attention(refined, p)
    out, spatial_mul = elementwise("mul", refined, ms)

    def backprop(g: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        drefined, dms = spatial_mul.backward(g)
        drefined_mask, spatial_grads = spatial_back(dms)
        dF, dmc = channel_mul.backward(drefined + drefined_mask)
        dF_mask, channel_grads = channel_back(dmc)
        return dF + dF_mask, {**channel_grads, **spatial_grads}

    return out, backprop
