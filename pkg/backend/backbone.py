"""
Backbone Module

This module builds the frame encoder: a bottleneck residual network with a
CBAM attached to every block, ending in a global-average-pooled feature
vector per frame. Depth is configurable; [3, 4, 23, 3] is the 101-layer
network, tiny configurations are used on the desk.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np

from .attention import CbamParams, cbam, init_cbam
from .errors import ConfigError, ShapeError
from .layers import BatchNormParams, Conv2dParams, batch_norm, conv2d, global_pool, pool2d
from .numerics import Backprop, Tape, Tensor, elementwise

logger = logging.getLogger(__name__)

EXPANSION = 4
STAGE_STRIDES = (1, 2, 2, 2)

Mode = Literal["train", "eval"]


@dataclass(frozen=True)
class BackboneConfig:
    """Shape of the residual network and the attention template of its blocks"""

    stage_blocks: Tuple[int, int, int, int] = (3, 4, 23, 3)
    base_width: int = 64
    input_channels: int = 3
    input_size: int = 256
    reduction_ratio: int = 16
    spatial_kernel: int = 7
    use_cbam: bool = True
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    expansion: int = EXPANSION

    def validate(self) -> None:
        if len(self.stage_blocks) != 4 or any(int(b) < 1 for b in self.stage_blocks):
            raise ConfigError(f"stage_blocks must be 4 positive integers, got {list(self.stage_blocks)}")
        if self.base_width < 1 or self.input_channels < 1:
            raise ConfigError("base_width and input_channels must be positive")
        if self.input_size < 32 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.expansion != EXPANSION:
            raise ConfigError(f"bottleneck expansion is fixed at {EXPANSION}")
        if self.use_cbam:
            for width in self.stage_widths():
                if (width * EXPANSION) % self.reduction_ratio:
                    raise ConfigError(f"reduction_ratio {self.reduction_ratio} does not divide "
                                      f"{width * EXPANSION} channels")
            if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
                raise ConfigError(f"spatial_kernel must be odd, got {self.spatial_kernel}")

    def stage_widths(self) -> List[int]:
        return [self.base_width * 2 ** i for i in range(4)]

    @property
    def feature_dim(self) -> int:
        return self.base_width * 8 * self.expansion

    @property
    def layer_count(self) -> int:
        """Weighted layers: three convolutions per block plus the stem and the classifier"""
        return 3 * sum(self.stage_blocks) + 2


@dataclass
class BottleneckBlock:
    """1x1 reduce, 3x3 (strided), 1x1 expand, each with batch norm; CBAM on the branch output"""

    conv1: Conv2dParams
    bn1: BatchNormParams
    conv2: Conv2dParams
    bn2: BatchNormParams
    conv3: Conv2dParams
    bn3: BatchNormParams
    cbam: Optional[CbamParams] = None
    shortcut_conv: Optional[Conv2dParams] = None
    shortcut_bn: Optional[BatchNormParams] = None


@dataclass
class Backbone:
    config: BackboneConfig = field(metadata={"skip": True})
    stem_conv: Conv2dParams
    stem_bn: BatchNormParams
    stages: List[List[BottleneckBlock]]


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int, stride: int, padding: int,
             dtype: np.dtype) -> Conv2dParams:
    std = np.sqrt(2.0 / (cin * k * k))
    kernel = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
    return Conv2dParams(kernel=kernel, stride=stride, padding=padding)


def _make_block(rng: np.random.Generator, cin: int, width: int, stride: int, config: BackboneConfig,
                dtype: np.dtype) -> BottleneckBlock:
    cout = width * EXPANSION

    def bn(channels: int, gamma: float = 1.0) -> BatchNormParams:
        return BatchNormParams.identity(channels, dtype, config.bn_momentum, config.bn_epsilon, gamma)

    block = BottleneckBlock(
        conv1=_he_conv(rng, width, cin, 1, 1, 0, dtype),
        bn1=bn(width),
        conv2=_he_conv(rng, width, width, 3, stride, 1, dtype),
        bn2=bn(width),
        conv3=_he_conv(rng, cout, width, 1, 1, 0, dtype),
        bn3=bn(cout, gamma=0.0),
    )
    if config.use_cbam:
        block.cbam = init_cbam(cout, config.reduction_ratio, config.spatial_kernel, rng, dtype)
    if stride != 1 or cin != cout:
        block.shortcut_conv = _he_conv(rng, cout, cin, 1, stride, 0, dtype)
        block.shortcut_bn = bn(cout)
    return block


def build_backbone(config: BackboneConfig, rng_seed: Union[int, np.random.Generator] = 0,
                   dtype: np.dtype = np.float32) -> Backbone:
    """
    Build a freshly initialized backbone

    Convolutions use fan-in scaled normals, batch norms start at gamma=1,
    beta=0, except the last batch norm of each residual branch which starts
    at gamma=0 so every block begins as its shortcut.

    Args:
        config: Network shape
        rng_seed: Seed or generator; equal seeds give equal parameters
        dtype: Parameter dtype (float32 for training, float64 for verification)

    Returns:
        Backbone parameter tree
    """
    config.validate()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    base = config.base_width
    stem_conv = _he_conv(rng, base, config.input_channels, 7, 2, 3, dtype)
    stem_bn = BatchNormParams.identity(base, dtype, config.bn_momentum, config.bn_epsilon)

    stages: List[List[BottleneckBlock]] = []
    cin = base
    for width, count, stride in zip(config.stage_widths(), config.stage_blocks, STAGE_STRIDES):
        blocks = []
        for index in range(int(count)):
            blocks.append(_make_block(rng, cin, width, stride if index == 0 else 1, config, dtype))
            cin = width * EXPANSION
        stages.append(blocks)

    logger.debug(f"Built backbone {list(config.stage_blocks)} width {base}: {config.layer_count} layers, "
                 f"feature dim {config.feature_dim}")
    return Backbone(config=config, stem_conv=stem_conv, stem_bn=stem_bn, stages=stages)


def _conv_bn(tape: Tape, x: np.ndarray, conv: Conv2dParams, bn: BatchNormParams, name_conv: str,
             name_bn: str, mode: Mode) -> np.ndarray:
    h, conv_record = conv2d(x, conv)
    tape.push(conv_record, f"{name_conv}.kernel", f"{name_conv}.bias")
    h, bn_record = batch_norm(h, bn, mode)
    tape.push(bn_record, f"{name_bn}.gamma", f"{name_bn}.beta")
    return h


def _relu(tape: Tape, x: np.ndarray) -> np.ndarray:
    out, record = elementwise("relu", x)
    tape.push(record)
    return out


def block_forward(x: Tensor, block: BottleneckBlock, mode: Mode = "eval") -> Tuple[Tensor, Backprop]:
    """
    One residual block: out = relu(cbam(branch(x)) + shortcut(x))

    Args:
        x: Input [N,Cin,H,W]
        block: Block parameters
        mode: Batch-norm mode

    Returns:
        Tuple of (output, backprop yielding dx and grads named after the block's fields)
    """
    branch = Tape()
    h = _relu(branch, _conv_bn(branch, x, block.conv1, block.bn1, "conv1", "bn1", mode))
    h = _relu(branch, _conv_bn(branch, h, block.conv2, block.bn2, "conv2", "bn2", mode))
    h = _conv_bn(branch, h, block.conv3, block.bn3, "conv3", "bn3", mode)
    if block.cbam is not None:
        h, attention_back = cbam(h, block.cbam)
        branch.push_module(attention_back, "cbam.")

    shortcut = Tape()
    s = x
    if block.shortcut_conv is not None:
        s = _conv_bn(shortcut, x, block.shortcut_conv, block.shortcut_bn, "shortcut_conv", "shortcut_bn", mode)
    if h.shape != s.shape:
        raise ShapeError("residual branch and shortcut disagree", h.shape, s.shape)

    summed, add_record = elementwise("add", h, s)
    out, relu_record = elementwise("relu", summed)

    def backprop(g: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        (dsum,) = relu_record.backward(g)
        dh, ds = add_record.backward(dsum)
        dx_branch, grads = branch.backward(dh)
        dx_short, short_grads = shortcut.backward(ds)
        grads.update(short_grads)
        return dx_branch + dx_short, grads

    return out, backprop


def extract_features(frames: Tensor, backbone: Backbone, mode: Mode = "eval") -> Tuple[Tensor, Backprop]:
    """
    Encode every frame into a feature vector

    Args:
        frames: Normalized frames [N,3,S,S] with S = config.input_size
        backbone: Backbone parameters
        mode: Batch-norm mode; eval mode leaves the parameter tree untouched

    Returns:
        Tuple of (features [N,D], backprop yielding dframes and grads keyed by
        parameter name, e.g. ``stages.1.0.conv2.kernel``)
    """
    cfg = backbone.config
    expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if frames.ndim != 4 or tuple(frames.shape[1:]) != expected:
        raise ShapeError("frames do not match the backbone input size", frames.shape, (frames.shape[0], *expected))

    tape = Tape()
    h = _relu(tape, _conv_bn(tape, frames, backbone.stem_conv, backbone.stem_bn, "stem_conv", "stem_bn", mode))
    h, pool_record = pool2d(h, "max", 3, 3, stride=2, padding=1)
    tape.push(pool_record)
    for s, blocks in enumerate(backbone.stages):
        for b, block in enumerate(blocks):
            h, block_back = block_forward(h, block, mode)
            tape.push_module(block_back, f"stages.{s}.{b}.")
    pooled, gap_record = global_pool(h, "avg")
    tape.push(gap_record)
    n, d = pooled.shape[:2]
    features = pooled.reshape(n, d)

    def backprop(g: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        return tape.backward(g.reshape(n, d, 1, 1))

    return features, backprop
