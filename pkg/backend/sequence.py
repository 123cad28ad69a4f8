"""
Sequence Module

This module runs a bidirectional LSTM over the per-frame features of a clip
and classifies every timestep into one of the seven basic expressions.
"""

import logging
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import LstmCellParams, dense, lstm_cell
from .numerics import Backprop, GradRecord, Tensor, elementwise

logger = logging.getLogger(__name__)

NUM_CLASSES = 7
CLASS_NAMES = ("Neutral", "Anger", "Disgust", "Fear", "Happiness", "Sadness", "Surprise")


@dataclass(frozen=True)
class SequenceConfig:
    input_dim: int
    hidden_size: int = 128
    head_hidden: int = 64
    num_classes: int = NUM_CLASSES

    def validate(self) -> None:
        if self.input_dim < 1 or self.hidden_size < 1:
            raise ConfigError(f"input_dim and hidden_size must be positive, got {self.input_dim}, {self.hidden_size}")
        if self.head_hidden < 0:
            raise ConfigError(f"head_hidden must be non-negative, got {self.head_hidden}")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes is fixed at {NUM_CLASSES}")


@dataclass
class BlstmParams:
    forward: LstmCellParams
    backward: LstmCellParams


@dataclass
class ClassHead:
    """Optional dense+ReLU hidden layer followed by the 7-way output layer"""

    out_weight: np.ndarray
    out_bias: np.ndarray
    hidden_weight: Optional[np.ndarray] = None
    hidden_bias: Optional[np.ndarray] = None


@dataclass
class SequenceModel:
    config: SequenceConfig = field(metadata={"skip": True})
    blstm: BlstmParams
    head: ClassHead


def init_lstm_cell(input_dim: int, hidden_size: int, rng: np.random.Generator,
                   dtype: np.dtype = np.float32) -> LstmCellParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights and biases"""
    bound = 1.0 / np.sqrt(hidden_size)

    def draw(*shape: int) -> np.ndarray:
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    return LstmCellParams(
        *(draw(hidden_size, input_dim) for _ in range(4)),
        *(draw(hidden_size, hidden_size) for _ in range(4)),
        *(draw(hidden_size) for _ in range(4)),
    )


def build_sequence(config: SequenceConfig, rng_seed: Union[int, np.random.Generator] = 0,
                   dtype: np.dtype = np.float32) -> SequenceModel:
    """
    Build a freshly initialized BLSTM and classification head

    The output layer starts with small weights so the initial prediction is
    close to uniform over the seven classes.

    Args:
        config: Sequence model shape
        rng_seed: Seed or generator
        dtype: Parameter dtype

    Returns:
        SequenceModel parameter tree
    """
    config.validate()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    blstm = BlstmParams(
        forward=init_lstm_cell(config.input_dim, config.hidden_size, rng, dtype),
        backward=init_lstm_cell(config.input_dim, config.hidden_size, rng, dtype),
    )
    width = 2 * config.hidden_size
    head = ClassHead(out_weight=np.empty(0), out_bias=np.zeros(config.num_classes, dtype=dtype))
    if config.head_hidden > 0:
        head.hidden_weight = (rng.standard_normal((config.head_hidden, width)) * np.sqrt(2.0 / width)).astype(dtype)
        head.hidden_bias = np.zeros(config.head_hidden, dtype=dtype)
        width = config.head_hidden
    head.out_weight = (rng.standard_normal((config.num_classes, width)) * 0.01).astype(dtype)
    return SequenceModel(config=config, blstm=blstm, head=head)


def _run_direction(xs: np.ndarray, cell: LstmCellParams, reverse: bool):
    batch, steps, _ = xs.shape
    hidden = cell.hidden_size
    h = np.zeros((batch, hidden), dtype=xs.dtype)
    c = np.zeros((batch, hidden), dtype=xs.dtype)
    hs = np.zeros((batch, steps, hidden), dtype=xs.dtype)
    records: List[Tuple[int, GradRecord]] = []
    for t in (reversed(range(steps)) if reverse else range(steps)):
        (h, c), record = lstm_cell(xs[:, t], h, c, cell)
        hs[:, t] = h
        records.append((t, record))

    def backward(dhs: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        dxs = np.zeros(xs.shape, dtype=dhs.dtype)
        dh_next = np.zeros((batch, hidden), dtype=dhs.dtype)
        dc_next = np.zeros((batch, hidden), dtype=dhs.dtype)
        dparams = [np.zeros_like(a) for a in cell.arrays()]
        for t, record in reversed(records):
            dx, dh_next, dc_next, *step_grads = record.backward(dhs[:, t] + dh_next, dc_next)
            dxs[:, t] = dx
            for total, grad in zip(dparams, step_grads):
                total += grad
        return dxs, dparams

    return hs, backward


def blstm_forward(seq: Tensor, params: BlstmParams) -> Tuple[Tensor, Backprop]:
    """
    Bidirectional LSTM with zero initial states

    Row t is the forward state after frames 0..t concatenated with the
    backward state after frames T-1..t.

    Args:
        seq: Features [T,D] or a batch of clips [B,T,D]
        params: Forward and backward cell parameters

    Returns:
        Tuple of (outputs [T,2H] or [B,T,2H], backprop with grads named
        ``forward.<field>`` / ``backward.<field>``)
    """
    single = seq.ndim == 2
    xs = seq[None] if single else seq
    if xs.ndim != 3 or xs.shape[1] < 1:
        raise ShapeError("blstm_forward expects [T,D] or [B,T,D] with T >= 1", seq.shape)
    if xs.shape[2] != params.forward.input_dim or xs.shape[2] != params.backward.input_dim:
        raise ShapeError("blstm_forward feature dimension mismatch", seq.shape, params.forward.w_i.shape)

    fwd, fwd_back = _run_direction(xs, params.forward, reverse=False)
    bwd, bwd_back = _run_direction(xs, params.backward, reverse=True)
    out = np.concatenate([fwd, bwd], axis=2)
    hidden = params.forward.hidden_size
    names = [f.name for f in fields(params.forward)]

    def backprop(g: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        g3 = g[None] if single else g
        dx_f, grads_f = fwd_back(g3[:, :, :hidden])
        dx_b, grads_b = bwd_back(g3[:, :, hidden:])
        dx = dx_f + dx_b
        grads = {f"forward.{n}": v for n, v in zip(names, grads_f)}
        grads.update({f"backward.{n}": v for n, v in zip(names, grads_b)})
        return (dx[0] if single else dx), grads

    return (out[0] if single else out), backprop


def classify_clip(seq_features: Tensor, head: ClassHead) -> Tuple[Tensor, Backprop]:
    """
    Per-timestep logits from BLSTM outputs

    Args:
        seq_features: [T,2H] or [B,T,2H]
        head: Classification head

    Returns:
        Tuple of (logits [T,7] or [B,T,7], backprop)
    """
    lead = seq_features.shape[:-1]
    rows = seq_features.reshape(-1, seq_features.shape[-1])
    records = []
    h = rows
    if head.hidden_weight is not None:
        h, hidden_record = dense(h, head.hidden_weight, head.hidden_bias)
        h, relu_record = elementwise("relu", h)
        records = [(hidden_record, "hidden"), (relu_record, None)]
    logits, out_record = dense(h, head.out_weight, head.out_bias)
    records.append((out_record, "out"))

    def backprop(g: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        grads: Dict[str, np.ndarray] = {}
        d = g.reshape(-1, g.shape[-1])
        for record, name in reversed(records):
            d, *param_grads = record.backward(d)
            if name is not None:
                grads[f"{name}_weight"], grads[f"{name}_bias"] = param_grads
        return d.reshape(seq_features.shape), grads

    return logits.reshape(*lead, logits.shape[-1]), backprop


def predict(logits: Tensor) -> np.ndarray:
    """
    Arg-max class per row, ties to the lowest class index

    Args:
        logits: [T,7] or [B,T,7]

    Returns:
        Integer labels with the leading shape of logits
    """
    return np.argmax(logits, axis=-1)
