"""
Expression Model Module

This module joins the frame encoder, the bidirectional LSTM and the
classification head into one clip model. Frames [B,T,3,S,S] go in and
per-frame logits [B,T,7] come out.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple, Union

import numpy as np

from .backbone import Backbone, BackboneConfig, Mode, build_backbone, extract_features
from .errors import ShapeError
from .numerics import Backprop, Precision, Tensor
from .parameters import ModelParams
from .sequence import SequenceConfig, SequenceModel, blstm_forward, build_sequence, classify_clip

logger = logging.getLogger(__name__)


@dataclass
class ExpressionModel:
    backbone: Backbone
    sequence: SequenceModel
    freeze_backbone: bool = field(default=False, metadata={"skip": True})

    @property
    def dtype(self) -> np.dtype:
        return self.backbone.stem_conv.kernel.dtype

    def params(self) -> ModelParams:
        """Named parameters and buffers; arrays are shared with the model"""
        return ModelParams.of(self)

    def trainable_parameters(self) -> Dict[str, np.ndarray]:
        parameters = self.params().parameters
        if self.freeze_backbone:
            return {k: v for k, v in parameters.items() if not k.startswith("backbone.")}
        return parameters


def build_model(backbone_config: BackboneConfig, hidden_size: int = 128, head_hidden: int = 64,
                seed: Union[int, np.random.Generator] = 0, precision: Precision = Precision.FLOAT32,
                freeze_backbone: bool = False) -> ExpressionModel:
    """
    Build a freshly initialized clip model

    Args:
        backbone_config: Frame encoder shape
        hidden_size: LSTM hidden size per direction
        head_hidden: Width of the head's hidden layer (0 for a single linear layer)
        seed: Seed or generator; the backbone draws first, then the sequence model
        precision: Parameter precision
        freeze_backbone: Keep the encoder fixed during training

    Returns:
        ExpressionModel
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    backbone = build_backbone(backbone_config, rng, precision.dtype)
    sequence = build_sequence(SequenceConfig(backbone_config.feature_dim, hidden_size, head_hidden),
                              rng, precision.dtype)
    model = ExpressionModel(backbone=backbone, sequence=sequence, freeze_backbone=freeze_backbone)
    logger.info(f"Model ready: {model.params().count()} parameters, feature dim {backbone_config.feature_dim}, "
                f"{precision.value}-bit")
    return model


def model_forward(model: ExpressionModel, frames: Tensor, mode: Mode = "eval") -> Tuple[Tensor, Backprop]:
    """
    Clip logits for a batch of clips

    Args:
        model: Clip model
        frames: Normalized frames [B,T,3,S,S]
        mode: Batch-norm mode; a frozen backbone always runs in eval mode

    Returns:
        Tuple of (logits [B,T,7], backprop yielding dframes and grads keyed as
        in ``model.params()``; backbone grads are omitted when frozen)
    """
    if frames.ndim != 5:
        raise ShapeError("model_forward expects frames [B,T,3,S,S]", frames.shape)
    b, t = frames.shape[:2]
    frozen = model.freeze_backbone
    flat = np.ascontiguousarray(frames.reshape(b * t, *frames.shape[2:]), dtype=model.dtype)
    features, backbone_back = extract_features(flat, model.backbone, "eval" if frozen else mode)
    seq = features.reshape(b, t, -1)
    states, blstm_back = blstm_forward(seq, model.sequence.blstm)
    logits, head_back = classify_clip(states, model.sequence.head)

    def backprop(g: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        dstates, head_grads = head_back(g)
        dseq, blstm_grads = blstm_back(dstates)
        grads = {f"sequence.head.{k}": v for k, v in head_grads.items()}
        grads.update({f"sequence.blstm.{k}": v for k, v in blstm_grads.items()})
        if frozen:
            return np.zeros(frames.shape, dtype=g.dtype), grads
        dflat, backbone_grads = backbone_back(dseq.reshape(b * t, -1))
        grads.update({f"backbone.{k}": v for k, v in backbone_grads.items()})
        return dflat.reshape(frames.shape), grads

    return logits, backprop
