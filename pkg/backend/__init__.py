"""ClipNet Expression Recognition Backend Module"""

from .backbone import BackboneConfig, build_backbone, extract_features
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config_helper import ConfigHelper, RunConfig, load_run_config
from .data import ClipSampler, FrameLoader, VideoRecord, load_dataset, make_eval_clips, sample_training_clip
from .errors import ClipNetError
from .metrics import ConfusionMatrix, MetricsReport, evaluate_video, final_metric, select_best_checkpoint
from .model import ExpressionModel, build_model, model_forward
from .numerics import Precision, grad_check
from .synth import SynthSpec, generate_synth
from .train import SgdMomentum, TrainConfig, train_loop, train_step
from .weights_client import WeightsClient

__all__ = [
    "BackboneConfig", "build_backbone", "extract_features",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "ConfigHelper", "RunConfig", "load_run_config",
    "ClipSampler", "FrameLoader", "VideoRecord", "load_dataset", "make_eval_clips", "sample_training_clip",
    "ClipNetError",
    "ConfusionMatrix", "MetricsReport", "evaluate_video", "final_metric", "select_best_checkpoint",
    "ExpressionModel", "build_model", "model_forward",
    "Precision", "grad_check",
    "SynthSpec", "generate_synth",
    "SgdMomentum", "TrainConfig", "train_loop", "train_step",
    "WeightsClient",
]
