# Import application modules
from backend.checkpoint import list_checkpoints, load_checkpoint, restore_model
from backend.config_helper import RunConfig
from backend.data import FrameLoader, load_dataset
from backend.errors import CheckpointError, DataContractError
from backend.metrics import MetricsReport, confusion_of, evaluate_dataset, select_best_checkpoint
from backend.plugin_base import ActionBase

# Import python modules
import argparse
import logging
from pathlib import Path
from typing import List, Tuple

logger = logging.getLogger(__name__)


def evaluate_checkpoint(config: RunConfig, checkpoint: Path, videos, loader: FrameLoader) -> MetricsReport:
    """Score one checkpoint on a loaded dataset"""
    model = config.build_model()
    restore_model(model, load_checkpoint(checkpoint), config.architecture_digest())
    results = evaluate_dataset(model, videos, loader, config.data.workers, config.data.eval_batch_clips)
    return MetricsReport.from_confusion(confusion_of(results))


class EvaluateModel(ActionBase):
    HELP = "Score a checkpoint (or every checkpoint in a directory) on an annotated dataset"
    ACCEPTS_OVERRIDES = True

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--checkpoint", required=True, help="Checkpoint file or directory of checkpoints")
        parser.add_argument("--config", help="Run configuration file used for training")
        parser.add_argument("--frames", help="Frames root (defaults to data.frames_root)")
        parser.add_argument("--annotations", help="Annotations root (defaults to data.annotations_root)")

    def on_run(self, args: argparse.Namespace, overrides: List[Tuple[str, str]]) -> int:
        config = self.get_config(args, overrides)
        videos = load_dataset(args.frames or config.data.frames_root,
                              args.annotations or config.data.annotations_root)
        if not any(v.valid.any() for v in videos):
            raise DataContractError("validation set has no valid frames")
        loader = FrameLoader(config.backbone.input_size, config.precision, workers=config.data.workers)

        target = Path(args.checkpoint)
        if not target.is_dir():
            print(evaluate_checkpoint(config, target, videos, loader).format())
            return 0

        checkpoints = list_checkpoints(target)
        if not checkpoints:
            raise CheckpointError(f"no checkpoints in {target}")
        reports = []
        for path in checkpoints:
            report = evaluate_checkpoint(config, path, videos, loader)
            logger.info(f"{path.name}: s={report.s:.4f}")
            print(f"[{path.name}]\n{report.format()}\n")
            reports.append((path, report))
        best = select_best_checkpoint(reports)
        print(f"best={best}")
        return 0
