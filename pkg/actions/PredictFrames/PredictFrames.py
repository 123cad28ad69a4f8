# Import application modules
from backend.checkpoint import load_checkpoint, restore_model
from backend.data import FrameLoader, scan_unlabeled
from backend.errors import DataContractError
from backend.metrics import evaluate_dataset, write_predictions
from backend.plugin_base import ActionBase

# Import python modules
import argparse
import logging
from typing import List, Tuple

logger = logging.getLogger(__name__)


class PredictFrames(ActionBase):
    HELP = "Label every frame of every video with a checkpoint"
    ACCEPTS_OVERRIDES = True

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--checkpoint", required=True, help="Checkpoint file")
        parser.add_argument("--config", help="Run configuration file used for training")
        parser.add_argument("--frames", help="Frames root (defaults to data.frames_root)")
        parser.add_argument("--out", default="predictions.txt", help="Predictions file")

    def on_run(self, args: argparse.Namespace, overrides: List[Tuple[str, str]]) -> int:
        config = self.get_config(args, overrides)
        videos = scan_unlabeled(args.frames or config.data.frames_root)
        if not videos:
            raise DataContractError(f"no videos under {args.frames or config.data.frames_root}")

        model = config.build_model()
        restore_model(model, load_checkpoint(args.checkpoint), config.architecture_digest())
        loader = FrameLoader(config.backbone.input_size, config.precision, workers=config.data.workers)
        results = evaluate_dataset(model, videos, loader, config.data.workers, config.data.eval_batch_clips)
        lines = write_predictions(args.out, results)
        logger.info(f"✓ Wrote {lines} predictions for {len(results)} videos to {args.out}")
        return 0
