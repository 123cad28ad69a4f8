# Import application modules
from backend.checkpoint import load_checkpoint
from backend.data import FrameLoader, load_dataset
from backend.errors import DataContractError, UsageError
from backend.plugin_base import ActionBase
from backend.train import train_loop
from backend.weights_client import load_pretrained

# Import python modules
import argparse
import logging
from pathlib import Path
from typing import List, Tuple

logger = logging.getLogger(__name__)


class TrainModel(ActionBase):
    HELP = "Train the clip model and write checkpoints"
    ACCEPTS_OVERRIDES = True

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--config", help="Run configuration file")
        parser.add_argument("--out", default="checkpoints", help="Checkpoint directory")
        parser.add_argument("--pretrained", help="Checkpoint path or http(s) URL of pretrained weights")
        parser.add_argument("--manifest", help="source -> target name manifest for --pretrained")
        parser.add_argument("--resume", help="Checkpoint to continue training from")

    def on_run(self, args: argparse.Namespace, overrides: List[Tuple[str, str]]) -> int:
        config = self.get_config(args, overrides)
        if args.pretrained and not args.manifest:
            raise UsageError("--pretrained needs --manifest")
        if args.pretrained and args.resume:
            raise UsageError("--pretrained and --resume are mutually exclusive")

        dataset = load_dataset(config.data.frames_root, config.data.annotations_root)
        if not dataset:
            raise DataContractError(f"no training videos under {config.data.annotations_root}")
        model = config.build_model()
        if args.pretrained:
            load_pretrained(model, args.pretrained, args.manifest, Path(args.out) / "pretrained")
        resume = load_checkpoint(args.resume) if args.resume else None

        loader = FrameLoader(config.backbone.input_size, config.precision,
                             workers=1 if config.run.deterministic else config.data.workers)
        log = train_loop(dataset, model, config.train, args.out, loader, config.architecture_digest(),
                         config.run.deterministic, resume)
        (Path(args.out) / "run.conf").write_text(config.to_text())
        if log.entries:
            logger.info(f"✓ Trained to iteration {log.entries[-1][0]}, final loss {log.entries[-1][1]:.4f}, "
                        f"{len(log.checkpoints)} checkpoints in {args.out}")
        return 0
