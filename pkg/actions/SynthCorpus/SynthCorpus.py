# Import application modules
from backend.plugin_base import ActionBase
from backend.synth import SynthSpec, generate_synth

# Import python modules
import argparse
import logging
from typing import List, Tuple

logger = logging.getLogger(__name__)


class SynthCorpus(ActionBase):
    HELP = "Write a synthetic expression corpus"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--out", default="data", help="Corpus root (frames/ and annotations/ go inside)")
        parser.add_argument("--videos", type=int, default=4)
        parser.add_argument("--frames", type=int, default=64, help="Frames per video")
        parser.add_argument("--size", type=int, default=32, help="Image side length")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--pattern-seed", type=int, default=0, help="Seed of the class templates")
        parser.add_argument("--noise", type=float, default=8.0, help="Pixel noise sigma")
        parser.add_argument("--drop-rate", type=float, default=0.0, help="Fraction of frame images deleted")

    def on_run(self, args: argparse.Namespace, overrides: List[Tuple[str, str]]) -> int:
        spec = SynthSpec(num_videos=args.videos, frames_per_video=args.frames, image_size=args.size,
                         class_pattern_seed=args.pattern_seed, noise_sigma=args.noise, drop_rate=args.drop_rate)
        generate_synth(spec, args.out, args.seed)
        return 0
