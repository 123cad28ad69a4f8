"""
Synthetic Corpus Module

This module writes a small class-conditional video corpus in the exact
on-disk layout load_dataset reads. Class k is rendered as its own mean
colour plus an oriented grating, with Gaussian pixel noise on top, so a
template matcher separates clean frames perfectly and a tiny model can
memorize the corpus.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from .data import ANNOTATION_HEADER, CLIP_LENGTH, write_rgb
from .errors import ConfigError, DataContractError
from .sequence import NUM_CLASSES

logger = logging.getLogger(__name__)

MAX_RUN = 16
GRATING_AMPLITUDE = 48.0


@dataclass(frozen=True)
class SynthSpec:
    num_videos: int = 4
    frames_per_video: int = 64
    image_size: int = 32
    class_pattern_seed: int = 0
    noise_sigma: float = 8.0
    drop_rate: float = 0.0

    def validate(self) -> None:
        if self.num_videos < 1:
            raise ConfigError(f"num_videos must be positive, got {self.num_videos}")
        if self.frames_per_video < CLIP_LENGTH:
            raise ConfigError(f"frames_per_video must be at least {CLIP_LENGTH}, got {self.frames_per_video}")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be at least 8, got {self.image_size}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        if self.max_run() < CLIP_LENGTH:
            raise ConfigError(f"{self.num_videos} videos of {self.frames_per_video} frames cannot hold "
                              f"{NUM_CLASSES} label runs of at least {CLIP_LENGTH} frames")

    def runs_per_video(self) -> int:
        return -(-NUM_CLASSES // self.num_videos)

    def max_run(self) -> int:
        """Longest drawn run that still leaves room for runs_per_video() runs in every video."""
        return min(MAX_RUN, self.frames_per_video // self.runs_per_video())


def class_templates(image_size: int, class_pattern_seed: int = 0) -> np.ndarray:
    """
    Clean per-class images

    Colours sit on distinct corners and edges of the RGB cube; grating
    angles are spaced evenly and shuffled by the seed.

    Args:
        image_size: Side length S
        class_pattern_seed: Seed for the colour and orientation assignment

    Returns:
        uint8 array [7,S,S,3]
    """
    rng = np.random.default_rng(class_pattern_seed)
    palette = np.array([[64, 64, 64], [192, 64, 64], [64, 192, 64], [64, 64, 192],
                        [192, 192, 64], [192, 64, 192], [64, 192, 192]], dtype=np.float64)
    colours = palette[rng.permutation(NUM_CLASSES)]
    angles = np.pi * rng.permutation(NUM_CLASSES) / NUM_CLASSES
    period = max(4.0, image_size / 4.0)

    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    templates = np.empty((NUM_CLASSES, image_size, image_size, 3), dtype=np.uint8)
    for k in range(NUM_CLASSES):
        phase = 2 * np.pi * (xx * np.cos(angles[k]) + yy * np.sin(angles[k])) / period
        grating = GRATING_AMPLITUDE * np.sin(phase)
        templates[k] = np.clip(np.rint(colours[k] + grating[..., None]), 0, 255).astype(np.uint8)
    return templates


def _run_lengths(total: int, rng: np.random.Generator, max_run: int = MAX_RUN) -> List[int]:
    runs: List[int] = []
    remaining = total
    while remaining > 0:
        length = int(rng.integers(CLIP_LENGTH, max_run + 1))
        runs.append(min(length, remaining))
        remaining -= runs[-1]
    # short tail joins the run before it
    if len(runs) > 1 and runs[-1] < CLIP_LENGTH:
        tail = runs.pop()
        runs[-1] += tail
    return runs


def generate_synth(spec: SynthSpec, out_root: Union[str, Path], seed: int = 0) -> Dict[str, np.ndarray]:
    """
    Write a synthetic corpus

    Layout: ``<out_root>/frames/<video_id>/<index:06d>.png`` and
    ``<out_root>/annotations/<video_id>.txt``. Labels are constant within
    runs of 8 to 16 frames (shorter when needed to fit seven runs into
    the corpus) and cycle through a seeded class permutation
    across the whole corpus.

    Args:
        spec: Corpus shape
        out_root: Destination directory (created if missing)
        seed: Seed for run lengths, noise and dropped frames

    Returns:
        Mapping of video id to its label array
    """
    spec.validate()
    root = Path(out_root)
    frames_root = root / "frames"
    annotations_root = root / "annotations"
    frames_root.mkdir(parents=True, exist_ok=True)
    annotations_root.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    templates = class_templates(spec.image_size, spec.class_pattern_seed).astype(np.float64)
    order = rng.permutation(NUM_CLASSES)
    run_index = 0
    corpus: Dict[str, np.ndarray] = {}
    dropped = 0

    for v in range(spec.num_videos):
        video_id = f"video_{v:03d}"
        labels = np.full(spec.frames_per_video, -1, dtype=np.int64)
        position = 0
        for length in _run_lengths(spec.frames_per_video, rng, spec.max_run()):
            labels[position:position + length] = order[run_index % NUM_CLASSES]
            position += length
            run_index += 1
        assert position == spec.frames_per_video and labels.min() >= 0

        video_dir = frames_root / video_id
        video_dir.mkdir(exist_ok=True)
        for index, label in enumerate(labels):
            noise = rng.normal(0.0, spec.noise_sigma, size=templates.shape[1:])
            image = np.clip(np.rint(templates[label] + noise), 0, 255).astype(np.uint8)
            write_rgb(video_dir / f"{index:06d}.png", image)

        if spec.drop_rate > 0:
            drop = np.flatnonzero(rng.random(spec.frames_per_video) < spec.drop_rate)
            for index in drop:
                (video_dir / f"{index:06d}.png").unlink()
            dropped += len(drop)

        lines = [ANNOTATION_HEADER, *(str(int(label)) for label in labels)]
        (annotations_root / f"{video_id}.txt").write_text("\n".join(lines) + "\n")
        corpus[video_id] = labels

    seen = set(np.concatenate(list(corpus.values())).tolist())
    if len(seen) != NUM_CLASSES:
        raise DataContractError(f"synthetic corpus covers classes {sorted(seen)} only")
    logger.info(f"✓ Wrote {spec.num_videos} synthetic videos x {spec.frames_per_video} frames "
                f"({spec.image_size}px, {dropped} dropped) to {root}")
    return corpus
