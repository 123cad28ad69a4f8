"""
Dataset Module

This module ingests a video expression dataset laid out as

    frames/<video_id>/<index:06d>.png      (S x S RGB face crops)
    annotations/<video_id>.txt             (class header, then one label per frame)

It samples contiguous training clips and arranges videos into zero-padded
evaluation clips. Faces arrive already detected, aligned and cropped; frames
whose crop is missing or whose label is -1 are invalid.
"""

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AnnotationError, DataContractError, ShapeError
from .numerics import Precision, Tensor
from .sequence import CLASS_NAMES, NUM_CLASSES

logger = logging.getLogger(__name__)

CLIP_LENGTH = 8
ANNOTATION_HEADER = ",".join(CLASS_NAMES)
CHANNEL_MEAN = np.array([0.485, 0.456, 0.406])
CHANNEL_STD = np.array([0.229, 0.224, 0.225])

_FRAME_NAME = re.compile(r"^(\d+)\.png$")


@dataclass
class VideoRecord:
    """An annotated frame sequence; frame_paths[i] is None when the crop is missing"""

    video_id: str
    frame_paths: List[Optional[Path]]
    labels: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if not (len(self.frame_paths) == len(self.labels) == len(self.valid)):
            raise AnnotationError(self.video_id, f"{len(self.frame_paths)} frames, {len(self.labels)} labels, "
                                                 f"{len(self.valid)} mask entries")
        if np.any(self.valid & (self.labels < 0)):
            raise AnnotationError(self.video_id, "unannotated frame marked valid")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def present(self) -> np.ndarray:
        """True where a face crop exists on disk"""
        return np.array([p is not None for p in self.frame_paths], dtype=bool)

    @classmethod
    def from_frames(cls, video_id: str, frame_paths: Sequence[Optional[Path]],
                    labels: Sequence[int]) -> "VideoRecord":
        """Build a record, deriving valid = (label >= 0) and crop present"""
        labels = np.asarray(labels, dtype=np.int64)
        present = np.array([p is not None for p in frame_paths], dtype=bool)
        return cls(video_id, list(frame_paths), labels, (labels >= 0) & present)


@dataclass
class Clip:
    """A contiguous CLIP_LENGTH window; padded positions hold zero frames and mask false"""

    video_id: str
    start_index: int
    frames: np.ndarray
    labels: np.ndarray
    mask: np.ndarray


def normalize_frame(image: np.ndarray, precision: Precision = Precision.FLOAT32) -> Tensor:
    """
    Scale an 8-bit RGB image to [0,1] and standardize each channel

    Args:
        image: uint8 array [S,S,3] in RGB order
        precision: Output precision

    Returns:
        Tensor [3,S,S]
    """
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] != image.shape[1]:
        raise ShapeError("normalize_frame expects an S x S x 3 image", image.shape)
    scaled = image.astype(np.float64) / 255.0
    standardized = (scaled - CHANNEL_MEAN) / CHANNEL_STD
    return np.ascontiguousarray(standardized.transpose(2, 0, 1), dtype=precision.dtype)


def denormalize_frame(frame: Tensor) -> np.ndarray:
    """Invert normalize_frame back to an 8-bit RGB image [S,S,3]"""
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ShapeError("denormalize_frame expects a [3,S,S] tensor", frame.shape)
    scaled = frame.transpose(1, 2, 0) * CHANNEL_STD + CHANNEL_MEAN
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def read_rgb(path: Union[str, Path]) -> Optional[np.ndarray]:
    """Decode an image file to RGB uint8, None when unreadable"""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        return None
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def write_rgb(path: Union[str, Path], image: np.ndarray) -> None:
    """Encode an RGB uint8 image as PNG"""
    if not cv2.imwrite(str(path), cv2.cvtColor(image, cv2.COLOR_RGB2BGR)):
        raise DataContractError(f"could not write image {path}")


class FrameLoader:
    """Decodes and normalizes face crops with a bounded LRU cache"""

    def __init__(self, image_size: int, precision: Precision = Precision.FLOAT32, cache_size: int = 4096,
                 workers: int = 1):
        """
        Initialize frame loader

        Args:
            image_size: Expected crop size S
            precision: Output precision
            cache_size: Number of normalized frames kept in memory
            workers: Decoding threads for load_many (1 = synchronous)
        """
        self.image_size = image_size
        self.precision = precision
        self.workers = max(1, workers)
        self._load_cached = lru_cache(maxsize=cache_size)(self._decode)

    def zero_frame(self) -> Tensor:
        return np.zeros((3, self.image_size, self.image_size), dtype=self.precision.dtype)

    def _decode(self, path: Path) -> Tensor:
        image = read_rgb(path)
        if image is None:
            logger.error(f"✗ Frame {path} exists but could not be decoded")
            raise DataContractError(f"frame {path} could not be decoded")
        if image.shape[:2] != (self.image_size, self.image_size):
            raise DataContractError(f"frame {path} is {image.shape[1]}x{image.shape[0]}, "
                                    f"expected {self.image_size}x{self.image_size}")
        frame = normalize_frame(image, self.precision)
        frame.setflags(write=False)
        return frame

    def load(self, path: Optional[Path]) -> Tensor:
        if path is None:
            return self.zero_frame()
        return self._load_cached(Path(path))

    def load_many(self, paths: Sequence[Optional[Path]]) -> np.ndarray:
        """Load frames in order, decoding concurrently when workers > 1"""
        if self.workers > 1 and len(paths) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                frames = list(pool.map(self.load, paths))
        else:
            frames = [self.load(p) for p in paths]
        return np.stack(frames) if frames else np.zeros((0, 3, self.image_size, self.image_size),
                                                        dtype=self.precision.dtype)


def parse_annotation_file(path: Path) -> np.ndarray:
    """
    Read an annotation file

    Args:
        path: ``<video_id>.txt`` with the class-name header then one integer per line

    Blank lines may only trail the labels; an interior blank line would shift
    every later label by one frame.

    Returns:
        int64 labels in -1..6
    """
    video_id = path.stem
    lines = path.read_text().splitlines()
    while len(lines) > 1 and not lines[-1].strip():
        lines.pop()
    if not lines or lines[0].strip() != ANNOTATION_HEADER:
        raise AnnotationError(video_id, f"first line must be '{ANNOTATION_HEADER}'")
    labels = []
    for number, line in enumerate(lines[1:], start=2):
        text = line.strip()
        if not text:
            raise AnnotationError(video_id, f"line {number}: blank line between labels")
        try:
            value = int(text)
        except ValueError:
            raise AnnotationError(video_id, f"line {number}: '{text}' is not an integer") from None
        if not -1 <= value < NUM_CLASSES:
            raise AnnotationError(video_id, f"line {number}: label {value} outside -1..{NUM_CLASSES - 1}")
        labels.append(value)
    return np.array(labels, dtype=np.int64)


def scan_frame_dir(video_dir: Path) -> Dict[int, Path]:
    """Map frame index to image path for every ``<digits>.png`` in a video directory"""
    if not video_dir.is_dir():
        return {}
    found = {}
    for entry in video_dir.iterdir():
        match = _FRAME_NAME.match(entry.name)
        if match:
            found[int(match.group(1))] = entry
    return found


class DatasetLoader:
    """Loads every annotated video, rejecting malformed ones with a report"""

    def __init__(self, frames_root: Union[str, Path], annotations_root: Union[str, Path]):
        self.frames_root = Path(frames_root)
        self.annotations_root = Path(annotations_root)
        self.rejected: Dict[str, str] = {}

    def load(self) -> List[VideoRecord]:
        """
        Load the dataset

        Returns:
            Records sorted by video id with frames ordered by index
        """
        if not self.annotations_root.is_dir():
            raise DataContractError(f"annotations directory {self.annotations_root} does not exist")
        self.rejected = {}
        files = sorted(self.annotations_root.glob("*.txt"), key=lambda p: p.stem)
        if not files:
            logger.warning(f"No annotation files in {self.annotations_root}; dataset is empty")
            return []

        records = []
        for path in files:
            try:
                records.append(self._load_video(path))
            except AnnotationError as e:
                self.rejected[e.video_id] = e.reason
                logger.warning(f"✗ Rejected {e}")
        valid = sum(int(r.valid.sum()) for r in records)
        logger.info(f"✓ Loaded {len(records)} videos ({valid} valid frames), rejected {len(self.rejected)}")
        return records

    def _load_video(self, path: Path) -> VideoRecord:
        video_id = path.stem
        labels = parse_annotation_file(path)
        images = scan_frame_dir(self.frames_root / video_id)
        beyond = [i for i in images if i >= len(labels)]
        if beyond:
            raise AnnotationError(video_id, f"{len(labels)} annotation lines but frame images up to index "
                                            f"{max(beyond)}")
        frame_paths = [images.get(i) for i in range(len(labels))]
        missing = sum(1 for i, p in enumerate(frame_paths) if p is None and labels[i] >= 0)
        if missing:
            logger.debug(f"Video {video_id}: {missing} labeled frames without a face crop")
        return VideoRecord.from_frames(video_id, frame_paths, labels)


def load_dataset(frames_root: Union[str, Path], annotations_root: Union[str, Path]) -> List[VideoRecord]:
    """
    Load an annotated dataset

    Args:
        frames_root: Directory of per-video frame directories
        annotations_root: Directory of per-video annotation files

    Returns:
        Records sorted by video id; malformed videos are skipped with a warning
    """
    return DatasetLoader(frames_root, annotations_root).load()


def scan_unlabeled(frames_root: Union[str, Path]) -> List[VideoRecord]:
    """
    Build records for frames without annotations (all labels -1)

    The frame count of a video is its highest image index + 1; gaps are
    frames without a crop.

    Args:
        frames_root: Directory of per-video frame directories

    Returns:
        Records sorted by video id
    """
    root = Path(frames_root)
    if not root.is_dir():
        raise DataContractError(f"frames directory {root} does not exist")
    records = []
    for video_dir in sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name):
        images = scan_frame_dir(video_dir)
        if not images:
            logger.warning(f"Video directory {video_dir} holds no frames; skipped")
            continue
        length = max(images) + 1
        records.append(VideoRecord.from_frames(video_dir.name, [images.get(i) for i in range(length)],
                                               [-1] * length))
    return records


def eligible_starts(valid: np.ndarray, clip_length: int = CLIP_LENGTH) -> np.ndarray:
    """Start indices of every window of clip_length consecutive valid frames"""
    if len(valid) < clip_length:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(sliding_window_view(np.asarray(valid, dtype=bool), clip_length).all(axis=1))


def build_clip(video: VideoRecord, start: int, loader: FrameLoader, clip_length: int = CLIP_LENGTH) -> Clip:
    """
    Assemble the clip starting at ``start``; positions past the end are zero-padded

    Args:
        video: Source video
        start: First frame index
        loader: Frame loader
        clip_length: Clip length

    Returns:
        Clip with frames [clip_length,3,S,S]
    """
    stop = min(start + clip_length, len(video))
    count = stop - start
    frames = np.zeros((clip_length, 3, loader.image_size, loader.image_size), dtype=loader.precision.dtype)
    frames[:count] = loader.load_many(video.frame_paths[start:stop])
    labels = np.full(clip_length, -1, dtype=np.int64)
    labels[:count] = video.labels[start:stop]
    mask = np.zeros(clip_length, dtype=bool)
    mask[:count] = video.valid[start:stop]
    return Clip(video.video_id, start, frames, labels, mask)


class ClipSampler:
    """Draws training clips: a video uniformly among eligible ones, then a window uniformly within it"""

    def __init__(self, dataset: Sequence[VideoRecord], loader: Optional[FrameLoader] = None,
                 clip_length: int = CLIP_LENGTH):
        """
        Initialize sampler

        Args:
            dataset: Loaded videos
            loader: Frame loader used by sample(); not needed for sample_window()
            clip_length: Clip length
        """
        self.dataset = list(dataset)
        self.loader = loader
        self.clip_length = clip_length
        self.windows: List[Tuple[int, np.ndarray]] = []
        for index, video in enumerate(self.dataset):
            starts = eligible_starts(video.valid, clip_length)
            if len(starts):
                self.windows.append((index, starts))
        if not self.windows:
            raise DataContractError(f"no video has {clip_length} consecutive valid frames")
        skipped = len(self.dataset) - len(self.windows)
        if skipped:
            logger.info(f"{skipped} videos have no valid {clip_length}-frame window and are never sampled")

    def sample_window(self, rng: np.random.Generator) -> Tuple[int, int]:
        """Return (dataset index, start index) of a random eligible window"""
        video_index, starts = self.windows[int(rng.integers(len(self.windows)))]
        return video_index, int(starts[int(rng.integers(len(starts)))])

    def sample(self, rng: np.random.Generator) -> Clip:
        if self.loader is None:
            raise ValueError("ClipSampler.sample needs a FrameLoader")
        video_index, start = self.sample_window(rng)
        return build_clip(self.dataset[video_index], start, self.loader, self.clip_length)


def sample_training_clip(dataset: Sequence[VideoRecord], rng: np.random.Generator, loader: FrameLoader) -> Clip:
    """
    Draw one fully valid training clip

    Args:
        dataset: Loaded videos
        rng: Random generator
        loader: Frame loader

    Returns:
        Clip whose eight mask entries are all true
    """
    return ClipSampler(dataset, loader).sample(rng)


def eval_window_starts(length: int, clip_length: int = CLIP_LENGTH) -> List[int]:
    """Starts of the non-overlapping windows covering a video of ``length`` frames"""
    return list(range(0, length, clip_length))


def make_eval_clips(video: VideoRecord, loader: FrameLoader, clip_length: int = CLIP_LENGTH) -> List[Clip]:
    """
    Arrange a whole video into consecutive clips, zero-padding the last one

    Args:
        video: Video to arrange
        loader: Frame loader
        clip_length: Clip length

    Returns:
        ceil(len / clip_length) clips; invalid frames keep their position with mask false
    """
    return [build_clip(video, start, loader, clip_length) for start in eval_window_starts(len(video), clip_length)]
