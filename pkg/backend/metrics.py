"""
Metrics Module

This module implements the evaluation protocol: every video is arranged
into consecutive 8-frame clips, each frame position gets a prediction, and
the valid frames feed a 7x7 confusion matrix. Accuracy, per-class F1,
macro-F1 and the final score S = 0.33 * Acc + 0.67 * macro-F1 are derived
from the matrix.
"""

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .data import FrameLoader, VideoRecord, make_eval_clips
from .errors import DataContractError
from .model import ExpressionModel, model_forward
from .sequence import CLASS_NAMES, NUM_CLASSES, predict
from .train import stack_batch

logger = logging.getLogger(__name__)

ACC_WEIGHT = 0.33
F1_WEIGHT = 0.67
BASELINE_S = 0.36


@dataclass
class ConfusionMatrix:
    """counts[i, j] = frames of true class i predicted as class j"""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))

    @classmethod
    def empty(cls) -> "ConfusionMatrix":
        return cls()

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, true_label: Union[int, Sequence[int]], predicted_label: Union[int, Sequence[int]],
               mask: Union[bool, Sequence[bool]] = True) -> ConfusionMatrix:
    """
    Count (truth, prediction) pairs where mask is true

    Args:
        cm: Matrix updated in place
        true_label: Class or classes 0..6 (ignored where masked out)
        predicted_label: Class or classes 0..6 (ignored where masked out)
        mask: Which pairs count

    Returns:
        The same matrix
    """
    truth = np.atleast_1d(np.asarray(true_label, dtype=np.int64))
    pred = np.atleast_1d(np.asarray(predicted_label, dtype=np.int64))
    keep = np.broadcast_to(np.atleast_1d(np.asarray(mask, dtype=bool)), truth.shape)
    if truth.shape != pred.shape:
        raise ValueError(f"truth and prediction lengths differ: {truth.shape} vs {pred.shape}")
    truth, pred = truth[keep], pred[keep]
    if np.any((truth < 0) | (truth >= NUM_CLASSES) | (pred < 0) | (pred >= NUM_CLASSES)):
        raise ValueError(f"counted labels must lie in 0..{NUM_CLASSES - 1}")
    np.add.at(cm.counts, (truth, pred), 1)
    return cm


def accuracy(cm: ConfusionMatrix) -> float:
    """Correct frames over evaluated frames"""
    total = cm.total
    if total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts) / total)


def f1_scores(cm: ConfusionMatrix) -> Tuple[np.ndarray, float]:
    """
    Per-class F1 and their unweighted mean

    Precision is diag / column sum and recall diag / row sum. Any 0/0 along
    the way makes that class's F1 zero.

    Args:
        cm: Confusion matrix

    Returns:
        Tuple of (f1 per class [7], macro F1)
    """
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1)
    precision = np.divide(diag, predicted, out=np.zeros_like(diag), where=predicted > 0)
    recall = np.divide(diag, actual, out=np.zeros_like(diag), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(diag), where=denom > 0)
    return f1, float(f1.mean())


def final_metric(acc: float, macro_f1: float) -> float:
    return ACC_WEIGHT * acc + F1_WEIGHT * macro_f1


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    f1_per_class: Tuple[float, ...]
    macro_f1: float
    s: float
    frames_evaluated: int

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "MetricsReport":
        if cm.total == 0:
            raise DataContractError("no valid frames were evaluated")
        acc = accuracy(cm)
        f1, macro = f1_scores(cm)
        return cls(acc, tuple(float(v) for v in f1), macro, final_metric(acc, macro), cm.total)

    @property
    def delta_vs_baseline(self) -> float:
        return self.s - BASELINE_S

    def format(self) -> str:
        """Report text: one ``key=value`` line per field, reals to 4 decimals"""
        per_class = " ".join(f"{name}:{v:.4f}" for name, v in zip(CLASS_NAMES, self.f1_per_class))
        return "\n".join([
            f"acc={self.acc:.4f}",
            f"f1_per_class={per_class}",
            f"macro_f1={self.macro_f1:.4f}",
            f"s={self.s:.4f}",
            f"frames_evaluated={self.frames_evaluated}",
            f"delta_vs_baseline={self.delta_vs_baseline:+.4f}",
        ])


_ITERATION = re.compile(r"(\d+)")


def checkpoint_iteration(checkpoint_id: Union[int, str, Path]) -> int:
    """Iteration number of a checkpoint id (an int or a ``checkpoint_<n>.ckpt`` path)"""
    if isinstance(checkpoint_id, (int, np.integer)):
        return int(checkpoint_id)
    match = _ITERATION.findall(Path(checkpoint_id).stem)
    if not match:
        raise ValueError(f"cannot read an iteration number from {checkpoint_id}")
    return int(match[-1])


def select_best_checkpoint(reports: Sequence[Tuple[Union[int, str, Path], MetricsReport]]):
    """
    Checkpoint with the highest S; ties go to the lowest iteration

    Args:
        reports: (checkpoint id, report) pairs

    Returns:
        The winning checkpoint id
    """
    if not reports:
        raise ValueError("no checkpoint reports to choose from")
    best_id, _ = min(reports, key=lambda item: (-item[1].s, checkpoint_iteration(item[0])))
    return best_id


@dataclass
class VideoPredictions:
    """Per-frame predictions; predicted is -1 where no face crop exists"""

    video_id: str
    predicted: np.ndarray
    labels: np.ndarray
    evaluated: np.ndarray

    def confusion(self) -> ConfusionMatrix:
        return accumulate(ConfusionMatrix.empty(), self.labels, self.predicted, self.evaluated)


def evaluate_video(model: ExpressionModel, video: VideoRecord, loader: FrameLoader,
                   batch_clips: int = 4) -> VideoPredictions:
    """
    Predict every frame of a video through its evaluation clips

    Args:
        model: Trained model (evaluated in batch-norm eval mode)
        video: Video to label
        loader: Frame loader matching the model's input size
        batch_clips: Clips per forward pass

    Returns:
        VideoPredictions; padded positions are dropped and frames without a
        crop are predicted -1 and excluded from scoring
    """
    clips = make_eval_clips(video, loader)
    predicted = np.full(len(video), -1, dtype=np.int64)
    for first in range(0, len(clips), max(1, batch_clips)):
        group = clips[first:first + batch_clips]
        frames, _, _ = stack_batch(group)
        logits, _ = model_forward(model, frames, "eval")
        labels = predict(logits)
        for clip, row in zip(group, labels):
            count = min(len(row), len(video) - clip.start_index)
            predicted[clip.start_index:clip.start_index + count] = row[:count]
    predicted[~video.present] = -1
    return VideoPredictions(video.video_id, predicted, video.labels.copy(), video.valid.copy())


def evaluate_dataset(model: ExpressionModel, videos: Sequence[VideoRecord], loader: FrameLoader,
                     workers: int = 1, batch_clips: int = 4) -> List[VideoPredictions]:
    """
    Evaluate many videos, concurrently when workers > 1; output order follows the input

    Args:
        model: Trained model
        videos: Videos to evaluate
        loader: Frame loader
        workers: Evaluation threads
        batch_clips: Clips per forward pass

    Returns:
        One VideoPredictions per video
    """
    if workers > 1 and len(videos) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda v: evaluate_video(model, v, loader, batch_clips), videos))
    return [evaluate_video(model, v, loader, batch_clips) for v in videos]


def confusion_of(results: Iterable[VideoPredictions]) -> ConfusionMatrix:
    cm = ConfusionMatrix.empty()
    for result in results:
        cm = cm.merge(result.confusion())
    return cm


def write_predictions(path: Union[str, Path], results: Iterable[VideoPredictions]) -> int:
    """
    Write ``<video_id> <frame_index> <predicted_class>`` lines

    Args:
        path: Output file
        results: Per-video predictions

    Returns:
        Number of lines written
    """
    lines = [f"{r.video_id} {i} {int(p)}" for r in results for i, p in enumerate(r.predicted)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
    return len(lines)


def read_predictions(path: Union[str, Path]) -> Dict[str, Dict[int, int]]:
    """Parse a predictions file into video id -> frame index -> class"""
    table: Dict[str, Dict[int, int]] = {}
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataContractError(f"{path}:{number}: expected '<video_id> <frame_index> <class>'")
        try:
            index, label = int(parts[1]), int(parts[2])
        except ValueError:
            raise DataContractError(f"{path}:{number}: frame index and class must be integers") from None
        if not -1 <= label < NUM_CLASSES:
            raise DataContractError(f"{path}:{number}: class {label} outside -1..{NUM_CLASSES - 1}")
        table.setdefault(parts[0], {})[index] = label
    return table


def confusion_from_predictions(predictions: Mapping[str, Mapping[int, int]],
                               annotations: Mapping[str, np.ndarray]) -> ConfusionMatrix:
    """
    Score external predictions against annotation labels

    A frame counts when its label is 0..6 and its prediction is 0..6; a
    prediction of -1 marks a frame without a face crop.

    Args:
        predictions: video id -> frame index -> class
        annotations: video id -> label array

    Returns:
        ConfusionMatrix
    """
    cm = ConfusionMatrix.empty()
    unknown = sorted(set(predictions) - set(annotations))
    if unknown:
        logger.warning(f"{len(unknown)} predicted videos have no annotations, e.g. {unknown[0]}")
    unlabeled = 0
    for video_id, labels in annotations.items():
        frames = predictions.get(video_id, {})
        pred = np.array([frames.get(i, -1) for i in range(len(labels))], dtype=np.int64)
        unlabeled += int(np.sum((labels >= 0) & ~np.isin(np.arange(len(labels)), list(frames))))
        accumulate(cm, labels, pred, (labels >= 0) & (pred >= 0))
    if unlabeled:
        logger.warning(f"{unlabeled} annotated frames have no prediction line and are not counted")
    return cm
