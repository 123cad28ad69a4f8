"""
Training Module

This module trains the clip model end to end with SGD and momentum. Each
step draws clips_per_batch independently sampled 8-frame clips, computes
the masked cross-entropy over every timestep and updates the parameters.
Checkpoints are written on a fixed iteration schedule and at termination.
"""

import logging
import queue
import tempfile
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import Checkpoint, checkpoint_path, restore_arrays, restore_model, save_checkpoint, snapshot_model
from .data import Clip, ClipSampler, FrameLoader, VideoRecord
from .errors import ConfigError, NumericError
from .layers import softmax_cross_entropy
from .model import ExpressionModel, model_forward

logger = logging.getLogger(__name__)

LOG_FILE_NAME = "train.log"


@dataclass
class TrainConfig:
    learning_rate: float = 0.0001
    momentum: float = 0.9
    clips_per_batch: int = 4
    checkpoint_every: int = 1000
    max_iterations: int = 5000
    seed: int = 0
    grad_clip: float = 0.0
    prefetch: int = 2
    log_every: int = 100

    def validate(self) -> None:
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise ConfigError(f"train.learning_rate must be finite and non-negative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"train.momentum must lie in [0, 1), got {self.momentum}")
        for name in ("clips_per_batch", "checkpoint_every", "max_iterations", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.grad_clip < 0:
            raise ConfigError(f"train.grad_clip must be non-negative (0 disables), got {self.grad_clip}")
        if self.prefetch < 0:
            raise ConfigError(f"train.prefetch must be non-negative, got {self.prefetch}")


class SgdMomentum:
    """v <- momentum * v + g; p <- p - lr * v, applied in place"""

    def __init__(self, parameters: Dict[str, np.ndarray], learning_rate: float, momentum: float,
                 grad_clip: float = 0.0):
        """
        Initialize optimizer

        Args:
            parameters: Arrays to update in place, keyed by name
            learning_rate: Step size
            momentum: Velocity decay
            grad_clip: Global gradient-norm bound; 0 disables clipping
        """
        self.parameters = parameters
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = {name: np.zeros_like(p) for name, p in parameters.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> float:
        """
        Apply one update

        Args:
            grads: Gradient per parameter name; every parameter must have one

        Returns:
            Global gradient norm before clipping
        """
        missing = sorted(set(self.parameters) - set(grads))
        if missing:
            raise ValueError(f"no gradient for {len(missing)} parameters, e.g. {missing[0]}")
        norm = float(np.sqrt(sum(float(np.sum(np.square(grads[n], dtype=np.float64))) for n in self.parameters)))
        scale = 1.0
        if self.grad_clip > 0 and norm > self.grad_clip:
            scale = self.grad_clip / norm
        for name, p in self.parameters.items():
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name] if scale == 1.0 else scale * grads[name]
            p -= self.learning_rate * v
        return norm


def stack_batch(batch: Sequence[Clip]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack clips into frames [B,T,3,S,S], labels [B,T] and mask [B,T]"""
    return (np.stack([c.frames for c in batch]), np.stack([c.labels for c in batch]),
            np.stack([c.mask for c in batch]))


def clip_loss(model: ExpressionModel, batch: Sequence[Clip], mode: str = "train"):
    """
    Masked cross-entropy of a batch with its backward map

    Args:
        model: Clip model
        batch: Clips
        mode: Batch-norm mode

    Returns:
        Tuple of (loss, grads keyed like model.params())
    """
    frames, labels, mask = stack_batch(batch)
    logits, backprop = model_forward(model, frames, mode)
    loss, dlogits = softmax_cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1),
                                          mask.reshape(-1))
    return loss, lambda: backprop(dlogits.reshape(logits.shape))[1]


def train_step(model: ExpressionModel, batch: Sequence[Clip], optimizer: SgdMomentum, cfg: TrainConfig,
               iteration: int = 0) -> float:
    """
    One optimization step

    Args:
        model: Model; updated in place
        batch: Clips from the training sampler
        optimizer: SGD state over the model's trainable parameters
        cfg: Training configuration
        iteration: Step number used in diagnostics

    Returns:
        The loss before the update
    """
    loss, gradients = clip_loss(model, batch)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}", iteration, [c.video_id for c in batch])
    grads = gradients()
    optimizer.step({name: grads[name] for name in optimizer.parameters})
    return loss


@dataclass
class TrainingLog:
    """Per-iteration (iteration, loss, time_ms) entries mirrored to an append-only file"""

    path: Optional[Path] = None
    entries: List[Tuple[int, float, float]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)

    def record(self, iteration: int, loss: float, time_ms: float) -> None:
        self.entries.append((iteration, loss, time_ms))
        if self.path is not None:
            with self.path.open("a") as handle:
                handle.write(f"iter={iteration} loss={loss:.9g} time_ms={time_ms:.3f}\n")

    @property
    def losses(self) -> List[float]:
        return [loss for _, loss, _ in self.entries]


def read_training_log(path: Union[str, Path]) -> List[Tuple[int, float, float]]:
    """Parse a training log file back into (iteration, loss, time_ms) entries"""
    entries = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        fields_ = dict(part.split("=", 1) for part in line.split())
        entries.append((int(fields_["iter"]), float(fields_["loss"]), float(fields_["time_ms"])))
    return entries


class ClipPrefetcher:
    """
    Assembles batches on a background thread into a bounded queue

    Each batch travels with the generator state right after it was drawn,
    so ``rng_state`` always matches the batches handed out so far even
    though the producer runs ahead.
    """

    _DONE = object()

    def __init__(self, sampler: ClipSampler, rng: np.random.Generator, clips_per_batch: int, count: int,
                 depth: int):
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(1, depth))
        self._stop = threading.Event()
        self.rng_state: Dict[str, Any] = dict(rng.bit_generator.state)
        self._thread = threading.Thread(target=self._produce, args=(sampler, rng, clips_per_batch, count),
                                        daemon=True, name="clip-prefetch")
        self._thread.start()

    def _produce(self, sampler: ClipSampler, rng: np.random.Generator, clips_per_batch: int, count: int) -> None:
        try:
            for _ in range(count):
                if self._stop.is_set():
                    return
                batch = [sampler.sample(rng) for _ in range(clips_per_batch)]
                self._put((batch, dict(rng.bit_generator.state)))
        except Exception as e:
            logger.error(f"Batch assembly failed: {e}", exc_info=True)
            self._put(e)
        self._put(self._DONE)

    def _put(self, item) -> None:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def next(self) -> List[Clip]:
        item = self._queue.get()
        if isinstance(item, Exception):
            raise item
        if item is self._DONE:
            raise StopIteration
        batch, self.rng_state = item
        return batch

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)


def ensure_writable(directory: Union[str, Path]) -> Path:
    """Create a directory and prove it accepts files, or raise ConfigError"""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=directory, prefix=".writable"):
            pass
    except OSError as e:
        raise ConfigError(f"checkpoint directory {directory} is not writable: {e}") from None
    return directory


def train_loop(dataset: Sequence[VideoRecord], model: ExpressionModel, cfg: TrainConfig,
               checkpoint_dir: Union[str, Path], loader: FrameLoader, config_digest: str = "",
               deterministic: bool = True, resume: Optional[Checkpoint] = None) -> TrainingLog:
    """
    Train until cfg.max_iterations

    Args:
        dataset: Training videos
        model: Model; trained in place
        cfg: Training configuration
        checkpoint_dir: Destination of checkpoints and ``train.log``
        loader: Frame loader for clip assembly
        config_digest: Architecture digest stored in every checkpoint
        deterministic: Assemble batches synchronously on the training thread
        resume: Checkpoint to continue from (parameters, momentum, iteration, RNG state)

    Returns:
        TrainingLog of the iterations run by this call
    """
    cfg.validate()
    directory = ensure_writable(checkpoint_dir)
    sampler = ClipSampler(dataset, loader)
    rng = np.random.default_rng([cfg.seed, 1])
    optimizer = SgdMomentum(model.trainable_parameters(), cfg.learning_rate, cfg.momentum, cfg.grad_clip)

    start = 0
    log = TrainingLog(path=directory / LOG_FILE_NAME)
    if resume is not None:
        restore_model(model, resume, config_digest)
        restore_arrays(optimizer.velocity, resume.momentum, "momentum buffers")
        if resume.rng_state:
            rng.bit_generator.state = resume.rng_state
        start = resume.iteration
        logger.info(f"Resuming at iteration {start} of {cfg.max_iterations}")
    else:
        log.path.write_text("")

    remaining = cfg.max_iterations - start
    if remaining <= 0:
        logger.info(f"Nothing to do: checkpoint is at iteration {start} >= {cfg.max_iterations}")
        return log

    prefetcher = None
    if not deterministic and cfg.prefetch > 0:
        prefetcher = ClipPrefetcher(sampler, rng, cfg.clips_per_batch, remaining, cfg.prefetch)
    logger.info(f"Training {remaining} iterations, {cfg.clips_per_batch} clips per batch, "
                f"lr {cfg.learning_rate}, momentum {cfg.momentum}")

    window: List[float] = []
    try:
        for iteration in range(start + 1, cfg.max_iterations + 1):
            began = time.perf_counter()
            if prefetcher is not None:
                batch = prefetcher.next()
            else:
                batch = [sampler.sample(rng) for _ in range(cfg.clips_per_batch)]
            loss = train_step(model, batch, optimizer, cfg, iteration)
            log.record(iteration, loss, (time.perf_counter() - began) * 1000.0)

            window.append(loss)
            if iteration % cfg.log_every == 0:
                logger.info(f"iter {iteration}: mean loss {np.mean(window):.4f} over last {len(window)}")
                window = []
            if iteration % cfg.checkpoint_every == 0 or iteration == cfg.max_iterations:
                ckpt = snapshot_model(model, iteration, optimizer.velocity, rng, config_digest)
                if prefetcher is not None:
                    # the producer's generator is ahead of the training thread
                    ckpt = replace(ckpt, rng_state=prefetcher.rng_state)
                log.checkpoints.append(save_checkpoint(checkpoint_path(directory, iteration), ckpt))
                logger.info(f"✓ Checkpoint at iteration {iteration}")
    finally:
        if prefetcher is not None:
            prefetcher.close()
    return log
