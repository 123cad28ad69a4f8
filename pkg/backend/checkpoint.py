"""
Checkpoint Module

This module persists training state: named parameters, batch-norm running
statistics, momentum buffers, the iteration counter, the sampling RNG state
and the architecture digest. Files start with the magic ``CLPNET\\0`` and a
format version, followed by length-prefixed little-endian entries.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Optional, Union

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import ExpressionModel

logger = logging.getLogger(__name__)

MAGIC = b"CLPNET\0"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    iteration: int
    parameters: Dict[str, np.ndarray]
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: Dict[str, Any] = field(default_factory=dict)
    config_digest: str = ""
    format_version: int = FORMAT_VERSION

    def groups(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {"param": self.parameters, "momentum": self.momentum, "buffer": self.buffers}


def _write_string(handle: BinaryIO, text: str) -> None:
    data = text.encode("utf-8")
    handle.write(struct.pack("<I", len(data)))
    handle.write(data)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """
    Serialize a checkpoint

    Tensors are stored as little-endian float32 in row-major order; entries
    are written group by group with names sorted.

    Args:
        ckpt: Checkpoint to encode

    Returns:
        File contents
    """
    out = BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<IQ", ckpt.format_version, ckpt.iteration))
    _write_string(out, ckpt.config_digest)
    _write_string(out, json.dumps(ckpt.rng_state, sort_keys=True))
    entries = [(f"{group}/{name}", tensors[name])
               for group, tensors in ckpt.groups().items() for name in sorted(tensors)]
    out.write(struct.pack("<I", len(entries)))
    for name, array in entries:
        # name, rank, shape words, then little-endian float32 data
        _write_string(out, name)
        out.write(struct.pack("<I", array.ndim))
        out.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        out.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {self.offset} "
                                  f"(needed {size} more, file has {len(self.data)})")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (length,) = self.unpack("<I")
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{self.source}: corrupt string at byte {self.offset}: {e}") from None


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    """
    Parse checkpoint file contents

    Args:
        data: File contents
        source: Name used in error messages

    Returns:
        Checkpoint with float32 tensors
    """
    reader = _Reader(data, source)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, iteration = reader.unpack("<IQ")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: format version {version}, this build reads version {FORMAT_VERSION}")
    digest = reader.string()
    try:
        rng_state = json.loads(reader.string())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{source}: corrupt RNG state: {e}") from None

    ckpt = Checkpoint(iteration=iteration, parameters={}, rng_state=rng_state, config_digest=digest,
                      format_version=version)
    groups = ckpt.groups()
    (count,) = reader.unpack("<I")
    for _ in range(count):
        full_name = reader.string()
        # "<group>/<parameter name>"
        group, _, name = full_name.partition("/")
        if group not in groups or not name:
            raise CheckpointError(f"{source}: unknown entry {full_name!r}")
        (ndim,) = reader.unpack("<I")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(4 * size)
        # astype copies out of the read-only file buffer
        groups[group][name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if reader.offset != len(data):
        raise CheckpointError(f"{source}: {len(data) - reader.offset} trailing bytes after the last entry")
    return ckpt


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    """
    Write a checkpoint atomically (temporary file, then rename)

    Args:
        path: Destination file
        ckpt: Checkpoint to write

    Returns:
        The destination path
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    logger.debug(f"Saved checkpoint iteration {ckpt.iteration} to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint

    Args:
        path: Checkpoint file

    Returns:
        Checkpoint
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return decode_checkpoint(data, str(path))


def checkpoint_path(directory: Union[str, Path], iteration: int) -> Path:
    return Path(directory) / f"checkpoint_{iteration:08d}.ckpt"


def list_checkpoints(directory: Union[str, Path]) -> List[Path]:
    """Checkpoint files in a directory, ordered by iteration"""
    directory = Path(directory)
    if not directory.is_dir():
        raise CheckpointError(f"checkpoint directory {directory} does not exist")
    return sorted(directory.glob("checkpoint_*.ckpt"))


def restore_arrays(target: Dict[str, np.ndarray], source: Dict[str, np.ndarray], kind: str) -> None:
    """
    Copy saved tensors into live arrays in place

    Args:
        target: Live arrays keyed by name (model parameters, buffers or momentum)
        source: Saved tensors
        kind: Label used in error messages
    """
    missing = sorted(set(target) - set(source))
    extra = sorted(set(source) - set(target))
    if missing or extra:
        raise ConfigError(f"checkpoint {kind} do not match the model: missing {missing[:3]}, "
                          f"unexpected {extra[:3]}")
    for name, array in target.items():
        saved = source[name]
        if saved.shape != array.shape:
            raise ConfigError(f"checkpoint {kind} {name} has shape {list(saved.shape)}, "
                              f"model expects {list(array.shape)}")
        np.copyto(array, saved, casting="unsafe")


def snapshot_model(model: ExpressionModel, iteration: int, momentum: Optional[Dict[str, np.ndarray]] = None,
                   rng: Optional[np.random.Generator] = None, config_digest: str = "") -> Checkpoint:
    """
    Capture a model's state as a checkpoint (arrays are copied)

    Args:
        model: Model to capture
        iteration: Completed optimizer steps
        momentum: Optimizer velocity buffers keyed like the trainable parameters
        rng: Sampling generator whose state is saved for resume
        config_digest: Architecture digest of the run configuration

    Returns:
        Checkpoint
    """
    params = model.params()
    return Checkpoint(
        iteration=iteration,
        parameters={k: v.copy() for k, v in params.parameters.items()},
        momentum={k: v.copy() for k, v in (momentum or {}).items()},
        buffers={k: v.copy() for k, v in params.buffers.items()},
        rng_state=dict(rng.bit_generator.state) if rng is not None else {},
        config_digest=config_digest,
    )


def restore_model(model: ExpressionModel, ckpt: Checkpoint, config_digest: Optional[str] = None) -> None:
    """
    Load checkpointed parameters and buffers into a model in place

    Args:
        model: Model built with the checkpoint's architecture
        ckpt: Checkpoint to apply
        config_digest: Expected architecture digest; checked when both sides carry one
    """
    if config_digest and ckpt.config_digest and config_digest != ckpt.config_digest:
        raise ConfigError(f"checkpoint architecture {ckpt.config_digest[:12]} differs from the configured "
                          f"architecture {config_digest[:12]}")
    params = model.params()
    restore_arrays(params.parameters, ckpt.parameters, "parameters")
    restore_arrays(params.buffers, ckpt.buffers, "buffers")
    logger.info(f"✓ Restored model from checkpoint at iteration {ckpt.iteration}")
