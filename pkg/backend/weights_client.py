"""
Pretrained Weights Module

This module imports pretrained tensors into a freshly built model. Sources
are checkpoint files, local or fetched over HTTP. A manifest maps source
tensor names onto model parameter names.
"""

import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import requests

from .checkpoint import Checkpoint, load_checkpoint
from .errors import ConfigError
from .model import ExpressionModel

logger = logging.getLogger(__name__)

_MANIFEST_LINE = re.compile(r"^(\S+)\s*->\s*(\S+)$")


def parse_manifest(path: Union[str, Path]) -> Dict[str, str]:
    """
    Read a weight-name manifest

    Args:
        path: File of ``source_name -> target_name`` lines; blank and ``#`` lines are skipped

    Returns:
        Mapping of source name to target name, in file order
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read manifest {path}: {e}") from None

    mapping: Dict[str, str] = {}
    targets = set()
    for number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        match = _MANIFEST_LINE.match(line)
        if not match:
            raise ConfigError(f"{path}:{number}: expected 'source -> target', got '{line}'")
        source, target = match.groups()
        if source in mapping or target in targets:
            raise ConfigError(f"{path}:{number}: duplicate mapping for '{source}' or '{target}'")
        mapping[source] = target
        targets.add(target)
    return mapping


def import_weights(model: ExpressionModel, source: Checkpoint, manifest: Dict[str, str]) -> List[str]:
    """
    Copy mapped source tensors into the model in place

    Args:
        model: Target model
        source: Checkpoint holding the pretrained tensors (parameters and buffers)
        manifest: Source name -> model parameter or buffer name

    Returns:
        Target names that were overwritten
    """
    available = {**source.parameters, **source.buffers}
    targets = model.params().all_arrays()
    imported = []
    for source_name, target_name in manifest.items():
        if source_name not in available:
            raise ConfigError(f"pretrained weights have no tensor '{source_name}'")
        if target_name not in targets:
            raise ConfigError(f"model has no parameter or buffer '{target_name}'")
        tensor, target = available[source_name], targets[target_name]
        if tensor.shape != target.shape:
            raise ConfigError(f"'{source_name}' has shape {list(tensor.shape)} but '{target_name}' "
                              f"expects {list(target.shape)}")
        np.copyto(target, tensor, casting="unsafe")
        imported.append(target_name)
    logger.info(f"✓ Imported {len(imported)} pretrained tensors")
    return imported


class WeightsClient:
    """Downloads pretrained weight files over HTTP(S)"""

    def __init__(self, timeout: int = 30, chunk_size: int = 1 << 20):
        """
        Initialize weights client

        Args:
            timeout: Request timeout in seconds
            chunk_size: Bytes per streamed chunk
        """
        self.timeout = timeout
        self.chunk_size = chunk_size

    @staticmethod
    def is_url(location: str) -> bool:
        return location.startswith(("http://", "https://"))

    def fetch(self, url: str, dest: Union[str, Path]) -> Path:
        """
        Download a file

        Args:
            url: http(s) location
            dest: Destination file; written only when the download completes

        Returns:
            The destination path
        """
        dest = Path(dest)
        partial = dest.with_name(dest.name + ".part")
        logger.info(f"Fetching pretrained weights from {url}")
        try:
            with requests.get(url, stream=True, timeout=self.timeout) as response:
                response.raise_for_status()
                received = 0
                with partial.open("wb") as handle:
                    for chunk in response.iter_content(chunk_size=self.chunk_size):
                        handle.write(chunk)
                        received += len(chunk)
            partial.replace(dest)
        except requests.RequestException as e:
            partial.unlink(missing_ok=True)
            logger.error(f"✗ Download failed: {e}")
            raise ConfigError(f"cannot fetch pretrained weights from {url}: {e}") from None
        logger.info(f"✓ Downloaded {received} bytes to {dest}")
        return dest

    def resolve(self, location: str, cache_dir: Union[str, Path]) -> Path:
        """Local path of a weight file, downloading URLs into cache_dir first"""
        if not self.is_url(location):
            return Path(location)
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        name = location.rstrip("/").rsplit("/", 1)[-1] or "pretrained.ckpt"
        return self.fetch(location, cache_dir / name)


def load_pretrained(model: ExpressionModel, location: str, manifest_path: Union[str, Path],
                    cache_dir: Union[str, Path], client: Optional[WeightsClient] = None) -> List[str]:
    """
    Resolve, read and import pretrained weights

    Args:
        model: Target model
        location: Checkpoint path or http(s) URL
        manifest_path: Name manifest
        cache_dir: Where downloaded files are kept
        client: Client used for URLs

    Returns:
        Imported target names
    """
    client = client or WeightsClient()
    manifest = parse_manifest(manifest_path)
    return import_weights(model, load_checkpoint(client.resolve(location, cache_dir)), manifest)
