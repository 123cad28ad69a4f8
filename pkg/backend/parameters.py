"""
Parameters Module

This module flattens a tree of parameter dataclasses into dotted names. Array
fields are trainable parameters unless their field metadata marks them as
buffers (batch-norm running statistics). Lists are indexed by position.
"""

from dataclasses import dataclass, fields, is_dataclass
from typing import Any, Dict, Iterator, Tuple

import numpy as np


def walk_arrays(node: Any, prefix: str = "") -> Iterator[Tuple[str, np.ndarray, bool]]:
    """
    Yield every array in a parameter tree

    Args:
        node: Dataclass, list/tuple of dataclasses, or None
        prefix: Name prefix for this subtree

    Returns:
        Iterator of (dotted_name, array, is_buffer)
    """
    if node is None:
        return
    if isinstance(node, (list, tuple)):
        for index, child in enumerate(node):
            yield from walk_arrays(child, f"{prefix}{index}.")
        return
    if not is_dataclass(node):
        return
    for f in fields(node):
        if f.metadata.get("skip"):
            continue
        value = getattr(node, f.name)
        name = f"{prefix}{f.name}"
        if isinstance(value, np.ndarray):
            yield name, value, bool(f.metadata.get("buffer"))
        elif is_dataclass(value) or isinstance(value, (list, tuple)):
            yield from walk_arrays(value, f"{name}.")


@dataclass
class ModelParams:
    """Named view of a model's trainable parameters and buffers

    The arrays are shared with the model, so in-place updates through this
    view change the model.
    """

    parameters: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]

    @classmethod
    def of(cls, tree: Any, prefix: str = "") -> "ModelParams":
        parameters: Dict[str, np.ndarray] = {}
        buffers: Dict[str, np.ndarray] = {}
        for name, array, is_buffer in walk_arrays(tree, prefix):
            (buffers if is_buffer else parameters)[name] = array
        return cls(parameters, buffers)

    def count(self) -> int:
        """Number of trainable scalars"""
        return int(sum(a.size for a in self.parameters.values()))

    def all_arrays(self) -> Dict[str, np.ndarray]:
        return {**self.parameters, **self.buffers}
