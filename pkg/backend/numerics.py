"""
Numerics Module

This module provides the tensor conventions and the differentiable-operation
contract every layer is built on. A tensor is a numpy array in one of two
precision modes. Every differentiable op returns its output together with a
GradRecord that maps an output cotangent back to per-input cotangents. A
central-difference checker verifies those records.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import GradCheckError, ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
# Composite modules hand back dx plus named parameter gradients.
Backprop = Callable[[np.ndarray], Tuple[np.ndarray, Dict[str, np.ndarray]]]


class Precision(Enum):
    """Dual precision modes: 64-bit for verification, 32-bit for training"""

    FLOAT32 = 32
    FLOAT64 = 64

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.FLOAT32 else np.dtype(np.float64)

    @classmethod
    def from_bits(cls, bits: Union[int, str]) -> "Precision":
        try:
            return cls(int(bits))
        except ValueError:
            raise ValueError(f"precision must be 32 or 64, got {bits!r}") from None


def as_tensor(data: Any, precision: Precision = Precision.FLOAT64) -> Tensor:
    """
    Build a contiguous tensor in the requested precision

    Args:
        data: Anything numpy can turn into an array
        precision: Target precision mode

    Returns:
        C-contiguous array of the precision's dtype
    """
    return np.ascontiguousarray(data, dtype=precision.dtype)


@dataclass(frozen=True)
class GradRecord:
    """Backward map of one forward application

    ``backward`` takes one cotangent per forward output and returns one
    cotangent per forward input, ``None`` for inputs that are not
    differentiated (absent bias, integer labels).
    """

    op: str
    inputs: Tuple[Optional[np.ndarray], ...]
    output: Union[np.ndarray, Tuple[np.ndarray, ...]]
    backward_fn: Callable[..., Tuple[Optional[np.ndarray], ...]]

    @property
    def output_shapes(self) -> Tuple[Tuple[int, ...], ...]:
        outputs = self.output if isinstance(self.output, tuple) else (self.output,)
        return tuple(o.shape for o in outputs)

    def backward(self, *cotangents: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        shapes = self.output_shapes
        if len(cotangents) != len(shapes):
            raise ValueError(f"{self.op}: expected {len(shapes)} cotangents, got {len(cotangents)}")
        for g, shape in zip(cotangents, shapes):
            if g.shape != shape:
                raise ShapeError(f"{self.op}: cotangent shape differs from output", g.shape, shape)
        grads = self.backward_fn(*cotangents)
        for grad, x in zip(grads, self.inputs):
            if grad is not None and x is not None and grad.shape != x.shape:
                raise ShapeError(f"{self.op}: gradient shape differs from input", grad.shape, x.shape)
        return grads


def _broadcast_shape(sa: Tuple[int, ...], sb: Tuple[int, ...]) -> Tuple[int, ...]:
    if sa == sb:
        return sa
    if len(sa) == 4 and len(sb) == 4:
        big, small = (sa, sb) if np.prod(sa) >= np.prod(sb) else (sb, sa)
        n, c, h, w = big
        if small in ((n, c, 1, 1), (n, 1, h, w)):
            return big
    raise ShapeError("unsupported broadcast", sa, sb)


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


_UNARY = ("relu", "sigmoid", "tanh")
_BINARY = ("add", "mul")


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None) -> Tuple[Tensor, GradRecord]:
    """
    Apply an elementwise op

    Args:
        op: One of add, mul, relu, sigmoid, tanh
        a: First operand
        b: Second operand for add/mul; may be [N,C,1,1] or [N,1,H,W]
           against an [N,C,H,W] partner

    Returns:
        Tuple of (output, GradRecord)
    """
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} takes a single operand")
        if op == "relu":
            out = np.maximum(a, 0)
            backward = lambda g: (g * (a > 0),)
        elif op == "sigmoid":
            out = expit(a)
            backward = lambda g: (g * out * (1 - out),)
        else:
            out = np.tanh(a)
            backward = lambda g: (g * (1 - out * out),)
        return out, GradRecord(op, (a,), out, backward)

    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} takes two operands")
        _broadcast_shape(a.shape, b.shape)
        if op == "add":
            out = a + b
            backward = lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape))
        else:
            out = a * b
            backward = lambda g: (_reduce_to(g * b, a.shape), _reduce_to(g * a, b.shape))
        return out, GradRecord(op, (a, b), out, backward)

    raise ValueError(f"unknown elementwise op {op!r}")


class Tape:
    """Chain of single-input steps, replayed in reverse for the backward pass

    Each step is either a GradRecord whose first input is the chained
    activation (the remaining inputs are parameters, named at push time) or
    a composite module's backprop whose gradients are filed under a prefix.
    """

    def __init__(self) -> None:
        self._steps: List[Tuple[str, Any, Any]] = []

    def push(self, record: GradRecord, *param_names: Optional[str]) -> None:
        self._steps.append(("record", record, param_names))

    def push_module(self, backprop: Backprop, prefix: str) -> None:
        self._steps.append(("module", backprop, prefix))

    def backward(self, g: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        grads: Dict[str, np.ndarray] = {}
        for kind, step, names in reversed(self._steps):
            if kind == "record":
                g, *param_grads = step.backward(g)
                for name, grad in zip(names, param_grads):
                    if name is not None and grad is not None:
                        grads[name] = grad
            else:
                g, module_grads = step(g)
                grads.update({f"{names}{k}": v for k, v in module_grads.items()})
        return g, grads


def _as_tuple(value: Union[np.ndarray, Sequence[np.ndarray]]) -> Tuple[np.ndarray, ...]:
    return tuple(value) if isinstance(value, (tuple, list)) else (value,)


def grad_check(op_under_test: Callable[..., Tuple[Any, GradRecord]], inputs: Sequence[np.ndarray],
               eps: float = 1e-6, seed: int = 0, max_elements: Optional[int] = None) -> float:
    """
    Compare an op's analytic gradients with central finite differences

    Each output is differenced first and only then contracted with a fixed
    random cotangent g, so unperturbed elements contribute exactly zero.
    The step is rounded to the nearest power of two, which keeps x +/- eps
    and the step itself exact; linear maps then check to rounding.

    Args:
        op_under_test: Callable mapping the inputs to (output, GradRecord)
        inputs: Input tensors; copied to float64 before checking
        eps: Finite-difference step
        seed: Seed for the cotangent and for element sampling
        max_elements: Check at most this many randomly chosen elements per
            input (all elements when None)

    Returns:
        max over checked elements of |analytic - numeric| / max(1, |numeric|)
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    step = float(2.0 ** np.round(np.log2(eps)))
    points = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    rng = np.random.default_rng(seed)

    outputs, record = op_under_test(*points)
    cotangents = tuple(rng.standard_normal(o.shape) for o in _as_tuple(outputs))
    analytic = record.backward(*cotangents)

    def evaluate() -> Tuple[np.ndarray, ...]:
        return tuple(np.array(o, dtype=np.float64, copy=True) for o in _as_tuple(op_under_test(*points)[0]))

    worst = 0.0
    for i, (x, grad) in enumerate(zip(points, analytic)):
        if grad is None:
            continue
        flat = x.reshape(-1)
        flat_grad = np.asarray(grad, dtype=np.float64).reshape(-1)
        indices: Iterable[int] = range(flat.size)
        if max_elements is not None and flat.size > max_elements:
            indices = rng.choice(flat.size, size=max_elements, replace=False)
        for j in indices:
            original = flat[j]
            flat[j] = original + step
            out_plus = evaluate()
            flat[j] = original - step
            out_minus = evaluate()
            flat[j] = original
            # difference before contracting
            contracted = sum(float(np.sum((p - m) * g)) for p, m, g in zip(out_plus, out_minus, cotangents))
            numeric = contracted / (2 * step)
            if not np.isfinite(numeric):
                raise GradCheckError("non-finite numeric gradient", i, int(j))
            if not np.isfinite(flat_grad[j]):
                raise GradCheckError("non-finite analytic gradient", i, int(j))
            worst = max(worst, abs(flat_grad[j] - numeric) / max(1.0, abs(numeric)))
    logger.debug(f"grad_check({record.op}) max relative error {worst:.3e}")
    return worst


def grad_check_named(forward: Callable[[np.ndarray, Dict[str, np.ndarray]], Tuple[np.ndarray, Backprop]],
                     x: np.ndarray, params: Mapping[str, np.ndarray], eps: float = 1e-6,
                     seed: int = 0, max_elements: Optional[int] = None) -> float:
    """
    Gradient-check a composite module with named parameters

    Args:
        forward: Callable (x, params) -> (output, backprop) where
            backprop(g) returns (dx, {name: grad})
        x: Module input
        params: Named parameter tensors
        eps: Finite-difference step
        seed: Seed for the cotangent and for element sampling
        max_elements: Per-tensor element sampling cap

    Returns:
        Max relative error over the input and every named parameter
    """
    names = list(params)

    def op(x_: np.ndarray, *values: np.ndarray) -> Tuple[np.ndarray, GradRecord]:
        out, backprop = forward(x_, dict(zip(names, values)))

        def backward_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
            dx, grads = backprop(g)
            return (dx, *(grads.get(name) for name in names))

        return out, GradRecord("composite", (x_, *values), out, backward_fn)

    return grad_check(op, [x, *(params[n] for n in names)], eps=eps, seed=seed, max_elements=max_elements)


def assert_finite(name: str, *tensors: np.ndarray) -> None:
    """Raise ValueError when any tensor holds a NaN or infinity"""
    for t in tensors:
        if not np.all(np.isfinite(t)):
            raise ValueError(f"{name}: non-finite values in tensor of shape {list(t.shape)}")


def format_tensor_dump(t: Tensor) -> str:
    """
    Render a tensor in the golden-test text format

    Args:
        t: Tensor to render

    Returns:
        ``shape: d0 d1 ...`` followed by one 17-significant-digit value per line
    """
    header = "shape:" + "".join(f" {d}" for d in t.shape)
    values = [format(float(v), ".17g") for v in np.asarray(t).reshape(-1)]
    return "\n".join([header, *values]) + "\n"


def dump_tensor(t: Tensor, path: Union[str, Path]) -> None:
    """Write a tensor dump to ``path``"""
    Path(path).write_text(format_tensor_dump(t))


def load_tensor_dump(path: Union[str, Path], precision: Precision = Precision.FLOAT64) -> Tensor:
    """
    Read a tensor dump written by dump_tensor

    Args:
        path: Dump file
        precision: Precision of the returned tensor

    Returns:
        Tensor with the recorded shape
    """
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("shape:"):
        raise ValueError(f"{path}: missing 'shape:' header")
    shape: List[int] = [int(d) for d in lines[0][len("shape:"):].split()]
    values = [float(v) for v in lines[1:] if v.strip()]
    if int(np.prod(shape)) != len(values):
        raise ShapeError(f"{path}: value count {len(values)} does not match header", shape)
    return as_tensor(np.array(values).reshape(shape), precision)
