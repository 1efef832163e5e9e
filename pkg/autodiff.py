"""
Dense float64 computation graph with reverse-mode gradients.

Ops evaluate eagerly when they are built, so every node's values are computed
exactly once. ``backprop`` walks the recorded graph in reverse topological
order and accumulates into the ``grad`` field of every node it reaches.

Also home to the parameter store, the Adam optimizer, the checkpoint format
and the finite-difference gradient checker.
"""

from __future__ import annotations

import enum
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, FormGraphError, InvalidInputError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64
GELU_C = math.sqrt(2.0 / math.pi)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


class OpKind(str, enum.Enum):
    LEAF = "leaf"
    MATMUL = "matmul"
    ADD = "add"
    SUBTRACT = "subtract"
    MULTIPLY = "multiply"
    DIVIDE = "divide"
    NEGATE = "negate"
    POWER = "power"
    CONCAT = "concat"
    SLICE = "slice"
    EMBEDDING = "embedding-lookup"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    SIGMOID = "sigmoid"
    LOG_SIGMOID = "log-sigmoid"
    LOG = "natural-log"
    EXP = "exponential"
    RELU = "relu"
    GELU = "gelu"
    LAYER_NORM = "layer-norm"
    MASKED_SOFTMAX = "masked-softmax"
    CROSS_ENTROPY = "cross-entropy-with-logits"
    REDUCE_SUM = "reduce-sum"
    REDUCE_MEAN = "reduce-mean"
    AFFINE = "affine"
    SQUARED_ERROR = "squared-error"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """One node of the computation graph."""

    __slots__ = ("values", "grad", "op", "parents", "_backward", "name")
    # numpy must hand mixed array/Tensor arithmetic back to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(
        self,
        values: Any,
        op: OpKind = OpKind.LEAF,
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[BackwardFn] = None,
        name: str = "",
    ):
        self.values = np.array(values, dtype=DTYPE)
        self.grad = np.zeros_like(self.values)
        self.op = op
        self.parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op.value})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return subtract(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return subtract(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return multiply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return multiply(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return divide(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return divide(other, self)

    def __neg__(self) -> "Tensor":
        return negate(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return slice_(self, index)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value: Any, name: str = "") -> Tensor:
    return Tensor(value, name=name)


def evaluate(node: Tensor) -> np.ndarray:
    """Values of a node. Forward work already happened when the node was built."""
    return node.values


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------
def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: OpKind, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op.value, a.shape, b.shape) from None


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function on plain arrays."""
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def log_sigmoid_values(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -np.asarray(x, dtype=DTYPE))


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(OpKind.ADD, a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.values + b.values, OpKind.ADD, (a, b), backward)


def subtract(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(OpKind.SUBTRACT, a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(a.values - b.values, OpKind.SUBTRACT, (a, b), backward)


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(OpKind.MULTIPLY, a, b)

    def backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return Tensor(a.values * b.values, OpKind.MULTIPLY, (a, b), backward)


def divide(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(OpKind.DIVIDE, a, b)
    out = a.values / b.values

    def backward(g):
        ga = _unbroadcast(g / b.values, a.shape)
        gb = _unbroadcast(-g * out / b.values, b.shape)
        return ga, gb

    return Tensor(out, OpKind.DIVIDE, (a, b), backward)


def negate(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.values, OpKind.NEGATE, (a,), lambda g: (-g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * np.power(a.values, exponent - 1.0),)

    return Tensor(np.power(a.values, exponent), OpKind.POWER, (a,), backward)


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.values * a.values, OpKind.POWER, (a,), lambda g: (2.0 * a.values * g,))


# ---------------------------------------------------------------------------
# Linear algebra and structure
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(OpKind.MATMUL.value, a.shape, b.shape)

    def backward(g):
        return g @ b.values.T, a.values.T @ g

    return Tensor(a.values @ b.values, OpKind.MATMUL, (a, b), backward)


def affine(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """weight·x + bias applied row-wise: x [n×i], weight [i×o], bias [o]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.values.ndim != 2 or weight.values.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(OpKind.AFFINE.value, x.shape, weight.shape)
    out = x.values @ weight.values
    parents: Tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(OpKind.AFFINE.value, weight.shape, bias.shape, "bias")
        out = out + bias.values
        parents = (x, weight, bias)

    def backward(g):
        grads = [g @ weight.values.T, x.values.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor(out, OpKind.AFFINE, parents, backward)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError(OpKind.TRANSPOSE.value, a.shape)
    return Tensor(a.values.T, OpKind.TRANSPOSE, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(OpKind.RESHAPE.value, a.shape, shape) from None
    return Tensor(out, OpKind.RESHAPE, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(OpKind.CONCAT.value, tensors[0].shape, tensors[-1].shape) from None
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))]

    return Tensor(out, OpKind.CONCAT, tuple(tensors), backward)


def slice_(a: Tensor, index: Any) -> Tensor:
    a = as_tensor(a)
    out = a.values[index]

    def backward(g):
        full = np.zeros_like(a.values)
        np.add.at(full, index, g)
        return (full,)

    return Tensor(out, OpKind.SLICE, (a,), backward)


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row gather; embedding lookup when ``table`` is an embedding matrix."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.values.ndim != 2:
        raise ShapeError(OpKind.EMBEDDING.value, table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InvalidInputError(f"row id out of range [0, {table.shape[0]}): {ids.min()}..{ids.max()}")

    def backward(g):
        full = np.zeros_like(table.values)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor(table.values[ids], OpKind.EMBEDDING, (table,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------
def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = sigmoid_values(a.values)
    return Tensor(out, OpKind.SIGMOID, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: ArrayLike) -> Tensor:
    """ln σ(a) without the saturation loss of log(sigmoid(a))."""
    a = as_tensor(a)
    return Tensor(
        log_sigmoid_values(a.values), OpKind.LOG_SIGMOID, (a,), lambda g: (g * sigmoid_values(-a.values),)
    )


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.values), OpKind.LOG, (a,), lambda g: (g / a.values,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return Tensor(out, OpKind.EXP, (a,), lambda g: (g * out,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    on = (a.values > 0).astype(DTYPE)
    return Tensor(a.values * on, OpKind.RELU, (a,), lambda g: (g * on,))


def gelu(a: ArrayLike) -> Tensor:
    """tanh form of GELU."""
    a = as_tensor(a)
    x = a.values
    inner = GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return Tensor(out, OpKind.GELU, (a,), backward)


def layer_norm(a: ArrayLike, eps: float = 1e-12) -> Tensor:
    """Per-row normalization to mean 0 / variance 1; scale and shift are applied by the caller."""
    a = as_tensor(a)
    x = a.values
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out = centered * inv_std

    def backward(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * out).mean(axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - out * gx_mean),)

    return Tensor(out, OpKind.LAYER_NORM, (a,), backward)


def masked_softmax(a: ArrayLike, mask: np.ndarray) -> Tensor:
    """
    Softmax over the last axis restricted to ``mask``.
    Disallowed entries get exactly zero weight and zero gradient; an all-masked row is all zeros.
    """
    a = as_tensor(a)
    try:
        allowed = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    except ValueError:
        raise ShapeError(OpKind.MASKED_SOFTMAX.value, a.shape, np.shape(mask)) from None
    z = np.where(allowed, a.values, -np.inf)
    row_max = z.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(allowed, np.exp(z - row_max), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, total, out=np.zeros_like(e), where=total > 0)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor(out, OpKind.MASKED_SOFTMAX, (a,), backward)


# ---------------------------------------------------------------------------
# Reductions and losses
# ---------------------------------------------------------------------------
def reduce_sum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=axis is not None)

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out, OpKind.REDUCE_SUM, (a,), backward)


def reduce_mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.values.size if axis is None else a.shape[axis]
    out = a.values.mean(axis=axis, keepdims=axis is not None)

    def backward(g):
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor(out, OpKind.REDUCE_MEAN, (a,), backward)


def squared_error(prediction: ArrayLike, target: ArrayLike) -> Tensor:
    """Σ (prediction − target)²."""
    p, t = as_tensor(prediction), as_tensor(target)
    if p.shape != t.shape:
        raise ShapeError(OpKind.SQUARED_ERROR.value, p.shape, t.shape)
    diff = p.values - t.values

    def backward(g):
        return 2.0 * diff * g, -2.0 * diff * g

    return Tensor(np.sum(diff * diff), OpKind.SQUARED_ERROR, (p, t), backward)


def cross_entropy_with_logits(
    logits: ArrayLike, targets: Sequence[int], weights: Optional[Sequence[float]] = None
) -> Tensor:
    """
    Weighted mean of per-row softmax cross-entropy.
    Rows with zero weight do not contribute; zero total weight gives a loss of exactly 0.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.values.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(OpKind.CROSS_ENTROPY.value, logits.shape, targets.shape)
    n, k = logits.shape
    if n and (targets.min() < 0 or targets.max() >= k):
        raise InvalidInputError(f"target class out of range [0, {k})")
    w = np.ones(n, dtype=DTYPE) if weights is None else np.asarray(weights, dtype=DTYPE)
    total = w.sum()
    x = logits.values
    row_max = x.max(axis=1, keepdims=True) if n else np.zeros((0, 1))
    shifted = x - row_max
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    per_row = log_z - shifted[rows, targets]
    loss = float((w * per_row).sum() / total) if total > 0 else 0.0

    def backward(g):
        if total <= 0:
            return (np.zeros_like(x),)
        probs = np.exp(shifted - log_z[:, None])
        probs[rows, targets] -= 1.0
        return (g * probs * (w / total)[:, None],)

    return Tensor(loss, OpKind.CROSS_ENTROPY, (logits,), backward)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------
def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backprop(loss: Tensor) -> None:
    """Accumulate ∂loss/∂node into ``grad`` of every node reachable from a scalar loss."""
    if loss.values.size != 1:
        raise ShapeError("backprop", loss.shape, detail="loss must be a scalar")
    upstream: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(_topological_order(loss)):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None:
                continue
            key = id(parent)
            upstream[key] = upstream[key] + pg if key in upstream else pg


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class InitSpec:
    kind: str  # "normal" | "zeros" | "ones" | "constant"
    std: float = 0.02
    value: float = 0.0


def truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class ParameterStore:
    """Named leaf tensors; names are unique and carry a module prefix ("gcn/", "etc/", "richattn/")."""

    def __init__(self) -> None:
        self._params: Dict[str, Tensor] = {}
        self.init_specs: Dict[str, InitSpec] = {}

    def create(
        self,
        name: str,
        shape: Tuple[int, ...],
        rng: Optional[np.random.Generator] = None,
        init: str = "normal",
        std: float = 0.02,
        value: float = 0.0,
    ) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name: {name}")
        spec = InitSpec(init, std, value)
        if init == "normal":
            if rng is None:
                raise ConfigError(f"parameter {name} needs a generator for normal init")
            values = truncated_normal(rng, shape, std)
        elif init == "zeros":
            values = np.zeros(shape)
        elif init == "ones":
            values = np.ones(shape)
        elif init == "constant":
            values = np.full(shape, value)
        else:
            raise ConfigError(f"unknown init kind {init!r} for {name}")
        tensor = Tensor(values, name=name)
        self._params[name] = tensor
        self.init_specs[name] = spec
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigError(f"unknown parameter: {name}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._params.items()

    def num_values(self) -> int:
        return int(sum(p.values.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self._params.items()}

    def load_state(self, arrays: Dict[str, np.ndarray], strict: bool = True, skip_prefixes: Sequence[str] = ()) -> List[str]:
        """Copy matching arrays into the store. Returns the names that were loaded."""
        loaded = []
        for name, p in self._params.items():
            if any(name.startswith(prefix) for prefix in skip_prefixes):
                continue
            if name not in arrays:
                if strict:
                    raise ConfigError(f"checkpoint has no parameter {name}")
                continue
            arr = arrays[name]
            if arr.shape != p.shape:
                raise ConfigError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.values = np.array(arr, dtype=DTYPE)
            p.zero_grad()
            loaded.append(name)
        return loaded


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------
class Adam:
    def __init__(self, store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {name: np.zeros_like(p.values) for name, p in store.items()}
        self.v: Dict[str, np.ndarray] = {name: np.zeros_like(p.values) for name, p in store.items()}

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for name, p in self.store.items():
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam/m/{name}"] = self.m[name]
            out[f"adam/v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], step: int) -> None:
        for name in self.m:
            m_key, v_key = f"adam/m/{name}", f"adam/v/{name}"
            if m_key not in arrays or v_key not in arrays:
                raise ConfigError(f"checkpoint has no optimizer state for {name}")
            self.m[name] = np.array(arrays[m_key], dtype=DTYPE)
            self.v[name] = np.array(arrays[v_key], dtype=DTYPE)
        self.step_count = int(step)


# ---------------------------------------------------------------------------
# Checkpoints: "<prefix>.manifest" (text) + "<prefix>.bin" (little-endian float64)
# ---------------------------------------------------------------------------
MANIFEST_SUFFIX = ".manifest"
PAYLOAD_SUFFIX = ".bin"


def save_checkpoint(prefix: str, arrays: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    lines = [f"#{key}={value}" for key, value in sorted((meta or {}).items())]
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name}\t{shape}\t{offset}")
        chunks.append(arr.tobytes())
        offset += arr.size
    with open(prefix + MANIFEST_SUFFIX, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(prefix + PAYLOAD_SUFFIX, "wb") as fh:
        fh.write(b"".join(chunks))
    logger.info("Wrote checkpoint %s (%d arrays, %d values)", prefix, len(arrays), offset)
    return prefix


def load_checkpoint(prefix: str) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    try:
        with open(prefix + MANIFEST_SUFFIX, encoding="utf-8") as fh:
            manifest = fh.read().splitlines()
        with open(prefix + PAYLOAD_SUFFIX, "rb") as fh:
            payload = fh.read()
    except OSError as e:
        logger.error("Could not read checkpoint %s: %s", prefix, e, exc_info=True)
        raise ConfigError(f"cannot read checkpoint {prefix}: {e}") from e
    meta: Dict[str, str] = {}
    arrays: Dict[str, np.ndarray] = {}
    for line in manifest:
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key] = value
            continue
        name, shape_text, offset_text = line.split("\t")
        shape = tuple(int(d) for d in shape_text.split(",")) if shape_text else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=int(offset_text) * 8)
        arrays[name] = arr.reshape(shape).astype(DTYPE)
    return arrays, meta


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------
def grad_check(
    loss_builder: Callable[[ParameterStore], Tensor],
    store: ParameterStore,
    eps: float = 1e-5,
    max_coords: int = 200,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-8,
) -> float:
    """
    Max relative error between backprop gradients and central differences.

    Stores larger than ``max_coords`` are sampled: half the sample comes from
    coordinates with a nonzero analytic gradient, the rest uniformly.
    """
    store.zero_grad()
    loss = loss_builder(store)
    if not np.all(np.isfinite(loss.values)):
        raise FormGraphError("grad_check: loss is not finite")
    backprop(loss)
    coords: List[Tuple[str, int]] = [(name, i) for name, p in store.items() for i in range(p.values.size)]
    if len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        nonzero = [c for c in coords if store[c[0]].grad.flat[c[1]] != 0.0]
        picked = set()
        if nonzero:
            for i in rng.choice(len(nonzero), size=min(len(nonzero), max_coords // 2), replace=False):
                picked.add(nonzero[int(i)])
        for i in rng.permutation(len(coords)):
            if len(picked) >= max_coords:
                break
            picked.add(coords[int(i)])
        coords = sorted(picked)
    analytic = {name: p.grad.copy() for name, p in store.items()}
    worst = 0.0
    for name, idx in coords:
        param = store[name]
        original = param.values.flat[idx]
        param.values.flat[idx] = original + eps
        plus = float(loss_builder(store).values)
        param.values.flat[idx] = original - eps
        minus = float(loss_builder(store).values)
        param.values.flat[idx] = original
        if not (math.isfinite(plus) and math.isfinite(minus)):
            raise FormGraphError(f"grad_check: loss not finite when perturbing {name}[{idx}]")
        numeric = (plus - minus) / (2.0 * eps)
        a = float(analytic[name].flat[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    logger.debug("grad_check over %d coordinates: max relative error %.3e", len(coords), worst)
    return worst
