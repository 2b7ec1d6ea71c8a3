"""
Dense-array numeric core with reverse-mode gradients.

Every node records the primitive that produced it and its parents, so a scalar
loss can be differentiated back to every node that requires a gradient:

>>> x = TensorNode([1.0, -2.0], requires_grad=True)
>>> loss = sum_(x * x)
>>> loss.backward()
>>> x.grad
array([ 2., -4.])
"""

import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from errors import ContractError, CorruptDatasetError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "params.f64le"


class PrimitiveKind(Enum):
    MATMUL = "matmul"
    CONV1D = "conv1d"
    ADD = "add"
    MUL = "mul"
    MEAN = "mean"
    SUM = "sum"
    RELU = "relu"
    GELU = "gelu"
    SILU = "silu"
    SOFTMAX = "softmax"
    LOG_SOFTMAX = "log_softmax"
    L2_NORMALIZE = "l2_normalize"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    CONCAT = "concat"
    SLICE = "slice"
    SCALE = "scale"
    EXP = "exp"
    LOG = "log"


class TensorNode:
    """
    A float64 array that remembers how it was computed.

    Attributes:
        values: the array (always float64)
        grad: accumulated gradient of the last backward calls, same shape as values
        kind: primitive that produced this node (None for leaves)
        parents: input nodes of that primitive
        attrs: primitive parameters (axis, stride, ...)
        requires_grad: whether backward propagates into this node
        name: optional label, used by checkpoints and error messages
    """

    __array_priority__ = 100

    def __init__(self, values: ArrayLike, requires_grad: bool = False, kind: Optional[PrimitiveKind] = None,
                 parents: Tuple["TensorNode", ...] = (), attrs: Optional[dict] = None, name: Optional[str] = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.kind = kind
        self.parents = parents
        self.attrs = attrs or {}
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(as_node(other), -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        label = self.kind.value if self.kind is not None else "leaf"
        return f"TensorNode({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def topological_order(self) -> List["TensorNode"]:
        """Returns every node reachable from this one, parents before children."""
        order: List[TensorNode] = []
        visited = set()
        # Iterative DFS; model graphs are deep enough to hit the recursion limit.
        stack: List[Tuple[TensorNode, bool]] = [(self, False)]
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

    def backward(self) -> None:
        """
        Reverse-mode differentiation from this scalar node.

        Gradients are added to `grad` of every node that requires one, so two calls
        without zeroing accumulate; training loops zero gradients before each step.
        """
        if self.values.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        order = self.topological_order()
        local: Dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            upstream = local.get(id(node))
            if upstream is None or node.kind is None:
                continue
            parent_values = [p.values for p in node.parents]
            parent_grads = _GRADIENT_RULES[node.kind](upstream, node.values, parent_values, node.attrs)
            for parent, parent_grad in zip(node.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if id(parent) in local:
                    local[id(parent)] = local[id(parent)] + parent_grad
                else:
                    local[id(parent)] = parent_grad
        for node in order:
            if node.requires_grad and id(node) in local:
                node.grad = node.grad + local[id(node)]


def as_node(x: Union[TensorNode, ArrayLike]) -> TensorNode:
    """Wraps constants; nodes pass through unchanged."""
    if isinstance(x, TensorNode):
        return x
    return TensorNode(x)


def parameter(values: ArrayLike, name: Optional[str] = None) -> TensorNode:
    return TensorNode(values, requires_grad=True, name=name)


_FORWARD_RULES: Dict[PrimitiveKind, Callable[..., np.ndarray]] = {}
_GRADIENT_RULES: Dict[PrimitiveKind, Callable[..., List[Optional[np.ndarray]]]] = {}


def forward_rule(kind: PrimitiveKind):
    def register(fn):
        _FORWARD_RULES[kind] = fn
        return fn
    return register


def gradient_rule(kind: PrimitiveKind):
    def register(fn):
        _GRADIENT_RULES[kind] = fn
        return fn
    return register


def forward(kind: PrimitiveKind, inputs: Sequence[Union[TensorNode, ArrayLike]], **params) -> TensorNode:
    """Applies a primitive and records it in the graph."""
    nodes = tuple(as_node(x) for x in inputs)
    values = _FORWARD_RULES[kind]([n.values for n in nodes], params)
    requires_grad = any(n.requires_grad for n in nodes)
    return TensorNode(values, requires_grad=requires_grad, kind=kind, parents=nodes, attrs=params)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(kind: PrimitiveKind, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind.value}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# Elementwise arithmetic.

@forward_rule(PrimitiveKind.ADD)
def _add_forward(xs, attrs):
    _check_broadcast(PrimitiveKind.ADD, xs[0], xs[1])
    return xs[0] + xs[1]


@gradient_rule(PrimitiveKind.ADD)
def _add_gradient(g, out, xs, attrs):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


@forward_rule(PrimitiveKind.MUL)
def _mul_forward(xs, attrs):
    _check_broadcast(PrimitiveKind.MUL, xs[0], xs[1])
    return xs[0] * xs[1]


@gradient_rule(PrimitiveKind.MUL)
def _mul_gradient(g, out, xs, attrs):
    return [_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)]


@forward_rule(PrimitiveKind.SCALE)
def _scale_forward(xs, attrs):
    return xs[0] * attrs["factor"]


@gradient_rule(PrimitiveKind.SCALE)
def _scale_gradient(g, out, xs, attrs):
    return [g * attrs["factor"]]


@forward_rule(PrimitiveKind.EXP)
def _exp_forward(xs, attrs):
    with np.errstate(over="ignore"):
        return np.exp(xs[0])


@gradient_rule(PrimitiveKind.EXP)
def _exp_gradient(g, out, xs, attrs):
    return [g * out]


@forward_rule(PrimitiveKind.LOG)
def _log_forward(xs, attrs):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(xs[0])


@gradient_rule(PrimitiveKind.LOG)
def _log_gradient(g, out, xs, attrs):
    return [g / xs[0]]


# Activations.

@forward_rule(PrimitiveKind.RELU)
def _relu_forward(xs, attrs):
    return np.maximum(xs[0], 0.0)


@gradient_rule(PrimitiveKind.RELU)
def _relu_gradient(g, out, xs, attrs):
    return [g * (xs[0] > 0)]


def _gaussian_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


@forward_rule(PrimitiveKind.GELU)
def _gelu_forward(xs, attrs):
    return xs[0] * _gaussian_cdf(xs[0])


@gradient_rule(PrimitiveKind.GELU)
def _gelu_gradient(g, out, xs, attrs):
    x = xs[0]
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return [g * (_gaussian_cdf(x) + x * pdf)]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


@forward_rule(PrimitiveKind.SILU)
def _silu_forward(xs, attrs):
    return xs[0] * _sigmoid(xs[0])


@gradient_rule(PrimitiveKind.SILU)
def _silu_gradient(g, out, xs, attrs):
    s = _sigmoid(xs[0])
    return [g * (s + xs[0] * s * (1.0 - s))]


# Reductions and normalizations.

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _reduced_count(shape: Tuple[int, ...], axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[a] for a in axes]))


@forward_rule(PrimitiveKind.SUM)
def _sum_forward(xs, attrs):
    return np.sum(xs[0], axis=attrs["axis"], keepdims=attrs["keepdims"])


@gradient_rule(PrimitiveKind.SUM)
def _sum_gradient(g, out, xs, attrs):
    return [np.array(_expand_reduced(g, xs[0].shape, attrs["axis"], attrs["keepdims"]))]


@forward_rule(PrimitiveKind.MEAN)
def _mean_forward(xs, attrs):
    return np.mean(xs[0], axis=attrs["axis"], keepdims=attrs["keepdims"])


@gradient_rule(PrimitiveKind.MEAN)
def _mean_gradient(g, out, xs, attrs):
    count = _reduced_count(xs[0].shape, attrs["axis"])
    return [np.array(_expand_reduced(g, xs[0].shape, attrs["axis"], attrs["keepdims"])) / count]


@forward_rule(PrimitiveKind.SOFTMAX)
def _softmax_forward(xs, attrs):
    axis = attrs["axis"]
    shifted = xs[0] - np.max(xs[0], axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


@gradient_rule(PrimitiveKind.SOFTMAX)
def _softmax_gradient(g, out, xs, attrs):
    axis = attrs["axis"]
    return [out * (g - np.sum(g * out, axis=axis, keepdims=True))]


@forward_rule(PrimitiveKind.LOG_SOFTMAX)
def _log_softmax_forward(xs, attrs):
    axis = attrs["axis"]
    shifted = xs[0] - np.max(xs[0], axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


@gradient_rule(PrimitiveKind.LOG_SOFTMAX)
def _log_softmax_gradient(g, out, xs, attrs):
    axis = attrs["axis"]
    return [g - np.exp(out) * np.sum(g, axis=axis, keepdims=True)]


@forward_rule(PrimitiveKind.L2_NORMALIZE)
def _l2_normalize_forward(xs, attrs):
    norm = np.sqrt(np.sum(xs[0] * xs[0], axis=attrs["axis"], keepdims=True))
    # Zero vectors stay zero.
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, xs[0] / safe, 0.0)


@gradient_rule(PrimitiveKind.L2_NORMALIZE)
def _l2_normalize_gradient(g, out, xs, attrs):
    axis = attrs["axis"]
    norm = np.sqrt(np.sum(xs[0] * xs[0], axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    grad = (g - out * np.sum(g * out, axis=axis, keepdims=True)) / safe
    return [np.where(norm > 0, grad, 0.0)]


# Linear algebra.

@forward_rule(PrimitiveKind.MATMUL)
def _matmul_forward(xs, attrs):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    return np.matmul(a, b)


@gradient_rule(PrimitiveKind.MATMUL)
def _matmul_gradient(g, out, xs, attrs):
    a, b = xs
    grad_a = np.matmul(g, np.swapaxes(b, -1, -2))
    grad_b = np.matmul(np.swapaxes(a, -1, -2), g)
    return [_unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)]


def _conv_padding(kernel: int, padding) -> int:
    if padding == "same":
        return kernel // 2
    return int(padding)


def _conv_windows(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Strided view [..., C_in, T_out, K] of the zero-padded input."""
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    padded = np.pad(x, widths)
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=-1)
    return windows[..., ::stride, :]


@forward_rule(PrimitiveKind.CONV1D)
def _conv1d_forward(xs, attrs):
    x, w = xs
    if w.ndim != 3 or x.ndim < 2 or x.shape[-2] != w.shape[1]:
        raise ShapeError(f"conv1d: input shape {x.shape} does not match kernel shape {w.shape}")
    kernel = w.shape[2]
    pad = _conv_padding(kernel, attrs["padding"])
    if x.shape[-1] + 2 * pad < kernel:
        raise ShapeError(f"conv1d: input shape {x.shape} shorter than kernel shape {w.shape}")
    # Leading dims are flattened into one batch axis.
    x3 = x.reshape((-1,) + x.shape[-2:])
    windows = _conv_windows(x3, kernel, attrs["stride"], pad)
    # [B, C_in, T_out, K] x [C_out, C_in, K] -> [B, C_out, T_out]
    out = np.einsum("bctk,ock->bot", windows, w, optimize=True)
    return out.reshape(x.shape[:-2] + out.shape[-2:])


@gradient_rule(PrimitiveKind.CONV1D)
def _conv1d_gradient(g, out, xs, attrs):
    x, w = xs
    kernel = w.shape[2]
    stride = attrs["stride"]
    pad = _conv_padding(kernel, attrs["padding"])
    x3 = x.reshape((-1,) + x.shape[-2:])
    g3 = g.reshape((-1,) + g.shape[-2:])
    windows = _conv_windows(x3, kernel, stride, pad)
    grad_w = np.einsum("bot,bctk->ock", g3, windows, optimize=True)
    t_out = g3.shape[-1]
    grad_padded = np.zeros(x3.shape[:-1] + (x3.shape[-1] + 2 * pad,))
    for k in range(kernel):
        stop = k + stride * (t_out - 1) + 1
        grad_padded[:, :, k:stop:stride] += np.einsum("oc,bot->bct", w[:, :, k], g3, optimize=True)
    grad_x = grad_padded[:, :, pad:pad + x3.shape[-1]].reshape(x.shape)
    return [grad_x, grad_w]


# Shape manipulation.

@forward_rule(PrimitiveKind.TRANSPOSE)
def _transpose_forward(xs, attrs):
    return np.transpose(xs[0], attrs["axes"])


@gradient_rule(PrimitiveKind.TRANSPOSE)
def _transpose_gradient(g, out, xs, attrs):
    axes = attrs["axes"]
    if axes is None:
        return [np.transpose(g)]
    return [np.transpose(g, np.argsort(axes))]


@forward_rule(PrimitiveKind.RESHAPE)
def _reshape_forward(xs, attrs):
    try:
        return np.reshape(xs[0], attrs["shape"])
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {xs[0].shape} to {attrs['shape']}") from None


@gradient_rule(PrimitiveKind.RESHAPE)
def _reshape_gradient(g, out, xs, attrs):
    return [np.reshape(g, xs[0].shape)]


@forward_rule(PrimitiveKind.CONCAT)
def _concat_forward(xs, attrs):
    try:
        return np.concatenate(xs, axis=attrs["axis"])
    except ValueError:
        shapes = ", ".join(str(x.shape) for x in xs)
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {attrs['axis']}") from None


@gradient_rule(PrimitiveKind.CONCAT)
def _concat_gradient(g, out, xs, attrs):
    bounds = np.cumsum([x.shape[attrs["axis"]] for x in xs])[:-1]
    return list(np.split(g, bounds, axis=attrs["axis"]))


@forward_rule(PrimitiveKind.SLICE)
def _slice_forward(xs, attrs):
    return np.array(xs[0][attrs["key"]])


@gradient_rule(PrimitiveKind.SLICE)
def _slice_gradient(g, out, xs, attrs):
    # Basic indexing only, so no index repeats.
    grad = np.zeros_like(xs[0])
    grad[attrs["key"]] += g
    return [grad]


# Functional API.

def add(a, b) -> TensorNode:
    return forward(PrimitiveKind.ADD, [a, b])


def mul(a, b) -> TensorNode:
    return forward(PrimitiveKind.MUL, [a, b])


def scale(x, factor: float) -> TensorNode:
    return forward(PrimitiveKind.SCALE, [x], factor=float(factor))


def exp(x) -> TensorNode:
    return forward(PrimitiveKind.EXP, [x])


def log(x) -> TensorNode:
    return forward(PrimitiveKind.LOG, [x])


def relu(x) -> TensorNode:
    return forward(PrimitiveKind.RELU, [x])


def gelu(x) -> TensorNode:
    """Exact GELU, x * Phi(x)."""
    return forward(PrimitiveKind.GELU, [x])


def silu(x) -> TensorNode:
    return forward(PrimitiveKind.SILU, [x])


def sum_(x, axis=None, keepdims: bool = False) -> TensorNode:
    return forward(PrimitiveKind.SUM, [x], axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> TensorNode:
    return forward(PrimitiveKind.MEAN, [x], axis=axis, keepdims=keepdims)


def softmax(x, axis: int = -1) -> TensorNode:
    return forward(PrimitiveKind.SOFTMAX, [x], axis=axis)


def log_softmax(x, axis: int = -1) -> TensorNode:
    return forward(PrimitiveKind.LOG_SOFTMAX, [x], axis=axis)


def l2_normalize(x, axis: int = -1) -> TensorNode:
    return forward(PrimitiveKind.L2_NORMALIZE, [x], axis=axis)


def matmul(a, b) -> TensorNode:
    return forward(PrimitiveKind.MATMUL, [a, b])


def conv1d(x, w, stride: int = 1, padding: Union[int, str] = 0) -> TensorNode:
    """Cross-correlation of x [..., C_in, T] with w [C_out, C_in, K]."""
    return forward(PrimitiveKind.CONV1D, [x, w], stride=int(stride), padding=padding)


def transpose(x, axes: Optional[Tuple[int, ...]] = None) -> TensorNode:
    return forward(PrimitiveKind.TRANSPOSE, [x], axes=None if axes is None else tuple(axes))


def reshape(x, shape: Tuple[int, ...]) -> TensorNode:
    return forward(PrimitiveKind.RESHAPE, [x], shape=tuple(shape))


def concat(xs: Sequence, axis: int = 0) -> TensorNode:
    return forward(PrimitiveKind.CONCAT, list(xs), axis=axis)


def slice_(x, key) -> TensorNode:
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, slice, type(Ellipsis))):
            raise ContractError(f"slice supports basic indexing only, got {type(k).__name__}")
    return forward(PrimitiveKind.SLICE, [x], key=key)


def zero_grad(nodes: Sequence[TensorNode]) -> None:
    for node in nodes:
        node.zero_grad()


def all_finite(nodes: Sequence[TensorNode]) -> bool:
    return all(np.all(np.isfinite(n.values)) and np.all(np.isfinite(n.grad)) for n in nodes)


# Gradient verification.

def _relative_error(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _finite_diff_nodes(loss_fn: Callable[[], TensorNode], nodes: Sequence[TensorNode], eps: float,
                       max_checks: Optional[int], seed: int, floor: float) -> float:
    zero_grad(nodes)
    loss_fn().backward()
    analytic = [n.grad.copy() for n in nodes]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for node, grad in zip(nodes, analytic):
        flat = node.values.reshape(-1)
        indices = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            indices = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            f_plus = loss_fn().item()
            flat[i] = original - eps
            f_minus = loss_fn().item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            worst = max(worst, _relative_error(numeric, grad.reshape(-1)[i], floor))
    return worst


def finite_diff_check(f: Callable[..., TensorNode], point: Union[ArrayLike, Sequence[np.ndarray]],
                      eps: float = 1e-5, max_checks: Optional[int] = None, seed: int = 0,
                      denominator_floor: float = 1e-8) -> float:
    """
    Compares backward's gradient with central differences at `point`.

    `point` is one array (f gets one leaf) or a list/tuple of arrays (f gets one
    leaf per array); `f` returns a scalar node. Returns the max relative error
    |a - b| / max(|a|, |b|, denominator_floor). Non-differentiable points
    (relu at exactly 0) are the caller's to avoid.
    """
    if isinstance(point, (list, tuple)):
        arrays = [np.array(p, dtype=np.float64) for p in point]
    else:
        arrays = [np.array(point, dtype=np.float64)]
    leaves = [TensorNode(a, requires_grad=True) for a in arrays]
    return _finite_diff_nodes(lambda: f(*leaves), leaves, eps, max_checks, seed, denominator_floor)


def finite_diff_check_nodes(loss_fn: Callable[[], TensorNode], nodes: Sequence[TensorNode], eps: float = 1e-5,
                            max_checks: Optional[int] = None, seed: int = 0,
                            denominator_floor: float = 1e-8) -> float:
    """Same check, perturbing existing parameter nodes in place (restored afterwards)."""
    return _finite_diff_nodes(loss_fn, nodes, eps, max_checks, seed, denominator_floor)


# Checkpoints.

def save_arrays(named: Sequence[Tuple[str, TensorNode]], path: Union[str, Path],
                metadata: Optional[dict] = None) -> None:
    """Writes named arrays as a JSON manifest plus one little-endian float64 blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, node in named:
        values = np.asarray(node.values, dtype="<f8")
        entries.append({"name": name, "shape": list(values.shape), "offset": offset})
        offset += values.size
        chunks.append(np.ascontiguousarray(values.reshape(-1)).tobytes())
    manifest = {"format_version": 1, "tensors": entries, "metadata": metadata or {}}
    (path / CHECKPOINT_BLOB).write_bytes(b"".join(chunks))
    (path / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2))
    logger.info("Checkpoint: wrote %d arrays (%d values) to %s", len(entries), offset, path)


def load_arrays(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    """Reads a checkpoint written by save_arrays; returns (name -> array, metadata)."""
    path = Path(path)
    manifest = json.loads((path / CHECKPOINT_MANIFEST).read_text())
    blob = np.frombuffer((path / CHECKPOINT_BLOB).read_bytes(), dtype="<f8")
    arrays = {}
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"]))
        start = entry["offset"]
        if start + size > blob.size:
            raise CorruptDatasetError(f"checkpoint blob too short for tensor {entry['name']}")
        arrays[entry["name"]] = blob[start:start + size].reshape(entry["shape"]).astype(np.float64)
    return arrays, manifest.get("metadata", {})
