"""
Early-Exit Engine - Numeric Kernel

Dense float64 tensors with define-by-run reverse-mode gradients. Every
operation records a closure mapping its output gradient to its inputs'
gradients; `Graph` orders the recorded nodes and replays them backwards.
Under `no_grad()` nothing is recorded, which is the inference fast path.

Matrix products go through `matmul`, which also feeds the
multiply-accumulate counter opened with `count_macs()`.
"""

import contextlib
import contextvars
import math
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import ADAM_BETAS, ADAM_EPSILON, NORM_EPSILON
from models.errors import ConnectivityError, DimensionError, LabelError


_grad_enabled: contextvars.ContextVar = contextvars.ContextVar("grad_enabled", default=True)
_active_counter: contextvars.ContextVar = contextvars.ContextVar("active_counter", default=None)
_active_category: contextvars.ContextVar = contextvars.ContextVar("active_category", default=None)

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


# =============================================================================
# Tensor & graph
# =============================================================================

class Tensor:
    """
    A float64 array plus the bookkeeping needed to differentiate through it.

    Leaves created with requires_grad=True are parameters; interior nodes
    keep their parents and a backward closure until the graph is released.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[BackwardFn] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        Graph(self).backward()

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Wrap an array as a trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Create an op result, recording it only when some parent needs a gradient."""
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


class Graph:
    """
    The recorded operations reachable from one output, in topological order.

    `nodes` lists parents before children; `order` maps a node's id to its
    position. Backward walks `nodes` in reverse, visiting each node once.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.order: Dict[int, int] = {id(n): i for i, n in enumerate(self.nodes)}

    def contains(self, tensor: Tensor) -> bool:
        return id(tensor) in self.order

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        grads: Dict[int, np.ndarray] = {
            id(self.output): np.ones_like(self.output.data) if seed is None else seed
        }
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def grad_of(loss: Tensor, params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """
    Gradients of a scalar loss with respect to every named parameter.

    Raises:
        ConnectivityError: a parameter does not take part in the loss
    """
    if loss.data.size != 1:
        raise DimensionError(f"loss must be a scalar, got shape {loss.shape}")
    graph = Graph(loss)
    for name, param in params.items():
        if not graph.contains(param):
            raise ConnectivityError(f"parameter '{name}' is not connected to the loss")
    for param in params.values():
        param.grad = None
    graph.backward()
    return {name: param.grad for name, param in params.items()}


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


# =============================================================================
# Multiply-accumulate counter
# =============================================================================

class MacCounter:
    """Multiply-accumulates executed by `matmul`, bucketed by tally category."""

    def __init__(self):
        self.counts: Dict[str, int] = {}

    def add(self, category: str, macs: int) -> None:
        self.counts[category] = self.counts.get(category, 0) + macs

    def __getitem__(self, category: str) -> int:
        return self.counts.get(category, 0)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


@contextlib.contextmanager
def tally(category: Optional[str]) -> Iterator[None]:
    """Attribute matmuls inside the block to `category` (None: not counted)."""
    token = _active_category.set(category)
    try:
        yield
    finally:
        _active_category.reset(token)


def _count_macs(macs: int) -> None:
    counter = _active_counter.get()
    if counter is None:
        return
    category = _active_category.get()
    if category is not None:
        counter.add(category, macs)


# =============================================================================
# Elementwise ops
# =============================================================================

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record_op(a.data * b.data, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return record_op(-x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record_op(out, (x,), lambda g: (g * out,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(x.data)
    return record_op(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    return record_op(out, (x,), lambda g: (g * _sigmoid(x.data),))


# =============================================================================
# Structural ops
# =============================================================================

def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape
    return record_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def permute(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return record_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is true; those entries get no gradient."""
    keep = ~mask
    return record_op(np.where(mask, value, x.data), (x,), lambda g: (g * keep,))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return record_op(table.data[ids], (table,), backward)


def sum_all(x: Tensor) -> Tensor:
    return record_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return record_op(np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


# =============================================================================
# Linear algebra
# =============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    `b` is either a 2-D weight shared across the leading axes of `a`, or a
    tensor with the same leading axes as `a`. Executed multiply-accumulates
    are reported to the active counter.

    Raises:
        DimensionError: inner dimensions or batch axes do not line up
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"batch axes differ: {a.shape} by {b.shape}")

    out = a.data @ b.data
    inner = a.shape[-1]
    _count_macs(out.size * inner)

    def backward(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            grad_b = a.data.reshape(-1, inner).T @ g.reshape(-1, b.shape[-1])
        else:
            grad_b = np.swapaxes(a.data, -1, -2) @ g
        return grad_a, grad_b

    return record_op(out, (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record_op(y, (x,), backward)


def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def rms_norm(x: Tensor, gain: Tensor, eps: float = NORM_EPSILON) -> Tensor:
    """
    Scale each last-axis vector to unit root-mean-square, then apply `gain`.

    The divisor is max(rms, eps), so a zero vector maps to zero.
    """
    d = x.shape[-1]
    rms = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True))
    denom = np.maximum(rms, eps)
    x_hat = x.data / denom
    out = x_hat * gain.data

    def backward(g):
        grad_gain = _unbroadcast(g * x_hat, gain.shape)
        g_hat = g * gain.data
        proj = (g_hat * x_hat).sum(axis=-1, keepdims=True) / d
        grad_x = np.where(rms > eps, (g_hat - x_hat * proj) / denom, g_hat / denom)
        return grad_x, grad_gain

    return record_op(out, (x, gain), backward)


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """
    Mean negative log-softmax probability of the target class.

    Raises:
        LabelError: a target lies outside [0, classes)
    """
    targets = np.asarray(targets, dtype=np.int64)
    classes = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise LabelError(f"labels must lie in [0, {classes}), got range "
                         f"[{targets.min()}, {targets.max()}]")

    flat = logits.data.reshape(-1, classes)
    n = flat.shape[0]
    rows = np.arange(n)
    index = targets.reshape(-1)
    log_probs = log_softmax_array(flat)
    loss = -log_probs[rows, index].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, index] -= 1.0
        return ((g * grad / n).reshape(logits.shape),)

    return record_op(np.asarray(loss), (logits,), backward)


# =============================================================================
# Optimizer
# =============================================================================

class Adam:
    """Stochastic gradient descent with bias-corrected adaptive moments."""

    def __init__(self, params: Dict[str, Tensor], learning_rate: float,
                 betas: Tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPSILON):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, param in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            param.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    """Rescale gradients in place to a global L2 norm of at most `max_norm`."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for name, g in grads.items():
            if g is not None:
                grads[name] = g * scale
    return total
