"""Dense float64 arithmetic and the reverse-mode tape every trainable head uses.

Tensors are plain ``numpy.ndarray`` objects (float64, C order). Trainable
weights live in a ``ParameterStore``; a forward pass records its primitive
operations on a ``Tape`` and ``backward`` replays them in reverse, adding
each parameter's gradient into the store. Gradients accumulate until
``adam_step`` (or ``ParameterStore.zero_grad``) clears them, so a loss built
from several terms needs a single backward pass.

The tape is single-writer. Frozen parameters can be shared read-only across
concurrent forward passes as long as nobody calls ``adam_step`` meanwhile.
"""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

# Probabilities are clamped to [BCE_EPS, 1 - BCE_EPS] before the logarithm.
BCE_EPS = 1e-7

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def sigmoid(x):
    """Logistic function, split on sign so neither branch overflows."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return float(out) if out.ndim == 0 else out


def softmax(v, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``.

    An empty input means no predictors were configured for fusion, which is
    a configuration error rather than a numeric one.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.size == 0 or v.shape[axis] == 0:
        raise ConfigError("softmax over an empty vector: no fused predictors configured")
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _check_labels(y: np.ndarray) -> None:
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("BCE labels must be 0 or 1")


def bce_loss(p, y) -> float:
    """Binary cross-entropy, averaged over every element when given arrays."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_labels(y)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    losses = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    return float(np.mean(losses))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------

@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParameterStore:
    """Named dense parameters with gradients and Adam moments."""

    def __init__(self):
        self._entries: Dict[str, Parameter] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        arr = np.array(value, dtype=np.float64, copy=True, order="C")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name} has non-finite entries")
        self._entries[name] = Parameter(
            value=arr,
            grad=np.zeros_like(arr),
            m=np.zeros_like(arr),
            v=np.zeros_like(arr),
        )
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def entry(self, name: str) -> Parameter:
        return self._entries[name]

    def items(self):
        return ((name, p.value) for name, p in self._entries.items())

    def set(self, name: str, value) -> None:
        p = self._entries[name]
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != p.value.shape:
            raise ShapeError(f"{name}: expected shape {p.value.shape}, got {arr.shape}")
        p.value[...] = arr

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        p = self._entries[name]
        if grad.shape != p.value.shape:
            raise ShapeError(f"{name}: gradient shape {grad.shape} != {p.value.shape}")
        p.grad += grad

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.grad.fill(0.0)

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self._entries.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._entries.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            self.set(name, value)

    def copy(self) -> "ParameterStore":
        return copy.deepcopy(self)

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ParameterStore":
        store = cls()
        for name, value in arrays.items():
            store.add(name, value)
        return store

    def digest(self) -> str:
        """sha256 over names, shapes and little-endian values."""
        h = hashlib.sha256()
        for name, p in self._entries.items():
            h.update(name.encode("utf-8"))
            h.update(repr(p.value.shape).encode("ascii"))
            h.update(p.value.astype("<f8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

Vjp = Callable[[np.ndarray], np.ndarray]


class Node:
    __slots__ = ("value", "grad", "parents", "requires_grad", "index")

    def __init__(self, value: np.ndarray, parents: Tuple[Tuple["Node", Vjp], ...],
                 requires_grad: bool, index: int):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.requires_grad = requires_grad
        self.index = index

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape


class Tape:
    """Records primitive operations for reverse-mode accumulation.

    Operations accept ``Node`` objects or raw arrays (treated as constants).
    Parameters are pulled with ``param(name)``; each name maps to one leaf per
    tape so its gradient is summed once.
    """

    def __init__(self, store: Optional[ParameterStore] = None):
        self.store = store
        self.nodes: List[Node] = []
        self._params: Dict[str, Node] = {}

    # -- leaves ------------------------------------------------------------
    def _record(self, value, parents: Sequence[Tuple[Node, Vjp]] = (),
                requires_grad: Optional[bool] = None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        live = tuple((n, f) for n, f in parents if n.requires_grad)
        needs = bool(live) if requires_grad is None else requires_grad
        node = Node(value, live, needs, len(self.nodes))
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return self._record(value, requires_grad=False)

    def param(self, name: str) -> Node:
        node = self._params.get(name)
        if node is None:
            if self.store is None:
                raise ValueError("tape has no parameter store")
            node = self._record(self.store[name], requires_grad=True)
            self._params[name] = node
        return node

    def _as_node(self, x) -> Node:
        return x if isinstance(x, Node) else self.const(x)

    # -- elementwise -------------------------------------------------------
    def add(self, a, b) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        return self._record(a.value + b.value, (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ))

    def sub(self, a, b) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        return self._record(a.value - b.value, (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ))

    def mul(self, a, b) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        return self._record(a.value * b.value, (
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ))

    def div(self, a, b) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        return self._record(a.value / b.value, (
            (a, lambda g: _unbroadcast(g / b.value, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.value / (b.value ** 2), b.shape)),
        ))

    def neg(self, a) -> Node:
        a = self._as_node(a)
        return self._record(-a.value, ((a, lambda g: -g),))

    def exp(self, a) -> Node:
        a = self._as_node(a)
        out = np.exp(a.value)
        return self._record(out, ((a, lambda g: g * out),))

    def log(self, a) -> Node:
        a = self._as_node(a)
        return self._record(np.log(a.value), ((a, lambda g: g / a.value),))

    def sigmoid(self, a) -> Node:
        a = self._as_node(a)
        s = np.asarray(sigmoid(a.value), dtype=np.float64)
        return self._record(s, ((a, lambda g: g * s * (1.0 - s)),))

    def tanh(self, a) -> Node:
        a = self._as_node(a)
        t = np.tanh(a.value)
        return self._record(t, ((a, lambda g: g * (1.0 - t * t)),))

    # -- reductions / shape ------------------------------------------------
    def sum(self, a, axis: Optional[int] = None, keepdims: bool = False) -> Node:
        a = self._as_node(a)
        shape = a.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return self._record(a.value.sum(axis=axis, keepdims=keepdims), ((a, vjp),))

    def mean(self, a, axis: Optional[int] = None, keepdims: bool = False) -> Node:
        a = self._as_node(a)
        count = a.value.size if axis is None else a.shape[axis]
        return self.mul(self.sum(a, axis=axis, keepdims=keepdims), 1.0 / count)

    def reshape(self, a, shape) -> Node:
        a = self._as_node(a)
        orig = a.shape
        return self._record(a.value.reshape(shape), ((a, lambda g: g.reshape(orig)),))

    def concat(self, parts: Sequence, axis: int = -1) -> Node:
        nodes = [self._as_node(p) for p in parts]
        sizes = [n.shape[axis] for n in nodes]
        bounds = np.cumsum(sizes)[:-1]

        def make_vjp(i):
            return lambda g: np.split(g, bounds, axis=axis)[i]

        return self._record(
            np.concatenate([n.value for n in nodes], axis=axis),
            tuple((n, make_vjp(i)) for i, n in enumerate(nodes)),
        )

    def stack(self, parts: Sequence, axis: int = 0) -> Node:
        nodes = [self._as_node(p) for p in parts]

        def make_vjp(i):
            return lambda g: np.take(g, i, axis=axis)

        return self._record(
            np.stack([n.value for n in nodes], axis=axis),
            tuple((n, make_vjp(i)) for i, n in enumerate(nodes)),
        )

    def softmax(self, a, axis: int = -1) -> Node:
        a = self._as_node(a)
        s = softmax(a.value, axis=axis)

        def vjp(g):
            return s * (g - (g * s).sum(axis=axis, keepdims=True))

        return self._record(s, ((a, vjp),))

    # -- linear algebra ----------------------------------------------------
    def matmul(self, a, b) -> Node:
        """2-D matrix product."""
        a, b = self._as_node(a), self._as_node(b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
        return self._record(a.value @ b.value, (
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ))

    def linear(self, x, weight, bias=None) -> Node:
        """``x @ weight.T + bias`` over the last axis of ``x``."""
        x, w = self._as_node(x), self._as_node(weight)
        if w.value.ndim != 2 or x.shape[-1] != w.shape[1]:
            raise ShapeError(f"linear: input dim {x.shape[-1]} vs weight {w.shape}")
        out = x.value @ w.value.T
        parents = [
            (x, lambda g: g @ w.value),
            (w, lambda g: g.reshape(-1, w.shape[0]).T @ x.value.reshape(-1, w.shape[1])),
        ]
        if bias is not None:
            b = self._as_node(bias)
            if b.shape != (w.shape[0],):
                raise ShapeError(f"linear: bias shape {b.shape} vs {w.shape[0]} outputs")
            out = out + b.value
            parents.append((b, lambda g: g.reshape(-1, w.shape[0]).sum(axis=0)))
        return self._record(out, parents)

    # -- loss ----------------------------------------------------------------
    def bce(self, p, y) -> Node:
        """Mean BCE of probabilities ``p`` against constant labels ``y``."""
        p = self._as_node(p)
        y = np.asarray(y, dtype=np.float64)
        if y.shape != p.shape:
            raise ShapeError(f"bce: labels {y.shape} vs predictions {p.shape}")
        _check_labels(y)
        pc = np.clip(p.value, BCE_EPS, 1.0 - BCE_EPS)
        inside = (p.value > BCE_EPS) & (p.value < 1.0 - BCE_EPS)
        n = p.value.size
        loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))

        def vjp(g):
            return g * inside * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n

        return self._record(loss, ((p, vjp),))


def backward(tape: Tape, loss: Node, store: Optional[ParameterStore] = None) -> None:
    """Accumulate d(loss)/d(param) into the store for every parameter on the tape."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    store = store if store is not None else tape.store
    active = tape.nodes[: loss.index + 1]
    for node in active:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(active):
        if node.grad is None or not node.requires_grad:
            continue
        for parent, vjp in node.parents:
            g = vjp(node.grad)
            parent.grad = g if parent.grad is None else parent.grad + g
    for name, node in tape._params.items():
        if node.grad is not None and node.index <= loss.index:
            store.accumulate(name, np.asarray(node.grad, dtype=np.float64).reshape(node.shape))


def adam_step(store: ParameterStore, lr: float, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """Bias-corrected Adam update of every parameter, then clear gradients."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name in store:
        p = store.entry(name)
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * p.grad
        p.v *= beta2
        p.v += (1.0 - beta2) * p.grad * p.grad
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.all(np.isfinite(p.value)):
            raise FloatingPointError(f"parameter {name} became non-finite at step {p.step}")
        p.grad.fill(0.0)


def _loss_value(build_loss: Callable[[Tape], Node], store: ParameterStore) -> float:
    return float(build_loss(Tape(store)).value)


def grad_check(build_loss: Callable[[Tape], Node], store: ParameterStore,
               eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``build_loss`` records the full forward pass on the tape it is given and
    returns the scalar loss node. The error per entry is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    store.zero_grad()
    tape = Tape(store)
    backward(tape, build_loss(tape))
    analytic = {name: store.grad(name).copy() for name in store}
    store.zero_grad()

    worst = 0.0
    for name in store:
        flat = store[name].reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = _loss_value(build_loss, store)
            flat[i] = orig - eps
            down = _loss_value(build_loss, store)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, abs(ana[i] - numeric) / max(1.0, abs(numeric)))
    logger.debug(f"grad_check over {store.num_parameters()} entries: max rel err {worst:.3e}")
    return worst
