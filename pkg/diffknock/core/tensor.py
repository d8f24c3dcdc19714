"""
DiffKnock — Tensor con diferenciación en modo inverso
Arrays float64 inmutables + grafo de cómputo acíclico. Cada operación guarda
sus padres y una función local de backward; `backward()` recorre el grafo en
orden topológico inverso visitando cada nodo una sola vez.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, expit

from diffknock.core.errors import GraphError, NumericalError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Desactiva la construcción del grafo en el hilo actual (muestreo, evaluación)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.isfinite(values).all():
        raise NumericalError(f"valor no finito en la salida de '{op}'")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Reduce un gradiente difundido a la forma original del operando."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        values = data.data if isinstance(data, Tensor) else np.asarray(data, dtype=np.float64)
        if values.dtype != np.float64:
            values = values.astype(np.float64)
        _check_finite(values, "leaf")
        self.data = values
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._consumed = False

    # ─── construcción de nodos ──────────────────────────────

    @classmethod
    def _node(cls, values: np.ndarray, parents: Tuple["Tensor", ...], backward: BackwardFn, op: str) -> "Tensor":
        _check_finite(values, op)
        out = cls.__new__(cls)
        out.data = values
        out.grad = None
        out.op = op
        out.name = None
        out._consumed = False
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        return out

    # ─── atributos ─────────────────────────────────────────

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() sobre tensor de forma {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # ─── aritmética ────────────────────────────────────────

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(values: np.ndarray, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64, copy=True), requires_grad=True, name=name)


# ─── operaciones binarias ─────────────────────────────────


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._node(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._node(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._node(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g: np.ndarray):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._node(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    k = float(exponent)

    def backward(g: np.ndarray):
        return (g * k * a.data ** (k - 1.0),)

    return Tensor._node(a.data ** k, (a,), backward, "pow")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requiere al menos 2 dimensiones: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul con dimensiones incompatibles: {a.shape} @ {b.shape}")

    def backward(g: np.ndarray):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._node(a.data @ b.data, (a, b), backward, "matmul")


# ─── reducciones y forma ──────────────────────────────────


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def backward(g: np.ndarray):
        return (g.reshape(a.shape),)

    return Tensor._node(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    perm = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(perm))

    def backward(g: np.ndarray):
        return (g.transpose(inverse),)

    return Tensor._node(a.data.transpose(perm), (a,), backward, "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def backward(g: np.ndarray):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._node(np.array(a.data[index], dtype=np.float64), (a,), backward, "getitem")


# ─── funciones elementales ────────────────────────────────


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g: np.ndarray):
        return (g * out,)

    return Tensor._node(out, (a,), backward, "exp")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g: np.ndarray):
        return (g * (1.0 - out * out),)

    return Tensor._node(out, (a,), backward, "tanh")


def relu(a: Tensor) -> Tensor:
    def backward(g: np.ndarray):
        return (g * (a.data > 0.0),)

    return Tensor._node(np.maximum(a.data, 0.0), (a,), backward, "relu")


def gelu(a: Tensor) -> Tensor:
    """GELU exacta: x·Φ(x)."""
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT_2))

    def backward(g: np.ndarray):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return Tensor._node(a.data * cdf, (a,), backward, "gelu")


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    negative = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(a.data > 0.0, a.data, negative)

    def backward(g: np.ndarray):
        return (g * np.where(a.data > 0.0, 1.0, negative + alpha),)

    return Tensor._node(out, (a,), backward, "elu")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)

    def backward(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return Tensor._node(out, (a,), backward, "sigmoid")


def absolute(a: Tensor) -> Tensor:
    def backward(g: np.ndarray):
        return (g * np.sign(a.data),)

    return Tensor._node(np.abs(a.data), (a,), backward, "abs")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._node(out, (a,), backward, "softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalización sobre el último eje, sin afinidad."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g: np.ndarray):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - xhat * gx_mean),)

    return Tensor._node(xhat, (a,), backward, "layer_norm")


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Dropout invertido: identidad en evaluación, reescala 1/(1-rate) en entrenamiento."""
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise GraphError("dropout en modo entrenamiento requiere un generador aleatorio")
    keep = 1.0 - float(rate)
    mask = (rng.random(a.shape) < keep) / keep

    def backward(g: np.ndarray):
        return (g * mask,)

    return Tensor._node(a.data * mask, (a,), backward, "dropout")


def bce_with_logits(logits: Tensor, target: ArrayLike) -> Tensor:
    """Entropía cruzada binaria por elemento sobre logits (forma estable)."""
    y = as_tensor(target).data
    z = logits.data
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g: np.ndarray):
        return (g * (expit(z) - y),)

    return Tensor._node(loss, (logits,), backward, "bce_with_logits")


# ─── backward ─────────────────────────────────────────────

GradientMap = Dict[Tensor, np.ndarray]


def _topological_order(root: Tensor) -> list:
    order: list = []
    visited: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> GradientMap:
    """
    Propaga dL/d(nodo) desde una pérdida escalar.
    Devuelve el mapa hoja -> gradiente; las hojas de `leaves` no alcanzadas
    reciben ceros. El grafo se libera al terminar.
    """
    if loss.size != 1:
        raise GraphError(f"backward requiere una pérdida escalar, forma {loss.shape}")
    if loss._consumed:
        raise GraphError("backward llamado dos veces sobre el mismo grafo; repite el forward")

    result: GradientMap = {}
    if loss.requires_grad:
        order = _topological_order(loss)
        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                _check_finite(g, "backward")
                node.grad = g
                result[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
        for node in order:
            node._parents = ()
            node._backward = None
    loss._consumed = True

    for leaf in leaves or ():
        if leaf not in result:
            zeros = np.zeros_like(leaf.data)
            leaf.grad = zeros
            result[leaf] = zeros
    return result
