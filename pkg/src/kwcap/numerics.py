"""Dense tensors with reverse-mode differentiation, backed by numpy.

Every operation that produces a :class:`Tensor` from inputs that require
gradients records its parents and a backward rule on the result. Calling
:func:`backward` on a scalar walks that graph in reverse execution order and
returns gradients for the requested leaves. Operations performed on raw
arrays (or inside :func:`no_grad`) leave no trace, which is how
non-differentiable steps such as top-k selection cut the graph.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "DimensionError",
    "ParameterError",
    "ContractError",
    "no_grad",
    "grad_enabled",
    "parameter",
    "constant",
    "matmul",
    "add",
    "mul",
    "reshape",
    "transpose",
    "concat",
    "softmax",
    "log_softmax",
    "relu",
    "sigmoid",
    "log",
    "clip",
    "layer_norm",
    "dropout",
    "max_along",
    "sum",
    "mean",
    "cross_entropy_from_logits",
    "backward",
    "grad_check",
]


class NonFiniteError(ArithmeticError):
    pass


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class ContractError(ValueError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend graph recording (inference, finite differences)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''} of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, _reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], rule: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), rule)


def _reciprocal(x: Tensor) -> Tensor:
    y = 1.0 / x.data
    return _result(y, (x,), lambda g: (-g * y * y,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), rule)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule)


def _getitem(x: Tensor, index) -> Tensor:
    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.asarray(x.data[index]), (x,), rule)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), rule)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    on = x.data > 0
    return _result(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; ``mask`` (True = keep) zeroes entries exactly."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        if not mask.any(axis=axis).all():
            raise ContractError("softmax row with every entry masked")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std

    def rule(g):
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), rule)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity at inference."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("training-mode dropout needs an explicit generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def max_along(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient flows to the first maximiser."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def rule(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(np.squeeze(out, axis=axis), (x,), rule)


def cross_entropy_from_logits(logits: Tensor, target) -> Tensor:
    """Per-row ``-log softmax(logits)[target]`` over the last axis.

    ``target`` is an int (for 1-D logits) or an int array matching the
    leading axes of ``logits``; the result has the shape of ``target``.
    """
    target = np.asarray(target, dtype=np.int64)
    vocab = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {target.shape} do not match logits {logits.shape}")
    if (target < 0).any() or (target >= vocab).any():
        raise IndexError(f"target index out of range for vocabulary of size {vocab}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_p = z - log_z
    picked = np.take_along_axis(log_p, target[..., None], axis=-1)[..., 0]

    def rule(g):
        grad = np.exp(log_p)
        np.put_along_axis(
            grad, target[..., None], np.take_along_axis(grad, target[..., None], -1) - 1.0, -1
        )
        return (grad * np.asarray(g)[..., None],)

    return _result(-picked, (logits,), rule)


# ---------------------------------------------------------------------------
# differentiation


def _reverse_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def backward(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors the loss does not depend on get exact zeros. Nothing is stored
    on the tensors, so repeated calls return identical results.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    keep = {id(t) for t in wrt}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in _reverse_order(loss):
            g = grads.get(id(node))
            if node._backward is None or g is None:
                continue
            if id(node) not in keep:
                del grads[id(node)]
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    return [np.array(grads.get(id(t), np.zeros_like(t.data)), dtype=t.data.dtype) for t in wrt]


def grad_check(
    fn: Callable[..., Tensor],
    points: Sequence[np.ndarray],
    step: float = 1e-5,
    coords: dict[int, np.ndarray] | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` takes one tensor per entry of ``points`` and returns a scalar.
    ``coords`` optionally restricts the probed flat indices per input.
    The error is ``|a - n| / max(|a|, |n|, floor)``. A central difference
    cannot resolve slopes much below ``eps * |f| / step`` (about 1e-11 here),
    so derivatives that are exactly zero, such as those of attention key
    biases, are judged on absolute error once below ``floor``.
    """
    leaves = [parameter(np.array(p, dtype=np.float64)) for p in points]
    analytic = backward(fn(*leaves), leaves)
    worst = 0.0
    with no_grad():
        for i, leaf in enumerate(leaves):
            flat = leaf.data.reshape(-1)
            probe = coords.get(i, range(flat.size)) if coords else range(flat.size)
            for j in probe:
                orig = flat[j]
                flat[j] = orig + step
                up = fn(*leaves).item()
                flat[j] = orig - step
                down = fn(*leaves).item()
                flat[j] = orig
                numeric = (up - down) / (2 * step)
                a = analytic[i].reshape(-1)[j]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst
