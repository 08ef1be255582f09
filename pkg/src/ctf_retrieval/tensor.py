"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every operation returns a new :class:`Tensor`; when any input requires a
gradient the result remembers its parents and a closure mapping the upstream
gradient to per-parent gradients. :func:`grad` walks that graph backwards.

Operations broadcast like numpy and accept arbitrary leading batch axes, which
is what lets the model score many (audio, image) pairs in one pass.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import InvalidInputError, ShapeError

_grad_enabled = True
_debug_finite = False

ABS_FLOOR = 1e-8
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(flag: bool) -> None:
    """When on, every op asserts its output is finite."""
    global _debug_finite
    _debug_finite = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    @property
    def mT(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _debug_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by autodiff op")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    y = z / np.sum(z, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Stable log-sum-exp; entries equal to -inf contribute nothing."""
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    z = np.exp(x - m)
    s = np.sum(z, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * (z / s),)

    return _make(out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (
            gx,
            _unbroadcast(g * xhat, gd.shape),
            _unbroadcast(g, bias.shape),
        )

    return _make(xhat * gd + bias.data, (a, gain, bias), backward)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(idx)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),))


# ---------------------------------------------------------------- gradients


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, parameters: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` with respect to ``parameters``.

    Parameters not reachable from ``output`` get a zero array.
    """
    if output.data.size != 1:
        raise InvalidInputError(f"grad needs a scalar output, got shape {output.shape}")
    parameters = list(parameters)
    keep = {id(p) for p in parameters}
    grads: dict[int, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = np.ones_like(output.data)
        for node in reversed(_toposort(output)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if node._parents and id(node) not in keep:
                del grads[id(node)]
    return [grads.get(id(p), np.zeros_like(p.data)) for p in parameters]


@dataclass(frozen=True)
class FiniteDiffStats:
    max_rel_error: float   # floored as in :func:`finite_diff_check`
    max_abs_error: float
    entries: int           # perturbed entries
    largest_grad: float    # max |numerical gradient| seen


def finite_diff_stats(
    loss_fn: Callable[[], Tensor],
    parameters: Sequence[Tensor],
    epsilon: float = 1e-6,
    max_per_param: int | None = None,
    seed: int = 0,
) -> FiniteDiffStats:
    """Compare :func:`grad` with central differences entry by entry.

    ``loss_fn`` must rebuild the loss from the current contents of
    ``parameters``. Relative error is ``|a - n| / max(|a|, |n|)``; entries
    whose absolute difference is at most ``ABS_FLOOR`` count as exact, so
    gradients that are structurally zero are not judged on rounding noise.
    With ``max_per_param`` only a seeded random subset of each parameter's
    entries is perturbed.
    """
    if not epsilon > 0:
        raise InvalidInputError("epsilon must be positive")
    parameters = list(parameters)
    analytic = grad(loss_fn(), parameters)
    rng = np.random.default_rng(seed)
    worst_rel = worst_abs = largest = 0.0
    entries = 0
    with no_grad():
        for p, ga in zip(parameters, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = np.sort(rng.choice(flat.size, max_per_param, replace=False))
            ga = ga.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + epsilon
                up = loss_fn().item()
                flat[i] = orig - epsilon
                down = loss_fn().item()
                flat[i] = orig
                num = (up - down) / (2.0 * epsilon)
                diff = abs(ga[i] - num)
                entries += 1
                largest = max(largest, abs(num))
                worst_abs = max(worst_abs, diff)
                if diff > ABS_FLOOR:
                    worst_rel = max(worst_rel, diff / max(abs(ga[i]), abs(num)))
    return FiniteDiffStats(worst_rel, worst_abs, entries, largest)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    parameters: Sequence[Tensor],
    epsilon: float = 1e-6,
    max_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Worst elementwise relative error between :func:`grad` and central differences.

    See :func:`finite_diff_stats` for how the error is measured.
    """
    return finite_diff_stats(loss_fn, parameters, epsilon, max_per_param, seed).max_rel_error
