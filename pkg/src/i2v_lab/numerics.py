"""Dense float64 tensors with reverse-mode automatic differentiation.

The primitive set is deliberately closed: matmul, conv2d, softmax over the
last axis, pointwise add/mul, SiLU, group normalization, reshape/transpose,
slicing and concatenation, and sum reduction.  Every model in the package is
composed from these.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (sampling, evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Row-major float64 array with optional gradient tracking.

    Leaves created by the user hold their accumulated gradient in ``grad``.
    Interior nodes keep a closure mapping the output gradient to operand
    gradients; their own gradients live only for the duration of
    :meth:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------
def tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, in topological order."""
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    if not root.requires_grad:
        raise NumericError("backward() called on a tensor that does not require grad")
    if grad is None:
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(grad, dtype=DTYPE)
        if seed.shape != root.shape:
            raise DimensionError(f"seed gradient shape {seed.shape} != output shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(tape(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def fn(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def fn(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def fn(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(a.data * b.data, (a, b), fn)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))

    def fn(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _result(x.data * sig, (x,), fn)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    A 2-D right operand is treated as a shared weight matrix, which lets the
    product run as a single GEMM over all leading rows.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    if b.ndim == 2:
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def fn(g):
            g2 = g.reshape(-1, b.shape[1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), fn)

    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), fn)


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.size == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax: empty tensor of shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), fn)


softmax = softmax_lastdim


def conv2d(x, kernel, padding: int | None = None, stride: int = 1) -> Tensor:
    """Zero-padded cross-correlation.

    ``x`` is ``C x H x W`` or batched ``N x C x H x W``; ``kernel`` is
    ``C_out x C_in x k x k`` with odd ``k``.  Padding defaults to
    ``(k - 1) // 2``, which preserves spatial size at stride 1.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"conv2d: kernel must be Cout x Cin x k x k, got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise DimensionError(f"conv2d: kernel size must be odd, got {k}")
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be 3-D or 4-D, got {x.shape}")
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    cout = kernel.shape[0]
    if kernel.shape[1] != c:
        raise DimensionError(f"conv2d: input channels {c} (shape {x.shape}) != kernel channels {kernel.shape[1]} (shape {kernel.shape})")
    p = (k - 1) // 2 if padding is None else int(padding)
    s = int(stride)
    # im2col in channels-last order so the column layout is (k, k, C) with C fastest
    xn = xd.transpose(0, 2, 3, 1)
    xp = np.pad(xn, ((0, 0), (p, p), (p, p), (0, 0))) if p else xn
    hp, wp = xp.shape[1], xp.shape[2]
    ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {kernel.shape}")
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(cout, k * k * c)
    out = np.ascontiguousarray((cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]

    def fn(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = None
        if kernel.requires_grad:
            gk = np.ascontiguousarray((g2.T @ cols).reshape(cout, k, k, c).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, k, k, c)
            gxp = np.zeros((n, hp, wp, c), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += gcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(gxp[:, p : p + h, p : p + w, :].transpose(0, 3, 1, 2))
            if squeeze:
                gx = gx[0]
        return gx, gk

    return _result(out, (x, kernel), fn)


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Group normalization over axis 1 of an ``N x C x ...`` tensor."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"group_norm: need at least 2 axes, got {x.shape}")
    n, c = x.shape[:2]
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mean = xg.mean(axis=-1, keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    parents = [x]
    out = xhat
    w = b = None
    if weight is not None:
        w = as_tensor(weight)
        parents.append(w)
        out = out * w.data.reshape(bshape)
    if bias is not None:
        b = as_tensor(bias)
        parents.append(b)
        out = out + b.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def fn(g):
        grads = []
        gxhat = g * w.data.reshape(bshape) if w is not None else g
        if x.requires_grad:
            gh = gxhat.reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xh * (gh * xh).mean(axis=-1, keepdims=True))
            grads.append(gx.reshape(x.shape))
        else:
            grads.append(None)
        if w is not None:
            grads.append((g * xhat).sum(axis=red) if w.requires_grad else None)
        if b is not None:
            grads.append(g.sum(axis=red) if b.requires_grad else None)
        return tuple(grads)

    return _result(out, parents, fn)


# ---------------------------------------------------------------------------
# shape manipulation and reduction
# ---------------------------------------------------------------------------
def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def fn(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), fn)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def fn(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _result(out, (x,), fn)


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def fn(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[index]), (x,), fn)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: no tensors")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def fn(g):
        grads = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[ax] = slice(lo, hi)
                grads.append(np.ascontiguousarray(g[tuple(index)]))
            else:
                grads.append(None)
        return tuple(grads)

    return _result(out, ts, fn)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=DTYPE)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------
def numerical_grad(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5, batch: int | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (``x.data`` is restored).

    With ``batch=k``, ``f`` is instead called on stacks of ``k`` perturbed
    copies, shape ``(k,) + x.shape``, and must return one value per copy.
    Same differences, far fewer Python-level calls.
    """
    if step <= 0:
        raise NumericError(f"finite-difference step must be positive, got {step}")
    n = x.size
    grad = np.zeros(n, dtype=DTYPE)
    with no_grad():
        if batch:
            base = x.data.reshape(-1)
            for lo in range(0, n, batch):
                idx = np.arange(lo, min(n, lo + batch))
                stack = np.repeat(base[None, :], 2 * idx.size, axis=0)
                rows = np.arange(idx.size)
                stack[rows, idx] += step
                stack[rows + idx.size, idx] -= step
                vals = np.asarray(f(Tensor(stack.reshape((-1,) + x.shape))).data, dtype=DTYPE).reshape(-1)
                if vals.size != 2 * idx.size:
                    raise DimensionError(f"batched function returned {vals.size} values for {2 * idx.size} inputs")
                if not np.isfinite(vals).all():
                    raise NumericError(f"non-finite function value near coordinate {lo}")
                grad[idx] = (vals[: idx.size] - vals[idx.size :]) / (2.0 * step)
            return grad.reshape(x.shape)
        flat = x.data.reshape(-1)
        for i in range(n):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(x).data)
            flat[i] = orig - step
            fm = float(f(x).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite function value at coordinate {i}")
            grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    was = x.requires_grad
    x.requires_grad = True
    saved = x.grad
    x.grad = None
    try:
        y = f(x)
        if y.size != 1:
            raise DimensionError(f"gradient check needs a scalar function, got shape {y.shape}")
        if not np.isfinite(y.data).all():
            raise NumericError("non-finite function value at the check point")
        if y.requires_grad:
            y.backward()
        out = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    finally:
        x.grad = saved
        x.requires_grad = was
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5, batched_f: Callable | None = None, batch: int = 256) -> float:
    """Max relative error between backprop and central differences.

    The denominator is ``max(|analytic|, |numeric|, 1e-8)`` so coordinates
    with vanishing gradient are compared absolutely. ``batched_f``, when
    given, is the stacked form of ``f`` used for the finite differences.
    """
    a = analytic_grad(f, x)
    n = numerical_grad(batched_f, x, step, batch) if batched_f is not None else numerical_grad(f, x, step)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
