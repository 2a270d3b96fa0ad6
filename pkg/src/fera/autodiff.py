"""Reverse-mode differentiation over a closed set of array primitives.

Every primitive accepts plain ``numpy`` arrays or :class:`Var` objects.  With
plain arrays the primitive is an ordinary numpy computation; as soon as one
input is a ``Var`` the result is a ``Var`` and, when gradients are required,
the operation is appended to the owning :class:`Tape`.  This lets the same
model code run untaped for inference and taped for training, with identical
floating point results.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Var:
    """An array value tracked on a tape."""

    __slots__ = ("value", "grad", "tape", "requires_grad", "name")
    # let numpy defer binary operators to Var's reflected methods
    __array_ufunc__ = None

    def __init__(self, value, tape: "Tape", requires_grad: bool = True, name: str | None = None):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape}, dtype={self.dtype})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


class _Node:
    __slots__ = ("out", "inputs", "vjp", "need")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        # vjp(g, need) may return None for inputs whose gradient is not needed
        self.need = tuple(isinstance(i, Var) and i.requires_grad for i in inputs)


class Tape:
    """Ordered record of primitive applications, replayed in reverse."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: list[Var] = []

    def var(self, value, name: str | None = None, requires_grad: bool = True) -> Var:
        v = Var(np.array(value, copy=True), self, requires_grad, name)
        self._leaves.append(v)
        return v

    def record(self, out: Var, inputs: Sequence, vjp: Callable) -> None:
        self._nodes.append(_Node(out, tuple(inputs), vjp))

    def __len__(self):
        return len(self._nodes)

    def backward(self, out: Var, seed: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every leaf reachable from ``out``.

        Leaves that ``out`` does not depend on keep ``grad = None``.
        """
        if not isinstance(out, Var) or out.tape is not self:
            raise ValueError("backward() needs a Var recorded on this tape")
        if seed is None:
            if out.value.size != 1:
                raise ValueError("seed gradient required for non-scalar output")
            seed = np.ones_like(out.value)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=out.dtype)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g, node.need)):
                if gi is None or not isinstance(inp, Var) or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        for leaf in self._leaves:
            leaf.grad = grads.get(id(leaf))


def value(x):
    """The raw array behind ``x``."""
    return x.value if isinstance(x, Var) else x


def _emit(result, inputs, vjp) -> Var | np.ndarray:
    tape = None
    needs = False
    for inp in inputs:
        if isinstance(inp, Var):
            tape = inp.tape
            needs = needs or inp.requires_grad
    if tape is None:
        return result
    out = Var(result, tape, needs)
    if needs:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shape(x) -> tuple:
    return np.shape(value(x))


# -- pointwise arithmetic ----------------------------------------------------

def add(a, b):
    sa, sb = _shape(a), _shape(b)
    return _emit(value(a) + value(b), (a, b),
                 lambda g, need: (_unbroadcast(g, sa) if need[0] else None,
                                  _unbroadcast(g, sb) if need[1] else None))


def sub(a, b):
    sa, sb = _shape(a), _shape(b)
    return _emit(value(a) - value(b), (a, b),
                 lambda g, need: (_unbroadcast(g, sa) if need[0] else None,
                                  _unbroadcast(-g, sb) if need[1] else None))


def mul(a, b):
    av, bv = value(a), value(b)
    return _emit(av * bv, (a, b),
                 lambda g, need: (_unbroadcast(g * bv, np.shape(av)) if need[0] else None,
                                  _unbroadcast(g * av, np.shape(bv)) if need[1] else None))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _emit(out, (a, b),
                 lambda g, need: (_unbroadcast(g / bv, np.shape(av)) if need[0] else None,
                                  _unbroadcast(-g * out / bv, np.shape(bv)) if need[1] else None))


def neg(a):
    return _emit(-value(a), (a,), lambda g, need: (-g,))


def square(a):
    av = value(a)
    return _emit(av * av, (a,), lambda g, need: (2 * g * av,))


def sqrt(a):
    out = np.sqrt(value(a))
    return _emit(out, (a,), lambda g, need: (g / (2 * out),))


def exp(a):
    out = np.exp(value(a))
    return _emit(out, (a,), lambda g, need: (g * out,))


def log(a):
    av = value(a)
    return _emit(np.log(av), (a,), lambda g, need: (g / av,))


def silu(a):
    """x * sigmoid(x), the smooth nonlinearity used between layers."""
    av = value(a)
    with np.errstate(over="ignore"):  # exp overflow saturates the sigmoid at 0, which is exact
        sig = 1.0 / (1.0 + np.exp(-av))
    return _emit(av * sig, (a,), lambda g, need: (g * (sig + av * sig * (1 - sig)),))


# -- reductions and shape ----------------------------------------------------

def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    av = value(a)
    shape = av.shape

    def vjp(g, need):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(av.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False):
    av = value(a)
    if axis is None:
        count = av.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([av.shape[ax] for ax in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), av.dtype.type(count))


def reshape(a, shape):
    old = _shape(a)
    return _emit(value(a).reshape(shape), (a,), lambda g, need: (g.reshape(old),))


def transpose(a, axes=None):
    av = value(a)
    inverse = None if axes is None else np.argsort(axes)
    return _emit(np.transpose(av, axes), (a,), lambda g, need: (np.transpose(g, inverse),))


def getitem(a, key):
    av = value(a)

    def vjp(g, need):
        out = np.zeros_like(av)
        np.add.at(out, key, g)
        return (out,)

    return _emit(av[key], (a,), vjp)


def stack(items: Sequence, axis: int = 0):
    vals = [value(x) for x in items]

    def vjp(g, need):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))

    return _emit(np.stack(vals, axis=axis), tuple(items), vjp)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim == 1 and bv.ndim == 1:
        raise ValueError("matmul of two vectors is not supported; use sum(mul)")

    def vjp(g, need):
        if av.ndim == 1:
            return (bv @ g if need[0] else None, np.outer(av, g) if need[1] else None)
        if bv.ndim == 1:
            return (np.outer(g, bv) if need[0] else None, av.T @ g if need[1] else None)
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if need[0] else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if need[1] else None
        return (ga, gb)

    return _emit(av @ bv, (a, b), vjp)


def softmax(a, axis: int = -1):
    av = value(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, need):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (a,), vjp)


# -- spatial -----------------------------------------------------------------

def unfold(a, k: int):
    """Circular im2col: (B, C, H, W) -> (B, C*k*k, H*W).

    Row ``c*k*k + i*k + j`` holds ``x[c, y+i-r, x+j-r]`` (indices mod H, W)
    with ``r = k // 2``, i.e. the cross-correlation layout used by conv layers.
    """
    av = value(a)
    if k % 2 != 1:
        raise ValueError(f"unfold needs an odd window, got {k}")
    B, C, H, W = av.shape
    if k > min(H, W):
        raise ValueError(f"window {k} exceeds field {H}x{W}")
    r = k // 2
    padded = np.pad(av, ((0, 0), (0, 0), (r, r), (r, r)), mode="wrap")
    win = np.lib.stride_tricks.sliding_window_view(padded, (H, W), axis=(2, 3))  # (B, C, k, k, H, W)
    cols = win.reshape(B, C * k * k, H * W)

    def vjp(g, need):
        g = g.reshape(B, C, k, k, H, W)
        acc = np.zeros((B, C, H + 2 * r, W + 2 * r), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                acc[:, :, i:i + H, j:j + W] += g[:, :, i, j]
        # fold the wrapped margins back onto the periodic interior
        out = acc[:, :, r:r + H, r:r + W].copy()
        if r:
            out[:, :, -r:, :] += acc[:, :, :r, r:r + W]
            out[:, :, :r, :] += acc[:, :, -r:, r:r + W]
            out[:, :, :, -r:] += acc[:, :, r:r + H, :r]
            out[:, :, :, :r] += acc[:, :, r:r + H, -r:]
            out[:, :, -r:, -r:] += acc[:, :, :r, :r]
            out[:, :, -r:, :r] += acc[:, :, :r, -r:]
            out[:, :, :r, -r:] += acc[:, :, -r:, :r]
            out[:, :, :r, :r] += acc[:, :, -r:, -r:]
        return (out,)

    return _emit(cols, (a,), vjp)


def circular_filter(a, taps: np.ndarray, taps1d: np.ndarray | None = None):
    """Depth-wise circular convolution of the last two axes with fixed taps.

    ``taps1d`` (optional) gives a separable factorisation ``taps = outer(t, t)``
    and is used as a faster path.
    """
    av = value(a)

    def apply(x, flip: bool):
        if taps1d is not None:
            t1 = taps1d[::-1] if flip else taps1d
            return _filter1d(_filter1d(x, t1, -2), t1, -1)
        t2 = taps[::-1, ::-1] if flip else taps
        return _filter2d(x, t2)

    return _emit(apply(av, False), (a,), lambda g, need: (apply(g, True),))


def _filter1d(x: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    r = len(taps) // 2
    out = np.zeros_like(x)
    for a, w in enumerate(taps):
        if w != 0.0:
            out += x.dtype.type(w) * np.roll(x, a - r, axis=axis)
    return out


def _filter2d(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    r = taps.shape[0] // 2
    out = np.zeros_like(x)
    for a in range(taps.shape[0]):
        for b in range(taps.shape[1]):
            w = taps[a, b]
            if w != 0.0:
                out += x.dtype.type(w) * np.roll(x, (a - r, b - r), axis=(-2, -1))
    return out
