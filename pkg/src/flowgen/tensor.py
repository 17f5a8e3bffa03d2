"""Dense tensors with tape-based reverse-mode automatic differentiation.

The design is deliberately small: a ``Tensor`` wraps an immutable NumPy
array, and a ``Tape`` records the primitives applied to watched tensors so
that ``gradient_of`` can pull a scalar loss back to a parameter vector.
Tapes are single-use, single-threaded objects; tensors themselves are
values and safe to share.

Supported differentiable primitives: arithmetic (+, -, *, /, **const),
matmul, reshape/transpose/concat/slicing, sum/mean, relu, gelu, sin, cos,
exp, log, sqrt, tanh, softmax, periodic conv2d, and the group-norm
composite built on top of these in :mod:`flowgen.nn`.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp

from . import _kernels


class Tensor:
    """Immutable dense array, optionally tracked on an autodiff tape."""

    __slots__ = ("data", "_tape", "_tid")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self._tape = None
        self._tid = -1

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tracked = ", tracked" if self._tape is not None else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tracked})"

    # -- operators -----------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class Tape:
    """Records primitive applications for one reverse pass."""

    def __init__(self):
        self._entries = []  # (out_tid, [(in_tid, vjp), ...])
        self._next_tid = 0
        self._consumed = False

    def _track(self, arr):
        t = Tensor.__new__(Tensor)
        t.data = arr
        t._tape = self
        t._tid = self._next_tid
        self._next_tid += 1
        return t

    def watch(self, x):
        """Return a tracked copy of ``x`` acting as a differentiation leaf."""
        return self._track(as_tensor(x).data)

    def record(self, out_arr, parents_and_vjps):
        out = self._track(out_arr)
        self._entries.append((out._tid, parents_and_vjps))
        return out

    def gradient(self, loss, wrt):
        """Backpropagate from scalar ``loss`` to the leaf ``wrt``."""
        if self._consumed:
            raise RuntimeError("tape already used; build a fresh one")
        self._consumed = True
        if loss._tape is not self:
            raise ValueError("loss was not computed on this tape")
        if loss.data.shape != ():
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        if not np.isfinite(loss.data):
            raise FloatingPointError("non-finite loss in forward pass")
        grads = {loss._tid: np.ones((), dtype=loss.data.dtype)}
        owned = set()  # tids whose buffer we may mutate in place
        for out_tid, pairs in reversed(self._entries):
            g = grads.pop(out_tid, None)
            if g is None:
                continue
            owned.discard(out_tid)
            for in_tid, vjp in pairs:
                if isinstance(vjp, _SliceVJP):
                    buf = grads.get(in_tid)
                    if buf is None:
                        buf = np.zeros(vjp.shape, dtype=vjp.dtype)
                        grads[in_tid] = buf
                        owned.add(in_tid)
                    elif in_tid not in owned:
                        buf = buf.copy()
                        grads[in_tid] = buf
                        owned.add(in_tid)
                    if vjp.basic:
                        buf[vjp.idx] += g
                    else:
                        np.add.at(buf, vjp.idx, g)
                    continue
                contrib = vjp(g)
                if in_tid in grads:
                    if in_tid in owned:
                        np.add(grads[in_tid], contrib, out=grads[in_tid])
                    else:
                        grads[in_tid] = grads[in_tid] + contrib
                        owned.add(in_tid)
                else:
                    grads[in_tid] = contrib
                    # fresh allocations are safe to mutate later; views of g
                    # (reshape/identity vjps) are not
                    if contrib is not g and contrib.base is None:
                        owned.add(in_tid)
        g = grads.get(wrt._tid)
        if g is None:
            g = np.zeros_like(wrt.data)
        return np.asarray(g, dtype=wrt.data.dtype).reshape(wrt.data.shape)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t._tape is not None:
            if tape is not None and tape is not t._tape:
                raise ValueError("operands tracked on different tapes")
            tape = t._tape
    return tape


def _emit(out_arr, inputs, vjps):
    """inputs: list of Tensors; vjps: matching list of callables (or None)."""
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out_arr)
    pairs = [
        (t._tid, vjp)
        for t, vjp in zip(inputs, vjps)
        if isinstance(t, Tensor) and t._tape is tape and vjp is not None
    ]
    return tape.record(out_arr, pairs)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _emit(
        out,
        [a, b],
        [
            lambda g, s=a.shape: _unbroadcast(g, s),
            lambda g, s=b.shape: _unbroadcast(g, s),
        ],
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _emit(
        out,
        [a, b],
        [
            lambda g, s=a.shape: _unbroadcast(g, s),
            lambda g, s=b.shape: _unbroadcast(-g, s),
        ],
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _emit(
        out,
        [a, b],
        [
            lambda g, o=b.data, s=a.shape: _unbroadcast(g * o, s),
            lambda g, o=a.data, s=b.shape: _unbroadcast(g * o, s),
        ],
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _emit(
        out,
        [a, b],
        [
            lambda g, o=b.data, s=a.shape: _unbroadcast(g / o, s),
            lambda g, x=a.data, o=b.data, s=b.shape: _unbroadcast(
                -g * x / (o * o), s
            ),
        ],
    )


def neg(a):
    a = as_tensor(a)
    return _emit(-a.data, [a], [lambda g: -g])


def power(a, p):
    """Elementwise power with a constant (non-differentiated) exponent."""
    a = as_tensor(a)
    p = float(p)
    out = a.data**p
    return _emit(out, [a], [lambda g, x=a.data: g * p * x ** (p - 1.0)])


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = a.data @ b.data

    def vjp_a(g, bd=b.data, s=a.shape):
        return _unbroadcast(g @ bd.swapaxes(-1, -2), s)

    def vjp_b(g, ad=a.data, s=b.shape):
        return _unbroadcast(ad.swapaxes(-1, -2) @ g, s)

    return _emit(out, [a, b], [vjp_a, vjp_b])


# -- shape manipulation --------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _emit(out, [a], [lambda g, s=a.shape: g.reshape(s)])


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _emit(out, [a], [lambda g: g.transpose(inv)])


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return _emit(out, tensors, [make_vjp(i) for i in range(len(tensors))])


class _SliceVJP:
    """Marker letting the tape scatter-add slice gradients into one shared
    buffer per leaf instead of allocating a full zero array per slice."""

    __slots__ = ("idx", "shape", "dtype", "basic")

    def __init__(self, idx, shape, dtype):
        self.idx = idx
        self.shape = shape
        self.dtype = dtype
        self.basic = _is_basic_index(idx)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(
        isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
        for i in items
    )


def getitem(a, idx):
    a = as_tensor(a)
    out = a.data[idx]
    return _emit(
        np.ascontiguousarray(out), [a], [_SliceVJP(idx, a.shape, a.dtype)]
    )


# -- reductions ----------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g, s=a.shape):
        if axis is None:
            return np.broadcast_to(g, s).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, s).copy()

    return _emit(out, [a], [vjp])


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# -- elementwise nonlinearities -------------------------------------------------


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _emit(out, [a], [lambda g, x=a.data: g * (x > 0)])


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact (erf-based) GeLU."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + _sp.erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def vjp(g, x=a.data, c=cdf):
        return g * (c + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI)

    return _emit(out, [a], [vjp])


def sin(a):
    a = as_tensor(a)
    return _emit(np.sin(a.data), [a], [lambda g, x=a.data: g * np.cos(x)])


def cos(a):
    a = as_tensor(a)
    return _emit(np.cos(a.data), [a], [lambda g, x=a.data: -g * np.sin(x)])


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, [a], [lambda g, o=out: g * o])


def log(a):
    a = as_tensor(a)
    return _emit(np.log(a.data), [a], [lambda g, x=a.data: g / x])


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit(out, [a], [lambda g, o=out: g * (0.5 / o)])


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, [a], [lambda g, o=out: g * (1.0 - o * o)])


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, s=out):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _emit(out, [a], [vjp])


# -- convolution ----------------------------------------------------------------


def conv2d(x, kernel, stride=1):
    """Periodic (wrap) 2D cross-correlation, channels last.

    x: (N, H, W, Cin); kernel: (kh, kw, Cin, Cout); stride in {1, 2}.
    Stride 1 requires odd kernel extents (same-size output); stride 2
    decimates the periodic stride-1 result onto the even grid (H/2, W/2).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects x (N,H,W,Cin) and kernel (kh,kw,Cin,Cout)")
    if x.shape[3] != kernel.shape[2]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[3]}, kernel expects {kernel.shape[2]}"
        )
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    if stride == 1 and (kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0):
        raise ValueError("stride-1 conv2d requires odd kernel extents")
    xd = np.ascontiguousarray(x.data)
    kd = np.ascontiguousarray(kernel.data)
    out = _kernels.conv2d_forward(xd, kd, stride)

    def vjp_x(g, kd=kd, s=x.shape):
        return _kernels.conv2d_grad_input(np.ascontiguousarray(g), kd, stride, s)

    def vjp_k(g, xd=xd, s=kernel.shape):
        return _kernels.conv2d_grad_kernel(xd, np.ascontiguousarray(g), stride, s)

    return _emit(out, [x, kernel], [vjp_x, vjp_k])


# -- top-level gradient API ------------------------------------------------------


def gradient_of(loss_fn, params):
    """Gradient of a scalar-valued ``loss_fn`` at ``params``.

    ``loss_fn`` must be composed of the differentiable primitives exported
    by this module and :mod:`flowgen.nn`.  Raises on non-scalar losses and
    on a non-finite forward value.
    """
    _, grad = value_and_grad(loss_fn, params)
    return grad


def value_and_grad(loss_fn, params):
    tape = Tape()
    p = tape.watch(as_tensor(params))
    loss = loss_fn(p)
    if not isinstance(loss, Tensor):
        raise TypeError("loss_fn must return a Tensor")
    grad = tape.gradient(loss, p)  # validates scalar shape and finiteness
    return float(loss.data), Tensor(grad)
