"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: each op records its parents and a closure that maps the
output gradient to parent gradients. `Tensor.backward()` walks the tape in
reverse topological order. Ops cover exactly what the training and
rendering paths need (elementwise math, matmul, reductions, indexing,
segment sums, cumulative sums, 2D convolutions). Everything is eager
numpy, so the same code runs with gradients off by passing plain
`requires_grad=False` tensors.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "concat",
    "stack",
    "where",
    "exp",
    "log",
    "tanh",
    "sqrt",
    "sigmoid",
    "relu",
    "clip",
    "softmax",
    "log_softmax",
    "conv2d",
    "conv_transpose2d",
    "segment_sum",
    "take",
    "asdata",
]


def _to_array(x):
    a = np.asarray(x)
    if a.dtype.kind in "iub":
        a = a.astype(np.float64)
    return a


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # Sum out prepended axes.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # Sum axes that were broadcast from size 1.
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    # Make numpy defer mixed expressions like `ndarray - Tensor` to the
    # reflected operators instead of building object arrays elementwise.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = _to_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    # -- basic introspection ------------------------------------------------

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

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- graph mechanics ----------------------------------------------------

    def _make(self, data, parents, vjp):
        req = any(p.requires_grad for p in parents)
        if not req:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp)

    def backward(self, grad=None):
        """Accumulate gradients of `self` into every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        order = _topo_order(self)

        grads = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None or node._vjp is None:
                if g is not None and node._vjp is None:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if grads:
            raise RuntimeError("gradient left unconsumed in backward pass")

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other, like=self.data.dtype)
        out_data = self.data + other.data
        sa, sb = self.data.shape, other.data.shape

        def vjp(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

        return self._make(out_data, (self, other), vjp)

    __radd__ = __add__

    def __neg__(self):
        def vjp(g):
            return (-g,)

        return self._make(-self.data, (self,), vjp)

    def __sub__(self, other):
        return self + (-_wrap(other, like=self.data.dtype))

    def __rsub__(self, other):
        return _wrap(other, like=self.data.dtype) + (-self)

    def __mul__(self, other):
        other = _wrap(other, like=self.data.dtype)
        sa, sb = self.data.shape, other.data.shape
        a, b = self.data, other.data

        def vjp(g):
            return _unbroadcast(g * b, sa), _unbroadcast(g * a, sb)

        return self._make(a * b, (self, other), vjp)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, like=self.data.dtype)
        sa, sb = self.data.shape, other.data.shape
        a, b = self.data, other.data

        def vjp(g):
            return _unbroadcast(g / b, sa), _unbroadcast(-g * a / (b * b), sb)

        return self._make(a / b, (self, other), vjp)

    def __rtruediv__(self, other):
        return _wrap(other, like=self.data.dtype) / self

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("only scalar exponents are supported")
        a = self.data

        def vjp(g):
            return (g * p * a ** (p - 1),)

        return self._make(a**p, (self,), vjp)

    def __matmul__(self, other):
        other = _wrap(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul supports 2D operands only")

        def vjp(g):
            return g @ b.T, a.T @ g

        return self._make(a @ b, (self, other), vjp)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def vjp(g):
            return (g.reshape(old),)

        return self._make(self.data.reshape(shape), (self,), vjp)

    def transpose(self, *axes):
        if len(axes) == 0:
            axes = tuple(reversed(range(self.data.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)

        def vjp(g):
            return (g.transpose(inv),)

        return self._make(self.data.transpose(axes), (self,), vjp)

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        if isinstance(idx, Tensor):
            idx = idx.data
        out = self.data[idx]
        shape = self.data.shape

        def vjp(g):
            gx = np.zeros(shape, dtype=g.dtype)
            np.add.at(gx, idx, g)
            return (gx,)

        return self._make(out, (self,), vjp)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, shape).copy(),)

        return self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def cumsum(self, axis):
        def vjp(g):
            return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

        return self._make(np.cumsum(self.data, axis=axis), (self,), vjp)

    # -- elementwise nonlinearities ----------------------------------------

    def exp(self):
        out = np.exp(self.data)

        def vjp(g):
            return (g * out,)

        return self._make(out, (self,), vjp)

    def log(self):
        a = self.data

        def vjp(g):
            return (g / a,)

        return self._make(np.log(a), (self,), vjp)

    def sqrt(self):
        out = np.sqrt(self.data)

        def vjp(g):
            return (g * 0.5 / out,)

        return self._make(out, (self,), vjp)

    def tanh(self):
        out = np.tanh(self.data)

        def vjp(g):
            return (g * (1.0 - out * out),)

        return self._make(out, (self,), vjp)

    def sigmoid(self):
        out = 0.5 * (np.tanh(0.5 * self.data) + 1.0)

        def vjp(g):
            return (g * out * (1.0 - out),)

        return self._make(out, (self,), vjp)

    def relu(self):
        mask = self.data > 0

        def vjp(g):
            return (g * mask,)

        return self._make(self.data * mask, (self,), vjp)

    def clip(self, lo, hi):
        """Hard clamp; gradient passes through where the value is inside."""
        mask = (self.data >= lo) & (self.data <= hi)

        def vjp(g):
            return (g * mask,)

        return self._make(np.clip(self.data, lo, hi), (self,), vjp)


def _topo_order(root):
    """Nodes reachable from `root` that require grad, root first."""
    order = []
    visited = set()
    # Iterative DFS with post-order collection.
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if not node.requires_grad:
            continue
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    order.reverse()
    return order


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    # Bare python scalars adopt the other operand's dtype so float32 graphs
    # are not silently promoted to float64.
    if like is not None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=like))
    return Tensor(x)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def parameter(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def asdata(x):
    """Underlying ndarray of a Tensor, or the array itself."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# -- free functions (dispatch on Tensor vs ndarray) -------------------------


def exp(x):
    return x.exp() if isinstance(x, Tensor) else np.exp(x)


def log(x):
    return x.log() if isinstance(x, Tensor) else np.log(x)


def tanh(x):
    return x.tanh() if isinstance(x, Tensor) else np.tanh(x)


def sqrt(x):
    return x.sqrt() if isinstance(x, Tensor) else np.sqrt(x)


def sigmoid(x):
    if isinstance(x, Tensor):
        return x.sigmoid()
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def relu(x):
    return x.relu() if isinstance(x, Tensor) else np.maximum(x, 0.0)


def clip(x, lo, hi):
    return x.clip(lo, hi) if isinstance(x, Tensor) else np.clip(x, lo, hi)


def where(cond, a, b):
    """Select by a constant boolean mask; differentiable in `a` and `b`."""
    cond = np.asarray(cond)
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        a, b = _wrap(a), _wrap(b)
        return a * cond + b * (~cond)
    return np.where(cond, a, b)


def concat(parts, axis=0):
    parts = [_wrap(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    req = any(p.requires_grad for p in parts)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parts), _vjp=vjp)


def stack(parts, axis=0):
    parts = [_wrap(p) for p in parts]
    expanded = []
    for p in parts:
        shp = list(p.shape)
        shp.insert(axis if axis >= 0 else p.ndim + 1 + axis, 1)
        expanded.append(p.reshape(tuple(shp)))
    return concat(expanded, axis=axis)


def softmax(x, axis=-1):
    """Numerically stable softmax; max subtraction is gradient-transparent."""
    if isinstance(x, Tensor):
        shift = x - np.max(x.data, axis=axis, keepdims=True)
        e = shift.exp()
        return e / e.sum(axis=axis, keepdims=True)
    shift = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shift)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    if isinstance(x, Tensor):
        shift = x - np.max(x.data, axis=axis, keepdims=True)
        return shift - shift.exp().sum(axis=axis, keepdims=True).log()
    shift = x - np.max(x, axis=axis, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=axis, keepdims=True))


def take(x, indices, axis=0):
    """Gather along an axis with an integer index array."""
    indices = np.asarray(indices)
    if not isinstance(x, Tensor):
        return np.take(x, indices, axis=axis)
    shape = x.data.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if axis == 0:
            np.add.at(gx, indices, g)
        else:
            gx_m = np.moveaxis(gx, axis, 0)
            np.add.at(gx_m, indices, np.moveaxis(g, axis, 0))
        return (gx,)

    return x._make(np.take(x.data, indices, axis=axis), (x,), vjp)


def segment_sum(x, segment_ids, num_segments):
    """Sum rows of `x` into `num_segments` buckets given by `segment_ids`."""
    segment_ids = np.asarray(segment_ids)
    if not isinstance(x, Tensor):
        out = np.zeros((num_segments,) + x.shape[1:], dtype=x.dtype)
        np.add.at(out, segment_ids, x)
        return out

    out = np.zeros((num_segments,) + x.data.shape[1:], dtype=x.data.dtype)
    np.add.at(out, segment_ids, x.data)

    def vjp(g):
        return (g[segment_ids],)

    return x._make(out, (x,), vjp)


# -- 2D convolutions --------------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    """(N,C,H,W) -> (N, C*kh*kw, Hout*Wout) patch matrix."""
    n, c, h, w = x.shape
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (w + 2 * pad - kw) // stride + 1
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, hout, wout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride]
    return cols.reshape(n, c * kh * kw, hout * wout), hout, wout


def _col2im(cols, xshape, kh, kw, stride, pad):
    """Adjoint of `_im2col`: scatter patch columns back onto the image."""
    n, c, h, w = xshape
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, hout, wout)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride] += cols[:, :, i, j]
    if pad > 0:
        xp = xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of (N,C,H,W) input with (O,C,kh,kw) filters."""
    xt, wt = _wrap(x), _wrap(w)
    bt = _wrap(b) if b is not None else None
    n, c, h, wdt = xt.data.shape
    o, c2, kh, kw = wt.data.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {c}, filters {c2}")
    cols, hout, wout = _im2col(xt.data, kh, kw, stride, pad)
    wmat = wt.data.reshape(o, -1)
    out = np.einsum("ok,nkl->nol", wmat, cols, optimize=True).reshape(n, o, hout, wout)
    if bt is not None:
        out = out + bt.data.reshape(1, o, 1, 1)

    xshape = xt.data.shape

    def vjp(g):
        gmat = g.reshape(n, o, -1)
        gw = np.einsum("nol,nkl->ok", gmat, cols, optimize=True).reshape(wt.data.shape)
        gcols = np.einsum("ok,nol->nkl", wmat, gmat, optimize=True)
        gx = _col2im(gcols, xshape, kh, kw, stride, pad)
        if bt is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (xt, wt) if bt is None else (xt, wt, bt)
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(out)
    return Tensor(out, requires_grad=True, _parents=parents, _vjp=vjp)


def conv_transpose2d(x, w, b=None, stride=1, pad=0):
    """Transposed convolution: adjoint of `conv2d` in the spatial map.

    `x` is (N,Cin,H,W); `w` is (Cin,Cout,kh,kw); output spatial size is
    (H-1)*stride + kh - 2*pad.
    """
    xt, wt = _wrap(x), _wrap(w)
    bt = _wrap(b) if b is not None else None
    n, ci, h, wdt = xt.data.shape
    ci2, co, kh, kw = wt.data.shape
    if ci != ci2:
        raise ValueError(f"conv_transpose2d channel mismatch: input {ci}, filters {ci2}")
    hout = (h - 1) * stride + kh - 2 * pad
    wout = (wdt - 1) * stride + kw - 2 * pad

    # Scatter taps: treat the output (padded) as the col2im target.
    wmat = wt.data.reshape(ci, -1)  # (Cin, Cout*kh*kw)
    cols = np.einsum("km,nkl->nml", wmat, xt.data.reshape(n, ci, h * wdt), optimize=True)
    out = _col2im(cols, (n, co, hout, wout), kh, kw, stride, pad)
    if bt is not None:
        out = out + bt.data.reshape(1, co, 1, 1)

    def vjp(g):
        gcols, _, _ = _im2col(g, kh, kw, stride, pad)
        gx = np.einsum("km,nml->nkl", wmat, gcols, optimize=True).reshape(n, ci, h, wdt)
        gw = np.einsum("nkl,nml->km", xt.data.reshape(n, ci, h * wdt), gcols, optimize=True).reshape(wt.data.shape)
        if bt is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (xt, wt) if bt is None else (xt, wt, bt)
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(out)
    return Tensor(out, requires_grad=True, _parents=parents, _vjp=vjp)
