"""Tiny reverse-mode autodiff over numpy arrays.

Just enough for this pipeline: elementwise arithmetic, matmul, row
gather/scatter, segment mean, and the sparse convolution (which reuses the
analytic gather-scatter backward from `sparse`). Graphs are built per
forward pass and freed afterwards; everything runs in whatever float dtype
the leaves carry.
"""
import numpy as np

from . import sparse as sp

__all__ = ["Var", "relu", "sigmoid", "log", "exp", "clip", "huber", "matmul",
           "take_rows", "segment_mean", "concat_rows", "sparse_conv", "custom"]


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    """A node in the autodiff graph wrapping an ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False, _parents=(), _bw=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._bw = _bw if self.requires_grad else None

    # -- graph mechanics ----------------------------------------------------

    def _accum(self, g):
        if self.grad is None:
            # copy: g may be a view into another node's gradient
            self.grad = np.array(g, dtype=np.result_type(self.data, g))
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        o = other if isinstance(other, Var) else Var(np.asarray(other))
        out = Var(self.data + o.data, _parents=(self, o))

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if o.requires_grad:
                o._accum(_unbroadcast(g, o.data.shape))

        out._bw = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Var(-self.data, _parents=(self,))
        out._bw = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        o = other if isinstance(other, Var) else Var(np.asarray(other))
        out = Var(self.data - o.data, _parents=(self, o))

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if o.requires_grad:
                o._accum(_unbroadcast(-g, o.data.shape))

        out._bw = bw
        return out

    def __rsub__(self, other):
        return Var(np.asarray(other)) - self

    def __mul__(self, other):
        o = other if isinstance(other, Var) else Var(np.asarray(other))
        out = Var(self.data * o.data, _parents=(self, o))

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * o.data, self.data.shape))
            if o.requires_grad:
                o._accum(_unbroadcast(g * self.data, o.data.shape))

        out._bw = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = other if isinstance(other, Var) else Var(np.asarray(other))
        out = Var(self.data / o.data, _parents=(self, o))

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / o.data, self.data.shape))
            if o.requires_grad:
                o._accum(_unbroadcast(-g * self.data / (o.data * o.data), o.data.shape))

        out._bw = bw
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        assert np.isscalar(p)
        out = Var(self.data ** p, _parents=(self,))
        out._bw = lambda g: self._accum(g * p * self.data ** (p - 1))
        return out

    def sum(self, axis=None):
        out = Var(self.data.sum(axis=axis), _parents=(self,))

        def bw(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
            else:
                self._accum(np.broadcast_to(np.expand_dims(g, axis), self.data.shape).copy())

        out._bw = bw
        return out

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        out = Var(self.data.reshape(*shape), _parents=(self,))
        out._bw = lambda g: self._accum(g.reshape(self.data.shape))
        return out


def custom(data, parents, backward):
    """Create a Var from a custom op; `backward(g)` must accumulate into
    the parents itself."""
    return Var(data, _parents=tuple(parents), _bw=backward)


def matmul(a: Var, b: Var) -> Var:
    a = a if isinstance(a, Var) else Var(np.asarray(a))
    b = b if isinstance(b, Var) else Var(np.asarray(b))
    out = Var(a.data @ b.data, _parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    out._bw = bw
    return out


def relu(x: Var) -> Var:
    mask = x.data > 0
    out = Var(np.where(mask, x.data, 0.0), _parents=(x,))
    out._bw = lambda g: x._accum(g * mask)
    return out


def sigmoid(x: Var) -> Var:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Var(s, _parents=(x,))
    out._bw = lambda g: x._accum(g * s * (1.0 - s))
    return out


def log(x: Var) -> Var:
    out = Var(np.log(x.data), _parents=(x,))
    out._bw = lambda g: x._accum(g / x.data)
    return out


def exp(x: Var) -> Var:
    e = np.exp(x.data)
    out = Var(e, _parents=(x,))
    out._bw = lambda g: x._accum(g * e)
    return out


def sqrt(x: Var) -> Var:
    r = np.sqrt(x.data)
    out = Var(r, _parents=(x,))
    out._bw = lambda g: x._accum(g * 0.5 / r)
    return out


def atan2(y: Var, x: Var) -> Var:
    y = y if isinstance(y, Var) else Var(np.asarray(y))
    x = x if isinstance(x, Var) else Var(np.asarray(x))
    out = Var(np.arctan2(y.data, x.data), _parents=(y, x))
    # clamp keeps the (0, 0) corner finite (gradient 0 there)
    denom = np.maximum(y.data * y.data + x.data * x.data, 1e-24)

    def bw(g):
        if y.requires_grad:
            y._accum(g * x.data / denom)
        if x.requires_grad:
            x._accum(-g * y.data / denom)

    out._bw = bw
    return out


def concat_cols(vars_) -> Var:
    vars_ = [v if isinstance(v, Var) else Var(np.asarray(v)) for v in vars_]
    out = Var(np.concatenate([v.data for v in vars_], axis=1), _parents=tuple(vars_))
    offsets = np.cumsum([0] + [v.data.shape[1] for v in vars_])

    def bw(g):
        for v, lo, hi in zip(vars_, offsets[:-1], offsets[1:]):
            if v.requires_grad:
                v._accum(g[:, lo:hi])

    out._bw = bw
    return out


def clip(x: Var, lo, hi) -> Var:
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    inside = (x.data >= lo) & (x.data <= hi)
    out = Var(np.clip(x.data, lo, hi), _parents=(x,))
    out._bw = lambda g: x._accum(g * inside)
    return out


def huber(x: Var, beta: float) -> Var:
    """Elementwise smooth-l1: 0.5 x^2/beta for |x| < beta, |x| - beta/2 else."""
    ax = np.abs(x.data)
    val = np.where(ax < beta, 0.5 * x.data * x.data / beta, ax - 0.5 * beta)
    out = Var(val, _parents=(x,))
    out._bw = lambda g: x._accum(g * np.clip(x.data / beta, -1.0, 1.0))
    return out


def take_cols(x: Var, lo, hi) -> Var:
    out = Var(x.data[:, lo:hi], _parents=(x,))

    def bw(g):
        acc = np.zeros_like(x.data)
        acc[:, lo:hi] = g
        x._accum(acc)

    out._bw = bw
    return out


def take_rows(x: Var, idx) -> Var:
    idx = np.asarray(idx, dtype=np.int64)
    out = Var(x.data[idx], _parents=(x,))

    def bw(g):
        acc = np.zeros_like(x.data)
        np.add.at(acc, idx, g)
        x._accum(acc)

    out._bw = bw
    return out


def segment_mean(x: Var, seg, n_seg: int) -> Var:
    """Mean of x's rows per segment id; rows of empty segments are zero."""
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_seg).astype(x.data.dtype)
    sums = np.zeros((n_seg,) + x.data.shape[1:], dtype=x.data.dtype)
    np.add.at(sums, seg, x.data)
    denom = np.maximum(counts, 1.0).reshape((n_seg,) + (1,) * (x.data.ndim - 1))
    out = Var(sums / denom, _parents=(x,))

    def bw(g):
        x._accum((g / denom)[seg])

    out._bw = bw
    return out


def concat_rows(vars_) -> Var:
    vars_ = [v if isinstance(v, Var) else Var(np.asarray(v)) for v in vars_]
    out = Var(np.concatenate([v.data for v in vars_], axis=0), _parents=tuple(vars_))
    offsets = np.cumsum([0] + [len(v.data) for v in vars_])

    def bw(g):
        for v, lo, hi in zip(vars_, offsets[:-1], offsets[1:]):
            if v.requires_grad:
                v._accum(g[lo:hi])

    out._bw = bw
    return out


def sparse_conv(x: Var, kernel: Var, bias, kmap: sp.KernelMap) -> Var:
    """Sparse convolution as an autodiff op over the (n_out, C_out) rows of
    the kernel map's declared output set. Row dropping is done by the caller
    with `take_rows` so gradients of kept rows flow back exactly."""
    b = bias.data if isinstance(bias, Var) else bias
    out_data = sp.conv_gather_scatter(x.data, kernel.data, kmap, b)
    parents = (x, kernel) + ((bias,) if isinstance(bias, Var) else ())
    out = Var(out_data, _parents=parents)

    def bw(g):
        gf, gk, gb = sp.conv_gather_scatter_backward(x.data, kernel.data, kmap, g)
        if x.requires_grad:
            x._accum(gf)
        if kernel.requires_grad:
            kernel._accum(gk)
        if isinstance(bias, Var) and bias.requires_grad:
            bias._accum(gb)

    out._bw = bw
    return out
