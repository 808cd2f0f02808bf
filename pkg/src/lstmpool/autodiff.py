"""Reverse-mode automatic differentiation on dense numpy arrays.

A `Tensor` wraps an ndarray and remembers how it was produced (parent
tensors plus one vector-Jacobian product per parent).  Calling
``backward()`` on a scalar walks the graph in reverse topological order
and accumulates ``.grad`` on every tensor that requires it.

Conventions:
  * feature maps are NCHW
  * relu / leaky_relu use the negative-side slope as the subgradient at 0
  * gradients accumulate in the dtype of the forward value (use f64 for
    gradient checking, f32 is fine for training)
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when operand shapes do not conform to an op's rule."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class NonFiniteError(FloatingPointError):
    """A forward value contains NaN or Inf."""

    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite values in {where}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 op: str = "leaf", parents=(), vjps=()):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._vjps = vjps

    # -- introspection -------------------------------------------------
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def assert_finite(self, where: str) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(where)
        return self

    # -- graph construction --------------------------------------------
    @staticmethod
    def _lift(x, like=None) -> "Tensor":
        if isinstance(x, Tensor):
            return x
        dtype = like.dtype if like is not None else None
        return Tensor(np.asarray(x, dtype=dtype))

    @staticmethod
    def _make(data, op, parent_vjps):
        """Build a result node; parent_vjps is [(parent, vjp_fn), ...]."""
        parents = tuple(p for p, _ in parent_vjps)
        req = any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=req, op=op,
                      parents=parents,
                      vjps=tuple(v for _, v in parent_vjps))

    # -- backward pass ---------------------------------------------------
    def backward(self):
        """Accumulate grads of this scalar w.r.t. every requires_grad tensor."""
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                if parent.grad is None:
                    parent.grad = pg.astype(parent.dtype, copy=True)
                else:
                    parent.grad += pg

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = Tensor._lift(other, self)
        a, b = self, other
        return Tensor._make(a.data + b.data, "add", [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ])

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, "neg", [(a, lambda g: -g)])

    def __sub__(self, other):
        return self + (-Tensor._lift(other, self))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = Tensor._lift(other, self)
        a, b = self, other
        return Tensor._make(a.data * b.data, "mul", [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ])

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other, self)
        a, b = self, other
        return Tensor._make(a.data / b.data, "div", [
            (a, lambda g: _unbroadcast(g / b.data, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        ])

    def __rtruediv__(self, other):
        return Tensor._lift(other, self) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        return Tensor._make(a.data ** p, "pow", [
            (a, lambda g: g * p * a.data ** (p - 1)),
        ])

    def __getitem__(self, idx):
        a = self
        out = a.data[idx]

        fancy = any(isinstance(i, (np.ndarray, list)) for i in
                    (idx if isinstance(idx, tuple) else (idx,)))

        def vjp(g, idx=idx):
            buf = np.zeros_like(a.data)
            if fancy:
                np.add.at(buf, idx, g)  # repeated indices must accumulate
            else:
                buf[idx] += g
            return buf

        return Tensor._make(out, "slice", [(a, vjp)])

    def __matmul__(self, other):
        other = Tensor._lift(other, self)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch("matmul", a.shape, b.shape)
        return Tensor._make(a.data @ b.data, "matmul", [
            (a, lambda g: g @ b.data.T),
            (b, lambda g: a.data.T @ g),
        ])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), "reshape",
                            [(a, lambda g: g.reshape(a.shape))])

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        a = self
        return Tensor._make(a.data.transpose(axes), "transpose",
                            [(a, lambda g: g.transpose(inv))])

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, a.shape).astype(a.dtype)
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, a.shape).astype(a.dtype)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), "reduce_sum", [(a, vjp)])

    def mean(self, axis=None, keepdims=False):
        a = self
        n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g / n, a.shape).astype(a.dtype)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape) / n).astype(a.dtype)

        return Tensor._make(a.data.mean(axis=axis, keepdims=keepdims), "reduce_mean", [(a, vjp)])

    def max(self, axis=None, keepdims=False):
        """Max reduction; ties route the gradient to the first (row-major) index."""
        a = self
        if axis is None:
            flat_idx = int(np.argmax(a.data))
            out = a.data.reshape(-1)[flat_idx]

            def vjp(g):
                buf = np.zeros_like(a.data)
                buf.reshape(-1)[flat_idx] = g
                return buf

            return Tensor._make(out, "reduce_max", [(a, vjp)])
        idx = np.argmax(a.data, axis=axis)  # first occurrence on ties
        out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

        def vjp(g):
            buf = np.zeros_like(a.data)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(buf, np.expand_dims(idx, axis), gg, axis=axis)
            return buf

        if not keepdims:
            out = np.squeeze(out, axis=axis)
        return Tensor._make(out, "reduce_max", [(a, vjp)])

    # -- elementwise nonlinearities -----------------------------------------
    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, "exp", [(a, lambda g: g * out)])

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), "log", [(a, lambda g: g / a.data)])

    def abs(self):
        a = self
        sign = np.sign(a.data)
        return Tensor._make(np.abs(a.data), "abs", [(a, lambda g: g * sign)])

    def sigmoid(self):
        a = self
        x = a.data
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = out.astype(a.dtype)
        return Tensor._make(out, "sigmoid", [(a, lambda g: g * out * (1.0 - out))])

    def tanh(self):
        a = self
        out = np.tanh(a.data)
        return Tensor._make(out, "tanh", [(a, lambda g: g * (1.0 - out * out))])

    def relu(self):
        a = self
        mask = a.data > 0  # subgradient 0 at the kink
        return Tensor._make(a.data * mask, "relu", [(a, lambda g: g * mask)])

    def leaky_relu(self, alpha: float):
        a = self
        slope = np.where(a.data > 0, 1.0, alpha).astype(a.dtype)
        return Tensor._make(a.data * slope, "leaky_relu", [(a, lambda g: g * slope)])


# -- free functions ----------------------------------------------------------

def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    shapes = [t.shape for t in tensors]
    base = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != axis % len(base)):
            raise ShapeMismatch("concat", *shapes)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor._make(out, "concat", [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """[B,C,H,W] -> ([B*oh*ow, C*kh*kw], oh, ow)."""
    b, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    col = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for y in range(kh):
        ymax = y + stride * oh
        for xx in range(kw):
            xmax = xx + stride * ow
            col[:, :, y, xx] = x[:, :, y:ymax:stride, xx:xmax:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw), oh, ow


def _col2im(col: np.ndarray, xshape, kh, kw, stride, pad):
    b, c, h, w = xshape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    col = col.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for y in range(kh):
        ymax = y + stride * oh
        for xx in range(kw):
            xmax = xx + stride * ow
            img[:, :, y:ymax:stride, xx:xmax:stride] += col[:, :, y, xx]
    if pad:
        img = img[:, :, pad:pad + h, pad:pad + w]
    return img


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution (cross-correlation), x [B,C,H,W], w [F,C,kh,kw], b [F]."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    f, c, kh, kw = w.shape
    bsz = x.shape[0]
    col, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wflat = w.data.reshape(f, -1)
    out = col @ wflat.T
    if b is not None:
        if b.shape != (f,):
            raise ShapeMismatch("conv2d.bias", b.shape, (f,))
        out = out + b.data
    out = out.reshape(bsz, oh, ow, f).transpose(0, 3, 1, 2)

    def vjp_x(g):
        gcol = g.transpose(0, 2, 3, 1).reshape(-1, f) @ wflat
        return _col2im(gcol, x.shape, kh, kw, stride, pad)

    def vjp_w(g):
        gf = g.transpose(0, 2, 3, 1).reshape(-1, f)
        return (gf.T @ col).reshape(w.shape)

    pv = [(x, vjp_x), (w, vjp_w)]
    if b is not None:
        pv.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return Tensor._make(out, "conv2d", pv)


def region_stack(x: Tensor, k: int, stride: int) -> Tensor:
    """Stack k×k pooling regions of [B,C,H,W] into [B,C,H',W',k*k].

    The last axis is the row-major scan of each region (left-to-right,
    top-to-bottom).  Input must tile exactly: (H-k) and (W-k) divisible
    by stride, H,W >= k.  No implicit padding.
    """
    if k <= 0 or stride <= 0:
        raise ValueError(f"region_stack: k={k} stride={stride} must be positive")
    if x.ndim != 4:
        raise ShapeMismatch("region_stack", x.shape, ("B", "C", "H", "W"))
    b, c, h, w = x.shape
    if h < k or w < k or (h - k) % stride or (w - k) % stride:
        raise ShapeMismatch("region_stack", x.shape, (k, k))
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    out = np.empty((b, c, oh, ow, k * k), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            out[..., dy * k + dx] = x.data[:, :, dy:dy + stride * oh:stride,
                                           dx:dx + stride * ow:stride]

    def vjp(g):
        buf = np.zeros_like(x.data)
        for dy in range(k):
            for dx in range(k):
                buf[:, :, dy:dy + stride * oh:stride,
                    dx:dx + stride * ow:stride] += g[..., dy * k + dx]
        return buf

    return Tensor._make(out, "region_stack", [(x, vjp)])


# named-op dispatch, handy for the gradcheck CLI and tests
_OPS = {
    "add": lambda a, b: a + b,
    "mul": lambda a, b: a * b,
    "matmul": lambda a, b: a @ b,
    "conv2d": conv2d,
    "concat": lambda *ts: concat(ts),
    "reduce_mean": lambda a: a.mean(),
    "reduce_max": lambda a: a.max(),
    "sigmoid": lambda a: a.sigmoid(),
    "tanh": lambda a: a.tanh(),
    "relu": lambda a: a.relu(),
    "leaky_relu": lambda a, alpha=0.01: a.leaky_relu(alpha),
}


def forward_op(name: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive op by name. Raises KeyError for unknown ops."""
    return _OPS[name](*inputs, **kwargs)
