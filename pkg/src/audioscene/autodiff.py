"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
result remembers its parents and a closure mapping the output gradient to the
input gradients. :func:`backward` walks that graph once in reverse
topological order.

Conventions:

* ``conv2d`` is a cross-correlation (no kernel flip).
* Broadcasting is limited to python scalars against tensors; everything else
  needs exactly matching shapes. ``add_bias`` covers the per-channel case.
* Reductions accumulate in float64 regardless of the storage dtype.
* A non-finite value produced by any forward op raises ``FloatingPointError``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

Number = (int, float, np.floating, np.integer)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite value produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Number):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Number):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    if isinstance(b, Number):
        a = as_tensor(a)
        c = float(b)
        return Tensor._result(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")
    if isinstance(a, Number):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if isinstance(b, Number):
        return add(a, -float(b))
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if isinstance(b, Number):
        return scale(a, b)
    if isinstance(a, Number):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, k: float) -> Tensor:
    a = as_tensor(a)
    k = a.data.dtype.type(k)
    return Tensor._result(a.data * k, (a,), lambda g: (g * k,), "scale")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return Tensor._result(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, alpha: float = 0.2) -> Tensor:
    a = as_tensor(a)
    alpha_t = a.data.dtype.type(alpha)
    slope = np.where(a.data > 0, a.data.dtype.type(1), alpha_t)
    return Tensor._result(a.data * slope, (a,), lambda g: (g * slope,), "leaky_relu")


def softplus(a) -> Tensor:
    """log(1 + exp(a)), stable for large |a|."""
    a = as_tensor(a)
    x = a.data
    y = np.logaddexp(0, x).astype(x.dtype)

    def back(g):
        sig = 0.5 * (1 + np.tanh(0.5 * x))
        return (g * sig.astype(x.dtype),)

    return Tensor._result(y, (a,), back, "softplus")


def add_bias(x, b, axis: int = 1) -> Tensor:
    """Add a 1-D bias along ``axis`` of ``x`` (the only non-trivial broadcast)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[axis] != b.shape[0]:
        raise ValueError(f"add_bias: bias of shape {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)

    def back(g):
        return g, g.sum(axis=other, dtype=np.float64).astype(b.dtype)

    return Tensor._result(x.data + b.data.reshape(view), (x, b), back, "add_bias")


# -- shape ---------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a) -> Tensor:
    """Transpose of a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return Tensor._result(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def slice_rows(a, start: int, stop: int) -> Tensor:
    """``a[start:stop]`` along the leading axis."""
    a = as_tensor(a)
    full = a.shape

    def back(g):
        out = np.zeros(full, dtype=g.dtype)
        out[start:stop] = g
        return (out,)

    return Tensor._result(a.data[start:stop], (a,), back, "slice_rows")


# -- reductions ----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    keep = tuple(1 if i in axes else n for i, n in enumerate(shape))
    y = a.data.sum(axis=axes, dtype=np.float64).astype(a.dtype)

    def back(g):
        return (np.broadcast_to(np.reshape(g, keep), shape).astype(a.dtype, copy=True),)

    return Tensor._result(np.asarray(y), (a,), back, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum_(a, axes), 1.0 / count)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    (ax,) = _norm_axis(axis, a.ndim)
    x = a.data.astype(np.float64)
    shifted = x - x.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def back(g):
        g64 = g.astype(np.float64)
        return ((g64 - p * g64.sum(axis=ax, keepdims=True)).astype(a.dtype),)

    return Tensor._result(y.astype(a.dtype), (a,), back, "log_softmax")


# -- linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv_args(stride: int, pad: int) -> None:
    if int(stride) != stride or stride < 1:
        raise ValueError(f"invalid stride {stride}")
    if int(pad) != pad or pad < 0:
        raise ValueError(f"invalid pad {pad}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Patches of a padded (N, C, H, W) array as (N*Ho*Wo, C*kh*kw)."""
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def _col2im(cols: np.ndarray, out_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add (N*Ho*Wo, C*kh*kw) patches back into a padded (N, C, Hp, Wp) array."""
    n, c = out_shape[:2]
    out = np.zeros(out_shape, dtype=cols.dtype)
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += blocks[:, :, i, j]
    return out


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (F, C, kh, kw) kernels."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_args(stride, pad)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ValueError("conv2d: kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(f, -1)
    y = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _col2im(g2 @ wmat, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw

    return Tensor._result(np.ascontiguousarray(y), (x, w), back, "conv2d")


def conv2d_transposed(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``x`` is (N, F, H, W) and ``w`` is (F, C, kh, kw), the same layout conv2d
    uses for a C -> F map. Output size is ``(H - 1) * stride - 2 * pad + kh``.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_args(stride, pad)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ValueError(f"conv2d_transposed: incompatible shapes {x.shape} and {w.shape}")
    n, f, h, wd = x.shape
    _, c, kh, kw = w.shape
    hp, wp = (h - 1) * stride + kh, (wd - 1) * stride + kw
    if hp - 2 * pad < 1 or wp - 2 * pad < 1:
        raise ValueError("conv2d_transposed: padding exceeds output size")
    x2 = x.data.transpose(0, 2, 3, 1).reshape(n * h * wd, f)
    wmat = w.data.reshape(f, -1)
    full = _col2im(x2 @ wmat, (n, c, hp, wp), kh, kw, stride, h, wd)
    y = full[:, :, pad:hp - pad, pad:wp - pad] if pad else full

    def back(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        cols, _, _ = _im2col(gp, kh, kw, stride)
        gx = None
        if x.requires_grad:
            gx = (cols @ wmat.T).reshape(n, h, wd, f).transpose(0, 3, 1, 2)
        gw = (x2.T @ cols).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    return Tensor._result(np.ascontiguousarray(y), (x, w), back, "conv2d_transposed")


# -- backward ------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss``.

    Returns a map from every ``requires_grad`` leaf reachable from ``loss``
    (or only those in ``inputs``) to its gradient array. Leaves that do not
    participate map to zeros when explicitly requested via ``inputs``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    grads[id(node)] = g
                    leaves[id(node)] = node
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if inputs is None:
        return {leaves[k]: grads[k] for k in leaves}
    out = {}
    for t in inputs:
        g = grads.get(id(t))
        out[t] = np.zeros_like(t.data) if g is None else g
    return out
