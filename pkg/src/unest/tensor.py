"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op returns a new :class:`Tensor`; when any input requires grad the
result records its parents and a closure mapping the output gradient to
input gradients.  Graphs are rebuilt on every forward pass.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# -- elementwise binary ---------------------------------------------------


def binary_op(a, b, kind: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    if kind == "add":
        data = a.data + b.data

        def fn(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    elif kind == "sub":
        data = a.data - b.data

        def fn(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    elif kind == "mul":
        data = a.data * b.data

        def fn(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    elif kind == "div":
        data = a.data / b.data

        def fn(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

    else:
        raise ValueError(f"unknown binary op {kind!r}")
    return _make(data, (a, b), fn, kind)


def add(a, b):
    return binary_op(a, b, "add")


def sub(a, b):
    return binary_op(a, b, "sub")


def mul(a, b):
    return binary_op(a, b, "mul")


def div(a, b):
    return binary_op(a, b, "div")


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), fn, "matmul")


# -- shape manipulation ---------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)
    return _make(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(data, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    data = x.data[index]

    def fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(data, dtype=DTYPE), (x,), fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(data, tensors, fn, "concat")


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """``take_along_axis`` on the last axis; ``index`` broadcasts against ``x``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    full = np.broadcast_to(index, x.shape[:-1] + index.shape[-1:])
    data = np.take_along_axis(x.data, full, axis=-1)
    n = x.shape[-1]

    def fn(g):
        rows = g.reshape(-1, g.shape[-1])
        cols = full.reshape(-1, full.shape[-1])
        flat = (np.arange(rows.shape[0])[:, None] * n + cols).ravel()
        out = np.bincount(flat, weights=rows.ravel(), minlength=rows.shape[0] * n)
        return (out.reshape(x.shape),)

    return _make(data, (x,), fn, "gather_last")


def scatter_last(x: Tensor, index: np.ndarray, n: int) -> Tensor:
    """Adjoint of :func:`gather_last`: place ``x[..., t]`` at column ``index[..., t]``.

    Colliding targets are summed.
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    full = np.broadcast_to(index, x.shape)
    rows = x.data.reshape(-1, x.shape[-1])
    cols = full.reshape(-1, x.shape[-1])
    flat = (np.arange(rows.shape[0])[:, None] * n + cols).ravel()
    data = np.bincount(flat, weights=rows.ravel(), minlength=rows.shape[0] * n)
    data = data.reshape(x.shape[:-1] + (n,))

    def fn(g):
        return (np.take_along_axis(g, full, axis=-1),)

    return _make(data, (x,), fn, "scatter_last")


# -- reductions -----------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(data), (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def abs_mean(x: Tensor) -> Tensor:
    return mean(tabs(x))


def reduce(x: Tensor, kind: str) -> Tensor:
    if kind == "sum":
        return tsum(x)
    if kind == "mean":
        return mean(x)
    if kind == "abs_mean":
        return abs_mean(x)
    raise ValueError(f"unknown reduction {kind!r}")


# -- elementwise unary ----------------------------------------------------


def _unary(x: Tensor, data: np.ndarray, dfdx: np.ndarray, op: str) -> Tensor:
    return _make(data, (x,), lambda g: (g * dfdx,), op)


def _check_finite(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise DomainError(f"{op} received non-finite input")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _unary(x, s, s * (1.0 - s), "sigmoid")


class KinkMargin:
    """Records how close any piecewise op got to its breakpoint.

    Used as a context manager around a forward pass; ``value`` is the
    smallest |input - breakpoint| seen.  Finite differences with a step
    below this never straddle a kink.
    """

    _active: list["KinkMargin"] = []

    def __init__(self):
        self.value = math.inf

    def __enter__(self) -> "KinkMargin":
        KinkMargin._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        KinkMargin._active.remove(self)


def note_kink(values, at: float = 0.0) -> None:
    if KinkMargin._active:
        v = np.asarray(values, dtype=DTYPE)
        if v.size:
            d = float(np.min(np.abs(v - at)))
            for m in KinkMargin._active:
                m.value = min(m.value, d)


def relu(x) -> Tensor:
    x = as_tensor(x)
    note_kink(x.data)
    pos = x.data > 0
    return _unary(x, np.where(pos, x.data, 0.0), pos.astype(DTYPE), "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    note_kink(x.data)
    pos = x.data > 0
    return _unary(x, np.where(pos, x.data, slope * x.data), np.where(pos, 1.0, slope), "leaky_relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    # tanh approximation
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    du = _GELU_C * (1.0 + 3 * 0.044715 * v2)
    d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
    return _unary(x, 0.5 * v * (1.0 + t), d, "gelu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _unary(x, t, 1.0 - t * t, "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _unary(x, e, e, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    return _unary(x, np.log(x.data), 1.0 / x.data, "log")


def tabs(x) -> Tensor:
    x = as_tensor(x)
    note_kink(x.data)
    # subgradient 0 at the kink
    return _unary(x, np.abs(x.data), np.sign(x.data), "abs")


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    note_kink(x.data, lo)
    note_kink(x.data, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _unary(x, np.clip(x.data, lo, hi), inside.astype(DTYPE), "clip")


def activation(x, kind: str) -> Tensor:
    fns = {"sigmoid": sigmoid, "relu": relu, "gelu": gelu, "tanh": tanh, "log": log}
    if kind not in fns:
        raise ValueError(f"unknown activation {kind!r}")
    return fns[kind](x)


# -- normalisation / softmax ---------------------------------------------


def softmax(x, axis: int = -1, where: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax.

    ``where`` (boolean, broadcastable) restricts the normaliser to the
    selected entries; every unselected entry gets weight exactly 0.
    """
    x = as_tensor(x)
    _check_finite(x, "softmax")
    if where is None:
        z = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        where = np.broadcast_to(where, x.shape)
        if not np.all(where.any(axis=axis)):
            raise DomainError("softmax over an empty selection")
        z = np.where(where, x.data, -np.inf)
        z = z - z.max(axis=axis, keepdims=True)
        e = np.where(where, np.exp(z), 0.0)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), fn, "softmax")


def layer_norm(x, gamma, beta, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise over one axis, then apply the affine ``gamma * xhat + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[axis]
    if gamma.size != n or beta.size != n:
        raise ShapeError(f"layer_norm affine size {gamma.shape}/{beta.shape} vs extent {n}")
    axis = axis % x.ndim
    bshape = [1] * x.ndim
    bshape[axis] = n
    gd, bd = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gd + bd
    red = tuple(i for i in range(x.ndim) if i != axis)

    def fn(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=axis, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True)
        )
        gg = (g * xhat).sum(axis=red).reshape(gamma.shape)
        gb = g.sum(axis=red).reshape(beta.shape)
        return gx, gg, gb

    return _make(data, (x, gamma, beta), fn, "layer_norm")


# -- convolutions ---------------------------------------------------------


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected C×H×W or B×C×H×W input, got {x.shape}")


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: [B,]C×H×W, ``w``: O×C×k×k."""
    x, w = as_tensor(x), as_tensor(w)
    xb, squeeze = _as_batched(x)
    B, C, H, W = xb.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise ShapeError(f"kernel {kh}×{kw} larger than padded input {Hp}×{Wp}")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    # channel-major layout keeps copies sequential along the width axis
    xc = np.ascontiguousarray(xb.data.transpose(1, 0, 2, 3))
    xp = np.pad(xc, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xc
    wm = w.data.reshape(O, C * kh * kw)
    cols = None
    if O < C:
        # project channels first, then sum the k×k shifted planes
        y = (w.data.transpose(2, 3, 0, 1).reshape(kh * kw * O, C) @ xp.reshape(C, -1))
        y = y.reshape(kh, kw, O, B, Hp, Wp)
        acc = np.zeros((O, B, Ho, Wo))
        for i in range(kh):
            for j in range(kw):
                acc += y[i, j, :, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]  # C,B,Ho,Wo,kh,kw
        cols = np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(C * kh * kw, B * Ho * Wo)
        acc = (wm @ cols).reshape(O, B, Ho, Wo)
    out = acc.transpose(1, 0, 2, 3)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, O, 1, 1)

    def fn(g):
        gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gm = gc.reshape(O, B * Ho * Wo)
        gcols = None
        if stride == 1 and O < C:
            # windows of the fully padded output gradient; row (o, a, c) holds
            # g shifted by (kh-1-a, kw-1-c), which serves both gradients below
            gp = np.pad(gc, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            win = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(2, 3))
            gcols = np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(O * kh * kw, B * Hp * Wp)
        gw = None
        if w.requires_grad:
            if cols is not None:
                gw = (gm @ cols.T).reshape(w.shape)
            elif gcols is not None:
                gw = (gcols @ xp.reshape(C, -1).T).reshape(O, kh, kw, C)[:, ::-1, ::-1].transpose(0, 3, 1, 2)
            else:
                gw = np.empty(w.shape)
                for i in range(kh):
                    for j in range(kw):
                        sl = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
                        gw[:, :, i, j] = gm @ sl.reshape(C, -1).T
        gx = None
        if xb.requires_grad:
            if gcols is not None:
                # correlate the fully padded output gradient with the flipped kernel
                wf = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, O * kh * kw)
                gxp = (wf @ gcols).reshape(C, B, Hp, Wp)
            else:
                dcols = (wm.T @ gm).reshape(C, kh, kw, B, Ho, Wo)
                gxp = np.zeros((C, B, Hp, Wp))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, i, j]
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
            gx = gx.transpose(1, 0, 2, 3)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (xb, w) if b is None else (xb, w, b)
    out = _make(np.ascontiguousarray(out), parents, fn, "conv2d")
    return reshape(out, out.shape[1:]) if squeeze else out


def deconv2d(x, w, b=None, stride: int = 2, k: int = 2) -> Tensor:
    """Transposed convolution, 2×2 kernel, stride 2. ``w``: Cin×Cout×2×2.

    Adjoint of ``conv2d(., w, stride=2)`` when ``b`` is None.
    """
    if stride != 2 or k != 2:
        raise ValueError(f"unsupported deconv configuration stride={stride}, k={k}")
    x, w = as_tensor(x), as_tensor(w)
    xb, squeeze = _as_batched(x)
    B, C, H, W = xb.shape
    if w.shape[0] != C or w.shape[2:] != (2, 2):
        raise ShapeError(f"deconv2d weight {w.shape} incompatible with input {x.shape}")
    Co = w.shape[1]
    t = np.tensordot(xb.data, w.data, axes=([1], [0]))  # B,H,W,Co,2,2
    out = t.transpose(0, 3, 1, 4, 2, 5).reshape(B, Co, 2 * H, 2 * W)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, Co, 1, 1)

    def fn(g):
        g6 = g.reshape(B, Co, H, 2, W, 2)
        gx = np.tensordot(g6, w.data, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(xb.data, g6, axes=([0, 2, 3], [0, 2, 4]))  # C,Co,2,2
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (xb, w) if b is None else (xb, w, b)
    out = _make(np.ascontiguousarray(out), parents, fn, "deconv2d")
    return reshape(out, out.shape[1:]) if squeeze else out


# -- backward -------------------------------------------------------------


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


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=DTYPE)


# -- verification ---------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between autodiff and central differences.

    ``coords`` restricts the comparison to selected flat indices of ``x``.
    """
    x0 = np.array(x.data, dtype=DTYPE)
    probe = Tensor(x0.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    g_ad = np.zeros_like(x0) if probe.grad is None else probe.grad
    idx = range(x0.size) if coords is None else coords
    worst = 0.0
    flat = x0.reshape(-1)
    for i in idx:
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        fp = f(Tensor(plus.reshape(x0.shape))).item()
        fm = f(Tensor(minus.reshape(x0.shape))).item()
        g_fd = (fp - fm) / (2 * h)
        ga = g_ad.reshape(-1)[i]
        err = abs(ga - g_fd) / max(1e-8, abs(ga) + abs(g_fd))
        worst = max(worst, err)
    return worst


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(as_tensor(t).data))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(as_tensor(t).data))
