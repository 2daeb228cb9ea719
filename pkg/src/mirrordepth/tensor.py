"""A small tape-based reverse-mode differentiation engine on numpy arrays.

Tensors hold float32 data by default. Ops keep the dtype of their inputs, so
promoting leaves to float64 (what :func:`mirrordepth.gradcheck.grad_check`
does) runs the whole graph in 64-bit precision.

Broadcasting is restricted to a trailing-dimension operand (bias or per-channel
scale); everything else must match exactly.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


_GRAD_ENABLED = True
_CHECK_FINITE = False
_KINK_LOG: list | None = None

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


@contextlib.contextmanager
def no_grad():
    """Run forward ops without recording a tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern of every piecewise-linear op run inside.

    Yields a list that receives one packed bit mask per ``relu`` or
    ``clamp_min`` call. Two evaluations with equal lists took the same side
    of every kink.
    """
    global _KINK_LOG
    prev, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


def _note_branch(keep: np.ndarray) -> None:
    if _KINK_LOG is not None:
        _KINK_LOG.append(np.packbits(keep).tobytes())


def set_check_finite(flag: bool) -> None:
    """Make every forward op assert its output is finite (debug aid)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


def _as_float(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype != np.float32 and arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_float(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Interior nodes get their gradient stored too. Nodes are visited in
        reverse of a fixed depth-first topological order, so the summation
        order (and therefore the result) is reproducible bit for bit.
        """
        if self.data.shape != ():
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                node.grad = g
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
            else:
                if node.grad is None or node.grad.dtype != g.dtype:
                    node.grad = np.zeros_like(node.data)
                node.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _topological_order(root: Tensor) -> list[Tensor]:
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


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def custom_op(data, parents: Sequence[Tensor], backward: Callable, op: str = "custom") -> Tensor:
    """Record a user-defined op; ``backward(g)`` returns one grad per parent."""
    return _result(_as_float(data), parents, backward, op)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# ---------------------------------------------------------------- elementwise


def _trailing(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or _trailing(a.shape, b.shape) or _trailing(b.shape, a.shape):
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} only broadcast on trailing dims")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _wrap(a)
        c = b

        def bw_scalar(g):
            return (g,)

        return _result(a.data + np.asarray(c, dtype=a.dtype), (a,), bw_scalar, "add_scalar")
    a = _wrap(a)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    return add(a, neg(b)) if isinstance(b, Tensor) else add(a, -b)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    """Square root; the derivative at 0 is taken as finite (0.5/tiny)."""
    if np.any(a.data < 0):
        raise ContractError("sqrt of a negative value")
    y = np.sqrt(a.data)
    tiny = np.finfo(y.dtype).tiny

    def bw(g):
        return (g * 0.5 / np.maximum(y, tiny),)

    return _result(y, (a,), bw, "sqrt")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data >= lo
    _note_branch(keep)
    return _result(np.where(keep, a.data, np.asarray(lo, a.dtype)), (a,), lambda g: (g * keep,), "clamp_min")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    _note_branch(keep)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "relu")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5x(1 + tanh(c(x + 0.044715x^3))), c = sqrt(2/pi)."""
    x = a.data
    inner = GELU_C * (x + GELU_K * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_K * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(y.astype(x.dtype, copy=False), (a,), bw, "gelu")


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated as max(x, 0) + log1p(e^-|x|).

    The result is floored at the dtype's smallest normal number so it stays
    strictly positive for very negative inputs; the floor is ignored by the
    gradient, which is always sigmoid(x).
    """
    x = a.data
    y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    y = np.maximum(y, np.finfo(x.dtype).tiny).astype(x.dtype, copy=False)
    sig = (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype, copy=False)
    return _result(y, (a,), lambda g: (g * sig,), "softplus")


# ---------------------------------------------------------------- reductions / shape


def tsum(a: Tensor, axis=None) -> Tensor:
    y = np.sum(a.data, axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.asarray(y, dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(np.transpose(a.data, axes)), (a,),
                   lambda g: (np.transpose(g, inv),), "transpose")


def take(a: Tensor, idx) -> Tensor:
    """Basic or boolean-mask indexing; the gradient scatters back."""
    y = a.data[idx]

    def bw(g):
        out = np.zeros_like(a.data)
        if isinstance(idx, np.ndarray) and idx.dtype != bool:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _result(np.array(y, copy=True), (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    dtype = np.result_type(*[t.dtype for t in tensors])
    y = np.concatenate([t.data.astype(dtype, copy=False) for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _result(y, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(m,k)@(k,n)``; also ``(...,m,k)@(k,n)`` and equal-batch ``(B,m,k)@(B,k,n)``."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    y = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _result(y, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if d < 1:
        raise DimensionError("layer_norm over an empty axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = var + eps
    # eps=0 on a constant vector: define the normalised output as 0
    inv = np.where(denom > 0, 1.0 / np.sqrt(np.where(denom > 0, denom, 1.0)), 0.0).astype(x.dtype, copy=False)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = g * xhat
        return (inv * (g - gm - xhat * gx.mean(axis=-1, keepdims=True)),)

    y = _result(xhat, (x,), bw, "layer_norm")
    if gamma is not None:
        y = mul(y, gamma)
    if beta is not None:
        y = add(y, beta)
    return y


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax; entries where ``mask`` is False get probability 0."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y.astype(x.dtype, copy=False), (x,), bw, "softmax")


# ---------------------------------------------------------------- convolutions


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``(C_in,H,W)`` with ``(C_out,C_in,k,k)`` filters."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: bad shapes x={x.shape} w={w.shape}")
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    s, p = int(stride), int(padding)
    if s < 1 or p < 0:
        raise DimensionError("conv2d: stride must be >= 1 and padding >= 0")
    ho, wo = _conv_out(h, k, s, p), _conv_out(wd, k, s, p)
    if h + 2 * p < k or wd + 2 * p < k or ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: non-positive output size for input {x.shape}, k={k}, s={s}, p={p}")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    cols = kernels.im2col(xp, k, s, ho, wo)
    wm = w.data.reshape(c_out, -1)
    y = (wm @ cols).reshape(c_out, ho, wo)
    if bias is not None:
        y = y + bias.data[:, None, None]

    def bw(g):
        gm = g.reshape(c_out, -1)
        gw = (gm @ cols.T).reshape(w.shape)
        gcols = wm.T @ gm
        gxp = kernels.col2im(gcols, c_in, h + 2 * p, wd + 2 * p, k, s, ho, wo)
        gx = gxp[:, p:p + h, p:p + wd] if p else gxp
        out = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            out.append(gm.sum(axis=1))
        return tuple(out)

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(y, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; ``w`` is ``(C_in, C_out, k, k)``.

    Output size is ``(H-1)*stride - 2*padding + k``. With the same weight this
    is the adjoint of :func:`conv2d` (weight read as ``(C_out, C_in, k, k)``).
    """
    if x.ndim != 3 or w.ndim != 4 or w.shape[0] != x.shape[0] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv_transpose2d: bad shapes x={x.shape} w={w.shape}")
    c_in, h, wd = x.shape
    _, c_out, k, _ = w.shape
    s, p = int(stride), int(padding)
    if s < 1 or p < 0:
        raise DimensionError("conv_transpose2d: stride must be >= 1 and padding >= 0")
    hp, wp = (h - 1) * s + k, (wd - 1) * s + k
    ho, wo = hp - 2 * p, wp - 2 * p
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv_transpose2d: non-positive output size for {x.shape}, k={k}, s={s}, p={p}")
    wm = w.data.reshape(c_in, -1)
    xm = x.data.reshape(c_in, -1)
    cols = wm.T @ xm
    full = kernels.col2im(cols, c_out, hp, wp, k, s, h, wd)
    y = full[:, p:p + ho, p:p + wo] if p else full
    y = np.ascontiguousarray(y)
    if bias is not None:
        y = y + bias.data[:, None, None]

    def bw(g):
        gfull = np.pad(g, ((0, 0), (p, p), (p, p))) if p else g
        gcols = kernels.im2col(gfull, k, s, h, wd)
        gx = (wm @ gcols).reshape(x.shape)
        gw = (xm @ gcols.T).reshape(w.shape)
        out = [gx, gw]
        if bias is not None:
            out.append(g.reshape(c_out, -1).sum(axis=1))
        return tuple(out)

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(y, parents, bw, "conv_transpose2d")


# ---------------------------------------------------------------- resampling


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped (align_corners=False)
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Bilinear resampling of ``(C,H,W)`` with the half-pixel convention."""
    if target_h < 1 or target_w < 1:
        raise DimensionError("bilinear_resize: targets must be >= 1")
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize expects (C,H,W), got {x.shape}")
    _, h, w = x.shape
    if (h, w) == (target_h, target_w):
        return _result(x.data.copy(), (x,), lambda g: (g,), "resize_identity")
    ry = _interp_matrix(target_h, h, x.dtype)
    rx = _interp_matrix(target_w, w, x.dtype)
    y = np.matmul(np.matmul(ry, x.data), rx.T)

    def bw(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return _result(y, (x,), bw, "bilinear_resize")


# ---------------------------------------------------------------- parameters


@dataclass
class Parameter:
    """A named tensor; frozen parameters never get gradients or updates."""

    name: str
    tensor: Tensor
    frozen: bool = False

    def __post_init__(self):
        self.tensor.requires_grad = not self.frozen
        self.tensor.grad = None if self.frozen else np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    @property
    def size(self) -> int:
        return int(self.tensor.data.size)
