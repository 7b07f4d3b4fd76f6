"""Minimal tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 for training, float64 for gradient
checks) and record the primitive ops applied to them. Calling
``backward()`` on a scalar output replays the recorded tape in reverse
and accumulates gradients into every reachable tensor that requires
them. Only the operations the segmentation stack actually needs are
implemented; every one of them is gradient-checked in the test suite.

Broadcasting is deliberately restricted to scalar-tensor and trailing
bias-add so that shape bugs surface at the call site instead of three
layers downstream.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "linear",
    "tsum",
    "tmean",
    "texp",
    "tlog",
    "pow_scalar",
    "clamp",
    "sigmoid",
    "gelu",
    "softmax_lastaxis",
    "layer_norm",
    "reshape",
    "transpose",
    "concat",
    "pad",
    "conv2d",
    "conv_transpose2d",
    "bilinear_resize",
    "window_partition",
    "window_unpartition",
    "gradient_check",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Creation order doubles as the tape order; see Tape.trace.
_seq_counter = itertools.count()

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """N-dimensional float array participating in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
        self._op = "leaf"
        self._seq = next(_seq_counter)

    # -- basic introspection -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag}, op={self._op})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded tape."""
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar output, got shape {self.shape}"
            )
        Tape.trace(self).backward(self)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.data.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._seq = next(_seq_counter)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


class Tape:
    """Ordered record of the primitive ops reachable from a root tensor.

    The record order is creation order, so walking it reversed is a valid
    topological order: an op's output is always created after its inputs.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._grad_fn is not None:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def backward(self, root: Tensor) -> None:
        flow: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        held: dict[int, Tensor] = {id(root): root}
        for node in reversed(self.nodes):
            g = flow.pop(id(node), None)
            held.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flow:
                    flow[key] = flow[key] + pg
                else:
                    flow[key] = pg
                    held[key] = parent
        for key, g in flow.items():
            leaf = held[key]
            if leaf.requires_grad:
                leaf.grad = g if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise binary ops (equal shapes, scalar, or trailing bias-add only)
# ---------------------------------------------------------------------------


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.size == 1 or b.data.size == 1:
        return
    if len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0]:
        return  # bias-add: b broadcasts over leading axes of a
    if len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0]:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} "
                     "(only equal, scalar, or trailing-dim bias allowed)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.data.dtype)
    _check_binary(a, b, "add")

    def grad_fn(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.data.dtype)
    _check_binary(a, b, "sub")

    def grad_fn(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.data.dtype)
    _check_binary(a, b, "mul")

    def grad_fn(g):
        return (_reduce_to(g * b.data, a.data.shape),
                _reduce_to(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.data.dtype)
    _check_binary(a, b, "div")

    def grad_fn(g):
        return (_reduce_to(g / b.data, a.data.shape),
                _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), grad_fn, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


# ---------------------------------------------------------------------------
# matmul / linear
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports (m,k)@(k,n), batched@batched with equal
    leading dims, and batched@(k,n)."""
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeError(f"matmul requires >=2-D operands, got {A.shape} and {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {A.shape} vs {B.shape}")
    if B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise ShapeError(f"matmul leading dimensions differ: {A.shape} vs {B.shape}")

    out = A @ B

    def grad_fn(g):
        da = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            db = None
        elif B.ndim == 2 and A.ndim > 2:
            db = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            db = np.swapaxes(A, -1, -2) @ g
        return da, db

    return _make(out, (a, b), grad_fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ W.T + b with W of shape (d_out, d_in) and x (..., d_in)."""
    X, W = x.data, weight.data
    if W.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got {W.shape}")
    if X.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input dim {X.shape} does not match weight {W.shape}")
    out = X @ W.T
    if bias is not None:
        if bias.data.shape != (W.shape[0],):
            raise ShapeError(f"linear bias shape {bias.data.shape} != ({W.shape[0]},)")
        out = out + bias.data

    d_out = W.shape[0]

    def grad_fn(g):
        g2 = g.reshape(-1, d_out)
        dx = (g2 @ W).reshape(X.shape) if x.requires_grad else None
        dw = g2.T @ X.reshape(-1, X.shape[-1]) if weight.requires_grad else None
        if bias is not None:
            db = g2.sum(axis=0) if bias.requires_grad else None
            return dx, dw, db
        return dx, dw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn, "linear")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if axes is None:
            return (np.broadcast_to(g, x.data.shape),)
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, x.data.shape),)

    return _make(np.asarray(out), (x,), grad_fn, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, x.data.ndim)
    count = x.data.size if axes is None else int(np.prod([x.data.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if axes is None:
            return (np.broadcast_to(g / count, x.data.shape),)
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg / count, x.data.shape),)

    return _make(np.asarray(out), (x,), grad_fn, "mean")


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------


def texp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def tlog(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def pow_scalar(x: Tensor, p: float) -> Tensor:
    out = x.data ** p
    return _make(out, (x,), lambda g: (g * p * x.data ** (p - 1),), "pow")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = ((x.data >= lo) & (x.data <= hi)).astype(x.data.dtype)
    return _make(out, (x,), lambda g: (g * inside,), "clamp")


def sigmoid(x: Tensor) -> Tensor:
    # Stable in both tails: exp of a non-positive argument only.
    d = x.data
    e = np.exp(-np.abs(d))
    out = (np.where(d >= 0, 1.0, e) / (1.0 + e)).astype(d.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU (smooth, exactly differentiable)."""
    d = x.data
    d2 = d * d
    t = np.tanh(_GELU_C * (d + 0.044715 * d2 * d))
    out = 0.5 * d * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _make(out, (x,), grad_fn, "gelu")


def softmax_lastaxis(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction for stability."""
    if x.data.ndim == 0 or x.data.shape[-1] == 0:
        raise ShapeError(f"softmax requires a non-empty last axis, got shape {x.shape}")
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with affine parameters."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        else:
            dx = None
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), grad_fn, "layer_norm")


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.data.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _make(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, grad_fn, "concat")


def tslice(x: Tensor, key) -> Tensor:
    """Basic (int/slice/ellipsis) indexing; advanced indexing is rejected."""
    keys = key if isinstance(key, tuple) else (key,)
    for k in keys:
        if not isinstance(k, (int, np.integer, slice, type(Ellipsis), type(None))):
            raise ShapeError(f"slice supports basic indexing only, got {type(k).__name__}")
    out = x.data[key]

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        dx[key] = g
        return (dx,)

    return _make(out, (x,), grad_fn, "slice")


def pad(x: Tensor, pad_width, value: float = 0.0) -> Tensor:
    pw = tuple((int(a), int(b)) for a, b in pad_width)
    if len(pw) != x.data.ndim:
        raise ShapeError(f"pad needs one (before, after) pair per axis, got {len(pw)} "
                         f"for ndim {x.data.ndim}")
    out = np.pad(x.data, pw, mode="constant", constant_values=value)
    crop = tuple(slice(a, a + n) for (a, _), n in zip(pw, x.data.shape))
    return _make(out, (x,), lambda g: (g[crop],), "pad")


# ---------------------------------------------------------------------------
# 2-D convolutions (single sample, NCHW without the N)
# ---------------------------------------------------------------------------

_conv_index_cache: dict[tuple, np.ndarray] = {}


def _conv_scatter_index(cin, hp, wp, kh, kw, stride):
    """Flat indices into a (cin, hp, wp) buffer for each im2col column entry.

    Layout matches columns of shape (ho*wo, cin*kh*kw).
    """
    key = (cin, hp, wp, kh, kw, stride)
    idx = _conv_index_cache.get(key)
    if idx is None:
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        oy = (np.arange(ho) * stride)[:, None, None, None, None]
        ox = (np.arange(wo) * stride)[None, :, None, None, None]
        c = np.arange(cin)[None, None, :, None, None]
        ky = np.arange(kh)[None, None, None, :, None]
        kx = np.arange(kw)[None, None, None, None, :]
        idx = (c * hp * wp + (oy + ky) * wp + (ox + kx)).reshape(ho * wo, cin * kh * kw)
        _conv_index_cache[key] = idx
    return idx


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(cin, hp, wp) -> (ho*wo, cin*kh*kw) patch matrix."""
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    view = view[:, ::stride, ::stride]  # (cin, ho, wo, kh, kw)
    cin, ho, wo = view.shape[:3]
    return view.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of x (cin, h, w) with weight (cout, cin, kh, kw)."""
    X, W = x.data, weight.data
    if X.ndim != 3 or W.ndim != 4:
        raise ShapeError(f"conv2d expects (cin,h,w) and (cout,cin,kh,kw), "
                         f"got {X.shape} and {W.shape}")
    cout, cin, kh, kw = W.shape
    if X.shape[0] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {X.shape} vs weight {W.shape}")
    hp, wp = X.shape[1] + 2 * padding, X.shape[2] + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d input {X.shape} smaller than kernel {W.shape}")
    xp = np.pad(X, ((0, 0), (padding, padding), (padding, padding))) if padding else X
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    cols = xp.reshape(cin, -1).T if pointwise else _im2col(xp, kh, kw, stride)
    wmat = W.reshape(cout, -1)
    out = (cols @ wmat.T).T.reshape(cout, ho, wo)
    if bias is not None:
        if bias.data.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {bias.data.shape} != ({cout},)")
        out = out + bias.data[:, None, None]

    def grad_fn(g):
        gmat = g.reshape(cout, -1).T            # (ho*wo, cout)
        dw = (gmat.T @ cols).reshape(W.shape) if weight.requires_grad else None
        if not x.requires_grad:
            dx = None
        elif pointwise:
            dx = (gmat @ wmat).T.reshape(X.shape)  # every input used exactly once
        else:
            dcols = gmat @ wmat                 # (ho*wo, cin*kh*kw)
            idx = _conv_scatter_index(cin, hp, wp, kh, kw, stride)
            dxp = np.bincount(idx.ravel(), weights=dcols.ravel(),
                              minlength=cin * hp * wp).reshape(cin, hp, wp)
            dxp = dxp.astype(X.dtype, copy=False)
            dx = dxp[:, padding:padding + X.shape[1], padding:padding + X.shape[2]] \
                if padding else dxp
        if bias is not None:
            db = g.sum(axis=(1, 2)) if bias.requires_grad else None
            return dx, dw, db
        return dx, dw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 2) -> Tensor:
    """Transposed 2-D convolution of x (cin, h, w) with weight (cin, cout, kh, kw)."""
    X, W = x.data, weight.data
    if X.ndim != 3 or W.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects (cin,h,w) and (cin,cout,kh,kw), "
                         f"got {X.shape} and {W.shape}")
    cin, cout, kh, kw = W.shape
    if X.shape[0] != cin:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {X.shape} "
                         f"vs weight {W.shape}")
    h, w = X.shape[1:]
    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw

    xmat = X.reshape(cin, -1).T                  # (h*w, cin)
    wmat = W.reshape(cin, -1)                    # (cin, cout*kh*kw)
    cols = xmat @ wmat                           # (h*w, cout*kh*kw)
    # Scatter and gather reuse the conv index map with roles swapped.
    idx = _conv_scatter_index(cout, ho, wo, kh, kw, stride)
    out = np.bincount(idx.ravel(), weights=cols.ravel(),
                      minlength=cout * ho * wo).reshape(cout, ho, wo)
    out = out.astype(X.dtype, copy=False)
    if bias is not None:
        if bias.data.shape != (cout,):
            raise ShapeError(f"conv_transpose2d bias shape {bias.data.shape} != ({cout},)")
        out = out + bias.data[:, None, None]

    def grad_fn(g):
        dcols = g.reshape(-1)[idx]               # (h*w, cout*kh*kw)
        dx = (dcols @ wmat.T).T.reshape(X.shape) if x.requires_grad else None
        dw = (xmat.T @ dcols).reshape(W.shape) if weight.requires_grad else None
        if bias is not None:
            db = g.sum(axis=(1, 2)) if bias.requires_grad else None
            return dx, dw, db
        return dx, dw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn, "conv_transpose2d")


# ---------------------------------------------------------------------------
# bilinear resize
# ---------------------------------------------------------------------------

_resize_cache: dict[tuple, tuple] = {}


def _resize_maps(h, w, ho, wo):
    key = (h, w, ho, wo)
    maps = _resize_cache.get(key)
    if maps is None:
        sy = np.clip((np.arange(ho) + 0.5) * (h / ho) - 0.5, 0, h - 1)
        sx = np.clip((np.arange(wo) + 0.5) * (w / wo) - 0.5, 0, w - 1)
        y0 = np.floor(sy).astype(np.int64)
        x0 = np.floor(sx).astype(np.int64)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        ty = (sy - y0)[:, None]
        tx = (sx - x0)[None, :]
        corners = []
        for yy, wy in ((y0, 1 - ty), (y1, ty)):
            for xx, wx in ((x0, 1 - tx), (x1, tx)):
                flat = (yy[:, None] * w + xx[None, :]).reshape(-1)
                corners.append((flat, (wy * wx).reshape(-1)))
        maps = tuple(corners)
        _resize_cache[key] = maps
    return maps


def bilinear_resize(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear up/down sampling of x (c, h, w) to (c, ho, wo)."""
    X = x.data
    if X.ndim != 3:
        raise ShapeError(f"bilinear_resize expects (c,h,w), got {X.shape}")
    c, h, w = X.shape
    ho, wo = int(out_hw[0]), int(out_hw[1])
    if ho < 1 or wo < 1:
        raise ShapeError(f"bilinear_resize target must be positive, got {out_hw}")
    corners = _resize_maps(h, w, ho, wo)
    xf = X.reshape(c, -1)
    out = np.zeros((c, ho * wo), dtype=X.dtype)
    for flat, wgt in corners:
        out += xf[:, flat] * wgt
    out = out.reshape(c, ho, wo)

    def grad_fn(g):
        gf = g.reshape(c, -1)
        # One bincount over all four corners, channel-offset flat indices.
        offsets = (np.arange(c) * (h * w))[:, None]
        idx = np.concatenate([offsets + flat[None, :] for flat, _ in corners], axis=1)
        vals = np.concatenate([gf * wgt for _, wgt in corners], axis=1)
        dx = np.bincount(idx.ravel(), weights=vals.ravel(), minlength=c * h * w)
        return (dx.reshape(X.shape).astype(X.dtype, copy=False),)

    return _make(out, (x,), grad_fn, "bilinear_resize")


# ---------------------------------------------------------------------------
# window partition / unpartition
# ---------------------------------------------------------------------------


def window_partition(x: Tensor, window: int) -> Tensor:
    """(h, w, c) -> (num_windows, window*window, c); h and w must divide."""
    h, w, c = x.data.shape
    if h % window or w % window:
        raise ShapeError(f"window_partition: {h}x{w} not divisible by window {window}")
    t = reshape(x, (h // window, window, w // window, window, c))
    t = transpose(t, (0, 2, 1, 3, 4))
    return reshape(t, ((h // window) * (w // window), window * window, c))


def window_unpartition(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of window_partition back to (h, w, c)."""
    nw, t, c = windows.data.shape
    if t != window * window or nw != (h // window) * (w // window):
        raise ShapeError(f"window_unpartition: shape {windows.data.shape} inconsistent "
                         f"with window {window} and target {h}x{w}")
    x = reshape(windows, (h // window, w // window, window, window, c))
    x = transpose(x, (0, 2, 1, 3, 4))
    return reshape(x, (h, w, c))


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                   sample: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Everything runs in float64. Returns
    max_i |analytic_i - numeric_i| / max(1, |analytic_i|). With `sample`
    set, only that many coordinates (seeded choice) are probed; the
    default sweeps every coordinate.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    y = f(x64)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ValueError("gradient_check requires a scalar-valued function")
    y.backward()
    analytic = x64.grad if x64.grad is not None else np.zeros_like(x64.data)
    analytic = analytic.reshape(-1)

    base = x64.data.reshape(-1)
    n = base.size
    if sample is not None and sample < n:
        coords = np.random.default_rng(seed).choice(n, size=sample, replace=False)
    else:
        coords = np.arange(n)

    worst = 0.0
    with no_grad():
        for i in coords:
            xp = base.copy()
            xp[i] += h
            fp = float(f(Tensor(xp.reshape(x64.data.shape))).data)
            xm = base.copy()
            xm[i] -= h
            fm = float(f(Tensor(xm.reshape(x64.data.shape))).data)
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            if err > worst:
                worst = err
    return worst
