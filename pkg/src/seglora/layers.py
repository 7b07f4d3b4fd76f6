"""Small neural-network layer toolkit on top of the numerics engine.

Modules register parameters and submodules through attribute assignment,
torch-style, so the whole model can be walked for freezing, adapter
injection, counting, and checkpointing.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .numerics import Tensor


class Module:
    """Base class tracking parameters and submodules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
            self._modules.pop(name, None)
        elif isinstance(value, Module):
            self._modules[name] = value
            self._params.pop(name, None)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, mod in self._modules.items():
            yield from mod.named_modules(prefix + name + ".")

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def trainable_count(self) -> int:
        return sum(p.size for p in self.parameters() if p.requires_grad)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def astype(self, dtype):
        """Cast every parameter in place; used for 64-bit gradient checks."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True):
        own = dict(self.named_parameters())
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing {sorted(missing)}, "
                           f"unexpected {sorted(extra)}")
        for name, arr in arrays.items():
            if name in own:
                p = own[name]
                if p.data.shape != arr.shape:
                    raise ValueError(f"shape mismatch for {name}: "
                                     f"{p.data.shape} vs {arr.shape}")
                p.data = arr.astype(p.data.dtype)
        return self


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        idx = len(self._items)
        self._items.append(module)
        self._modules[str(idx)] = module
        object.__setattr__(self, str(idx), module)
        return self

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


class Linear(Module):
    """Affine map y = x W^T + b with weight (d_out, d_in)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        std = float(np.sqrt(2.0 / (d_in + d_out)))
        self.weight = Tensor(rng.normal(0.0, std, size=(d_out, d_in)).astype(np.float32),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nm.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nm.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        std = float(np.sqrt(2.0 / (c_in * kernel * kernel)))
        self.weight = Tensor(
            rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel)).astype(np.float32),
            requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nm.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 2, bias: bool = True):
        super().__init__()
        self.stride = stride
        std = float(np.sqrt(2.0 / (c_in * kernel * kernel)))
        self.weight = Tensor(
            rng.normal(0.0, std, size=(c_in, c_out, kernel, kernel)).astype(np.float32),
            requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nm.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out_dim: int | None = None):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim or dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nm.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head attention over (batch, tokens, dim) sequences.

    `kv_dim` lets keys/values come from a differently sized stream and
    `internal_dim` downsamples the attention space (used by the decoder's
    cross-attention). The q/k/v/out projections are the adapter targets.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 kv_dim: int | None = None, internal_dim: int | None = None):
        super().__init__()
        internal = internal_dim or dim
        if internal % heads:
            raise ValueError(f"attention dim {internal} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = internal // heads
        self.scale = float(self.head_dim) ** -0.5
        kv = kv_dim or dim
        self.q = Linear(dim, internal, rng)
        self.k = Linear(kv, internal, rng)
        self.v = Linear(kv, internal, rng)
        self.out = Linear(internal, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        x = nm.reshape(x, (b, t, self.heads, self.head_dim))
        return nm.transpose(x, (0, 2, 1, 3))

    def __call__(self, xq: Tensor, xkv: Tensor | None = None,
                 mask: np.ndarray | None = None) -> Tensor:
        if xkv is None:
            xkv = xq
        b, tq, _ = xq.shape
        q = self._split(self.q(xq))
        k = self._split(self.k(xkv))
        v = self._split(self.v(xkv))
        scores = nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))) * self.scale
        if mask is not None:
            # Constant additive mask, pre-broadcast to the score shape.
            scores = scores + Tensor(np.broadcast_to(mask, scores.shape).astype(scores.dtype))
        attn = nm.softmax_lastaxis(scores)
        ctx = nm.matmul(attn, v)
        ctx = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (b, tq, self.heads * self.head_dim))
        return self.out(ctx)


# ---------------------------------------------------------------------------
# parameter-free sinusoidal positional encodings
# ---------------------------------------------------------------------------


def sine_encode(coords: np.ndarray, dim: int) -> np.ndarray:
    """Encode normalized (x, y) in [0,1]^2 as dim-wide sin/cos features.

    Half the channels encode x, half y; each half carries dim // 4
    integer frequencies (64 of them at dim=256).
    """
    if dim % 4:
        raise ValueError(f"sinusoidal dim must be divisible by 4, got {dim}")
    n_freq = dim // 4
    freqs = 2.0 * np.pi * np.arange(1, n_freq + 1, dtype=np.float64)
    parts = []
    for axis in (0, 1):
        phase = coords[..., axis:axis + 1] * freqs
        parts.append(np.sin(phase))
        parts.append(np.cos(phase))
    return np.concatenate(parts, axis=-1).astype(np.float32)


def sine_grid(h: int, w: int, dim: int) -> np.ndarray:
    """(h, w, dim) positional grid using pixel-center normalized coords."""
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w
    coords = np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1)  # (h, w, (x,y))
    return sine_encode(coords, dim)
