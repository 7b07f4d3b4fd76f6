"""Low-rank adapters for the attention projections of encoder and decoder.

Each wrapped projection computes y = W x + (alpha/r) * B (A x) with the
base weight W frozen. B starts at zero so a freshly injected model is
bit-identical to the base; A starts from a small Gaussian. Only A and B
receive gradients. Convolutions and MLPs are never adapted.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .backbone import SegmentationModel
from .checkpoint import load_container, save_container
from .layers import Attention, Linear, Module
from .numerics import Tensor

STANDARD_RANKS = (8, 16, 32, 64)
_PROJECTIONS = ("q", "k", "v", "out")


class LoraConfigError(ValueError):
    """Adapter configuration violates its invariants."""


class LoraStateError(RuntimeError):
    """Injection or merge called in the wrong adapter state."""


@dataclass
class LoraConfig:
    rank: int = 16
    alpha: float | None = None  # defaults to 2 * rank
    apply_to_encoder: bool = True
    apply_to_decoder: bool = True
    targets: tuple[str, ...] = _PROJECTIONS

    def __post_init__(self):
        if self.rank < 1:
            raise LoraConfigError(f"rank must be positive, got {self.rank}")
        if self.alpha is None:
            self.alpha = 2.0 * self.rank
        if not (self.apply_to_encoder or self.apply_to_decoder):
            raise LoraConfigError("adapters must target the encoder, the decoder, or both")
        bad = set(self.targets) - set(_PROJECTIONS)
        if bad or not self.targets:
            raise LoraConfigError(f"targets must be a non-empty subset of {_PROJECTIONS}, "
                                  f"got {self.targets}")

    @property
    def scale(self) -> float:
        return float(self.alpha) / float(self.rank)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LoraConfig":
        raw = json.loads(text)
        raw["targets"] = tuple(raw["targets"])
        return cls(**raw)


class LoraLinear(Module):
    """A frozen Linear plus a trainable low-rank delta."""

    def __init__(self, base: Linear, rank: int, alpha: float, rng: np.random.Generator):
        super().__init__()
        self.base = base
        self.rank = rank
        self.alpha = float(alpha)
        self.scale = float(alpha) / float(rank)
        self.merged = False
        self.A = Tensor(rng.normal(0.0, 0.02, size=(rank, base.d_in)).astype(np.float32),
                        requires_grad=True)
        self.B = Tensor(np.zeros((base.d_out, rank), dtype=np.float32),
                        requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.base(x)
        delta = nm.linear(nm.linear(x, self.A), self.B)
        return y + delta * self.scale

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.B.data @ self.A.data)

    def merge(self) -> np.ndarray:
        """Fold the delta into the base weight; returns the merged W'."""
        if self.merged:
            raise LoraStateError("adapter already merged")
        self.base.weight.data = self.base.weight.data + self.delta_weight().astype(
            self.base.weight.data.dtype)
        self.merged = True
        return self.base.weight.data


def _adapter_seed(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(name.encode()))))


def _placement_allows(name: str, cfg: LoraConfig) -> bool:
    if name.startswith("encoder."):
        return cfg.apply_to_encoder
    if name.startswith("decoder."):
        return cfg.apply_to_decoder
    return False


def iter_attention_modules(model: Module):
    for name, mod in model.named_modules():
        if isinstance(mod, Attention):
            yield name, mod


def inject(model: SegmentationModel, cfg: LoraConfig, seed: int = 0) -> dict[str, LoraLinear]:
    """Wrap every targeted projection and freeze everything else.

    Returns a registry mapping projection path -> adapter.
    """
    for name, mod in model.named_modules():
        if isinstance(mod, LoraLinear) and not mod.merged:
            raise LoraStateError(f"model already carries adapters (found {name})")
    model.freeze()
    registry: dict[str, LoraLinear] = {}
    for attn_name, attn in iter_attention_modules(model):
        if not _placement_allows(attn_name, cfg):
            continue
        for proj in cfg.targets:
            path = f"{attn_name}.{proj}"
            base = getattr(attn, proj)
            if isinstance(base, LoraLinear):  # merged leftover from a previous round
                base = base.base
            adapter = LoraLinear(base, cfg.rank, cfg.alpha, _adapter_seed(seed, path))
            setattr(attn, proj, adapter)
            registry[path] = adapter
    if not registry:
        raise LoraConfigError("configuration matched no projections")
    return registry


def merge_adapters(model: SegmentationModel) -> int:
    """Fold every adapter into its base weight and detach the wrappers.

    After merging, the model is a plain dense network again and can be
    re-injected with fresh zero-initialized adapters.
    """
    merged = 0
    for _, mod in model.named_modules():
        for attr, child in list(mod._modules.items()):
            if isinstance(child, LoraLinear):
                child.merge()
                setattr(mod, attr, child.base)
                merged += 1
    if not merged:
        raise LoraStateError("no adapters to merge")
    return merged


def adapter_parameter_count(model: Module) -> int:
    total = 0
    for _, mod in model.named_modules():
        if isinstance(mod, LoraLinear):
            total += mod.A.size + mod.B.size
    return total


def trainable_fraction(model: Module) -> float:
    """Trainable parameters over the original (pre-adapter) parameter count."""
    trainable = model.trainable_count()
    base_total = model.param_count() - adapter_parameter_count(model)
    return trainable / base_total


def save_adapters(path, model: Module, cfg: LoraConfig) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, mod in model.named_modules():
        if isinstance(mod, LoraLinear):
            tensors[f"{name}.A"] = mod.A.data
            tensors[f"{name}.B"] = mod.B.data
    if not tensors:
        raise LoraStateError("model has no adapters to save")
    save_container(path, tensors, texts={"lora_config": cfg.to_json()})


def load_adapters(model: SegmentationModel, path, seed: int = 0) -> dict[str, LoraLinear]:
    """Inject adapters per the stored config and load their A/B tensors."""
    tensors, texts = load_container(path)
    if "lora_config" not in texts:
        raise LoraStateError(f"{path}: missing lora_config header entry")
    cfg = LoraConfig.from_json(texts["lora_config"])
    registry = inject(model, cfg, seed=seed)
    for path_key, adapter in registry.items():
        for suffix, tensor in (("A", adapter.A), ("B", adapter.B)):
            key = f"{path_key}.{suffix}"
            if key not in tensors:
                raise LoraStateError(f"adapter tensor {key} missing from checkpoint")
            arr = tensors.pop(key)
            if arr.shape != tensor.data.shape:
                raise LoraStateError(f"{key}: shape {arr.shape} != {tensor.data.shape}")
            tensor.data = arr.astype(tensor.data.dtype)
    if tensors:
        raise LoraStateError(f"unused adapter tensors in checkpoint: {sorted(tensors)[:4]}")
    return registry
