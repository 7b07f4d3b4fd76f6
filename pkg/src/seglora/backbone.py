"""Desk-scale promptable segmentation network.

Three parts mirror the usual promptable-segmentation layout: a
hierarchical windowed-attention image encoder emitting a four-level
feature pyramid at strides 4/8/16/32, a prompt encoder turning points
and boxes into tokens, and a two-way attention mask decoder that reads
out a single mask token against the deepest feature map and upsamples
with stride-4/8 skip connections.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .layers import (Attention, Conv2d, ConvTranspose2d, LayerNorm, Linear,
                     Mlp, Module, ModuleList, sine_encode, sine_grid)
from .numerics import Tensor

STRIDE_MULTIPLE = 32
_NEG_INF = -1e9


class PromptError(ValueError):
    """A prompt falls outside the image or violates box ordering."""


@dataclass
class EncoderConfig:
    patch_stride: int = 4
    patch_kernel: int = 7
    stage_depths: tuple[int, ...] = (1, 1, 2, 1)
    stage_dims: tuple[int, ...] = (32, 64, 128, 256)
    window_sizes: tuple[int, ...] = (8, 8, 4, 0)  # 0 = global attention
    stage_heads: tuple[int, ...] = (1, 2, 4, 8)
    mlp_ratio: float = 4.0

    def __post_init__(self):
        n = len(self.stage_depths)
        if n != 4 or len(self.stage_dims) != 4 or len(self.window_sizes) != 4 \
                or len(self.stage_heads) != 4:
            raise ValueError("encoder needs exactly four stages (strides 4/8/16/32)")
        if self.patch_stride != 4:
            raise ValueError("first stage must sit at stride 4")
        if any(a >= b for a, b in zip(self.stage_dims, self.stage_dims[1:])):
            raise ValueError(f"stage_dims must be strictly increasing, got {self.stage_dims}")


@dataclass
class DecoderConfig:
    num_attention_blocks: int = 2
    token_dim: int = 256
    num_mask_tokens: int = 1
    num_heads: int = 8
    mlp_dim: int = 2048
    cross_attn_dim: int = 128
    head_channels: int = 32

    def __post_init__(self):
        if self.num_mask_tokens != 1:
            raise ValueError("decoder carries a single task mask token")
        if self.token_dim % 4:
            raise ValueError("token_dim must be divisible by 4 for sinusoidal encoding")


@dataclass(frozen=True)
class PromptSet:
    """Points and boxes conditioning the decoder, in pixel coordinates."""

    positive_points: tuple[tuple[float, float], ...] = ()
    negative_points: tuple[tuple[float, float], ...] = ()
    boxes: tuple[tuple[float, float, float, float], ...] = ()

    @property
    def is_empty(self) -> bool:
        return not (self.positive_points or self.negative_points or self.boxes)

    def num_tokens(self) -> int:
        if self.is_empty:
            return 1  # the learned no-prompt token
        return len(self.positive_points) + len(self.negative_points) + 2 * len(self.boxes)

    def validate(self, image_size: tuple[int, int]) -> None:
        h, w = image_size
        for idx, (x, y) in enumerate(self.positive_points + self.negative_points):
            if not (0 <= x < w and 0 <= y < h):
                raise PromptError(f"point {idx} at ({x}, {y}) outside image {w}x{h}")
        for idx, (x0, y0, x1, y1) in enumerate(self.boxes):
            if not (x0 < x1 and y0 < y1):
                raise PromptError(f"box {idx} has non-positive extent: {(x0, y0, x1, y1)}")
            if not (0 <= x0 and x1 < w and 0 <= y0 and y1 < h):
                raise PromptError(f"box {idx} {(x0, y0, x1, y1)} outside image {w}x{h}")


def pad_to_multiple(size: int, multiple: int = STRIDE_MULTIPLE) -> int:
    return ((size + multiple - 1) // multiple) * multiple


# ---------------------------------------------------------------------------
# image encoder
# ---------------------------------------------------------------------------


class EncoderBlock(Module):
    """Pre-norm transformer block with (optionally windowed) attention."""

    def __init__(self, dim: int, heads: int, window: int, mlp_ratio: float,
                 rng: np.random.Generator):
        super().__init__()
        self.window = window
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def _attend(self, x: Tensor) -> Tensor:
        h, w, c = x.shape
        ws = self.window
        if ws <= 0 or (ws >= h and ws >= w):
            seq = nm.reshape(x, (1, h * w, c))
            out = self.attn(seq)
            return nm.reshape(out, (h, w, c))
        ph = (ws - h % ws) % ws
        pw = (ws - w % ws) % ws
        if ph or pw:
            xp = nm.pad(x, ((0, ph), (0, pw), (0, 0)))
            valid = np.zeros((h + ph, w + pw), dtype=bool)
            valid[:h, :w] = True
            vw = valid.reshape((h + ph) // ws, ws, (w + pw) // ws, ws)
            vw = vw.transpose(0, 2, 1, 3).reshape(-1, ws * ws)
            mask = np.where(vw, 0.0, _NEG_INF)[:, None, None, :]  # keys masked
        else:
            xp, mask = x, None
        hp, wp = h + ph, w + pw
        windows = nm.window_partition(xp, ws)
        out = self.attn(windows, mask=mask)
        out = nm.window_unpartition(out, ws, hp, wp)
        if ph or pw:
            out = out[:h, :w, :]
        return out

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self._attend(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class HierarchicalEncoder(Module):
    """Four-stage encoder producing feature maps at strides 4/8/16/32."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        dims = cfg.stage_dims
        k = cfg.patch_kernel
        self.patch_embed = Conv2d(3, dims[0], k, rng, stride=cfg.patch_stride,
                                  padding=k // 2)
        stages = []
        for i in range(4):
            blocks = ModuleList(
                EncoderBlock(dims[i], cfg.stage_heads[i], cfg.window_sizes[i],
                             cfg.mlp_ratio, rng)
                for _ in range(cfg.stage_depths[i]))
            stages.append(blocks)
        self.stages = ModuleList(stages)
        self.downsamples = ModuleList(
            Conv2d(dims[i], dims[i + 1], 2, rng, stride=2) for i in range(3))
        self.out_norms = ModuleList(LayerNorm(d) for d in dims)

    def __call__(self, image: Tensor) -> list[Tensor]:
        """image (3, H, W) with H, W divisible by 32 -> 4 maps (C_i, H/s_i, W/s_i)."""
        if image.ndim != 3 or image.shape[0] != 3:
            raise nm.ShapeError(f"encoder expects a (3, H, W) image, got {image.shape}")
        _, h, w = image.shape
        if h % STRIDE_MULTIPLE or w % STRIDE_MULTIPLE:
            raise nm.ShapeError(
                f"image size {h}x{w} must be divisible by {STRIDE_MULTIPLE}; "
                f"pad to {pad_to_multiple(h)}x{pad_to_multiple(w)}")
        x = self.patch_embed(image)                       # (C0, H/4, W/4)
        x = nm.transpose(x, (1, 2, 0))                    # (H/4, W/4, C0)
        x = x + Tensor(sine_grid(x.shape[0], x.shape[1], x.shape[2]).astype(x.dtype))
        pyramid = []
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x)
            pyramid.append(nm.transpose(self.out_norms[i](x), (2, 0, 1)))
            if i < 3:
                down = self.downsamples[i](nm.transpose(x, (2, 0, 1)))
                x = nm.transpose(down, (1, 2, 0))
        return pyramid


# ---------------------------------------------------------------------------
# prompt encoder
# ---------------------------------------------------------------------------

_TYPE_POSITIVE, _TYPE_NEGATIVE, _TYPE_BOX_TL, _TYPE_BOX_BR = range(4)


class PromptEncoder(Module):
    """Point/box prompts -> tokens: sinusoidal position plus a learned
    type embedding. An empty prompt set yields one learned no-prompt token."""

    def __init__(self, token_dim: int, rng: np.random.Generator):
        super().__init__()
        self.token_dim = token_dim
        self.type_embed = Tensor(
            rng.normal(0.0, 0.02, size=(4, token_dim)).astype(np.float32),
            requires_grad=True)
        self.no_prompt = Tensor(
            rng.normal(0.0, 0.02, size=(1, token_dim)).astype(np.float32),
            requires_grad=True)

    def __call__(self, prompts: PromptSet, image_size: tuple[int, int]) -> Tensor:
        prompts.validate(image_size)
        if prompts.is_empty:
            return self.no_prompt[0:1, :]
        h, w = image_size
        coords: list[tuple[float, float]] = []
        types: list[int] = []
        for x, y in prompts.positive_points:
            coords.append((x, y))
            types.append(_TYPE_POSITIVE)
        for x, y in prompts.negative_points:
            coords.append((x, y))
            types.append(_TYPE_NEGATIVE)
        for x0, y0, x1, y1 in prompts.boxes:
            coords.extend([(x0, y0), (x1, y1)])
            types.extend([_TYPE_BOX_TL, _TYPE_BOX_BR])
        pts = np.asarray(coords, dtype=np.float64)
        normalized = np.stack([(pts[:, 0] + 0.5) / w, (pts[:, 1] + 0.5) / h], axis=-1)
        position = Tensor(sine_encode(normalized, self.token_dim))
        rows = nm.concat([self.type_embed[t:t + 1, :] for t in types], axis=0)
        return position + rows


# ---------------------------------------------------------------------------
# mask decoder
# ---------------------------------------------------------------------------


class TwoWayBlock(Module):
    """Token self-attention, token->image and image->token cross-attention."""

    def __init__(self, dim: int, heads: int, mlp_dim: int, cross_dim: int,
                 rng: np.random.Generator):
        super().__init__()
        self.norm_self = LayerNorm(dim)
        self.self_attn = Attention(dim, heads, rng)
        self.norm_t2i = LayerNorm(dim)
        self.cross_t2i = Attention(dim, heads, rng, internal_dim=cross_dim)
        self.norm_mlp = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_dim, rng)
        self.norm_i2t = LayerNorm(dim)
        self.cross_i2t = Attention(dim, heads, rng, internal_dim=cross_dim)

    def __call__(self, tokens: Tensor, image: Tensor) -> tuple[Tensor, Tensor]:
        tokens = tokens + self.self_attn(self.norm_self(tokens))
        tokens = tokens + self.cross_t2i(self.norm_t2i(tokens), image)
        tokens = tokens + self.mlp(self.norm_mlp(tokens))
        image = image + self.cross_i2t(self.norm_i2t(image), tokens)
        return tokens, image


class MaskDecoder(Module):
    def __init__(self, cfg: DecoderConfig, encoder_dims: tuple[int, ...],
                 rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.token_dim
        self.mask_token = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.num_mask_tokens, d)).astype(np.float32),
            requires_grad=True)
        self.neck1 = Conv2d(encoder_dims[3], d, 1, rng)
        self.neck_norm1 = LayerNorm(d)
        self.neck2 = Conv2d(d, d, 3, rng, padding=1)
        self.neck_norm2 = LayerNorm(d)
        self.blocks = ModuleList(
            TwoWayBlock(d, cfg.num_heads, cfg.mlp_dim, cfg.cross_attn_dim, rng)
            for _ in range(cfg.num_attention_blocks))
        self.norm_final = LayerNorm(d)
        self.final_attn = Attention(d, cfg.num_heads, rng, internal_dim=cfg.cross_attn_dim)
        self.hyper = ModuleList([Linear(d, d, rng), Linear(d, d, rng),
                                 Linear(d, cfg.head_channels, rng)])
        self.deconv1 = ConvTranspose2d(d, d // 2, 2, rng, stride=2)
        self.deconv2 = ConvTranspose2d(d // 2, d // 4, 2, rng, stride=2)
        self.skip8 = Conv2d(encoder_dims[1], d // 4, 1, rng)
        self.skip4 = Conv2d(encoder_dims[0], d // 4, 1, rng)
        self.out_conv = Conv2d(d // 4, cfg.head_channels, 1, rng)

    def _neck(self, f32: Tensor) -> Tensor:
        x = nm.transpose(self.neck1(f32), (1, 2, 0))
        x = self.neck_norm1(x)
        x = nm.transpose(x, (2, 0, 1))
        x = nm.transpose(self.neck2(x), (1, 2, 0))
        return self.neck_norm2(x)  # (h, w, d)

    def __call__(self, features: list[Tensor], prompt_tokens: Tensor,
                 image_size: tuple[int, int]) -> Tensor:
        f4, f8, f16, f32 = features
        emb = self._neck(f32)
        h, w, d = emb.shape
        emb = emb + Tensor(sine_grid(h, w, d).astype(emb.dtype))
        image_seq = nm.reshape(emb, (1, h * w, d))

        tokens = nm.concat([self.mask_token, prompt_tokens], axis=0)
        tokens = nm.reshape(tokens, (1, tokens.shape[0], d))
        for block in self.blocks:
            tokens, image_seq = block(tokens, image_seq)
        tokens = tokens + self.final_attn(self.norm_final(tokens), image_seq)

        mask_tok = tokens[0, 0:1, :]
        for layer in self.hyper[:-1]:
            mask_tok = nm.gelu(layer(mask_tok))
        hyper = self.hyper[-1](mask_tok)                     # (1, head_channels)

        grid = nm.transpose(nm.reshape(image_seq, (h * w, d)), (1, 0))
        grid = nm.reshape(grid, (d, h, w))
        u = nm.gelu(self.deconv1(grid))                      # (d/2, 2h, 2w)
        u = self.deconv2(u) + self.skip8(f8)                 # stride 8
        u = nm.gelu(u)
        u = nm.bilinear_resize(u, (8 * h, 8 * w)) + self.skip4(f4)  # stride 4
        # Readout happens at stride 2 with the nonlinearity after the
        # upsample, so the logit contour is not limited to bilinear
        # interpolation of stride-4 values.
        u = nm.bilinear_resize(u, (16 * h, 16 * w))
        u = self.out_conv(nm.gelu(u))                        # (head_channels, H/2, W/2)

        hh, ww = u.shape[1], u.shape[2]
        logits = nm.matmul(hyper, nm.reshape(u, (u.shape[0], hh * ww)))
        logits = nm.reshape(logits, (1, hh, ww))
        return nm.bilinear_resize(logits, image_size)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


class SegmentationModel(Module):
    """encode_image -> encode_prompts -> decode_mask, with pad/crop handling
    for sizes that are not multiples of 32."""

    def __init__(self, encoder_cfg: EncoderConfig | None = None,
                 decoder_cfg: DecoderConfig | None = None, seed: int = 0):
        super().__init__()
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.decoder_cfg = decoder_cfg or DecoderConfig()
        self.seed = seed
        ss = np.random.SeedSequence(seed).spawn(3)
        self.encoder = HierarchicalEncoder(self.encoder_cfg, np.random.default_rng(ss[0]))
        self.prompt_encoder = PromptEncoder(self.decoder_cfg.token_dim,
                                            np.random.default_rng(ss[1]))
        self.decoder = MaskDecoder(self.decoder_cfg, self.encoder_cfg.stage_dims,
                                   np.random.default_rng(ss[2]))

    def __call__(self, image: Tensor, prompts: PromptSet | None = None) -> Tensor:
        """image (3, H, W) -> mask logits (1, H, W)."""
        prompts = prompts or PromptSet()
        if image.ndim != 3 or image.shape[0] != 3:
            raise nm.ShapeError(f"expected a (3, H, W) image, got {image.shape}")
        _, h, w = image.shape
        prompts.validate((h, w))
        hp, wp = pad_to_multiple(h), pad_to_multiple(w)
        if (hp, wp) != (h, w):
            image = nm.pad(image, ((0, 0), (0, hp - h), (0, wp - w)))
        features = self.encoder(image)
        tokens = self.prompt_encoder(prompts, (hp, wp))
        logits = self.decoder(features, tokens, (hp, wp))
        if (hp, wp) != (h, w):
            logits = logits[:, :h, :w]
        return logits

    def predict(self, image: np.ndarray | Tensor, prompts: PromptSet | None = None) -> np.ndarray:
        """Forward without recording; returns sigmoid probabilities (H, W)."""
        with nm.no_grad():
            t = image if isinstance(image, Tensor) else Tensor(image)
            logits = self(t, prompts)
            return nm.sigmoid(logits).data[0]


def build_model(encoder_cfg: EncoderConfig | None = None,
                decoder_cfg: DecoderConfig | None = None,
                seed: int = 0) -> SegmentationModel:
    return SegmentationModel(encoder_cfg, decoder_cfg, seed=seed)
