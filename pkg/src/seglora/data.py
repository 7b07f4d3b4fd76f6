"""Synthetic fundus-like data, PNG dataset I/O, and seeded augmentation.

Two synthetic tasks stand in for real datasets: a branching vessel tree
rendered as anti-aliased dark strokes on a textured reddish field, and a
bright optic-disc ellipse with a radial gradient. Real image/mask pairs
can be loaded from a directory of PNGs with the same conventions.

Every generator and augmentation is a pure function of (config, seed).
Geometric transforms go through one shared homography so image and mask
can never drift apart; masks are resampled nearest-neighbor and
re-binarized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class DataError(RuntimeError):
    """Dataset directory or file cannot be read."""


@dataclass
class SegSample:
    """Image (3, H, W), normalized per channel, with a binary mask (H, W)."""

    image: np.ndarray
    mask: np.ndarray
    task: str
    source_id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise ValueError(f"mask {self.mask.shape} does not match image "
                             f"{self.image.shape}")
        h, w = self.mask.shape
        if h < 64 or w < 64:
            raise ValueError(f"samples must be at least 64x64, got {h}x{w}")
        if not np.isfinite(self.image).all():
            raise ValueError("image contains non-finite values")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask must be binary")


@dataclass
class SynthConfig:
    seed: int = 0
    size: int = 256
    task: str = "vessel"
    vessel_depth: int = 6
    vessel_width_decay: float = 0.75
    vessel_width_px: float | None = None  # trunk width; None -> 1.1% of size
    disc_radius_range: tuple[float, float] = (0.08, 0.22)
    texture_amplitude: float = 0.06

    def __post_init__(self):
        if self.size % 32:
            raise ValueError(f"size must be divisible by 32, got {self.size}")
        if self.task not in ("vessel", "disc"):
            raise ValueError(f"task must be 'vessel' or 'disc', got {self.task!r}")
        lo, hi = self.disc_radius_range
        if not (0.0 < lo < hi < 0.5):
            raise ValueError(f"disc radius fractions must lie in (0, 0.5), got {lo}, {hi}")


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Per-channel zero-mean unit-variance normalization."""
    img = image.astype(np.float32)
    mean = img.mean(axis=(1, 2), keepdims=True)
    std = img.std(axis=(1, 2), keepdims=True)
    return (img - mean) / np.maximum(std, 1e-6)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def _fundus_field(size: int, rng: np.random.Generator, amplitude: float):
    """Reddish disc-shaped background field; returns (rgb, inside, dist/R)."""
    c = (size - 1) / 2.0
    radius = 0.48 * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
    inside = dist <= radius
    rel = np.minimum(dist / radius, 1.0)

    brightness = 1.0 - 0.35 * rel ** 2
    texture = np.zeros((size, size))
    for _ in range(8):
        bx, by = rng.uniform(0.2 * size, 0.8 * size, size=2)
        sigma = rng.uniform(0.06, 0.20) * size
        amp = rng.uniform(-amplitude, amplitude)
        texture += amp * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sigma ** 2))
    brightness = brightness + texture + rng.normal(0.0, 0.008, size=(size, size))

    base = np.array([0.62, 0.33, 0.17])
    rgb = base[:, None, None] * brightness[None]
    rgb = np.where(inside[None], rgb, 0.03)
    return rgb, inside, rel


def _stroke_segment(canvas: np.ndarray, p0, p1, width: float) -> None:
    """Max-composite an anti-aliased thick segment onto the canvas."""
    size = canvas.shape[0]
    margin = width / 2 + 2
    x0 = int(np.clip(np.floor(min(p0[0], p1[0]) - margin), 0, size - 1))
    x1 = int(np.clip(np.ceil(max(p0[0], p1[0]) + margin), 0, size - 1))
    y0 = int(np.clip(np.floor(min(p0[1], p1[1]) - margin), 0, size - 1))
    y1 = int(np.clip(np.ceil(max(p0[1], p1[1]) + margin), 0, size - 1))
    if x1 <= x0 or y1 <= y0:
        return
    yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    norm2 = dx * dx + dy * dy
    if norm2 < 1e-12:
        d = np.sqrt((xx - p0[0]) ** 2 + (yy - p0[1]) ** 2)
    else:
        t = np.clip(((xx - p0[0]) * dx + (yy - p0[1]) * dy) / norm2, 0.0, 1.0)
        d = np.sqrt((xx - (p0[0] + t * dx)) ** 2 + (yy - (p0[1] + t * dy)) ** 2)
    aa = np.clip(width / 2 + 0.5 - d, 0.0, 1.0)
    region = canvas[y0:y1 + 1, x0:x1 + 1]
    np.maximum(region, aa, out=region)


def _grow_vessel(canvas, rng, pos, angle, width, depth, size, decay):
    if depth < 0 or width < 0.45:
        return
    c = size / 2.0
    field = 0.44 * size
    # A branch is a short polyline with jittered heading, steered back
    # toward the field center so strokes stay on the fundus disc.
    for _ in range(3):
        length = rng.uniform(0.04, 0.065) * size
        angle += rng.normal(0.0, 0.22)
        off = np.hypot(pos[0] - c, pos[1] - c)
        if off > 0.8 * field:
            inward = np.arctan2(c - pos[1], c - pos[0])
            delta = (inward - angle + np.pi) % (2 * np.pi) - np.pi
            angle += 0.5 * delta
        nxt = (pos[0] + length * np.cos(angle), pos[1] + length * np.sin(angle))
        _stroke_segment(canvas, pos, nxt, width)
        pos = nxt
    if depth == 0:
        return
    if rng.random() < 0.15:  # occasional unbranched continuation
        _grow_vessel(canvas, rng, pos, angle + rng.normal(0.0, 0.2),
                     width * 0.92, depth - 1, size, decay)
        return
    spread = rng.uniform(0.3, 0.65)
    for sign in (-1.0, 1.0):
        _grow_vessel(canvas, rng, pos, angle + sign * spread,
                     width * decay * rng.uniform(0.92, 1.08),
                     depth - 1, size, decay)


def _render_vessels(size: int, rng: np.random.Generator, depth: int,
                    decay: float, width_px: float | None) -> np.ndarray:
    canvas = np.zeros((size, size), dtype=np.float64)
    c = size / 2.0
    hub_angle = rng.uniform(0, 2 * np.pi)
    hub = (float(c + 0.25 * size * np.cos(hub_angle)),
           float(c + 0.25 * size * np.sin(hub_angle)))
    base_width = width_px if width_px is not None else max(0.011 * size, 1.3)
    n_trunks = 2
    for k in range(n_trunks):
        angle = 2 * np.pi * k / n_trunks + rng.uniform(-0.5, 0.5)
        _grow_vessel(canvas, rng, hub, angle, base_width, depth, size, decay)
    return canvas


def generate_raw(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized [0,1] RGB image (3, S, S) and binary mask (S, S)."""
    rng = np.random.default_rng(cfg.seed)
    size = cfg.size
    rgb, inside, rel = _fundus_field(size, rng, cfg.texture_amplitude)

    if cfg.task == "vessel":
        stroke = _render_vessels(size, rng, cfg.vessel_depth, cfg.vessel_width_decay,
                                 cfg.vessel_width_px)
        stroke = np.where(inside, stroke, 0.0)
        darken = np.array([0.38, 0.55, 0.45])
        rgb = rgb * (1.0 - darken[:, None, None] * stroke[None])
        mask = (stroke > 0.5).astype(np.float32)
    else:
        c = (size - 1) / 2.0
        lo, hi = cfg.disc_radius_range
        a = rng.uniform(lo, hi) * size
        b = a * rng.uniform(0.78, 1.0)
        phi = rng.uniform(0, np.pi)
        reach = 0.48 * size - max(a, b) - 2.0
        ang = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0, max(reach, 0.0))
        cx, cy = c + rad * np.cos(ang), c + rad * np.sin(ang)
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        xr = (xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)
        yr = -(xx - cx) * np.sin(phi) + (yy - cy) * np.cos(phi)
        e = (xr / a) ** 2 + (yr / b) ** 2
        glow = np.clip(1.0 - e, 0.0, 1.0) ** 0.5
        tint = np.array([0.34, 0.38, 0.26])
        rgb = rgb + tint[:, None, None] * glow[None]
        mask = (e <= 1.0).astype(np.float32)

    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)
    return rgb, mask


def generate_sample(cfg: SynthConfig) -> SegSample:
    raw, mask = generate_raw(cfg)
    return SegSample(image=normalize_image(raw), mask=mask, task=cfg.task,
                     source_id=f"synth-{cfg.task}-{cfg.seed:06d}")


# ---------------------------------------------------------------------------
# PNG dataset I/O
# ---------------------------------------------------------------------------

MASK_THRESHOLD = 127


def save_pair(root, stem: str, raw_image: np.ndarray, mask: np.ndarray) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    img8 = (np.clip(raw_image, 0, 1) * 255.0).round().astype(np.uint8)
    Image.fromarray(img8.transpose(1, 2, 0), mode="RGB").save(root / "images" / f"{stem}.png")
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(root / "masks" / f"{stem}.png")


def _read_pair(img_path: Path, mask_path: Path, task: str) -> SegSample:
    try:
        img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        msk = np.asarray(Image.open(mask_path).convert("L"))
    except OSError as exc:
        raise DataError(f"cannot read {img_path} / {mask_path}: {exc}") from exc
    image = normalize_image(img.transpose(2, 0, 1))
    mask = (msk > MASK_THRESHOLD).astype(np.float32)
    return SegSample(image=image, mask=mask, task=task, source_id=img_path.stem)


def _collect_stems(root: Path) -> list[str]:
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir():
        raise DataError(f"missing image directory {img_dir}")
    stems = sorted(p.stem for p in img_dir.glob("*.png"))
    if not stems:
        raise DataError(f"no PNG images under {img_dir}")
    kept = []
    for stem in stems:
        if (mask_dir / f"{stem}.png").exists():
            kept.append(stem)
        else:
            warnings.warn(f"skipping {stem}: no matching mask", stacklevel=2)
    return kept


def load_dataset(root, split: str, task: str = "vessel",
                 split_seed: int = 0, test_fraction: float = 0.25) -> list[SegSample]:
    """Load one split of paired PNGs.

    Layouts, in order of precedence: per-split directories
    (<root>/<split>/images), a flat layout with a split.txt of test
    stems, or a flat layout split 75/25 deterministically by seed.
    """
    root = Path(root)
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if (root / split / "images").is_dir():
        base = root / split
        stems = _collect_stems(base)
    else:
        base = root
        stems = _collect_stems(base)
        split_file = root / "split.txt"
        if split_file.exists():
            test_stems = {line.strip() for line in split_file.read_text().splitlines()
                          if line.strip()}
        else:
            rng = np.random.default_rng(split_seed)
            order = list(rng.permutation(np.array(stems, dtype=object)))
            n_test = int(round(len(stems) * test_fraction))
            test_stems = set(order[:n_test])
        stems = [s for s in stems if (s in test_stems) == (split == "test")]
    return [_read_pair(base / "images" / f"{s}.png", base / "masks" / f"{s}.png", task)
            for s in stems]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def hflip(sample: SegSample) -> SegSample:
    return SegSample(image=sample.image[:, :, ::-1].copy(),
                     mask=sample.mask[:, ::-1].copy(),
                     task=sample.task, source_id=sample.source_id)


def vflip(sample: SegSample) -> SegSample:
    return SegSample(image=sample.image[:, ::-1, :].copy(),
                     mask=sample.mask[::-1, :].copy(),
                     task=sample.task, source_id=sample.source_id)


def _homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography H with dst ~ H @ src for four point pairs."""
    rows = []
    rhs = []
    for (sx, sy), (dx, dy) in zip(src, dst):
        rows.append([sx, sy, 1, 0, 0, 0, -dx * sx, -dx * sy])
        rhs.append(dx)
        rows.append([0, 0, 0, sx, sy, 1, -dy * sx, -dy * sy])
        rhs.append(dy)
    h = np.linalg.solve(np.asarray(rows, dtype=np.float64), np.asarray(rhs, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def _warp(sample: SegSample, out_to_src: np.ndarray) -> SegSample:
    """Resample image (bilinear) and mask (nearest) through one matrix.

    `out_to_src` maps output pixel coords to source coords, so the pair
    can never be transformed inconsistently.
    """
    h, w = sample.mask.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ones = np.ones_like(xx)
    pts = out_to_src @ np.stack([xx.ravel(), yy.ravel(), ones.ravel()])
    sx = pts[0] / pts[2]
    sy = pts[1] / pts[2]
    valid = (sx >= -0.5) & (sx <= w - 0.5) & (sy >= -0.5) & (sy <= h - 0.5)

    cx = np.clip(sx, 0, w - 1)
    cy = np.clip(sy, 0, h - 1)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = cx - x0
    ty = cy - y0

    flat = sample.image.reshape(3, -1)
    gather = (flat[:, (y0 * w + x0)] * ((1 - ty) * (1 - tx))
              + flat[:, (y0 * w + x1)] * ((1 - ty) * tx)
              + flat[:, (y1 * w + x0)] * (ty * (1 - tx))
              + flat[:, (y1 * w + x1)] * (ty * tx))
    image = np.where(valid, gather, 0.0).reshape(3, h, w).astype(np.float32)

    nx = np.clip(np.rint(sx), 0, w - 1).astype(np.int64)
    ny = np.clip(np.rint(sy), 0, h - 1).astype(np.int64)
    mask = np.where(valid, sample.mask.ravel()[ny * w + nx], 0.0)
    mask = (mask.reshape(h, w) > 0.5).astype(np.float32)
    return SegSample(image=image, mask=mask, task=sample.task, source_id=sample.source_id)


def _center_rotation(h: int, w: int, degrees: float) -> np.ndarray:
    """Output-to-source matrix for a rotation about the image center."""
    theta = np.deg2rad(degrees)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    c, s = np.cos(theta), np.sin(theta)
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    back = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    return back @ rot @ to_origin


def rotate(sample: SegSample, degrees: float) -> SegSample:
    return _warp(sample, _center_rotation(*sample.mask.shape, degrees))


def affine(sample: SegSample, degrees: float = 0.0, translate: tuple[float, float] = (0, 0),
           shear_deg: float = 0.0, scale: float = 1.0) -> SegSample:
    h, w = sample.mask.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = np.deg2rad(degrees)
    sh = np.tan(np.deg2rad(shear_deg))
    c, s = np.cos(theta), np.sin(theta)
    lin = np.array([[c, -s], [s, c]]) @ np.array([[1, sh], [0, 1]]) / scale
    mat = np.eye(3)
    mat[:2, :2] = lin
    mat[:2, 2] = [-translate[0] * w, -translate[1] * h]
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    back = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    return _warp(sample, back @ mat @ to_origin)


def resized_crop(sample: SegSample, area_scale: float, cx_frac: float, cy_frac: float,
                 aspect: float = 1.0) -> SegSample:
    """Crop a window with the given relative area and resize back up."""
    h, w = sample.mask.shape
    ch = np.sqrt(area_scale / aspect) * h
    cw = np.sqrt(area_scale * aspect) * w
    ch, cw = min(ch, h), min(cw, w)
    x0 = cx_frac * (w - cw)
    y0 = cy_frac * (h - ch)
    src = np.array([[x0, y0], [x0 + cw - 1, y0], [x0 + cw - 1, y0 + ch - 1], [x0, y0 + ch - 1]])
    dst = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    return _warp(sample, _homography_from_points(dst, src))


def perspective(sample: SegSample, offsets: np.ndarray) -> SegSample:
    """Offsets: (4, 2) corner displacements in pixels (tl, tr, br, bl)."""
    h, w = sample.mask.shape
    dst = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    src = dst + offsets
    return _warp(sample, _homography_from_points(dst, src))


def _gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(round(2 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-0.5 * (xs / sigma) ** 2)
    kern /= kern.sum()
    padded = np.pad(image, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    out = np.zeros_like(image, dtype=np.float64)
    for i, kv in enumerate(kern):
        out += kv * padded[:, i:i + image.shape[1], radius:radius + image.shape[2]]
    tmp = np.pad(out, ((0, 0), (0, 0), (radius, radius)), mode="edge")
    final = np.zeros_like(image, dtype=np.float64)
    for i, kv in enumerate(kern):
        final += kv * tmp[:, :, i:i + image.shape[2]]
    return final.astype(np.float32)


def augment(sample: SegSample, seed: int) -> SegSample:
    """Seeded geometric + sparing color augmentation; mask stays binary."""
    rng = np.random.default_rng(seed)
    out = sample
    if rng.random() < 0.5:
        out = hflip(out)
    if rng.random() < 0.5:
        out = vflip(out)

    h, w = out.mask.shape
    mat = np.eye(3)
    applied = False
    if rng.random() < 0.5:  # rotation
        mat = _center_rotation(h, w, rng.uniform(-30.0, 30.0)) @ mat
        applied = True
    if rng.random() < 0.3:  # affine jitter
        theta = np.deg2rad(rng.uniform(-8.0, 8.0))
        sh = np.tan(np.deg2rad(rng.uniform(-8.0, 8.0)))
        c, s = np.cos(theta), np.sin(theta)
        lin = np.array([[c, -s], [s, c]]) @ np.array([[1, sh], [0, 1]])
        a = np.eye(3)
        a[:2, :2] = lin
        a[:2, 2] = [rng.uniform(-0.05, 0.05) * w, rng.uniform(-0.05, 0.05) * h]
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        to_o = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
        back = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
        mat = (back @ a @ to_o) @ mat
        applied = True
    if rng.random() < 0.3:  # perspective, distortion 0.2
        offs = rng.uniform(-0.2, 0.2, size=(4, 2)) * np.array([w, h]) * 0.5
        dst = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
        mat = _homography_from_points(dst, dst + offs) @ mat
        applied = True
    if rng.random() < 0.5:  # resized crop, area scale [0.7, 1.0]
        area = rng.uniform(0.7, 1.0)
        aspect = rng.uniform(0.9, 1.1)
        ch = min(np.sqrt(area / aspect) * h, h)
        cw = min(np.sqrt(area * aspect) * w, w)
        x0 = rng.uniform(0, 1) * (w - cw)
        y0 = rng.uniform(0, 1) * (h - ch)
        src = np.array([[x0, y0], [x0 + cw - 1, y0], [x0 + cw - 1, y0 + ch - 1],
                        [x0, y0 + ch - 1]])
        dst = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
        mat = _homography_from_points(dst, src) @ mat
        applied = True
    if applied:
        out = _warp(out, mat)

    img = out.image
    if rng.random() < 0.2:  # color jitter
        gain = rng.uniform(0.85, 1.15, size=(3, 1, 1)).astype(np.float32)
        shift = rng.uniform(-0.1, 0.1, size=(3, 1, 1)).astype(np.float32)
        img = img * gain + shift
    if rng.random() < 0.2:  # gaussian blur
        img = _gaussian_blur(img, rng.uniform(0.5, 1.0))
    if rng.random() < 0.2:  # sharpness
        amount = rng.uniform(0.5, 1.5)
        img = img + amount * (img - _gaussian_blur(img, 1.0))
    return SegSample(image=img.astype(np.float32), mask=out.mask,
                     task=out.task, source_id=out.source_id)


def derive_seed(*parts: int) -> int:
    """Stable per-(run, step, slot) seed independent of worker scheduling."""
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])
