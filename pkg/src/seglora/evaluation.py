"""Metrics, prompt scenarios, the ablation/rank sweep, and paired t-tests.

Prompt modes eval-0..eval-6 range from unprompted to five positive
points plus a box; ablation modes abl-0..abl-5 toggle loss terms and
adapter placement. The grid runner trains one adapter set per
(rank, ablation) cell and reports Dice and AUC per dataset and prompt
mode as a deterministic CSV.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import stats as _sstats

from .backbone import (DecoderConfig, EncoderConfig, PromptSet, SegmentationModel,
                       build_model)
from .data import SegSample, derive_seed
from .losses import CompositeWeights, TverskyParams
from .lora import LoraConfig, inject, load_adapters, save_adapters, trainable_fraction
from .optim import TrainConfig, train_adapters


class EmptyMaskError(ValueError):
    """A prompted mode was asked to sample prompts from an empty mask."""


class GridError(RuntimeError):
    """Sweep misconfiguration, e.g. a missing checkpoint in eval-only mode."""


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def dice_score(pred_probs: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    """Hard Dice after thresholding; empty-vs-empty counts as perfect."""
    if pred_probs.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred_probs.shape} vs target {target.shape}")
    pred = pred_probs >= threshold
    tgt = target >= 0.5
    denom = int(pred.sum()) + int(tgt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * float(np.logical_and(pred, tgt).sum()) / denom


def _tied_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_score(pred_probs: np.ndarray, target: np.ndarray) -> float:
    """Exact pixelwise ROC AUC via the rank-sum statistic (ties averaged)."""
    if pred_probs.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred_probs.shape} vs target {target.shape}")
    scores = np.asarray(pred_probs, dtype=np.float64).ravel()
    labels = np.asarray(target).ravel() >= 0.5
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: target contains a single class")
    ranks = _tied_ranks(scores)
    return (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# prompt modes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptMode:
    name: str
    n_positive: int
    n_negative: int
    use_box: bool


EVAL_MODES: dict[str, PromptMode] = {
    "eval-0": PromptMode("eval-0", 0, 0, False),
    "eval-1": PromptMode("eval-1", 1, 0, False),
    "eval-2": PromptMode("eval-2", 2, 0, False),
    "eval-3": PromptMode("eval-3", 5, 0, False),
    "eval-4": PromptMode("eval-4", 5, 1, False),
    "eval-5": PromptMode("eval-5", 0, 0, True),
    "eval-6": PromptMode("eval-6", 5, 0, True),
}

BOX_JITTER = 0.05


def _resolve_mode(mode) -> PromptMode:
    if isinstance(mode, PromptMode):
        return mode
    if isinstance(mode, int):
        mode = f"eval-{mode}"
    if mode not in EVAL_MODES:
        raise KeyError(f"unknown prompt mode {mode!r}; expected one of {list(EVAL_MODES)}")
    return EVAL_MODES[mode]


def _draw_points(rows: np.ndarray, cols: np.ndarray, n: int,
                 rng: np.random.Generator) -> tuple[tuple[float, float], ...]:
    replace_draw = len(rows) < n
    idx = rng.choice(len(rows), size=n, replace=replace_draw)
    return tuple((float(cols[i]), float(rows[i])) for i in idx)


def sample_prompts(mask: np.ndarray, mode, seed) -> PromptSet:
    """Draw the prompts a mode prescribes: positives uniform over the
    foreground, negatives uniform over the background, boxes as the
    tight foreground bounding box jittered by +/-5% of its side lengths."""
    spec = _resolve_mode(mode)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = mask.shape
    fg = mask >= 0.5
    needs_fg = spec.n_positive > 0 or spec.use_box
    if needs_fg and not fg.any():
        raise EmptyMaskError(f"mode {spec.name} requires a non-empty mask")

    positives: tuple[tuple[float, float], ...] = ()
    negatives: tuple[tuple[float, float], ...] = ()
    boxes: tuple[tuple[float, float, float, float], ...] = ()
    if spec.n_positive:
        rows, cols = np.nonzero(fg)
        positives = _draw_points(rows, cols, spec.n_positive, rng)
    if spec.n_negative:
        rows, cols = np.nonzero(~fg)
        if len(rows) == 0:
            raise EmptyMaskError(f"mode {spec.name} requires background pixels")
        negatives = _draw_points(rows, cols, spec.n_negative, rng)
    if spec.use_box:
        rows, cols = np.nonzero(fg)
        y0, y1 = float(rows.min()), float(rows.max())
        x0, x1 = float(cols.min()), float(cols.max())
        bw, bh = max(x1 - x0, 1.0), max(y1 - y0, 1.0)
        x0 = float(np.clip(x0 + rng.uniform(-BOX_JITTER, BOX_JITTER) * bw, 0, w - 1))
        x1 = float(np.clip(x1 + rng.uniform(-BOX_JITTER, BOX_JITTER) * bw, 0, w - 1))
        y0 = float(np.clip(y0 + rng.uniform(-BOX_JITTER, BOX_JITTER) * bh, 0, h - 1))
        y1 = float(np.clip(y1 + rng.uniform(-BOX_JITTER, BOX_JITTER) * bh, 0, h - 1))
        if x1 <= x0:
            x0, x1 = max(0.0, x1 - 1.0), min(w - 1.0, x0 + 1.0)
        if y1 <= y0:
            y0, y1 = max(0.0, y1 - 1.0), min(h - 1.0, y0 + 1.0)
        boxes = ((x0, y0, x1, y1),)
    return PromptSet(positive_points=positives, negative_points=negatives, boxes=boxes)


def random_mode_prompts(mask: np.ndarray, rng: np.random.Generator) -> PromptSet:
    """Training-time prompt draw: a uniformly random evaluation mode."""
    mode = int(rng.integers(0, len(EVAL_MODES)))
    if mode > 0 and not (mask >= 0.5).any():
        mode = 0
    return sample_prompts(mask, mode, rng)


# ---------------------------------------------------------------------------
# ablation modes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationMode:
    name: str
    weights: CompositeWeights
    encoder: bool
    decoder: bool


ABLATIONS: dict[str, AblationMode] = {
    "abl-0": AblationMode("abl-0", CompositeWeights(1.0, 1.0, 1.0), True, True),
    "abl-1": AblationMode("abl-1", CompositeWeights(1.0, 0.0, 0.0), True, True),
    "abl-2": AblationMode("abl-2", CompositeWeights(0.0, 0.0, 1.0), True, True),
    "abl-3": AblationMode("abl-3", CompositeWeights(0.0, 1.0, 0.0), True, True),
    "abl-4": AblationMode("abl-4", CompositeWeights(1.0, 1.0, 1.0), True, False),
    "abl-5": AblationMode("abl-5", CompositeWeights(1.0, 1.0, 1.0), False, True),
}


def lora_config_for(ablation: AblationMode, rank: int) -> LoraConfig:
    return LoraConfig(rank=rank, apply_to_encoder=ablation.encoder,
                      apply_to_decoder=ablation.decoder)


# ---------------------------------------------------------------------------
# paired t-test
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    ci_low: float
    ci_high: float
    degenerate: bool = False


def paired_t_test(a, b, confidence: float = 0.95) -> TTestResult:
    """Two-sided paired t-test with a CI on the mean difference.

    Zero-variance conventions: identical inputs give t=0, p=1,
    CI=[0, 0]; a constant non-zero difference gives t=+/-inf with
    p below 1e-12 and a collapsed CI, flagged as degenerate.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length 1-D, got "
                         f"{a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError(f"paired t-test needs n >= 2, got n={n}")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, 0.0, 0.0, degenerate=True)
        t = float("inf") if mean > 0 else float("-inf")
        return TTestResult(t, 0.0, mean, mean, degenerate=True)
    se = sd / float(np.sqrt(n))
    t = mean / se
    df = n - 1
    p = 2.0 * float(_sstats.t.sf(abs(t), df))
    tcrit = float(_sstats.t.ppf(0.5 + confidence / 2.0, df))
    return TTestResult(float(t), p, mean - tcrit * se, mean + tcrit * se)


# ---------------------------------------------------------------------------
# grid runner
# ---------------------------------------------------------------------------


@dataclass
class GridDataset:
    name: str
    task: str
    train: list[SegSample]
    test: list[SegSample]


@dataclass
class EvalRow:
    dataset: str
    task: str
    rank: int
    ablation: str
    prompt_mode: str
    n_samples: int
    n_excluded: int
    dice_mean: float
    dice_std: float
    auc_mean: float
    auc_std: float
    seed: int
    config_hash: str


CSV_COLUMNS = ["dataset", "task", "rank", "ablation", "prompt_mode", "n_samples",
               "n_excluded", "dice_mean", "dice_std", "auc_mean", "auc_std",
               "seed", "config_hash"]


@dataclass
class EvalReport:
    rows: list[EvalRow]
    seed: int
    config_hash: str

    def to_csv_text(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for r in self.rows:
            lines.append(",".join([
                r.dataset, r.task, str(r.rank), r.ablation, r.prompt_mode,
                str(r.n_samples), str(r.n_excluded), repr(r.dice_mean),
                repr(r.dice_std), repr(r.auc_mean), repr(r.auc_std),
                str(r.seed), r.config_hash,
            ]))
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv_text())

    def mean_dice(self, **filters) -> float:
        rows = [r for r in self.rows
                if all(getattr(r, k) == v for k, v in filters.items())]
        if not rows:
            raise KeyError(f"no rows match {filters}")
        return float(np.mean([r.dice_mean for r in rows]))


def config_hash_of(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def evaluate_model(model: SegmentationModel, dataset: GridDataset, prompt_modes,
                   seed: int, rank: int, ablation: str, config_hash: str,
                   overlay_dir=None) -> list[EvalRow]:
    """Score one trained model over a dataset's test split and prompt modes."""
    rows = []
    for mode_name in prompt_modes:
        spec = _resolve_mode(mode_name)
        dices, aucs = [], []
        excluded = 0
        for si, sample in enumerate(dataset.test):
            prompt_seed = derive_seed(seed, rank, _abl_index(ablation),
                                      _mode_index(spec.name), si)
            try:
                prompts = sample_prompts(sample.mask, spec, prompt_seed)
            except EmptyMaskError:
                excluded += 1
                continue
            probs = model.predict(sample.image, prompts)
            dices.append(dice_score(probs, sample.mask))
            try:
                aucs.append(auc_score(probs, sample.mask))
            except ValueError:
                pass  # single-class target; surfaces as nan aggregate
            if overlay_dir is not None:
                name = f"{dataset.name}_{spec.name}_{sample.source_id}.png"
                save_overlay(Path(overlay_dir) / name, sample.image, sample.mask, probs)
        rows.append(EvalRow(
            dataset=dataset.name, task=dataset.task, rank=rank, ablation=ablation,
            prompt_mode=spec.name, n_samples=len(dices), n_excluded=excluded,
            dice_mean=float(np.mean(dices)) if dices else float("nan"),
            dice_std=float(np.std(dices)) if dices else float("nan"),
            auc_mean=float(np.mean(aucs)) if aucs else float("nan"),
            auc_std=float(np.std(aucs)) if aucs else float("nan"),
            seed=seed, config_hash=config_hash))
    return rows


def _abl_index(name: str) -> int:
    return int(name.split("-")[1])


def _mode_index(name: str) -> int:
    return int(name.split("-")[1])


def _run_cell(args) -> list[EvalRow]:
    (rank, abl_name, datasets, prompt_modes, seed, model_seed, enc_cfg, dec_cfg,
     train_cfg, tversky, checkpoint_dir, train_missing, overlay_dir, chash) = args
    ablation = ABLATIONS[abl_name]
    cell_seed = derive_seed(seed, rank, _abl_index(abl_name))
    model = build_model(enc_cfg, dec_cfg, seed=model_seed)
    ckpt_path = None
    if checkpoint_dir is not None:
        ckpt_path = Path(checkpoint_dir) / f"rank{rank}_{abl_name}.sl2l"

    if ckpt_path is not None and ckpt_path.exists():
        load_adapters(model, ckpt_path, seed=cell_seed)
    elif not train_missing:
        raise GridError(f"missing checkpoint for rank={rank} {abl_name}: "
                        f"expected {ckpt_path}")
    else:
        cfg = lora_config_for(ablation, rank)
        registry = inject(model, cfg, seed=cell_seed)
        params = [t for ad in registry.values() for t in (ad.A, ad.B)]
        cell_train = replace(train_cfg, seed=cell_seed)
        train_samples = [s for ds in datasets for s in ds.train]
        train_adapters(model, params, train_samples, cell_train,
                       weights=ablation.weights, tversky=tversky,
                       prompt_fn=random_mode_prompts)
        if ckpt_path is not None:
            save_adapters(ckpt_path, model, cfg)

    rows = []
    for ds in datasets:
        rows.extend(evaluate_model(model, ds, prompt_modes, seed, rank, abl_name,
                                   chash, overlay_dir=overlay_dir))
    return rows


def run_grid(datasets: list[GridDataset], ranks, ablations, prompt_modes,
             seed: int = 0, model_seed: int | None = None,
             encoder_cfg: EncoderConfig | None = None,
             decoder_cfg: DecoderConfig | None = None,
             train_cfg: TrainConfig | None = None,
             tversky: TverskyParams | None = None,
             checkpoint_dir=None, train_missing: bool = True,
             overlay_dir=None, workers: int = 1) -> EvalReport:
    """Train (or load) every (rank, ablation) cell and evaluate the grid.

    Cells are independent; seeds derive from cell identity, so the
    report is identical regardless of worker count.
    """
    ranks = list(ranks)
    abl_names = [a if isinstance(a, str) else f"abl-{a}" for a in ablations]
    mode_names = [m if isinstance(m, str) else f"eval-{m}" for m in prompt_modes]
    for name in abl_names:
        if name not in ABLATIONS:
            raise GridError(f"unknown ablation {name!r}")
    for name in mode_names:
        _resolve_mode(name)
    model_seed = seed if model_seed is None else model_seed
    train_cfg = train_cfg or TrainConfig()

    chash = config_hash_of({
        "ranks": ranks, "ablations": abl_names, "modes": mode_names,
        "seed": seed, "model_seed": model_seed,
        "encoder": (encoder_cfg or EncoderConfig()).__dict__,
        "decoder": (decoder_cfg or DecoderConfig()).__dict__,
        "train": train_cfg.__dict__,
        "tversky": (tversky or TverskyParams()).__dict__,
        "datasets": [(d.name, d.task, len(d.train), len(d.test)) for d in datasets],
    })

    cells = [(rank, abl, datasets, mode_names, seed, model_seed, encoder_cfg,
              decoder_cfg, train_cfg, tversky, checkpoint_dir, train_missing,
              overlay_dir, chash)
             for rank in ranks for abl in abl_names]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cell_rows = list(pool.map(_run_cell, cells))
    else:
        cell_rows = [_run_cell(c) for c in cells]

    # Reorder rows as dataset-major regardless of cell execution order.
    by_cell = {(c[0], c[1]): rows for c, rows in zip(cells, cell_rows)}
    ordered: list[EvalRow] = []
    for ds in datasets:
        for rank in ranks:
            for abl in abl_names:
                ordered.extend(r for r in by_cell[(rank, abl)] if r.dataset == ds.name)
    return EvalReport(rows=ordered, seed=seed, config_hash=chash)


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------


def _contour(mask: np.ndarray) -> np.ndarray:
    m = mask >= 0.5
    core = m.copy()
    core[1:, :] &= m[:-1, :]
    core[:-1, :] &= m[1:, :]
    core[:, 1:] &= m[:, :-1]
    core[:, :-1] &= m[:, 1:]
    return m & ~core


def save_overlay(path, image: np.ndarray, target: np.ndarray, probs: np.ndarray,
                 threshold: float = 0.5) -> None:
    """PNG with the ground-truth contour in green and the prediction in red."""
    from PIL import Image

    lo = image.min(axis=(1, 2), keepdims=True)
    hi = image.max(axis=(1, 2), keepdims=True)
    disp = (image - lo) / np.maximum(hi - lo, 1e-6)
    rgb = (disp.transpose(1, 2, 0) * 255).astype(np.uint8).copy()
    rgb[_contour(target)] = (0, 255, 0)
    rgb[_contour(probs >= threshold)] = (255, 0, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(path)
