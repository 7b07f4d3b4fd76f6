"""Command-line surface: generate / train / eval / sweep / merge.

Configuration resolves in layers: built-in defaults, the optional
``--paper-scale`` preset, a JSON config file, then explicit flags.
Unknown config keys are rejected. Every command writes its fully
resolved configuration next to its outputs so any artifact can be
reproduced from that file plus the seeds inside it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .backbone import DecoderConfig, EncoderConfig, build_model
from .checkpoint import save_container
from .data import (SynthConfig, derive_seed, generate_raw, load_dataset, save_pair)
from .evaluation import (ABLATIONS, EVAL_MODES, GridDataset, config_hash_of,
                         dice_score, evaluate_model, lora_config_for,
                         random_mode_prompts, run_grid)
from .lora import (LoraConfig, inject, load_adapters, merge_adapters,
                   save_adapters, trainable_fraction)
from .losses import TverskyParams
from .optim import TrainConfig, TrainingDiverged, train_adapters

OUT_ROOT_ENV = "SEGLORA_OUT_ROOT"


class ConfigError(ValueError):
    """Config file carries unknown sections or keys."""


_SECTION_TYPES = {
    "synth": SynthConfig,
    "train": TrainConfig,
    "lora": LoraConfig,
    "tversky": TverskyParams,
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
}


def _from_dict(cls, payload: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in payload:
            v = payload[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def load_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    known = set(_SECTION_TYPES) | {"command", "task", "data", "out", "seed",
                                   "model_seed", "split_seed", "ablation",
                                   "ranks", "ablations", "prompt_modes",
                                   "prompted", "n", "checkpoint"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, cls in _SECTION_TYPES.items():
        if section in raw:
            _from_dict(cls, raw[section], section)  # validate keys and values
    return raw


def _write_resolved(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _default_out(sub: str) -> str:
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return str(Path(root) / sub)


def _section(cfg_file: dict, name: str, cls, overrides: dict):
    base = dict(cfg_file.get(name, {}))
    base.update({k: v for k, v in overrides.items() if v is not None})
    return _from_dict(cls, base, name)


def _model_from_config(cfg_file: dict, model_seed: int | None):
    enc = _section(cfg_file, "encoder", EncoderConfig, {})
    dec = _section(cfg_file, "decoder", DecoderConfig, {})
    seed = model_seed if model_seed is not None else cfg_file.get("model_seed", 0)
    return build_model(enc, dec, seed=int(seed)), enc, dec, int(seed)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg_file = load_config_file(args.config) if args.config else {}
    if args.paper_scale and args.size is None:
        args.size = 1024  # nearest stride-32 size to the 1000px convention
    synth = _section(cfg_file, "synth", SynthConfig,
                     {"task": args.task, "size": args.size, "seed": args.seed})
    n = args.n if args.n is not None else int(cfg_file.get("n", 16))
    out = Path(args.out or _default_out(f"dataset-{synth.task}"))
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: output directory {out} is not empty (use --force)", file=sys.stderr)
        return 1
    for i in range(n):
        cfg = dataclasses.replace(synth, seed=derive_seed(synth.seed, i))
        raw, mask = generate_raw(cfg)
        save_pair(out, f"{synth.task}_{i:04d}", raw, mask)
    _write_resolved(out, {"command": "generate", "n": n, "out": str(out),
                          "synth": dataclasses.asdict(synth)})
    print(f"wrote {n} {synth.task} samples ({synth.size}x{synth.size}) to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _infer_task(data_dir: Path, flag_value: str | None) -> str:
    if flag_value:
        return flag_value
    gen_cfg = data_dir / "run_config.json"
    if gen_cfg.exists():
        try:
            return json.loads(gen_cfg.read_text())["synth"]["task"]
        except (KeyError, json.JSONDecodeError):
            pass
    return "vessel"


def cmd_train(args) -> int:
    cfg_file = load_config_file(args.config) if args.config else {}
    overrides = {"total_steps": args.steps, "batch_size": args.batch,
                 "lr": args.lr, "seed": args.seed, "warmup_steps": args.warmup}
    if args.paper_scale:
        base = dict(cfg_file.get("train", {}))
        base.setdefault("total_steps", 20000)
        base.setdefault("batch_size", 3)
        cfg_file = dict(cfg_file)
        cfg_file["train"] = base
    if args.no_augment:
        overrides["augment"] = False
    train_cfg = _section(cfg_file, "train", TrainConfig, overrides)
    tversky = _section(cfg_file, "tversky", TverskyParams, {})

    ablation = ABLATIONS[args.ablation]
    lora_overrides = {"rank": args.rank,
                      "apply_to_encoder": ablation.encoder,
                      "apply_to_decoder": ablation.decoder}
    lora_cfg = _section(cfg_file, "lora", LoraConfig, lora_overrides)

    data_dir = Path(args.data)
    task = _infer_task(data_dir, args.task)
    split_seed = args.split_seed if args.split_seed is not None else 0
    samples = load_dataset(data_dir, "train", task=task, split_seed=split_seed)
    if not samples:
        print(f"error: no training samples under {data_dir}", file=sys.stderr)
        return 1

    out = Path(args.out or _default_out(f"train-{task}-r{lora_cfg.rank}-{ablation.name}"))
    model, enc, dec, model_seed = _model_from_config(cfg_file, args.model_seed)
    registry = inject(model, lora_cfg, seed=derive_seed(train_cfg.seed, 0xADA))
    params = [t for ad in registry.values() for t in (ad.A, ad.B)]

    resolved = {
        "command": "train", "task": task, "data": str(data_dir), "out": str(out),
        "ablation": ablation.name, "model_seed": model_seed,
        "split_seed": split_seed, "prompted": not args.unprompted,
        "encoder": dataclasses.asdict(enc), "decoder": dataclasses.asdict(dec),
        "lora": dataclasses.asdict(lora_cfg), "train": dataclasses.asdict(train_cfg),
        "tversky": dataclasses.asdict(tversky),
    }
    _write_resolved(out, resolved)

    ckpt_path = out / "adapters.sl2l"

    def save_ckpt(step: int) -> None:
        save_adapters(ckpt_path, model, lora_cfg)

    prompt_fn = None if args.unprompted else random_mode_prompts
    try:
        history = train_adapters(model, params, samples, train_cfg,
                                 weights=ablation.weights, tversky=tversky,
                                 prompt_fn=prompt_fn, log_path=out / "train_log.csv",
                                 checkpoint_fn=save_ckpt)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good checkpoint retained at {ckpt_path}",
              file=sys.stderr)
        return 3

    from .evaluation import sample_prompts  # local import avoids cycle at module load
    dices = [dice_score(model.predict(s.image), s.mask) for s in samples]
    print(f"final loss {history[-1].total:.4f}; "
          f"train dice (unprompted) {float(np.mean(dices)):.4f}")
    print(f"trainable_fraction {trainable_fraction(model):.6f}")
    return 0


# ---------------------------------------------------------------------------
# eval / sweep
# ---------------------------------------------------------------------------


def _load_grid_dataset(data_dir: Path, task: str | None, split_seed: int) -> GridDataset:
    task = _infer_task(data_dir, task)
    return GridDataset(
        name=data_dir.name, task=task,
        train=load_dataset(data_dir, "train", task=task, split_seed=split_seed),
        test=load_dataset(data_dir, "test", task=task, split_seed=split_seed))


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt.parent / "run_config.json"
    if not cfg_path.exists():
        print(f"error: missing run config {cfg_path}", file=sys.stderr)
        return 1
    cfg_file = load_config_file(cfg_path)
    if not ckpt.exists():
        print(f"error: missing checkpoint {ckpt}", file=sys.stderr)
        return 1
    model, enc, dec, model_seed = _model_from_config(cfg_file, args.model_seed)
    registry = load_adapters(model, ckpt)
    rank = next(iter(registry.values())).rank
    ablation = cfg_file.get("ablation", "abl-0")

    split_seed = args.split_seed if args.split_seed is not None else \
        int(cfg_file.get("split_seed", 0))
    dataset = _load_grid_dataset(Path(args.data), args.task, split_seed)
    modes = args.modes.split(",") if args.modes else list(EVAL_MODES)
    out = Path(args.out or _default_out(f"eval-{dataset.name}"))
    overlay_dir = out / "overlays" if args.dump_overlays else None

    chash = config_hash_of({"command": "eval", "checkpoint": str(ckpt),
                            "modes": modes, "seed": args.seed,
                            "split_seed": split_seed, "dataset": dataset.name})
    rows = evaluate_model(model, dataset, modes, args.seed, rank, ablation, chash,
                          overlay_dir=overlay_dir)
    from .evaluation import EvalReport
    report = EvalReport(rows=rows, seed=args.seed, config_hash=chash)
    report.to_csv(out / "eval_report.csv")
    _write_resolved(out, {"command": "eval", "checkpoint": str(ckpt),
                          "data": str(args.data), "out": str(out), "seed": args.seed,
                          "split_seed": split_seed, "prompt_modes": modes,
                          "model_seed": model_seed,
                          "encoder": dataclasses.asdict(enc),
                          "decoder": dataclasses.asdict(dec)})
    print(f"wrote {len(rows)} rows to {out / 'eval_report.csv'}")
    return 0


def cmd_sweep(args) -> int:
    cfg_file = load_config_file(args.config) if args.config else {}
    overrides = {"total_steps": args.steps, "batch_size": args.batch,
                 "seed": args.seed, "warmup_steps": args.warmup}
    if args.paper_scale:
        base = dict(cfg_file.get("train", {}))
        base.setdefault("total_steps", 20000)
        base.setdefault("batch_size", 3)
        cfg_file = dict(cfg_file)
        cfg_file["train"] = base
    train_cfg = _section(cfg_file, "train", TrainConfig, overrides)
    tversky = _section(cfg_file, "tversky", TverskyParams, {})
    enc = _section(cfg_file, "encoder", EncoderConfig, {})
    dec = _section(cfg_file, "decoder", DecoderConfig, {})

    split_seed = args.split_seed if args.split_seed is not None else 0
    dataset = _load_grid_dataset(Path(args.data), args.task, split_seed)
    ranks = [int(r) for r in args.ranks.split(",")]
    ablations = args.ablations.split(",") if args.ablations else list(ABLATIONS)
    modes = args.modes.split(",") if args.modes else list(EVAL_MODES)

    out = Path(args.out or _default_out(f"sweep-{dataset.name}"))
    out.mkdir(parents=True, exist_ok=True)
    overlay_dir = out / "overlays" if args.dump_overlays else None
    report = run_grid([dataset], ranks, ablations, modes, seed=args.seed,
                      model_seed=args.model_seed, encoder_cfg=enc, decoder_cfg=dec,
                      train_cfg=train_cfg, tversky=tversky,
                      checkpoint_dir=out / "checkpoints",
                      train_missing=not args.no_train_missing,
                      overlay_dir=overlay_dir, workers=args.workers)
    report.to_csv(out / "sweep_report.csv")
    _write_resolved(out, {
        "command": "sweep", "data": str(args.data), "out": str(out),
        "seed": args.seed, "model_seed": args.model_seed, "split_seed": split_seed,
        "ranks": ranks, "ablations": ablations, "prompt_modes": modes,
        "encoder": dataclasses.asdict(enc), "decoder": dataclasses.asdict(dec),
        "train": dataclasses.asdict(train_cfg), "tversky": dataclasses.asdict(tversky),
    })
    print(f"wrote {len(report.rows)} rows to {out / 'sweep_report.csv'} "
          f"(config hash {report.config_hash})")
    return 0


# ---------------------------------------------------------------------------
# merge
# ---------------------------------------------------------------------------


def cmd_merge(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt.parent / "run_config.json"
    if not cfg_path.exists():
        print(f"error: missing run config {cfg_path}", file=sys.stderr)
        return 1
    cfg_file = load_config_file(cfg_path)
    model, enc, dec, model_seed = _model_from_config(cfg_file, args.model_seed)
    load_adapters(model, ckpt)
    n = merge_adapters(model)
    out = Path(args.out or (ckpt.parent / "merged_model.sl2l"))
    header = json.dumps({"model_seed": model_seed,
                         "encoder": dataclasses.asdict(enc),
                         "decoder": dataclasses.asdict(dec),
                         "merged_from": str(ckpt)},
                        sort_keys=True, default=str)
    save_container(out, model.state_arrays(), texts={"model_config": header})
    print(f"merged {n} adapters into {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seglora",
                                description="adapter fine-tuning and evaluation "
                                            "for promptable segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic PNG dataset")
    g.add_argument("--task", required=True, choices=["vessel", "disc"])
    g.add_argument("--n", type=int, default=None, help="number of samples (default 16)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=None, help="image side (default 256)")
    g.add_argument("--out", default=None)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    g.add_argument("--config", default=None)
    g.add_argument("--paper-scale", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train adapters on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", default=None)
    t.add_argument("--task", default=None, choices=["vessel", "disc"])
    t.add_argument("--rank", type=int, default=None, help="adapter rank (default 16)")
    t.add_argument("--ablation", default="abl-0", choices=list(ABLATIONS))
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--warmup", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--model-seed", type=int, default=None)
    t.add_argument("--split-seed", type=int, default=None)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--unprompted", action="store_true",
                   help="train without randomized prompts")
    t.add_argument("--config", default=None)
    t.add_argument("--paper-scale", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint over prompt modes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None)
    e.add_argument("--task", default=None, choices=["vessel", "disc"])
    e.add_argument("--modes", default=None, help="comma list, default all seven")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--model-seed", type=int, default=None)
    e.add_argument("--split-seed", type=int, default=None)
    e.add_argument("--dump-overlays", action="store_true")
    e.add_argument("--config", default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run the rank x ablation x prompt-mode grid")
    s.add_argument("--data", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--task", default=None, choices=["vessel", "disc"])
    s.add_argument("--ranks", default="8,16,32,64")
    s.add_argument("--ablations", default=None, help="comma list, default all six")
    s.add_argument("--modes", default=None, help="comma list, default all seven")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--batch", type=int, default=None)
    s.add_argument("--warmup", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--model-seed", type=int, default=None)
    s.add_argument("--split-seed", type=int, default=None)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--no-train-missing", action="store_true",
                   help="error on missing checkpoints instead of training")
    s.add_argument("--dump-overlays", action="store_true")
    s.add_argument("--config", default=None)
    s.add_argument("--paper-scale", action="store_true")
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("merge", help="fold adapters into dense weights")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", default=None)
    m.add_argument("--model-seed", type=int, default=None)
    m.add_argument("--config", default=None)
    m.set_defaults(func=cmd_merge)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
