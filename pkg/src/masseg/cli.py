"""Command-line interface: gen-data, train, eval, infer (plus init-config).

Every failure exits nonzero with exactly one line on stderr of the form
``error: <kind>: <reason>``.
"""

from __future__ import annotations

import argparse
import configparser
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import load_sample_dir, load_split, write_label_raster, write_split, write_tensor
from .modality import resolve_names
from .model import SegModel
from .training import (
    TrainingDiverged, evaluate_combinations, format_loss_log, train, write_report,
)


class CliError(Exception):
    pass


def _config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


def _split_dir(base, split: str) -> Path:
    base = Path(base)
    if (base / "manifest.txt").is_file():
        return base
    if (base / split / "manifest.txt").is_file():
        return base / split
    raise CliError(f"no {split} dataset found under {base}")


def _parse_modalities(text: str | None, names) -> tuple[int, ...] | None:
    if text is None:
        return None
    return resolve_names([t for t in text.split(",") if t.strip()], list(names))


# ---------------------------------------------------------------------------

def cmd_init_config(args) -> None:
    out = Path(args.out)
    RunConfig().save(out)
    print(out)


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    out = Path(args.out or cfg.dataset_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc.strerror}") from exc
    spec, vis = cfg.scene_spec(), cfg.visibility()
    for split, count in (("train", cfg.train_scenes), ("eval", cfg.eval_scenes)):
        write_split(out, split, cfg.data_seed, count, spec, vis)
    print(f"wrote {cfg.train_scenes} train and {cfg.eval_scenes} eval scenes to {out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    info, samples = load_split(_split_dir(args.data or cfg.dataset_dir, "train"))
    if tuple(info.spec.modalities) != cfg.modalities:
        raise CliError(f"dataset modalities {info.spec.modalities} differ from config {cfg.modalities}")
    out = Path(args.out or cfg.checkpoint_dir)
    model = SegModel(cfg.model_config(), cfg.variant(), seed=cfg.seed)
    start = time.time()

    def report(step, loss):
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            print(f"step {step + 1} loss {loss:.4f} ({time.time() - start:.0f}s)", flush=True)

    result = train(model, samples, cfg.steps, cfg.batch_size, cfg.seed, cfg.lr,
                   cfg.loss_weights(), callback=None if args.quiet else report)
    save_checkpoint(out, model, cfg, result.steps)
    (out / "loss.log").write_text(format_loss_log(result.losses))
    print(f"saved checkpoint to {out}")


def cmd_eval(args) -> None:
    expect = RunConfig.load(args.config) if args.config else None
    model, cfg, _ = load_checkpoint(args.checkpoint, expect)
    info, samples = load_split(_split_dir(args.data or cfg.dataset_dir, "eval"))
    if tuple(info.spec.modalities) != cfg.modalities:
        raise CliError("dataset modalities do not match the checkpoint")
    mods = _parse_modalities(args.modalities, cfg.modalities)
    report = evaluate_combinations(model, samples, mods, cfg.eval_batch_size,
                                   args.workers or cfg.eval_workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, report)
    print(f"average {report.average:.4f} top1 {report.top1:.4f} last1 {report.last1:.4f} "
          f"over {len(report.subsets)} subsets -> {out}")


def cmd_infer(args) -> None:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    names = cfg.modalities
    subset = _parse_modalities(args.modalities, names) or tuple(range(len(names)))
    sample = load_sample_dir(args.sample, names, (3, cfg.height, cfg.width))
    absent = [names[m] for m in subset if m not in sample.images]
    if absent:
        raise CliError(f"sample directory lacks images for {','.join(absent)}")
    images = {m: sample.images[m][None].astype(np.float64) for m in subset}
    cache = model.prepare(images)
    logits, extras = model.fuse(cache, subset, (cfg.height, cfg.width), return_features=True)
    pred = np.argmax(logits.data[0], axis=0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_label_raster(out, pred)
    if args.export_features:
        _export_features(Path(args.export_features), extras, names)
    print(f"wrote {pred.shape[0]}x{pred.shape[1]} prediction to {out}")


def _export_features(root: Path, extras, names) -> None:
    """Per scale: se_<i>_<mod>.f32, r_<i>_<mod>.f32, col_<i>.f32, described by features.txt."""
    root.mkdir(parents=True, exist_ok=True)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["tensors"] = {}

    def put(fname, arr):
        arr = arr[0]
        write_tensor(root / fname, arr)
        cp["tensors"][fname] = ",".join(map(str, arr.shape))

    for i, level in enumerate(extras):
        for m, f in level["se"].items():
            put(f"se_{i}_{names[m]}.f32", f.data)
        if level["r"] is not None:
            for m, r in level["r"].items():
                put(f"r_{i}_{names[m]}.f32", r.data)
        put(f"col_{i}.f32", level["col"].data)
    with open(root / "features.txt", "w") as fh:
        cp.write(fh)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="masseg", description="Modality-agnostic segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-config", help="write the default run configuration")
    s.add_argument("--out", default="run.ini")
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("gen-data", help="generate the synthetic train/eval dataset")
    s.add_argument("--config")
    s.add_argument("--out", help="output directory (default: dataset_dir from config)")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--config")
    s.add_argument("--data", help="dataset root or train split directory")
    s.add_argument("--out", help="checkpoint directory (default: checkpoint_dir from config)")
    s.add_argument("--steps", type=int, help="override the configured step count")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate every modality subset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="dataset root or eval split directory")
    s.add_argument("--config", help="fail unless the checkpoint matches this config")
    s.add_argument("--modalities", help="comma list; restricts the sweep to its subsets")
    s.add_argument("--workers", type=int)
    s.add_argument("--out", default="metrics.json")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="predict a label raster for one scene")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sample", required=True, help="scene directory holding <modality>.f32 files")
    s.add_argument("--modalities", help="comma list naming the inference subset (default: all)")
    s.add_argument("--out", default="prediction.u16")
    s.add_argument("--export-features", metavar="DIR")
    s.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except TrainingDiverged as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return 3
    except (CliError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        kind = type(exc).__name__
        print(f"error: {kind}: {' '.join(str(msg).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
