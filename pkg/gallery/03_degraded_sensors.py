"""Stress a trained model with occluded or noisy sensors.

Trains briefly (or loads a checkpoint written by `masseg train`), then
blanks random blocks of one modality or blends it toward noise and reports
the full-subset mIoU as the damage grows.
"""

import argparse

import numpy as np

from masseg.checkpoint import load_checkpoint
from masseg.config import RunConfig
from masseg.data import degrade, make_split, mask_blocks
from masseg.model import SegModel
from masseg.training import evaluate_subset, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", help="checkpoint directory; trains a quick model if omitted")
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--scenes", type=int, default=32)
    args = ap.parse_args()

    if args.checkpoint:
        model, cfg, _ = load_checkpoint(args.checkpoint)
    else:
        cfg = RunConfig(steps=args.steps)
        model = SegModel(cfg.model_config(), cfg.variant(), seed=cfg.seed)
        data = make_split(cfg.data_seed, "train", cfg.train_scenes, cfg.scene_spec(), cfg.visibility())
        train(model, data, cfg.steps, cfg.batch_size, cfg.seed, cfg.lr, cfg.loss_weights())
    scenes = make_split(cfg.data_seed, "eval", args.scenes, cfg.scene_spec(), cfg.visibility())
    everything = range(len(cfg.modalities))

    print(f"clean full-subset mIoU: {evaluate_subset(model, scenes, everything):.3f}\n")
    for m, name in enumerate(cfg.modalities):
        row = []
        for keep in (1.0, 0.5, 0.25):
            rng = np.random.default_rng(0)
            hit = [mask_blocks(s, m, 8, keep, rng) for s in scenes]
            row.append(f"keep {keep:.2f}: {evaluate_subset(model, hit, everything):.3f}")
        for sev in (0.5, 1.0):
            rng = np.random.default_rng(0)
            hit = [degrade(s, m, sev, rng) for s in scenes]
            row.append(f"noise {sev:.1f}: {evaluate_subset(model, hit, everything):.3f}")
        print(f"{name:>6} | " + " | ".join(row))


if __name__ == "__main__":
    main()
