"""Train a model and evaluate it on every modality subset.

With the defaults this reproduces the reference run (2000 steps, about ten
minutes on one core). Use --steps for a quicker look.
"""

import argparse
import time

from masseg.config import RunConfig
from masseg.data import make_split
from masseg.model import SegModel
from masseg.training import evaluate_combinations, top1_last1_rates, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--variant", choices="abcde", default=None,
                    help="named ablation variant instead of the full model")
    args = ap.parse_args()

    cfg = RunConfig(steps=args.steps)
    spec, vis = cfg.scene_spec(), cfg.visibility()
    train_set = make_split(cfg.data_seed, "train", cfg.train_scenes, spec, vis)
    eval_set = make_split(cfg.data_seed, "eval", cfg.eval_scenes, spec, vis)
    if args.variant:
        from masseg.model import VariantConfig
        variant = VariantConfig.named(args.variant)
    else:
        variant = cfg.variant()
    model = SegModel(cfg.model_config(), variant, seed=cfg.seed)

    t0 = time.time()
    res = train(model, train_set, cfg.steps, cfg.batch_size, cfg.seed, cfg.lr, cfg.loss_weights(),
                callback=lambda s, l: print(f"  step {s + 1:5d} loss {l:.4f}") if (s + 1) % 200 == 0 else None)
    print(f"trained {cfg.steps} steps in {time.time() - t0:.0f}s, final loss {res.losses[-1]:.4f}")

    rep = evaluate_combinations(model, eval_set)
    names = cfg.modalities
    print("\nmIoU per subset:")
    for sub, score in sorted(zip(rep.subsets, rep.scores), key=lambda t: -t[1]):
        print(f"  {score:.3f}  {'+'.join(names[m] for m in sub)}")
    print(f"\naverage {rep.average:.3f}  top-1 {rep.top1:.3f}  last-1 {rep.last1:.3f}")
    rates = top1_last1_rates(rep)
    print("per-scene best subset size frequency: ", rates["top1"])
    print("per-scene worst subset size frequency:", rates["last1"])


if __name__ == "__main__":
    main()
