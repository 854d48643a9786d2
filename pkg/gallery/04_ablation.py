"""Train the ablation variants over several seeds and print median scores.

Variants: a = mean fusion only, c = attention + collaboration pathway,
d = both pathways without attention, e = full model.
"""

import argparse

from masseg.data import make_split
from masseg.experiments import ablation_table, run_variant


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", default="acde")
    args = ap.parse_args()

    train_set = make_split(7, "train", 512)
    eval_set = make_split(7, "eval", 128)
    runs = []
    for seed in args.seeds:
        for v in args.variants:
            r = run_variant(v, seed, train_set, eval_set, args.steps)
            runs.append(r)
            print(f"{v} seed {seed}: average {r.report.average:.3f} top-1 {r.report.top1:.3f} "
                  f"last-1 {r.report.last1:.3f}", flush=True)
    print("\nmedians:")
    for v, row in ablation_table(runs).items():
        print(f"  {v}: average {row['average']:.3f} top-1 {row['top1']:.3f} last-1 {row['last1']:.3f}")


if __name__ == "__main__":
    main()
