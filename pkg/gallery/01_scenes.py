"""Generate one synthetic scene and show what each sensor can see.

Prints the label map as characters, then per-modality contrast of every
class against the background. A class with near-zero contrast in a modality
is invisible to that sensor, which is the situation subset-robust fusion
has to cope with.
"""

import argparse

import numpy as np

from masseg.data import SceneSpec, VisibilityMatrix, generate

GLYPHS = ".#o+x*%@"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    spec = SceneSpec()
    vis = VisibilityMatrix.default(spec.num_classes, len(spec.modalities))
    scene = generate(args.seed, spec, vis)

    print(f"labels (seed {args.seed}, every 2nd pixel):")
    for row in scene.labels[::2, ::2]:
        print("  " + "".join(GLYPHS[k] for k in row))

    print("\nvisibility matrix (rows = classes, cols = modalities):")
    print("        " + " ".join(f"{m:>6}" for m in spec.modalities))
    for k, row in enumerate(vis.values):
        print(f"  cls {k} " + " ".join(f"{v:6.2f}" for v in row))

    print("\nmean contrast vs background in this scene:")
    print("        " + " ".join(f"{m:>6}" for m in spec.modalities))
    bg = scene.labels == 0
    for k in np.unique(scene.labels):
        if k == 0:
            continue
        mask = scene.labels == k
        cells = [scene.images[m][:, mask].mean() - scene.images[m][:, bg].mean()
                 for m in range(len(spec.modalities))]
        print(f"  cls {k} " + " ".join(f"{c:6.3f}" for c in cells))


if __name__ == "__main__":
    main()
