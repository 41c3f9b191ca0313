"""Accuracy of feature-based label propagation on pixels whose class was withheld."""

import argparse

from panolabel import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--p-partial", type=float, default=0.5)
    ap.add_argument("--frames", type=int, default=30)
    ap.add_argument("--depth", type=int, choices=(0, 1), default=0, help="hidden layers in the classifier")
    a = ap.parse_args()
    for seed in range(a.seeds):
        acc = ex.propagation_trial(seed, a.p_partial, a.frames, depth=a.depth)
        print(f"seed {seed}: withheld-pixel accuracy {acc:.4f}")


if __name__ == "__main__":
    main()
