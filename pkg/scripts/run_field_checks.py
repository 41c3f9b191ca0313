"""Analytic field gradients against central differences, and the rendering identities."""

import argparse

from panolabel import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--samples", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    g = ex.gradient_trials(a.trials, a.seed)
    print(f"gradients: {g.checked} checks, {g.excluded} excluded at kinks, {len(g.failures)} failures, worst {g.worst:.2e}")
    for trial, ch, rel in g.failures[:10]:
        print(f"  trial {trial} channel {ch}: relative error {rel:.2e}")
    c = ex.rendering_identities(a.samples, seed=a.seed)
    print(f"identities over {c.n_samples} samples:")
    for name, bad in c.violations.items():
        print(f"  {name:<32} {bad} violations")


if __name__ == "__main__":
    main()
