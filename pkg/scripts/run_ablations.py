"""Warm-start and search-mode ablations on synthetic data, scored on a held-out synthetic set.

    python3 scripts/run_ablations.py --out runs/ablations
"""
import argparse
from dataclasses import fields

from ruas.experiments import Scale, ablations


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/ablations")
    p.add_argument("--score-warm-modes", action="store_true",
                   help="also train and score the warm-start variants")
    defaults = Scale(n=32, size=48, search_epochs=5, train_epochs=30)
    for f in fields(Scale):
        p.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=getattr(defaults, f.name))
    args = p.parse_args()
    scale = Scale(**{f.name: getattr(args, f.name) for f in fields(Scale)})
    runs = ablations(args.out, scale, score_warm_modes=args.score_warm_modes)
    print(f"{'family':8s} {'mode':12s} {'IEM genotype':28s} {'NRM genotype':28s} val PSNR")
    for r in runs:
        score = "-" if r.val_psnr is None else f"{r.val_psnr:.2f}"
        print(f"{r.family:8s} {r.mode:12s} {','.join(r.genotype_t):28s} {','.join(r.genotype_n):28s} {score}")


if __name__ == "__main__":
    main()
