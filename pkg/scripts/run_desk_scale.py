"""Desk-scale end-to-end run: search, train RUAS_i and RUAS_i+n, report PSNR/SSIM and size.

    python3 scripts/run_desk_scale.py --out runs/desk
"""
import argparse
import json
from dataclasses import asdict, fields

from ruas.complexity import count_flops, count_params
from ruas.experiments import Scale, desk_scale
from ruas.trainer import Checkpoint


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    for f in fields(Scale):
        p.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)
    args = p.parse_args()
    scale = Scale(**{f.name: getattr(args, f.name) for f in fields(Scale)})
    res = desk_scale(args.out, scale)
    sizes = {}
    for key in ("train_i", "train_in"):
        model = Checkpoint.load(res.paths[key] / "checkpoint.json").build_model()
        sizes[key] = {"params": count_params(model), "gflops_600x400": count_flops(model, 400, 600) / 1e9}
    summary = {"scale": asdict(scale), "genotype_t": res.genotype_t, "genotype_n": res.genotype_n,
               "ruas_i": {**res.metrics_i, **sizes["train_i"]},
               "ruas_i+n": {**res.metrics_in, **sizes["train_in"]}, "minutes": res.seconds / 60}
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
