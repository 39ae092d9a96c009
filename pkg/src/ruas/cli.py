"""Command-line entry point: ``ruas {synth,search,train,enhance,eval}``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .bilevel import NumericalError, run_search
from .complexity import FLOP_CONVENTION, count_flops, count_params
from .config import (
    ConfigError, NetworkConfig, SearchConfig, TrainConfig, WarmStartConfig, from_dict, to_dict,
)
from .data import to_image, to_tensor
from .io import (
    list_images, load_dataset, load_image, read_config_file, read_genotype, save_image,
    write_genotype, write_jsonl, write_manifest, write_samples,
)
from .metrics import psnr, ssim
from .network import zero_heads
from .search_space import Genotype, GenotypeFormatError
from .synthetic import synth_lowlight
from .trainer import Checkpoint, train

log = logging.getLogger("ruas")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

DATA_DEFAULTS = {"synthetic": False, "n": 64, "size": 64, "noise": 0.03, "seed": 0, "input": None}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_data_flags(p):
    g = p.add_argument_group("data")
    g.add_argument("--input", help="directory of low-light images")
    g.add_argument("--synthetic", action="store_true", default=None,
                   help="generate a synthetic low-light set instead of reading --input")
    g.add_argument("--synthetic-n", type=int, dest="n")
    g.add_argument("--synthetic-size", type=int, dest="size")
    g.add_argument("--noise", type=float, help="synthetic noise sigma")
    g.add_argument("--data-seed", type=int, dest="data_seed")


def _add_network_flags(p):
    p.add_argument("--K", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--warm-start-mode", choices=["fixed", "no-residual", "full"])
    p.add_argument("--cell-input", choices=["warm", "refined"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ruas", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic low-light dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("search", help="cooperative architecture search")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_data_flags(p)
    _add_network_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--mode", choices=["cooperative", "separate", "naive-joint"])
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a network with fixed genotypes")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--genotypes", help="search output directory holding genotype_t.json/genotype_n.json")
    p.add_argument("--genotype-t", help="genotype file or inline ops, e.g. C3,RC3,SC,C1")
    p.add_argument("--genotype-n", help="genotype file or inline ops")
    p.add_argument("--no-nrm", action="store_true", help="illumination-only variant")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_data_flags(p)
    _add_network_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("enhance", help="enhance images with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-illumination", action="store_true")
    p.add_argument("--warm-start-mode", choices=["fixed", "no-residual", "full"])
    p.add_argument("--no-nrm", action="store_true")
    p.add_argument("--zero-heads", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("eval", help="PSNR/SSIM plus model complexity")
    p.add_argument("--enhanced", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--resolution", default="600x400", help="WxH for FLOP counting")
    p.add_argument("--out", required=True, help="report file (JSON)")
    return parser


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict):
            merged = _merge(out[k] if isinstance(out.get(k), dict) else {}, v)
            if merged:
                out[k] = merged
        elif v is not None:
            out[k] = v
    return out


def _network_overrides(args) -> dict:
    warm = {"gamma": args.gamma, "mode": args.warm_start_mode}
    return {"K": args.K, "N": args.N, "cell_input": args.cell_input,
            "warm": {k: v for k, v in warm.items() if v is not None}}


def _data_section(args, file_cfg: dict) -> dict:
    data = _merge(DATA_DEFAULTS, file_cfg.get("data", {}))
    return _merge(data, {"input": args.input, "synthetic": args.synthetic, "n": args.n,
                         "size": args.size, "noise": args.noise, "seed": args.data_seed})


def _load_samples(data: dict):
    if data["synthetic"]:
        return synth_lowlight(data["n"], data["size"], data["seed"], data["noise"])
    if not data["input"]:
        raise ConfigError("either --input DIR or --synthetic is required")
    return load_dataset(data["input"])


def cmd_synth(args) -> int:
    out = Path(args.out)
    samples = synth_lowlight(args.n, args.size, args.seed, args.noise)
    write_samples(out, samples)
    cfg = {"n": args.n, "size": args.size, "noise": args.noise, "seed": args.seed}
    write_manifest(out, "synth", cfg, args.seed, {}, {"input": "input", "reference": "reference",
                                                      "illumination": "illumination"})
    print(f"wrote {len(samples)} synthetic pairs to {out}")
    return EXIT_OK


def cmd_search(args) -> int:
    file_cfg = read_config_file(args.config) if args.config else {}
    data = _data_section(args, file_cfg)
    search = _merge(file_cfg.get("search", {}), {
        "epochs": args.epochs, "mode": args.mode, "seed": args.seed,
        "losses": {"beta": args.beta}, "network": _network_overrides(args),
    })
    cfg = from_dict(SearchConfig, search)
    samples = _load_samples(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "history.jsonl", "w") as sink:
        result = run_search(cfg, samples, sink=sink)
    write_genotype(out / "genotype_t.json", result.genotype_t)
    write_genotype(out / "genotype_n.json", result.genotype_n)
    write_jsonl(out / "epochs.jsonl", result.epoch_history)
    write_manifest(out, "search", {"search": to_dict(cfg), "data": data}, cfg.seed,
                   {"input": data["input"], "synthetic": data["synthetic"]},
                   {"genotype_t": "genotype_t.json", "genotype_n": "genotype_n.json",
                    "history": "history.jsonl", "epochs": "epochs.jsonl"})
    print(f"IEM genotype: {','.join(result.genotype_t.ops)}")
    print(f"NRM genotype: {','.join(result.genotype_n.ops)}")
    return EXIT_OK


def _genotype_arg(value: str, width: int, module: str) -> Genotype:
    if Path(value).is_file():
        g = read_genotype(value)
        if g.module != module:
            raise GenotypeFormatError(f"{value} holds a {g.module} genotype, expected {module}")
        return g
    return Genotype.parse(value, width, module)


def cmd_train(args) -> int:
    file_cfg = read_config_file(args.config) if args.config else {}
    data = _data_section(args, file_cfg)
    net = NetworkConfig()
    g_t_src = args.genotype_t or (str(Path(args.genotypes) / "genotype_t.json") if args.genotypes else None)
    g_n_src = args.genotype_n or (str(Path(args.genotypes) / "genotype_n.json") if args.genotypes else None)
    # a train manifest passed as --config carries the genotypes it was run with
    recorded = file_cfg.get("train", {}).get("network", {})
    if g_t_src is None and file_cfg.get("genotype_t"):
        g_t_src = ",".join(file_cfg["genotype_t"])
    if g_n_src is None and file_cfg.get("genotype_n"):
        g_n_src = ",".join(file_cfg["genotype_n"])
    if g_t_src is None:
        raise ConfigError("--genotypes DIR or --genotype-t is required")
    g_t = _genotype_arg(g_t_src, recorded.get("width_t", net.width_t), "IEM")
    g_n = None
    if not args.no_nrm:
        if g_n_src is None:
            raise ConfigError("--genotype-n (or --genotypes) required unless --no-nrm")
        g_n = _genotype_arg(g_n_src, recorded.get("width_n", net.width_n), "NRM")
    overrides = _network_overrides(args)
    overrides.update({"width_t": g_t.width, "width_n": g_n.width if g_n else net.width_n})
    train_cfg = _merge(file_cfg.get("train", {}), {
        "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size, "seed": args.seed,
        "network": overrides,
    })
    cfg = from_dict(TrainConfig, train_cfg)
    resume = Checkpoint.load(args.resume) if args.resume else None
    samples = _load_samples(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        ckpt = train(g_t, g_n, [s.image for s in samples], cfg, resume=resume,
                     on_checkpoint=lambda c: c.save(out / "checkpoint.json"))
    except NumericalError as exc:
        good = getattr(exc, "checkpoint", None)
        if good is not None:
            good.save(out / "checkpoint.last_good.json")
        raise
    ckpt.save(out / "checkpoint.json")
    write_manifest(out, "train", {"train": to_dict(cfg), "data": data,
                                  "genotype_t": list(g_t.ops), "genotype_n": list(g_n.ops) if g_n else None},
                   cfg.seed, {"input": data["input"], "synthetic": data["synthetic"], "resume": args.resume},
                   {"checkpoint": "checkpoint.json"})
    print(f"trained {ckpt.epoch} epochs; checkpoint {out / 'checkpoint.json'} ({ckpt.fingerprint})")
    return EXIT_OK


def cmd_enhance(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    if args.warm_start_mode:
        net = ckpt.config.network
        net.warm = WarmStartConfig(**{**to_dict(net.warm), "mode": args.warm_start_mode})
    model = ckpt.build_model()
    if args.no_nrm:
        model.nrm = None
    if args.zero_heads:
        zero_heads(model)
    model.eval()
    window = ckpt.config.network.warm.window
    out = Path(args.out)
    written = []
    for path in list_images(args.input):
        image = load_image(path)
        if image.shape[0] < window or image.shape[1] < window:
            log.warning("skipping %s: smaller than the %dx%d warm-start window", path.name, window, window)
            continue
        with torch.no_grad():
            trace = model(to_tensor(image))
        name = path.stem + ".png"
        save_image(out / name, to_image(trace.output))
        if args.dump_illumination:
            save_image(out / "illumination" / name, to_image(trace.t[-1]))
        written.append(name)
    write_manifest(out, "enhance", {"checkpoint_fingerprint": ckpt.fingerprint,
                                    "warm_start_mode": ckpt.config.network.warm.mode,
                                    "nrm": model.nrm is not None},
                   ckpt.config.seed, {"checkpoint": args.checkpoint, "input": args.input},
                   {"images": written})
    print(f"enhanced {len(written)} image(s) into {out}")
    return EXIT_OK


def _resolution(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"resolution must look like 600x400, got {text!r}") from exc
    return w, h


def cmd_eval(args) -> int:
    enhanced = {p.stem: p for p in list_images(args.enhanced)}
    reference = {p.stem: p for p in list_images(args.reference)}
    matched = sorted(set(enhanced) & set(reference))
    unmatched = sorted(set(enhanced) ^ set(reference))
    for name in unmatched:
        log.warning("unmatched file %s excluded", name)
    report = {"per_image": [], "unmatched": unmatched, "flop_convention": FLOP_CONVENTION}
    for name in matched:
        a, b = load_image(enhanced[name]), load_image(reference[name])
        t0 = time.perf_counter()
        entry = {"name": name, "psnr": psnr(a, b), "ssim": ssim(a, b)}
        entry["metric_seconds"] = time.perf_counter() - t0
        report["per_image"].append(entry)
    if matched:
        report["mean_psnr"] = float(np.mean([e["psnr"] for e in report["per_image"]]))
        report["mean_ssim"] = float(np.mean([e["ssim"] for e in report["per_image"]]))
    if args.checkpoint:
        model = Checkpoint.load(args.checkpoint).build_model()
        w, h = _resolution(args.resolution)
        report["params"] = count_params(model)
        report["flops"] = count_flops(model, h, w)
        report["resolution"] = [w, h]
        with torch.no_grad():
            x = torch.full((1, 3, h, w), 0.3, dtype=torch.float64)
            t0 = time.perf_counter()
            model(x)
            report["seconds_per_image"] = time.perf_counter() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if not matched:
        print("no enhanced/reference pairs matched", file=sys.stderr)
        return EXIT_USAGE
    print(f"mean PSNR {report['mean_psnr']:.3f} dB, mean SSIM {report['mean_ssim']:.4f} over {len(matched)} pair(s)")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "search": cmd_search, "train": cmd_train,
            "enhance": cmd_enhance, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"ruas: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, GenotypeFormatError) as exc:
        print(f"ruas: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"ruas: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
