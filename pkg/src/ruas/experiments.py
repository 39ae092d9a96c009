"""Desk-scale experiment drivers shared by ``scripts/`` and the acceptance tests.

Both drivers go through the command-line entry point so every run leaves the same
manifests, genotype files and checkpoints a user would get.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cli import main as cli
from .data import to_image, to_tensor
from .io import load_dataset
from .metrics import psnr, ssim
from .trainer import Checkpoint

WARM_MODES = ("fixed", "no-residual", "full")
SEARCH_MODES = ("cooperative", "separate", "naive-joint")


class StepFailed(RuntimeError):
    pass


def _run(*argv):
    code = cli([str(a) for a in argv])
    if code != 0:
        raise StepFailed(f"ruas {' '.join(str(a) for a in argv)} exited with {code}")


@dataclass
class Scale:
    n: int = 64
    size: int = 64
    noise: float = 0.03
    search_epochs: int = 5
    train_epochs: int = 50
    val_n: int = 16
    seed: int = 0

    def data_flags(self) -> list:
        return ["--synthetic", "--synthetic-n", self.n, "--synthetic-size", self.size,
                "--noise", self.noise, "--data-seed", self.seed]


def evaluate(checkpoint, samples, no_nrm: bool = False) -> dict:
    """Mean PSNR/SSIM of a checkpoint on samples that carry references."""
    model = Checkpoint.load(checkpoint).build_model()
    if no_nrm:
        model.nrm = None
    rows = []
    with torch.no_grad():
        for s in samples:
            out = to_image(model(to_tensor(s.image)).output)
            rows.append((psnr(s.image, s.reference), psnr(out, s.reference), ssim(out, s.reference)))
    arr = np.array(rows)
    return {"input_psnr": float(arr[:, 0].mean()), "psnr": float(arr[:, 1].mean()),
            "ssim": float(arr[:, 2].mean())}


def _references(directory) -> list:
    inputs = {s.name: s for s in load_dataset(Path(directory) / "input")}
    for s in load_dataset(Path(directory) / "reference"):
        inputs[s.name].reference = s.image
    return list(inputs.values())


@dataclass
class DeskScaleResult:
    genotype_t: list
    genotype_n: list
    metrics_i: dict
    metrics_in: dict
    seconds: float
    paths: dict = field(default_factory=dict)


def desk_scale(out, scale: Scale | None = None) -> DeskScaleResult:
    """Search, then train RUAS_i and RUAS_i+n, then score them on the training inputs' references."""
    from .synthetic import synth_lowlight

    scale = scale or Scale()
    out = Path(out)
    start = time.perf_counter()
    data = scale.data_flags()
    _run("search", "--out", out / "search", "--epochs", scale.search_epochs, "--seed", scale.seed, *data)
    _run("train", "--genotypes", out / "search", "--no-nrm", "--out", out / "train_i",
         "--epochs", scale.train_epochs, "--seed", scale.seed, *data)
    _run("train", "--genotypes", out / "search", "--out", out / "train_in",
         "--epochs", scale.train_epochs, "--seed", scale.seed, *data)
    samples = synth_lowlight(scale.n, scale.size, scale.seed, scale.noise)
    g_t = json.loads((out / "search" / "genotype_t.json").read_text())["edges"]
    g_n = json.loads((out / "search" / "genotype_n.json").read_text())["edges"]
    return DeskScaleResult(
        g_t, g_n,
        evaluate(out / "train_i" / "checkpoint.json", samples),
        evaluate(out / "train_in" / "checkpoint.json", samples),
        time.perf_counter() - start,
        {"search": out / "search", "train_i": out / "train_i", "train_in": out / "train_in"},
    )


@dataclass
class AblationRun:
    family: str
    mode: str
    directory: Path
    genotype_t: list
    genotype_n: list
    val_psnr: float | None = None
    val_ssim: float | None = None


def ablations(out, scale: Scale | None = None, score_warm_modes: bool = False) -> list[AblationRun]:
    """Warm-start modes and search modes on one synthetic set.

    Each search mode's genotypes are trained and scored on a held-out synthetic
    validation set. The default configuration (full warm start, cooperative
    search) belongs to both families and is run once.
    """
    scale = scale or Scale(n=32, size=48, search_epochs=5, train_epochs=30)
    out = Path(out)
    val_dir = out / "validation"
    _run("synth", "--out", val_dir, "--n", scale.val_n, "--size", scale.size, "--noise", scale.noise,
         "--seed", scale.seed + 1000)
    val = _references(val_dir)
    data = scale.data_flags()

    plan = [("search", m, ["--mode", m]) for m in SEARCH_MODES]
    plan += [("warm", m, ["--warm-start-mode", m]) for m in WARM_MODES if m != "full"]
    runs = []
    for family, mode, flags in plan:
        d = out / f"{family}-{mode}"
        _run("search", "--out", d / "search", "--epochs", scale.search_epochs, "--seed", scale.seed,
             *data, *flags)
        run = AblationRun(family, mode, d,
                          json.loads((d / "search" / "genotype_t.json").read_text())["edges"],
                          json.loads((d / "search" / "genotype_n.json").read_text())["edges"])
        if family == "search" or score_warm_modes:
            train_flags = flags if family == "warm" else []
            _run("train", "--genotypes", d / "search", "--out", d / "train", "--epochs", scale.train_epochs,
                 "--seed", scale.seed, *data, *train_flags)
            m = evaluate(d / "train" / "checkpoint.json", val)
            run.val_psnr, run.val_ssim = m["psnr"], m["ssim"]
        runs.append(run)
    default = next(r for r in runs if r.family == "search" and r.mode == "cooperative")
    runs.append(AblationRun("warm", "full", default.directory, default.genotype_t, default.genotype_n,
                            default.val_psnr, default.val_ssim))
    return runs
