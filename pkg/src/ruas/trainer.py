"""Fixed-genotype training and the checkpoint container."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import __version__
from .bilevel import NumericalError
from .config import ConfigError, TrainConfig, fingerprint, from_dict, to_dict
from .data import Sample, batches
from .losses import iem_loss, nrm_loss
from .network import Enhancer, build_discrete
from .search_space import Genotype

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ruas-checkpoint/1"


def _tensors_to_lists(state: dict) -> dict:
    return {k: {"shape": list(v.shape), "data": v.detach().reshape(-1).tolist()} for k, v in state.items()}


def _lists_to_tensors(state: dict) -> dict:
    return {k: torch.tensor(v["data"], dtype=torch.float64).reshape(v["shape"]) for k, v in state.items()}


def _opt_to_json(opt: torch.optim.Optimizer) -> dict:
    sd = opt.state_dict()
    state = {}
    for idx, st in sd["state"].items():
        buf = st.get("momentum_buffer")
        state[str(idx)] = None if buf is None else {"shape": list(buf.shape), "data": buf.reshape(-1).tolist()}
    return {"state": state, "lr": sd["param_groups"][0]["lr"]}


def _opt_from_json(opt: torch.optim.Optimizer, doc: dict):
    sd = opt.state_dict()
    sd["state"] = {}
    for idx, buf in doc["state"].items():
        if buf is not None:
            t = torch.tensor(buf["data"], dtype=torch.float64).reshape(buf["shape"])
            sd["state"][int(idx)] = {"momentum_buffer": t}
    for g in sd["param_groups"]:
        g["lr"] = doc["lr"]
    opt.load_state_dict(sd)


@dataclass
class Checkpoint:
    config: TrainConfig
    genotype_t: Genotype
    genotype_n: Genotype | None
    weights: dict
    optimizers: dict = field(default_factory=dict)
    epoch: int = 0
    history: list = field(default_factory=list)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config)

    def to_json(self) -> str:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "tool_version": __version__,
            "fingerprint": self.fingerprint,
            "config": to_dict(self.config),
            "genotype_t": json.loads(self.genotype_t.to_text()),
            "genotype_n": json.loads(self.genotype_n.to_text()) if self.genotype_n else None,
            "epoch": self.epoch,
            "history": self.history,
            "weights": _tensors_to_lists(self.weights),
            "optimizers": self.optimizers,
        }
        return json.dumps(doc, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"checkpoint is not valid JSON: {exc}") from exc
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"unsupported checkpoint format {doc.get('format')!r}")
        g_n = doc["genotype_n"]
        return cls(
            config=from_dict(TrainConfig, doc["config"]),
            genotype_t=Genotype.from_text(json.dumps(doc["genotype_t"])),
            genotype_n=Genotype.from_text(json.dumps(g_n)) if g_n else None,
            weights=_lists_to_tensors(doc["weights"]),
            optimizers=doc.get("optimizers", {}),
            epoch=doc["epoch"],
            history=doc.get("history", []),
        )

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_json(text)

    def build_model(self) -> Enhancer:
        model = build_discrete(self.genotype_t, self.genotype_n, self.config.network)
        model.load_state_dict(self.weights)
        return model


def _optimizers(model: Enhancer, cfg: TrainConfig) -> dict:
    opts = {"t": torch.optim.SGD(model.iem.parameters(), lr=cfg.lr, momentum=cfg.momentum)}
    if model.nrm is not None:
        opts["n"] = torch.optim.SGD(model.nrm.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    return opts


def _step(opt, loss, module, clip):
    opt.zero_grad()
    loss.backward()
    if clip:
        torch.nn.utils.clip_grad_norm_(module.parameters(), clip)
    opt.step()


def _snapshot(model, opts, cfg, g_t, g_n, epoch, history) -> Checkpoint:
    weights = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(cfg, g_t, g_n, weights, {k: _opt_to_json(o) for k, o in opts.items()},
                      epoch, [dict(h) for h in history])


def train(genotype_t: Genotype, genotype_n: Genotype | None, images: Sequence[np.ndarray],
          cfg: TrainConfig, resume: Checkpoint | None = None,
          on_checkpoint: Callable[[Checkpoint], None] | None = None) -> Checkpoint:
    """Optimise cell weights on the reference-free losses.

    ``images`` are the low-light inputs only; nothing else is consumed. IEM weights
    follow the IEM loss and NRM weights the NRM loss on the (detached) IEM output.
    """
    if len(images) == 0:
        raise ConfigError("training needs at least one image")
    samples = [Sample(f"{i:06d}", np.asarray(im, dtype=np.float64)) for i, im in enumerate(images)]
    gen = torch.Generator().manual_seed(cfg.seed)
    model = build_discrete(genotype_t, genotype_n, cfg.network, gen)
    opts = _optimizers(model, cfg)
    start, history = 0, []
    if resume is not None:
        if (resume.genotype_t, resume.genotype_n) != (genotype_t, genotype_n):
            raise ConfigError("resume checkpoint was trained with different genotypes")
        model.load_state_dict(resume.weights)
        for k, o in opts.items():
            if k in resume.optimizers:
                _opt_from_json(o, resume.optimizers[k])
        start, history = resume.epoch, [dict(h) for h in resume.history]

    good = _snapshot(model, opts, cfg, genotype_t, genotype_n, start, history)
    for epoch in range(start, cfg.epochs):
        lr = 0.5 * cfg.lr * (1 + math.cos(math.pi * epoch / cfg.epochs))
        for o in opts.values():
            for g in o.param_groups:
                g["lr"] = lr
        sum_t = sum_n = 0.0
        for step, y in enumerate(batches(samples, cfg.batch_size, cfg.seed, epoch)):
            t_K, u_K, trace = model.iem(y)
            l_t = iem_loss(t_K, trace.t[0], cfg.losses, cfg.rtv)
            if not torch.isfinite(l_t):
                raise _diverged("IEM", epoch, step, good)
            _step(opts["t"], l_t, model.iem, cfg.grad_clip)
            sum_t += float(l_t.detach())
            if model.nrm is not None:
                u = u_K.detach()
                l_n = nrm_loss(model.nrm(u), u.clamp(0.0, 1.0), cfg.losses)
                if not torch.isfinite(l_n):
                    raise _diverged("NRM", epoch, step, good)
                _step(opts["n"], l_n, model.nrm, cfg.grad_clip)
                sum_n += float(l_n.detach())
        history.append({"epoch": epoch, "l_t": sum_t / len(samples), "l_n": sum_n / len(samples)})
        log.info("train epoch %d l_t=%.6g l_n=%.6g", epoch, history[-1]["l_t"], history[-1]["l_n"])
        if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
            good = _snapshot(model, opts, cfg, genotype_t, genotype_n, epoch + 1, history)
            if on_checkpoint is not None:
                on_checkpoint(good)
    return _snapshot(model, opts, cfg, genotype_t, genotype_n, max(start, cfg.epochs), history)


def _diverged(what, epoch, step, good: Checkpoint) -> NumericalError:
    err = NumericalError(f"non-finite {what} training loss at epoch {epoch}, step {step}", epoch, step)
    err.checkpoint = good
    return err
