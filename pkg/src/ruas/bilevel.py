"""Cooperative bilevel architecture search with one-step hypergradients."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import torch
from torch.func import functional_call

from .config import ConfigError, SearchConfig
from .data import Sample, batches, split_by_hash
from .losses import cooperative_val_loss, iem_loss, nrm_loss
from .network import Enhancer, build_supernet
from .search_space import Genotype, derive_genotype, new_alpha, relax

log = logging.getLogger(__name__)

LossFn = Callable[[torch.Tensor, dict], torch.Tensor]


class NumericalError(RuntimeError):
    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


def virtual_step(weights: dict, grads, xi: float) -> dict:
    """w' = w - xi * g, returned as fresh leaves that require grad."""
    if isinstance(grads, dict):
        grads = [grads[k] for k in weights]
    out = {}
    for (name, w), g in zip(weights.items(), grads):
        g = torch.zeros_like(w) if g is None else g
        out[name] = (w.detach() - xi * g.detach()).requires_grad_(True)
    return out


def _grad(loss, inputs):
    gs = torch.autograd.grad(loss, inputs, allow_unused=True)
    return [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, gs)]


def hypergradient(train_loss: LossFn, val_loss: LossFn, alpha: torch.Tensor, weights: dict,
                  xi: float, eps_fd: float = 0.01) -> torch.Tensor:
    """One-step unrolled gradient of ``val_loss`` w.r.t. ``alpha``.

    grad_a L_val(a; w') - xi * [grad_a L_tr(w+) - grad_a L_tr(w-)] / (2 e),
    with w' = w - xi grad_w L_tr(w), w+- = w +- e * grad_w' L_val and
    e = eps_fd / ||grad_w' L_val||. ``xi = 0`` gives the first-order gradient.
    """
    names = list(weights)
    if xi == 0:
        return _grad(val_loss(alpha, weights), [alpha])[0]

    g_tr = _grad(train_loss(alpha, weights), [weights[k] for k in names])
    w_virtual = virtual_step(weights, g_tr, xi)
    out = _grad(val_loss(alpha, w_virtual), [alpha] + [w_virtual[k] for k in names])
    g_alpha, g_w = out[0], out[1:]

    norm = torch.sqrt(sum((g * g).sum() for g in g_w))
    if not torch.isfinite(norm):
        raise NumericalError("non-finite validation gradient in hypergradient")
    if norm == 0:
        return g_alpha
    e = eps_fd / norm
    w_plus = {k: (weights[k].detach() + e * g) for k, g in zip(names, g_w)}
    w_minus = {k: (weights[k].detach() - e * g) for k, g in zip(names, g_w)}
    ga_plus = _grad(train_loss(alpha, w_plus), [alpha])[0]
    ga_minus = _grad(train_loss(alpha, w_minus), [alpha])[0]
    return g_alpha - xi * (ga_plus - ga_minus) / (2 * e)


def row_entropy(alpha: torch.Tensor) -> list[float]:
    p = relax(alpha.detach())
    return (-(p * p.clamp_min(1e-300).log()).sum(-1)).tolist()


class ModuleLosses:
    """Losses of the two modules evaluated with substitutable cell weights."""

    def __init__(self, model: Enhancer, cfg: SearchConfig):
        self.model = model
        self.w = cfg.losses
        self.rtv = cfg.rtv

    def _iem(self, y, alpha_t, weights_t):
        iem = self.model.iem
        if weights_t is None:
            return iem(y, alpha_t)
        return functional_call(iem, {f"cell.{k}": v for k, v in weights_t.items()}, (y, alpha_t))

    def iem(self, y, alpha_t, weights_t=None):
        t_K, u_K, trace = self._iem(y, alpha_t, weights_t)
        return iem_loss(t_K, trace.t[0], self.w, self.rtv), u_K

    def nrm(self, u_K, alpha_n, weights_n=None):
        nrm = self.model.nrm
        if weights_n is None:
            x = nrm(u_K, alpha_n)
        else:
            x = functional_call(nrm, {f"cell.{k}": v for k, v in weights_n.items()}, (u_K, alpha_n))
        return nrm_loss(x, u_K.clamp(0.0, 1.0), self.w)

    def coupled(self, y, alpha_t, alpha_n, weights_t=None, weights_n=None):
        l_t, u = self.iem(y, alpha_t, weights_t)
        return l_t, self.nrm(u, alpha_n, weights_n)


def cell_weights(module) -> dict:
    return dict(module.cell.named_parameters())


def _check(value, what, epoch, step):
    if not math.isfinite(float(value)):
        raise NumericalError(f"non-finite {what} at epoch {epoch}, step {step}", epoch, step)


@dataclass
class SearchState:
    model: Enhancer
    alpha_t: torch.Tensor
    alpha_n: torch.Tensor
    opt_alpha: dict
    opt_weights: dict
    epoch: int = 0
    history: list = field(default_factory=list)
    epoch_history: list = field(default_factory=list)

    @property
    def joint(self) -> bool:
        return self.alpha_t is self.alpha_n


def init_search(cfg: SearchConfig) -> SearchState:
    gen = torch.Generator().manual_seed(cfg.seed)
    model = build_supernet(cfg.network, gen)
    alpha_t = new_alpha()
    alpha_n = alpha_t if cfg.mode == "naive-joint" else new_alpha()

    def adam(params):
        return torch.optim.Adam(params, lr=cfg.alpha_lr, betas=cfg.alpha_betas,
                                weight_decay=cfg.alpha_weight_decay)

    def sgd(params):
        return torch.optim.SGD(params, lr=cfg.weight_lr, momentum=cfg.weight_momentum)

    if cfg.mode == "naive-joint":
        opt_alpha = {"joint": adam([alpha_t])}
        opt_weights = {"joint": sgd(list(model.parameters()))}
    else:
        opt_alpha = {"t": adam([alpha_t]), "n": adam([alpha_n])}
        opt_weights = {"t": sgd(list(model.iem.parameters())), "n": sgd(list(model.nrm.parameters()))}
    return SearchState(model, alpha_t, alpha_n, opt_alpha, opt_weights)


def _set_alpha_grad(opt, alpha, g):
    opt.zero_grad()
    alpha.grad = g.detach().clone()
    opt.step()


def _weight_step(opt, loss, clip=None):
    opt.zero_grad()
    loss.backward()
    if clip:
        params = [p for g in opt.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(params, clip)
    opt.step()


def _step_t(state, losses, cfg, y_tr, y_val, coupling: bool):
    """Update alpha_t by its hypergradient (+ beta coupling), then w_t on the training loss."""
    iem, a_t, a_n = state.model.iem, state.alpha_t, state.alpha_n
    w_t = cell_weights(iem)
    g = hypergradient(lambda a, w: losses.iem(y_tr, a, w)[0],
                      lambda a, w: losses.iem(y_val, a, w)[0],
                      a_t, w_t, cfg.virtual_lr, cfg.eps_fd)
    beta = cfg.losses.beta
    if coupling and beta > 0:
        _, l_n = losses.coupled(y_val, a_t, a_n.detach())
        g = g + beta * _grad(l_n, [a_t])[0]
    _set_alpha_grad(state.opt_alpha["t"], a_t, g)
    _weight_step(state.opt_weights["t"], losses.iem(y_tr, a_t.detach())[0], cfg.grad_clip)


def _step_n(state, losses, cfg, y_tr, y_val):
    """Update alpha_n on the IEM output under the current alpha_t, then w_n."""
    a_t, a_n = state.alpha_t.detach(), state.alpha_n
    with torch.no_grad():
        u_tr = state.model.iem(y_tr, a_t)[1]
        u_val = state.model.iem(y_val, a_t)[1]
    w_n = cell_weights(state.model.nrm)
    g = hypergradient(lambda a, w: losses.nrm(u_tr, a, w),
                      lambda a, w: losses.nrm(u_val, a, w),
                      a_n, w_n, cfg.virtual_lr, cfg.eps_fd)
    _set_alpha_grad(state.opt_alpha["n"], a_n, g)
    _weight_step(state.opt_weights["n"], losses.nrm(u_tr, a_n.detach()), cfg.grad_clip)


def _step_joint(state, losses, cfg, y_tr, y_val):
    """One architecture and one combined loss over both modules."""
    model, alpha = state.model, state.alpha_t
    beta = cfg.losses.beta
    weights = {f"iem.{k}": v for k, v in cell_weights(model.iem).items()}
    weights.update({f"nrm.{k}": v for k, v in cell_weights(model.nrm).items()})

    def combined(y, a, w):
        wt = {k[4:]: v for k, v in w.items() if k.startswith("iem.")}
        wn = {k[4:]: v for k, v in w.items() if k.startswith("nrm.")}
        l_t, l_n = losses.coupled(y, a, a, wt, wn)
        return cooperative_val_loss(l_t, l_n, beta)

    g = hypergradient(lambda a, w: combined(y_tr, a, w), lambda a, w: combined(y_val, a, w),
                      alpha, weights, cfg.virtual_lr, cfg.eps_fd)
    _set_alpha_grad(state.opt_alpha["joint"], alpha, g)
    l_t, l_n = losses.coupled(y_tr, alpha.detach(), alpha.detach())
    _weight_step(state.opt_weights["joint"], cooperative_val_loss(l_t, l_n, beta), cfg.grad_clip)


def evaluate_val(state: SearchState, samples: list[Sample], cfg: SearchConfig) -> dict:
    losses = ModuleLosses(state.model, cfg)
    lt = ln = 0.0
    with torch.no_grad():
        for y in batches(samples, cfg.batch_size, cfg.seed, 0, shuffle=False):
            l_t, l_n = losses.coupled(y, state.alpha_t, state.alpha_n)
            lt += float(l_t)
            ln += float(l_n)
    n = max(1, len(samples))
    lt, ln = lt / n, ln / n
    return {"l_t_val": lt, "l_n_val": ln, "coop_val": lt + cfg.losses.beta * ln}


def _cosine(opts: dict, cfg: SearchConfig, epoch: int, total: int):
    lr = 0.5 * cfg.weight_lr * (1 + math.cos(math.pi * epoch / max(1, total)))
    for opt in opts.values():
        for group in opt.param_groups:
            group["lr"] = lr


def search_epoch(state: SearchState, data_tr: list[Sample], data_val: list[Sample], cfg: SearchConfig,
                 phases: tuple[str, ...] = ("t", "n"), lr_epoch: int | None = None,
                 total_epochs: int | None = None, sink=None) -> SearchState:
    """One pass over the search-train split, pairing each batch with a validation batch."""
    if not data_tr or not data_val:
        raise ConfigError("search_epoch needs non-empty train and validation splits")
    losses = ModuleLosses(state.model, cfg)
    epoch = state.epoch
    _cosine(state.opt_weights, cfg, epoch if lr_epoch is None else lr_epoch, total_epochs or cfg.epochs)
    tr = batches(data_tr, cfg.batch_size, cfg.seed, 2 * epoch)
    val = batches(data_val, cfg.batch_size, cfg.seed, 2 * epoch + 1)
    for step, y_tr in enumerate(tr):
        y_val = val[step % len(val)]
        with torch.no_grad():
            l_t, l_n = losses.coupled(y_val, state.alpha_t, state.alpha_n)
        l_t, l_n = float(l_t), float(l_n)
        _check(l_t, "IEM validation loss", epoch, step)
        _check(l_n, "NRM validation loss", epoch, step)
        if state.joint:
            _step_joint(state, losses, cfg, y_tr, y_val)
        else:
            if "t" in phases:
                for _ in range(cfg.inner_steps_t):
                    _step_t(state, losses, cfg, y_tr, y_val, coupling="n" in phases)
            if "n" in phases:
                for _ in range(cfg.inner_steps_n):
                    _step_n(state, losses, cfg, y_tr, y_val)
        for a, what in ((state.alpha_t, "alpha_t"), (state.alpha_n, "alpha_n")):
            if not torch.isfinite(a).all():
                raise NumericalError(f"non-finite {what} at epoch {epoch}, step {step}", epoch, step)
        record = {
            "epoch": epoch, "step": step, "phase": "+".join(phases) if not state.joint else "joint",
            "l_t_val": l_t, "l_n_val": l_n,
            "coop_val": cooperative_val_loss(l_t, l_n, cfg.losses.beta),
            "entropy_t": row_entropy(state.alpha_t), "entropy_n": row_entropy(state.alpha_n),
        }
        state.history.append(record)
        if sink is not None:
            sink.write(json.dumps(record, sort_keys=True) + "\n")
    state.epoch += 1
    return state


@dataclass
class SearchResult:
    genotype_t: Genotype
    genotype_n: Genotype
    history: list
    epoch_history: list
    state: SearchState


def run_search(cfg: SearchConfig, dataset: list[Sample], sink=None) -> SearchResult:
    """Run the configured search schedule and derive both genotypes."""
    if not dataset:
        raise ConfigError("empty dataset")
    data_tr, data_val = split_by_hash(dataset)
    state = init_search(cfg)

    def summarize(phase):
        rec = {"epoch": state.epoch, "phase": phase, **evaluate_val(state, data_val, cfg)}
        state.epoch_history.append(rec)
        log.info("epoch %d [%s] coop_val=%.6g", state.epoch, phase, rec["coop_val"])

    summarize("init")
    if cfg.mode == "separate":
        schedule = [("t",)] * cfg.epochs + [("n",)] * cfg.epochs
    else:
        schedule = [("t", "n")] * cfg.epochs
    for i, phases in enumerate(schedule):
        search_epoch(state, data_tr, data_val, cfg, phases, lr_epoch=i % max(1, cfg.epochs),
                     total_epochs=cfg.epochs, sink=sink)
        summarize("+".join(phases) if cfg.mode != "naive-joint" else "joint")

    net = cfg.network
    g_t = derive_genotype(state.alpha_t, net.width_t, "IEM")
    g_n = derive_genotype(state.alpha_n, net.width_n, "NRM")
    return SearchResult(g_t, g_n, state.history, state.epoch_history, state)
