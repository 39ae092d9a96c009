"""Unrolled enhancement network: illumination estimation (IEM) followed by noise removal (NRM)."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .config import NetworkConfig
from .image_model import IlluminationState, WindowMax, warm_start
from .search_space import DiscreteCell, Genotype, MixedCell, instantiate_discrete


def squash(v: torch.Tensor, sharpness: float = 30.0) -> torch.Tensor:
    """Smooth clamp of the reals onto (0, 1): softplus(v) - softplus(v - 1) at the given sharpness.

    Close to the identity inside [0, 1]; squash(1) = 1 - log(2) / sharpness.
    """
    b = sharpness
    zero = torch.zeros((), dtype=v.dtype)
    return (torch.logaddexp(zero, b * v) - torch.logaddexp(zero, b * (v - 1.0))) / b


@dataclass
class EnhanceTrace:
    hat_t: list = field(default_factory=list)  # k = 0..K-1
    t: list = field(default_factory=list)  # k = 0..K, t[0] is the first warm start
    u: list = field(default_factory=list)  # k = 0..K, u[0] is None
    x: list = field(default_factory=list)  # n = 0..N
    output: torch.Tensor | None = None


class IEM(nn.Module):
    def __init__(self, cell: nn.Module, cfg: NetworkConfig):
        super().__init__()
        self.cell = cell
        self.K = cfg.K
        self.warm = cfg.warm
        self.cell_input = cfg.cell_input
        self.sharpness = cfg.squash_sharpness
        self.pool = WindowMax(cfg.warm.window)

    def forward(self, y, alpha=None, trace: EnhanceTrace | None = None):
        eps = self.warm.eps_t
        trace = trace if trace is not None else EnhanceTrace()
        hat = warm_start(y, None, self.warm, self.pool)
        hat0, t, u = hat, hat, None
        trace.t.append(t)
        trace.u.append(None)
        for k in range(self.K):
            if k > 0:
                if self.warm.mode == "fixed":
                    hat = hat0
                else:
                    state = IlluminationState(t=t, hat_t=hat, u=u, r=u - y, k=k)
                    hat = warm_start(y, state, self.warm, self.pool)
            trace.hat_t.append(hat)
            inp = hat if self.cell_input == "warm" else t
            t = squash(hat - self.cell(inp, alpha), self.sharpness).clamp(eps, 1.0)
            u = y / t  # t >= eps by the clamp above
            trace.t.append(t)
            trace.u.append(u)
        return t, u, trace


class NRM(nn.Module):
    def __init__(self, cell: nn.Module, cfg: NetworkConfig):
        super().__init__()
        self.cell = cell
        self.N = cfg.N

    def forward(self, u, alpha=None, trace: EnhanceTrace | None = None):
        u = u.clamp(0.0, 1.0)
        x = u
        if trace is not None:
            trace.x.append(x)
        for _ in range(self.N):
            x = (u - self.cell(x, alpha)).clamp(0.0, 1.0)
            if trace is not None:
                trace.x.append(x)
        return x


def iem_forward(y, model: IEM, alpha=None):
    return model(y, alpha)


def nrm_forward(u, model: NRM, alpha=None):
    return model(u, alpha)


class Enhancer(nn.Module):
    """IEM plus optional NRM. ``nrm=None`` is the illumination-only variant."""

    def __init__(self, iem: IEM, nrm: NRM | None = None):
        super().__init__()
        self.iem = iem
        self.nrm = nrm

    def forward(self, y, alpha_t=None, alpha_n=None) -> EnhanceTrace:
        trace = EnhanceTrace()
        _, u, _ = self.iem(y, alpha_t, trace)
        if self.nrm is None:
            out = u.clamp(0.0, 1.0)
            trace.x.append(out)
        else:
            out = self.nrm(u, alpha_n, trace)
        trace.output = out
        return trace


def enhance(y, iem: IEM, nrm: NRM | None = None, alpha_t=None, alpha_n=None) -> EnhanceTrace:
    return Enhancer(iem, nrm)(y, alpha_t, alpha_n)


def build_supernet(cfg: NetworkConfig, generator=None, dtype=torch.float64, with_nrm: bool = True) -> Enhancer:
    iem = IEM(MixedCell(1, 1, cfg.width_t, generator, dtype), cfg)
    nrm = NRM(MixedCell(3, 3, cfg.width_n, generator, dtype), cfg) if with_nrm else None
    return Enhancer(iem, nrm)


def build_discrete(g_t: Genotype, g_n: Genotype | None, cfg: NetworkConfig, generator=None,
                   dtype=torch.float64, source: Enhancer | None = None) -> Enhancer:
    """Single-path network. With ``source`` (a supernet) the chosen kernels are copied over."""
    src_t = source.iem.cell if source is not None else None
    cell_t = instantiate_discrete(g_t, src_t, generator, in_ch=1, out_ch=1, dtype=dtype)
    iem = IEM(cell_t, cfg)
    nrm = None
    if g_n is not None:
        src_n = source.nrm.cell if source is not None and source.nrm is not None else None
        nrm = NRM(instantiate_discrete(g_n, src_n, generator, in_ch=3, out_ch=3, dtype=dtype), cfg)
    return Enhancer(iem, nrm)


def zero_heads(model: Enhancer) -> Enhancer:
    """Zero every cell head so each cell outputs 0 (pure warm-start propagation)."""
    with torch.no_grad():
        for mod in (model.iem, model.nrm):
            if mod is not None:
                mod.cell.head.weight.zero_()
                mod.cell.head.bias.zero_()
    return model


def genotypes_of(model: Enhancer) -> tuple[Genotype, Genotype | None]:
    cells = [model.iem.cell] + ([model.nrm.cell] if model.nrm is not None else [])
    if not all(isinstance(c, DiscreteCell) for c in cells):
        raise TypeError("genotypes are only defined for discrete networks")
    return model.iem.cell.genotype, (model.nrm.cell.genotype if model.nrm is not None else None)


__all__ = [
    "EnhanceTrace", "Enhancer", "IEM", "NRM", "MixedCell", "build_discrete", "build_supernet",
    "enhance", "genotypes_of", "iem_forward", "nrm_forward", "squash", "zero_heads",
]
