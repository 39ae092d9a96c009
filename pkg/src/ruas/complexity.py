"""Model size and FLOP accounting.

FLOPs follow the 2 x multiply-accumulate convention. Convolution MACs are
k^2 * C_in * C_out * H * W (bias adds, activations and elementwise ops are not
counted); each evaluated warm-start max filter adds window^2 * H * W comparisons.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .config import NetworkConfig
from .image_model import WindowMax
from .network import Enhancer, genotypes_of
from .search_space import _SPEC, Genotype

FLOP_CONVENTION = "FLOPs = 2 x MACs; conv MACs = k^2*Cin*Cout*H*W; max filter = window^2*H*W comparisons"


def count_params(model: nn.Module) -> int:
    """Enumerate trainable scalars."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _conv_params(k, cin, cout):
    return k * k * cin * cout + cout


def primitive_params(kind: str, width: int) -> int:
    if kind == "SC":
        return 0
    return _conv_params(_SPEC[kind][0], width, width)


def cell_params(g: Genotype, in_ch: int, out_ch: int) -> int:
    stem = _conv_params(3, in_ch, g.width)
    head = _conv_params(3, g.width, out_ch)
    return stem + head + sum(primitive_params(op, g.width) for op in g.ops)


def analytic_params(g_t: Genotype, g_n: Genotype | None) -> int:
    total = cell_params(g_t, 1, 1)
    if g_n is not None:
        total += cell_params(g_n, 3, 3)
    return total


def _primitive_macs_per_pixel(kind: str, width: int) -> int:
    if kind == "SC":
        return 0
    k = _SPEC[kind][0]
    return k * k * width * width


def primitive_flops(kind: str, width: int, H: int, W: int) -> int:
    return 2 * _primitive_macs_per_pixel(kind, width) * H * W


def _cell_macs_per_pixel(g: Genotype, in_ch: int, out_ch: int) -> int:
    macs = 9 * in_ch * g.width + 9 * g.width * out_ch
    return macs + sum(_primitive_macs_per_pixel(op, g.width) for op in g.ops)


def analytic_flops(g_t: Genotype, g_n: Genotype | None, cfg: NetworkConfig, H: int, W: int) -> int:
    px = H * W
    pools = 1 if cfg.warm.mode == "fixed" else cfg.K
    flops = cfg.K * 2 * _cell_macs_per_pixel(g_t, 1, 1) * px + pools * cfg.warm.window**2 * px
    if g_n is not None:
        flops += cfg.N * 2 * _cell_macs_per_pixel(g_n, 3, 3) * px
    return flops


def count_flops(model: Enhancer, H: int, W: int) -> int:
    """Analytic count for a discrete network at resolution H x W."""
    g_t, g_n = genotypes_of(model)
    cfg = NetworkConfig(K=model.iem.K, N=model.nrm.N if model.nrm is not None else 0,
                        width_t=g_t.width, width_n=g_n.width if g_n else 6,
                        warm=model.iem.warm)
    return analytic_flops(g_t, g_n, cfg, H, W)


def traced_flops(model: Enhancer, H: int, W: int) -> int:
    """Count by running a forward pass with hooks on every conv and max filter."""
    total = 0

    def conv_hook(mod, inp, out):
        nonlocal total
        k = mod.kernel_size[0] * mod.kernel_size[1]
        total += 2 * k * mod.in_channels * mod.out_channels * out.shape[-2] * out.shape[-1] * out.shape[0]

    def pool_hook(mod, inp, out):
        nonlocal total
        total += mod.window**2 * out.shape[-2] * out.shape[-1] * out.shape[0]

    handles = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, WindowMax):
            handles.append(m.register_forward_hook(pool_hook))
    try:
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            model(torch.full((1, 3, H, W), 0.3, dtype=dtype))
    finally:
        for h in handles:
            h.remove()
    return total
