"""Retinex algebra on (B, C, H, W) tensors and the illumination warm start.

Images carry 3 channels, illumination maps a single channel that broadcasts
over colour in the product/division below.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import WarmStartConfig


class PreconditionError(ValueError):
    pass


@dataclass
class IlluminationState:
    """Stage-k bundle; ``u`` and ``r`` are None at k = 0."""

    t: torch.Tensor
    hat_t: torch.Tensor
    u: torch.Tensor | None = None
    r: torch.Tensor | None = None
    k: int = 0


def _check_pair(x: torch.Tensor, t: torch.Tensor):
    if x.dim() != 4 or t.dim() != 4:
        raise ValueError(f"expected 4-d tensors, got {tuple(x.shape)} and {tuple(t.shape)}")
    if t.shape[1] != 1 or x.shape[0] != t.shape[0] or x.shape[2:] != t.shape[2:]:
        raise ValueError(f"illumination {tuple(t.shape)} incompatible with image {tuple(x.shape)}")


def compose(x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Retinex product y = x * t, clipped to [0, 1]."""
    _check_pair(x, t)
    return (x * t).clamp(0.0, 1.0)


def decompose(y: torch.Tensor, t: torch.Tensor, eps_t: float = 1e-3) -> torch.Tensor:
    """u = y / t. Not clipped: downstream stages consume the raw ratio."""
    _check_pair(y, t)
    # small slack so maps clamped in a lower precision still pass
    if bool((t < eps_t * (1 - 1e-6)).any()):
        raise PreconditionError(f"illumination below floor eps_t={eps_t}; clamp before dividing")
    return y / t


def window_max(x: torch.Tensor, window: int) -> torch.Tensor:
    """Joint max over channels and a replicate-padded square window -> (B, 1, H, W)."""
    m = x.amax(dim=1, keepdim=True)
    if window == 1:
        return m
    p = window // 2
    m = F.pad(m, (p, p, p, p), mode="replicate")
    return F.max_pool2d(m, window, stride=1)


class WindowMax(nn.Module):
    """Module wrapper so complexity hooks can see the max filter."""

    def __init__(self, window: int):
        super().__init__()
        self.window = window

    def forward(self, x):
        return window_max(x, self.window)


def warm_start(y: torch.Tensor, state: IlluminationState | None, cfg: WarmStartConfig,
               pool: nn.Module | None = None) -> torch.Tensor:
    """Stage warm start: windowed max of y at k = 0, of u_k minus gamma * mean_c(r_k) after."""
    pool = pool or WindowMax(cfg.window)
    if state is None or state.u is None:
        hat = pool(y)
    else:
        hat = pool(state.u)
        if cfg.mode == "full":
            residual = state.r if state.r is not None else state.u - y
            hat = hat - cfg.gamma * residual.mean(dim=1, keepdim=True)
    return hat.clamp(cfg.eps_t, 1.0)
