"""Reference-free objectives. All reductions are sums over batch, channels and pixels."""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .config import LossWeights, RTVConfig


def forward_diffs(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward differences along W and H with replicate boundary (last difference is 0)."""
    dx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return dx, dy


def tv(x: torch.Tensor) -> torch.Tensor:
    """Anisotropic total variation."""
    dx = x[..., :, 1:] - x[..., :, :-1]
    dy = x[..., 1:, :] - x[..., :-1, :]
    return dx.abs().sum() + dy.abs().sum()


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    r = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def _window_sum(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    p = g.shape[-1] // 2
    x = F.pad(x, (p, p, p, p), mode="replicate")
    kernel = g.to(x.dtype).expand(c, 1, *g.shape)
    return F.conv2d(x, kernel, groups=c)


def rtv(t: torch.Tensor, cfg: RTVConfig | None = None) -> torch.Tensor:
    """Relative total variation: sum_p sum_d D_d(p) / (L_d(p) + eps_s).

    D is the Gaussian-windowed sum of |gradient|, L the magnitude of the windowed
    sum of signed gradients, so oscillating texture scores high and coherent
    edges score below one per pixel.
    """
    cfg = cfg or RTVConfig()
    g = gaussian_window(cfg.window, cfg.sigma, t.dtype)
    total = t.new_zeros(())
    for d in forward_diffs(t):
        D = _window_sum(d.abs(), g)
        L = _window_sum(d, g).abs()
        total = total + (D / (L + cfg.eps_s)).sum()
    return total


def fidelity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return 0.5 * ((a - b) ** 2).sum()


def iem_loss(t_K, hat_t0, w: LossWeights | None = None, cfg: RTVConfig | None = None):
    w = w or LossWeights()
    return fidelity(t_K, hat_t0) + w.eta_t * rtv(t_K, cfg)


def nrm_loss(x_N, u_K, w: LossWeights | None = None):
    w = w or LossWeights()
    return fidelity(x_N, u_K) + w.eta_n * tv(x_N)


def cooperative_val_loss(l_t, l_n, beta: float):
    return l_t + beta * l_n
