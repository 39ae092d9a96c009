"""Configuration dataclasses. Every default used anywhere in the package lives here."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

WARM_MODES = ("fixed", "no-residual", "full")
CELL_INPUTS = ("warm", "refined")
SEARCH_MODES = ("cooperative", "separate", "naive-joint")


class ConfigError(ValueError):
    """Invalid configuration or unusable input data."""


@dataclass
class WarmStartConfig:
    gamma: float = 0.5
    window: int = 3
    eps_t: float = 1e-3
    mode: str = "full"

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be a positive odd integer, got {self.window}")
        if self.eps_t <= 0:
            raise ConfigError("eps_t must be positive")
        if self.mode not in WARM_MODES:
            raise ConfigError(f"unknown warm-start mode {self.mode!r}; expected one of {WARM_MODES}")


@dataclass
class RTVConfig:
    window: int = 3
    sigma: float = 1.0
    eps_s: float = 1e-3

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError("RTV window must be an odd integer >= 3")
        if self.eps_s <= 0 or self.sigma <= 0:
            raise ConfigError("RTV sigma and eps_s must be positive")


@dataclass
class LossWeights:
    eta_t: float = 1e-3
    eta_n: float = 0.05
    beta: float = 1.0

    def __post_init__(self):
        if self.eta_t <= 0 or self.eta_n <= 0:
            raise ConfigError("eta_t and eta_n must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")


@dataclass
class NetworkConfig:
    K: int = 3
    N: int = 3
    width_t: int = 3
    width_n: int = 6
    # "warm" feeds the stage warm start to the IEM cell, "refined" feeds t_k
    cell_input: str = "warm"
    squash_sharpness: float = 30.0
    warm: WarmStartConfig = field(default_factory=WarmStartConfig)

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.N < 0:
            raise ConfigError("N must be >= 0")
        if self.width_t < 1 or self.width_n < 1:
            raise ConfigError("cell widths must be positive")
        if self.cell_input not in CELL_INPUTS:
            raise ConfigError(f"cell_input must be one of {CELL_INPUTS}")
        if self.squash_sharpness <= 0:
            raise ConfigError("squash_sharpness must be positive")


@dataclass
class SearchConfig:
    epochs: int = 20
    batch_size: int = 1
    alpha_lr: float = 3e-4
    alpha_betas: tuple[float, float] = (0.5, 0.999)
    alpha_weight_decay: float = 1e-3
    weight_lr: float = 3e-4
    weight_momentum: float = 0.9
    grad_clip: float = 5.0
    # virtual-step size; None means "same as weight_lr"
    xi: float | None = None
    eps_fd: float = 0.01
    inner_steps_t: int = 1
    inner_steps_n: int = 1
    mode: str = "cooperative"
    seed: int = 0
    losses: LossWeights = field(default_factory=LossWeights)
    rtv: RTVConfig = field(default_factory=RTVConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.alpha_lr <= 0 or self.weight_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.mode not in SEARCH_MODES:
            raise ConfigError(f"mode must be one of {SEARCH_MODES}, got {self.mode!r}")
        if self.inner_steps_t < 1 or self.inner_steps_n < 1:
            raise ConfigError("inner step counts must be >= 1")
        self.alpha_betas = tuple(self.alpha_betas)

    @property
    def virtual_lr(self) -> float:
        return self.weight_lr if self.xi is None else self.xi


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 1
    lr: float = 3e-4
    momentum: float = 0.9
    grad_clip: float = 5.0
    checkpoint_every: int = 10
    seed: int = 0
    losses: LossWeights = field(default_factory=LossWeights)
    rtv: RTVConfig = field(default_factory=RTVConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1 or self.lr <= 0 or self.checkpoint_every < 1:
            raise ConfigError("batch_size, lr and checkpoint_every must be positive")


_NESTED = {
    "warm": WarmStartConfig,
    "losses": LossWeights,
    "rtv": RTVConfig,
    "network": NetworkConfig,
}


def to_dict(cfg) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def from_dict(cls, data: dict[str, Any] | None):
    """Build ``cls`` from a (possibly partial) nested dict; unknown keys are rejected."""
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and isinstance(value, dict):
            value = from_dict(_NESTED[key], value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def fingerprint(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
