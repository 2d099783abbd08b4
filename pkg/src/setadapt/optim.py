"""In-place SGD (Nesterov) and Adam updates over lists of arrays."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass
class AdamConfig:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")


@dataclass
class SGDConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")


@dataclass
class OptimizerState:
    step: int = 0
    first: list = field(default_factory=list)
    second: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params):
        return cls(
            step=0,
            first=[np.zeros_like(p) for p in params],
            second=[np.zeros_like(p) for p in params],
        )


def _scales(scales, n):
    return [1.0] * n if scales is None else list(scales)


def _check(params, grads, state):
    if len(params) != len(grads) or len(params) != len(state.first):
        raise DimensionError("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.first):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")


def sgd_step(params, grads, state, cfg, lr_scales=None):
    """SGD with classic L2 decay (added to the gradient) and momentum."""
    _check(params, grads, state)
    state.step += 1
    for p, g, buf, s in zip(params, grads, state.first, _scales(lr_scales, len(params))):
        d = g + cfg.weight_decay * p if cfg.weight_decay else g.copy()
        if cfg.momentum:
            buf *= cfg.momentum
            buf += d
            d = d + cfg.momentum * buf if cfg.nesterov else buf
        p -= (cfg.lr * s) * d


def adam_step(params, grads, state, cfg, lr_scales=None):
    """Bias-corrected Adam."""
    _check(params, grads, state)
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for p, g, m, v, s in zip(params, grads, state.first, state.second, _scales(lr_scales, len(params))):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= (cfg.lr * s) * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def step(params, grads, state, cfg, lr_scales=None):
    if isinstance(cfg, AdamConfig):
        adam_step(params, grads, state, cfg, lr_scales)
    elif isinstance(cfg, SGDConfig):
        sgd_step(params, grads, state, cfg, lr_scales)
    else:
        raise ConfigError(f"unknown optimizer config {cfg!r}")
