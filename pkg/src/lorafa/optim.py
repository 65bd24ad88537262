"""Parameter updates over a named trainable set.

Parameters and gradients travel as insertion-ordered {name: array} dicts;
updates mutate the arrays in place (they are views into the model), so
frozen tensors are untouched by construction. Optimizer state exists only
for the trainable set, which is what the byte-accounting in the memory
model counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError, StateError

Params = dict[str, np.ndarray]


@dataclass
class SGDConfig:
    eta: float

    def __post_init__(self):
        if not self.eta > 0:
            raise ParameterError(f"learning rate must be positive, got {self.eta}")


@dataclass
class AdamWConfig:
    eta: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ParameterError(f"learning rate must be positive, got {self.eta}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ParameterError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ParameterError("eps must be positive")


@dataclass
class AdamWState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    step: int = 0

    def element_count(self) -> int:
        return sum(x.size for x in self.m.values()) + sum(x.size for x in self.v.values())


def _check_match(params: Params, grads: Params) -> None:
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise StateError(f"param/grad key mismatch: {sorted(missing)}")
    for k in params:
        if params[k].shape != grads[k].shape:
            raise DimensionError(
                f"shape mismatch for {k}: {params[k].shape} vs {grads[k].shape}"
            )


def sgd_step(params: Params, grads: Params, cfg: SGDConfig) -> Params:
    """p <- p - eta * g, in place, trainable set only."""
    _check_match(params, grads)
    for k, p in params.items():
        p -= cfg.eta * grads[k]
    return params


def init_adamw_state(params: Params) -> AdamWState:
    return AdamWState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        step=0,
    )


def adamw_step(params: Params, grads: Params, state: AdamWState, cfg: AdamWConfig):
    """Decoupled-weight-decay Adam with bias correction; returns (params, state)."""
    _check_match(params, grads)
    if set(state.m) != set(params):
        raise StateError("optimizer state does not cover the parameter set")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for k, p in params.items():
        g = grads[k]
        if cfg.weight_decay != 0.0:
            p -= cfg.eta * cfg.weight_decay * p
        m = state.m[k]
        v = state.v[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= cfg.eta * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return params, state
