"""Optimizer steps: adjusted-gradient SGD and AdamW, plus the baselines.

The AdamW variant tracks first and second moments of the *equivalent
gradient* at the full m x n weight shape (the price of mimicking full
fine-tuning), re-projects the moment-transformed gradient onto the factors,
adjusts a second time, and applies weight decay in the decomposed form that
decays the merged weight exactly.

All step functions are functional: they return fresh layer/state values and
never mutate their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError
from .gradadjust import (
    DampingPolicy,
    GradBundle,
    adjust,
    equivalent_gradient,
    lora_raw_grads,
)
from .linalg import as_matrix
from .lora import LoraLayer, apply_decayed_merge_step

__all__ = [
    "HyperParams",
    "AdamWState",
    "init_adamw_state",
    "lr_at",
    "adamw_transform",
    "lorapro_sgd_step",
    "lorapro_adamw_step",
    "lora_sgd_step",
    "lora_adamw_step",
    "full_ft_adamw_step",
    "baseline_step",
]

SCHEDULES = ("constant", "cosine_with_warmup")
BASELINE_KINDS = ("lora_sgd", "lora_adamw", "full_ft_adamw")


@dataclass
class HyperParams:
    lr: float
    weight_decay: float = 0.0
    schedule: str = "constant"
    warmup_ratio: float = 0.0
    # Ablation switch: apply the decomposed weight decay after the factor
    # update instead of before it (the default order).
    decay_after_update: bool = False

    def __post_init__(self):
        if self.lr < 0.0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}, expected one of {SCHEDULES}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")


@dataclass
class AdamWState:
    """Exponential moment accumulators for one parameter matrix."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        self.m = as_matrix(self.m, "m")
        self.v = as_matrix(self.v, "v")
        if self.m.shape != self.v.shape:
            raise ShapeError(f"moment shapes differ: {self.m.shape} vs {self.v.shape}")
        if np.any(self.v < 0.0):
            raise ValueError("second moment must be entrywise nonnegative")
        if self.t < 0:
            raise ValueError(f"step counter must be >= 0, got {self.t}")
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= beta < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {beta}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


def init_adamw_state(
    shape: tuple[int, int],
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> AdamWState:
    return AdamWState(
        m=np.zeros(shape), v=np.zeros(shape), t=0, beta1=beta1, beta2=beta2, epsilon=epsilon
    )


def lr_at(hp: HyperParams, step: int, total_steps: int) -> float:
    """Schedule evaluation: linear warmup from 0, then cosine decay to 0.

    ``step`` counts applied optimizer steps (0 = before the first update) and
    clamps to ``total_steps``.
    """
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    step = min(step, total_steps)
    if hp.schedule == "constant":
        return hp.lr
    warmup = math.ceil(hp.warmup_ratio * total_steps)
    if step < warmup:
        return hp.lr * step / warmup
    frac = (step - warmup) / max(1, total_steps - warmup)
    return hp.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def adamw_transform(state: AdamWState, grad: np.ndarray) -> tuple[np.ndarray, AdamWState]:
    """One moment update plus bias-corrected normalization of a gradient."""
    grad = as_matrix(grad, "grad")
    if grad.shape != state.m.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match state {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    direction = m_hat / (np.sqrt(v_hat) + state.epsilon)
    return direction, replace(state, m=m, v=v, t=t)


def lorapro_sgd_step(
    layer: LoraLayer,
    bundle: GradBundle,
    hp: HyperParams,
    strategy: str = "sylvester",
    policy: DampingPolicy = DampingPolicy(),
) -> LoraLayer:
    """Plain gradient descent on the factors with adjusted gradients; no decay."""
    if hp.weight_decay != 0.0:
        raise ValueError("the SGD loop has no weight decay; got a nonzero weight_decay")
    adjusted = adjust(layer, bundle, strategy=strategy, policy=policy)
    return replace(
        layer,
        b=layer.b - hp.lr * adjusted.g_b,
        a=layer.a - hp.lr * adjusted.g_a,
    )


def lorapro_adamw_step(
    layer: LoraLayer,
    state: AdamWState,
    bundle: GradBundle,
    hp: HyperParams,
    policy: DampingPolicy = DampingPolicy(),
    x_strategy: str = "sylvester",
) -> tuple[LoraLayer, AdamWState]:
    """AdamW on the equivalent gradient.

    Order of operations: adjust with X = 0 (X cannot change the equivalent
    gradient, so the cheapest choice serves), form the equivalent gradient,
    run it through the moment transform, re-project the result onto the
    factor shapes, adjust a second time with the configured X selection,
    apply decomposed weight decay, then update the factors.
    """
    if state.m.shape != layer.shape:
        raise ShapeError(
            f"moment shape {state.m.shape} does not match layer shape {layer.shape}"
        )
    first = adjust(layer, bundle, strategy="zero", policy=policy)
    g_tilde = equivalent_gradient(layer, first.g_a, first.g_b)
    direction, state = adamw_transform(state, g_tilde)

    reprojected = lora_raw_grads(layer, direction)
    second = adjust(layer, reprojected, strategy=x_strategy, policy=policy)

    if not hp.decay_after_update:
        layer = apply_decayed_merge_step(layer, hp.lr, hp.weight_decay)
    layer = replace(
        layer,
        b=layer.b - hp.lr * second.g_b,
        a=layer.a - hp.lr * second.g_a,
    )
    if hp.decay_after_update:
        layer = apply_decayed_merge_step(layer, hp.lr, hp.weight_decay)
    return layer, state


def lora_sgd_step(layer: LoraLayer, bundle: GradBundle, hp: HyperParams) -> LoraLayer:
    """Unadjusted baseline: descend each factor along its raw gradient."""
    return replace(
        layer,
        b=layer.b - hp.lr * bundle.g_b_lora,
        a=layer.a - hp.lr * bundle.g_a_lora,
    )


def lora_adamw_step(
    layer: LoraLayer,
    state_a: AdamWState,
    state_b: AdamWState,
    bundle: GradBundle,
    hp: HyperParams,
) -> tuple[LoraLayer, AdamWState, AdamWState]:
    """Unadjusted baseline: standard AdamW with per-factor moments."""
    dir_a, state_a = adamw_transform(state_a, bundle.g_a_lora)
    dir_b, state_b = adamw_transform(state_b, bundle.g_b_lora)
    decay = 1.0 - hp.lr * hp.weight_decay
    layer = replace(
        layer,
        a=decay * layer.a - hp.lr * dir_a,
        b=decay * layer.b - hp.lr * dir_b,
    )
    return layer, state_a, state_b


def full_ft_adamw_step(
    w: np.ndarray, state: AdamWState, g: np.ndarray, hp: HyperParams
) -> tuple[np.ndarray, AdamWState]:
    """Reference trajectory: AdamW directly on the weight matrix."""
    w = as_matrix(w, "w")
    direction, state = adamw_transform(state, g)
    return (1.0 - hp.lr * hp.weight_decay) * w - hp.lr * direction, state


def baseline_step(kind: str, **kwargs):
    """Dispatch one baseline update by name."""
    if kind == "lora_sgd":
        return lora_sgd_step(**kwargs)
    if kind == "lora_adamw":
        return lora_adamw_step(**kwargs)
    if kind == "full_ft_adamw":
        return full_ft_adamw_step(**kwargs)
    raise ValueError(f"unknown baseline kind {kind!r}, expected one of {BASELINE_KINDS}")
