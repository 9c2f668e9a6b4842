"""Low-rank adapter training with closed-form gradient adjustment.

The package provides a small dense linear-algebra kernel, a Sylvester solver,
adapter layers, the gradient adjustment itself with its loss-decrease
certificate, adjusted and baseline optimizer loops, brute-force oracles that
certify the closed forms, and a seeded experiment harness with a CLI.
"""

from .errors import (
    ConfigError,
    DescentViolationError,
    EigenDecompositionError,
    FactorizationError,
    LoraProError,
    NonFiniteError,
    RankDeficiencyError,
    ShapeError,
    SpectrumError,
    StaleCacheError,
)
from .gradadjust import (
    AdjustedGrads,
    DampingPolicy,
    GradBundle,
    adjust,
    choose_x,
    equivalent_gradient,
    lora_raw_grads,
    loss_decrease_certificate,
)
from .lora import (
    InitScheme,
    LoraLayer,
    apply_decayed_merge_step,
    effective_weight,
    init_layer,
)
from .model import Batch, Network, backward, forward
from .optim import (
    AdamWState,
    HyperParams,
    baseline_step,
    init_adamw_state,
    lorapro_adamw_step,
    lorapro_sgd_step,
    lr_at,
)
from .sylvester import SylvesterProblem, solve_sylvester

__version__ = "0.1.0"

__all__ = [
    "AdamWState",
    "AdjustedGrads",
    "Batch",
    "ConfigError",
    "DampingPolicy",
    "DescentViolationError",
    "EigenDecompositionError",
    "FactorizationError",
    "GradBundle",
    "HyperParams",
    "InitScheme",
    "LoraLayer",
    "LoraProError",
    "Network",
    "NonFiniteError",
    "RankDeficiencyError",
    "ShapeError",
    "SpectrumError",
    "StaleCacheError",
    "SylvesterProblem",
    "adjust",
    "apply_decayed_merge_step",
    "backward",
    "baseline_step",
    "choose_x",
    "effective_weight",
    "equivalent_gradient",
    "forward",
    "init_adamw_state",
    "init_layer",
    "lora_raw_grads",
    "lorapro_adamw_step",
    "lorapro_sgd_step",
    "loss_decrease_certificate",
    "lr_at",
    "solve_sylvester",
]
