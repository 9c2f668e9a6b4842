"""Run configuration: a flat ``key = value`` file with ``[section]`` headers.

The grammar is deliberately plain (full-line ``#`` comments, no nesting, no
interpolation) so any tool can parse or emit it. Every key is validated
against a schema; unknown sections or keys are rejected by name.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace

from .errors import ConfigError
from .gradadjust import DampingPolicy, X_STRATEGIES
from .lora import INIT_KINDS, SCALING_MODES
from .optim import SCHEDULES, HyperParams
from .tasks import TASK_KINDS

__all__ = ["METHODS", "RunConfig", "parse_config_file", "parse_config_text", "config_from_dict"]

METHODS = ("lora", "lora_pro_sgd", "lora_pro_adamw", "full_ft")


def _bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


_RUN_KEYS = {
    "task": str,
    "method": str,
    "steps": int,
    "batch_size": int,
    "seed": int,
    "out_dir": str,
}
_ADAPTER_KEYS = {"rank": int, "alpha": float, "scaling": str, "init": str}
_OPTIMIZER_KEYS = {
    "lr": float,
    "weight_decay": float,
    "beta1": float,
    "beta2": float,
    "epsilon": float,
    "schedule": str,
    "warmup_ratio": float,
    "decay_after_update": _bool,
}
_LORAPRO_KEYS = {"x_strategy": str, "damping": float, "fallback": str}
_TASK_KEYS = {
    "teacher_student_regression": {
        "d_in": int,
        "d_hidden": int,
        "d_out": int,
        "n_samples": int,
        "noise_sd": float,
        "perturb_rank": int,
        "perturb_scale": float,
    },
    "two_cluster_classification": {"d": int, "k": int, "n_samples": int, "separation": float},
    "csv_dataset": {"path": str, "target_column": str, "loss": str},
}
_SECTIONS = {
    "run": _RUN_KEYS,
    "task": None,  # keys depend on the task kind
    "adapter": _ADAPTER_KEYS,
    "optimizer": _OPTIMIZER_KEYS,
    "lorapro": _LORAPRO_KEYS,
}


@dataclass
class RunConfig:
    """Everything one training run needs; defaults follow the package conventions."""

    task: str
    method: str = "lora_pro_adamw"
    steps: int = 100
    batch_size: int = 32
    seed: int = 0
    out_dir: str = "runs/run"
    task_params: dict = field(default_factory=dict)
    rank: int = 8
    alpha: float = 16.0
    scaling: str = "rslora"
    init: str = "standard"
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    schedule: str = "cosine_with_warmup"
    warmup_ratio: float = 0.03
    decay_after_update: bool = False
    x_strategy: str = "sylvester"
    damping: float = 1e-8
    fallback: str = "damp"

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise ConfigError(f"invalid config key 'task': unknown kind {self.task!r}")
        if self.method not in METHODS:
            raise ConfigError(
                f"invalid config key 'method': {self.method!r} not in {METHODS}"
            )
        if self.steps < 1:
            raise ConfigError(f"invalid config key 'steps': must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(
                f"invalid config key 'batch_size': must be >= 1, got {self.batch_size}"
            )
        if self.rank < 1:
            raise ConfigError(f"invalid config key 'rank': must be >= 1, got {self.rank}")
        if self.scaling not in SCALING_MODES:
            raise ConfigError(f"invalid config key 'scaling': {self.scaling!r}")
        if self.init not in INIT_KINDS:
            raise ConfigError(f"invalid config key 'init': {self.init!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"invalid config key 'schedule': {self.schedule!r}")
        if self.x_strategy not in X_STRATEGIES:
            raise ConfigError(f"invalid config key 'x_strategy': {self.x_strategy!r}")
        if self.fallback not in ("damp", "passthrough"):
            raise ConfigError(f"invalid config key 'fallback': {self.fallback!r}")
        allowed = _TASK_KEYS[self.task]
        for key in self.task_params:
            if key not in allowed:
                raise ConfigError(f"invalid config key '{key}' in [task] for {self.task}")
        try:
            self.hyperparams()
        except ValueError as exc:
            raise ConfigError(f"invalid optimizer settings: {exc}") from exc

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            lr=self.lr,
            weight_decay=self.weight_decay,
            schedule=self.schedule,
            warmup_ratio=self.warmup_ratio,
            decay_after_update=self.decay_after_update,
        )

    def damping_policy(self) -> DampingPolicy:
        return DampingPolicy(rel_epsilon=self.damping, fallback=self.fallback)

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        return {
            "run": {
                "task": self.task,
                "method": self.method,
                "steps": self.steps,
                "batch_size": self.batch_size,
                "seed": self.seed,
                "out_dir": self.out_dir,
            },
            "task": dict(self.task_params),
            "adapter": {
                "rank": self.rank,
                "alpha": self.alpha,
                "scaling": self.scaling,
                "init": self.init,
            },
            "optimizer": {
                "lr": self.lr,
                "weight_decay": self.weight_decay,
                "beta1": self.beta1,
                "beta2": self.beta2,
                "epsilon": self.epsilon,
                "schedule": self.schedule,
                "warmup_ratio": self.warmup_ratio,
                "decay_after_update": self.decay_after_update,
            },
            "lorapro": {
                "x_strategy": self.x_strategy,
                "damping": self.damping,
                "fallback": self.fallback,
            },
        }


def _convert(section: str, key: str, raw: str, caster) -> object:
    try:
        return caster(raw)
    except ValueError as exc:
        raise ConfigError(f"invalid config key '{key}' in [{section}]: {exc}") from exc


def config_from_dict(sections: dict) -> RunConfig:
    """Build a RunConfig from already-typed section dictionaries."""
    for section in sections:
        if section not in _SECTIONS:
            raise ConfigError(f"invalid config section '{section}'")
    for section in ("run", "adapter", "optimizer", "lorapro"):
        schema = _SECTIONS[section]
        for key in sections.get(section, {}):
            if key not in schema:
                raise ConfigError(f"invalid config key '{key}' in [{section}]")
    run = dict(sections.get("run", {}))
    if "task" not in run:
        raise ConfigError("invalid config: missing required key 'task' in [run]")
    kwargs = dict(run)
    kwargs["task_params"] = dict(sections.get("task", {}))
    for section in ("adapter", "optimizer", "lorapro"):
        kwargs.update(sections.get(section, {}))
    return RunConfig(**kwargs)


def parse_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep keys case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"could not parse config: {exc}") from exc

    sections: dict[str, dict] = {}
    task_kind = parser.get("run", "task", fallback=None)
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"invalid config section '{section}'")
        schema = _SECTIONS[section]
        if schema is None:
            if task_kind is None:
                raise ConfigError("invalid config: [task] present but 'task' missing in [run]")
            if task_kind not in _TASK_KEYS:
                raise ConfigError(f"invalid config key 'task': unknown kind {task_kind!r}")
            schema = _TASK_KEYS[task_kind]
        parsed = {}
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"invalid config key '{key}' in [{section}]")
            parsed[key] = _convert(section, key, raw, schema[key])
        sections[section] = parsed
    return config_from_dict(sections)


def parse_config_file(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())
