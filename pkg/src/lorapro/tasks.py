"""Synthetic tasks and dataset loading for the experiment harness.

The flagship task is teacher–student regression: a frozen random two-layer
teacher generates targets, and the student starts from the teacher's weights
contaminated by a low-rank perturbation. The optimal weight change is then
genuinely low-rank-ish, which makes adapter-method differences visible at
desk scale (the perturbation rank is a knob).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = ["TASK_KINDS", "TaskData", "build_task"]

TASK_KINDS = ("teacher_student_regression", "two_cluster_classification", "csv_dataset")


@dataclass
class TaskData:
    inputs: np.ndarray
    targets: np.ndarray
    loss_kind: str
    activations: list[str]
    base_weights: list[np.ndarray]

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]


def _low_rank_perturbation(
    rng: np.random.Generator, shape: tuple[int, int], rank: int, rel_scale: float, ref_norm: float
) -> np.ndarray:
    m, n = shape
    u = rng.normal(size=(m, rank))
    v = rng.normal(size=(rank, n))
    p = u @ v
    norm = np.linalg.norm(p)
    if norm == 0.0 or rel_scale == 0.0:
        return np.zeros(shape)
    return p * (rel_scale * ref_norm / norm)


def _teacher_student(params: dict, rng: np.random.Generator) -> TaskData:
    d_in = int(params["d_in"])
    d_hidden = int(params["d_hidden"])
    d_out = int(params["d_out"])
    n_samples = int(params.get("n_samples", 256))
    noise_sd = float(params.get("noise_sd", 0.01))
    perturb_rank = int(params.get("perturb_rank", 4))
    perturb_scale = float(params.get("perturb_scale", 0.5))

    dims = [(d_in, d_hidden), (d_hidden, d_out)]
    for m, n in dims:
        if perturb_rank > min(m, n):
            raise ConfigError(
                f"invalid config key 'perturb_rank': {perturb_rank} exceeds min layer dim {min(m, n)}"
            )

    teacher = [rng.normal(size=(m, n)) / np.sqrt(m) for m, n in dims]
    inputs = rng.normal(size=(n_samples, d_in))
    hidden = np.tanh(inputs @ teacher[0])
    targets = hidden @ teacher[1]
    if noise_sd > 0.0:
        targets = targets + noise_sd * rng.normal(size=targets.shape)

    base = [
        t + _low_rank_perturbation(rng, t.shape, perturb_rank, perturb_scale, np.linalg.norm(t))
        for t in teacher
    ]
    return TaskData(
        inputs=inputs,
        targets=targets,
        loss_kind="mse",
        activations=["tanh", "identity"],
        base_weights=base,
    )


def _two_cluster(params: dict, rng: np.random.Generator) -> TaskData:
    d = int(params["d"])
    k = int(params.get("k", 2))
    n_samples = int(params.get("n_samples", 256))
    separation = float(params.get("separation", 3.0))
    if k < 2:
        raise ConfigError(f"invalid config key 'k': need at least 2 classes, got {k}")

    means = rng.normal(size=(k, d))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    labels = rng.integers(0, k, size=n_samples)
    inputs = means[labels] + rng.normal(size=(n_samples, d))
    base = [rng.normal(size=(d, k)) * (0.01 / np.sqrt(d))]
    return TaskData(
        inputs=inputs,
        targets=labels.astype(np.int64),
        loss_kind="softmax_cross_entropy",
        activations=["identity"],
        base_weights=base,
    )


def _csv_dataset(params: dict, rng: np.random.Generator) -> TaskData:
    path = str(params["path"])
    target_column = str(params["target_column"])
    loss_kind = str(params.get("loss", "mse"))

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or target_column not in reader.fieldnames:
            raise ConfigError(
                f"invalid config key 'target_column': {target_column!r} not in {path}"
            )
        feature_names = [c for c in reader.fieldnames if c != target_column]
        rows = list(reader)
    if not rows:
        raise ConfigError(f"csv dataset {path} is empty")

    try:
        features = np.array(
            [[float(row[c]) for c in feature_names] for row in rows], dtype=np.float64
        )
        raw_targets = np.array([float(row[target_column]) for row in rows], dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"csv dataset {path} has non-numeric entries: {exc}") from exc

    d = features.shape[1]
    if loss_kind == "softmax_cross_entropy":
        classes = np.unique(raw_targets)
        labels = np.searchsorted(classes, raw_targets).astype(np.int64)
        base = [rng.normal(size=(d, len(classes))) * (0.01 / np.sqrt(d))]
        return TaskData(features, labels, loss_kind, ["identity"], base)
    base = [rng.normal(size=(d, 1)) * (0.01 / np.sqrt(d))]
    return TaskData(features, raw_targets.reshape(-1, 1), "mse", ["identity"], base)


def build_task(kind: str, params: dict, rng: np.random.Generator) -> TaskData:
    if kind == "teacher_student_regression":
        return _teacher_student(params, rng)
    if kind == "two_cluster_classification":
        return _two_cluster(params, rng)
    if kind == "csv_dataset":
        return _csv_dataset(params, rng)
    raise ConfigError(f"invalid config key 'task': unknown kind {kind!r}")
