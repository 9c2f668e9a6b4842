"""Experiment driver: seeded runs, method comparisons, metrics, checkpoints.

A run is deterministic given its config and seed: task data, adapter
initialization, and batch order each come from an independent stream spawned
from the run seed, so the method under test can never influence the data it
sees. Metrics go to a fixed-schema CSV (one row per step and layer), a JSON
summary carries the config echo and a content hash of the CSV, and the final
state lands in a binary checkpoint that resumes bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import METHODS, RunConfig
from .errors import ConfigError, DescentViolationError, NonFiniteError
from .gradadjust import adjust, equivalent_gradient, loss_decrease_certificate
from .linalg import frob_norm, numerical_rank
from .lora import InitScheme, init_layer, layer_from_state, layer_state
from .model import Batch, Network, backward, backward_weight_grads, forward, forward_with_weights
from .optim import (
    AdamWState,
    full_ft_adamw_step,
    init_adamw_state,
    lora_adamw_step,
    lorapro_adamw_step,
    lorapro_sgd_step,
    lr_at,
)
from .tasks import build_task

__all__ = [
    "CSV_HEADER",
    "LayerMetrics",
    "RunRecord",
    "RunResult",
    "CompareResult",
    "Trainer",
    "run",
    "compare",
]

CSV_HEADER = "step,lr,train_loss,layer,discrepancy,rank_a,rank_b,dl_certificate"
CERTIFICATE_CEILING = 1e-12
THREADS_ENV = "LORAPRO_THREADS"


@dataclass
class LayerMetrics:
    discrepancy: float | None
    rank_a: int | None
    rank_b: int | None
    dl_certificate: float | None


@dataclass
class RunRecord:
    step: int
    lr: float
    train_loss: float
    per_layer: list[LayerMetrics]


@dataclass
class RunResult:
    config: RunConfig
    records: list[RunRecord]
    final_loss: float
    csv_path: Path
    summary_path: Path
    checkpoint_path: Path
    verdicts: dict


@dataclass
class CompareResult:
    labels: list[str]
    results: dict[str, RunResult]
    verdicts: dict
    csv_path: Path
    json_path: Path


def _thread_cap() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"invalid {THREADS_ENV} value {raw!r}") from exc
    return max(1, cap)


def _map_ordered(fn, count: int) -> list:
    workers = min(_thread_cap(), count)
    if workers <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Trainer:
    """Owns the model, optimizer state, and data stream of a single run."""

    def __init__(self, config: RunConfig):
        self.config = config
        root = np.random.SeedSequence(config.seed)
        task_ss, init_ss, data_ss = root.spawn(3)
        self.task = build_task(config.task, config.task_params, np.random.default_rng(task_ss))

        layer_seeds = [
            int(child.generate_state(1, np.uint64)[0])
            for child in init_ss.spawn(len(self.task.base_weights))
        ]
        layers = []
        for w0, seed in zip(self.task.base_weights, layer_seeds):
            m, n = w0.shape
            if config.rank > min(m, n):
                raise ConfigError(
                    f"invalid config key 'rank': {config.rank} exceeds min(m,n)={min(m, n)} "
                    f"for a {m}x{n} layer"
                )
            layers.append(
                init_layer(
                    m,
                    n,
                    config.rank,
                    alpha=config.alpha,
                    mode=config.scaling,
                    scheme=InitScheme(kind=config.init, seed=seed),
                    w0=w0,
                )
            )
        self.network = Network(
            layers=layers, activations=list(self.task.activations), loss_kind=self.task.loss_kind
        )
        self.data_rng = np.random.default_rng(data_ss)
        self.step_count = 0
        self.hp = config.hyperparams()
        self.policy = config.damping_policy()

        method = config.method
        if method == "full_ft":
            self.weights = self.network.effective_weights()
            self.ft_states = [self._fresh_state(w.shape) for w in self.weights]
        elif method == "lora":
            self.states_a = [self._fresh_state(l.a.shape) for l in layers]
            self.states_b = [self._fresh_state(l.b.shape) for l in layers]
        elif method == "lora_pro_adamw":
            self.states = [self._fresh_state(l.shape) for l in layers]
        # lora_pro_sgd keeps no optimizer state

    def _fresh_state(self, shape) -> AdamWState:
        cfg = self.config
        return init_adamw_state(shape, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)

    def _draw_batch(self) -> Batch:
        idx = self.data_rng.integers(0, self.task.n_samples, size=self.config.batch_size)
        return Batch(inputs=self.task.inputs[idx], targets=self.task.targets[idx])

    def step(self) -> RunRecord:
        cfg = self.config
        lr_now = lr_at(self.hp, self.step_count, cfg.steps)
        hp_now = replace(self.hp, lr=lr_now)
        batch = self._draw_batch()

        try:
            if cfg.method == "full_ft":
                loss, metrics = self._step_full_ft(batch, hp_now)
            else:
                loss, metrics = self._step_adapters(batch, hp_now)
        except NonFiniteError as exc:
            raise NonFiniteError(f"aborting at step {self.step_count + 1}: {exc}") from exc

        self.step_count += 1
        return RunRecord(
            step=self.step_count, lr=lr_now, train_loss=loss, per_layer=metrics
        )

    def _step_full_ft(self, batch: Batch, hp_now) -> tuple[float, list[LayerMetrics]]:
        acts, loss_kind = self.network.activations, self.network.loss_kind
        loss, cache = forward_with_weights(self.weights, acts, loss_kind, batch)
        grads = backward_weight_grads(cache, acts, loss_kind)
        for i, g in enumerate(grads):
            self.weights[i], self.ft_states[i] = full_ft_adamw_step(
                self.weights[i], self.ft_states[i], g, hp_now
            )
        metrics = [
            LayerMetrics(discrepancy=0.0, rank_a=None, rank_b=None, dl_certificate=None)
            for _ in grads
        ]
        return loss, metrics

    def _step_adapters(self, batch: Batch, hp_now) -> tuple[float, list[LayerMetrics]]:
        cfg = self.config
        loss, cache = forward(self.network, batch)
        bundles = backward(self.network, cache)
        layers = self.network.layers

        def one_layer(i: int):
            layer, bundle = layers[i], bundles[i]
            if cfg.method == "lora":
                g_tilde = equivalent_gradient(layer, bundle.g_a_lora, bundle.g_b_lora)
                disc = frob_norm(g_tilde - bundle.g_full)
                new_layer, sa, sb = lora_adamw_step(
                    layer, self.states_a[i], self.states_b[i], bundle, hp_now
                )
                return new_layer, (sa, sb), disc, None
            adjusted = adjust(layer, bundle, strategy="zero", policy=self.policy)
            g_tilde = equivalent_gradient(layer, adjusted.g_a, adjusted.g_b)
            disc = frob_norm(g_tilde - bundle.g_full)
            certificate = None
            if adjusted.x_strategy != "passthrough":
                certificate = loss_decrease_certificate(
                    layer, bundle, adjusted, hp_now.lr, policy=self.policy
                )
                if certificate > CERTIFICATE_CEILING:
                    raise DescentViolationError(
                        f"layer {i}: predicted loss change {certificate:.3e} above "
                        f"{CERTIFICATE_CEILING:.0e}"
                    )
            if cfg.method == "lora_pro_sgd":
                new_layer = lorapro_sgd_step(
                    layer, bundle, hp_now, strategy=cfg.x_strategy, policy=self.policy
                )
                return new_layer, None, disc, certificate
            new_layer, state = lorapro_adamw_step(
                layer,
                self.states[i],
                bundle,
                hp_now,
                policy=self.policy,
                x_strategy=cfg.x_strategy,
            )
            return new_layer, state, disc, certificate

        outcomes = _map_ordered(one_layer, len(layers))

        metrics = []
        for i, (new_layer, state, disc, certificate) in enumerate(outcomes):
            layers[i] = new_layer
            if cfg.method == "lora":
                self.states_a[i], self.states_b[i] = state
            elif cfg.method == "lora_pro_adamw":
                self.states[i] = state
            metrics.append(
                LayerMetrics(
                    discrepancy=disc,
                    rank_a=numerical_rank(new_layer.a),
                    rank_b=numerical_rank(new_layer.b),
                    dl_certificate=certificate,
                )
            )
        return loss, metrics

    # --- checkpointing ---------------------------------------------------

    def save(self, path) -> None:
        cfg = self.config
        arrays: dict[str, np.ndarray] = {}
        layer_meta = []
        for i, layer in enumerate(self.network.layers):
            meta_i, arrays_i = layer_state(layer, prefix=f"layer{i}/")
            layer_meta.append(meta_i)
            arrays.update(arrays_i)
        adamw_t: list = []
        if cfg.method == "full_ft":
            for i, (w, st) in enumerate(zip(self.weights, self.ft_states)):
                arrays[f"ft{i}/w"] = w
                arrays[f"ft{i}/m"] = st.m
                arrays[f"ft{i}/v"] = st.v
                adamw_t.append(st.t)
        elif cfg.method == "lora":
            for i, (sa, sb) in enumerate(zip(self.states_a, self.states_b)):
                arrays[f"sta{i}/m"] = sa.m
                arrays[f"sta{i}/v"] = sa.v
                arrays[f"stb{i}/m"] = sb.m
                arrays[f"stb{i}/v"] = sb.v
                adamw_t.append([sa.t, sb.t])
        elif cfg.method == "lora_pro_adamw":
            for i, st in enumerate(self.states):
                arrays[f"st{i}/m"] = st.m
                arrays[f"st{i}/v"] = st.v
                adamw_t.append(st.t)
        meta = {
            "kind": "trainer-state",
            "config": cfg.to_dict(),
            "step_count": self.step_count,
            "layers": layer_meta,
            "adamw_t": adamw_t,
            "data_rng_state": self.data_rng.bit_generator.state,
        }
        save_checkpoint(str(path), meta, arrays)

    @classmethod
    def from_checkpoint(cls, config: RunConfig, path) -> "Trainer":
        meta, arrays = load_checkpoint(str(path))
        if meta.get("config") != config.to_dict():
            raise ConfigError("checkpoint was produced by a different config")
        trainer = cls(config)
        for i, layer_meta in enumerate(meta["layers"]):
            trainer.network.layers[i] = layer_from_state(layer_meta, arrays, prefix=f"layer{i}/")
        adamw_t = meta["adamw_t"]
        if config.method == "full_ft":
            for i in range(len(trainer.weights)):
                trainer.weights[i] = arrays[f"ft{i}/w"]
                trainer.ft_states[i] = replace(
                    trainer.ft_states[i],
                    m=arrays[f"ft{i}/m"],
                    v=arrays[f"ft{i}/v"],
                    t=int(adamw_t[i]),
                )
        elif config.method == "lora":
            for i in range(len(trainer.states_a)):
                trainer.states_a[i] = replace(
                    trainer.states_a[i],
                    m=arrays[f"sta{i}/m"],
                    v=arrays[f"sta{i}/v"],
                    t=int(adamw_t[i][0]),
                )
                trainer.states_b[i] = replace(
                    trainer.states_b[i],
                    m=arrays[f"stb{i}/m"],
                    v=arrays[f"stb{i}/v"],
                    t=int(adamw_t[i][1]),
                )
        elif config.method == "lora_pro_adamw":
            for i in range(len(trainer.states)):
                trainer.states[i] = replace(
                    trainer.states[i],
                    m=arrays[f"st{i}/m"],
                    v=arrays[f"st{i}/v"],
                    t=int(adamw_t[i]),
                )
        trainer.step_count = int(meta["step_count"])
        trainer.data_rng.bit_generator.state = meta["data_rng_state"]
        return trainer


def records_to_csv_lines(records: list[RunRecord]) -> list[str]:
    lines = [CSV_HEADER]
    for rec in records:
        for i, lm in enumerate(rec.per_layer):
            lines.append(
                ",".join(
                    [
                        _fmt(rec.step),
                        _fmt(rec.lr),
                        _fmt(rec.train_loss),
                        _fmt(i),
                        _fmt(lm.discrepancy),
                        _fmt(lm.rank_a),
                        _fmt(lm.rank_b),
                        _fmt(lm.dl_certificate),
                    ]
                )
            )
    return lines


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(config: RunConfig, resume_from=None) -> RunResult:
    """Execute one training run and write metrics CSV, summary JSON, checkpoint."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    trainer = (
        Trainer.from_checkpoint(config, resume_from) if resume_from else Trainer(config)
    )
    if trainer.step_count >= config.steps:
        raise ConfigError(
            f"invalid config key 'steps': checkpoint already at step {trainer.step_count}"
        )

    records = [trainer.step() for _ in range(config.steps - trainer.step_count)]

    csv_path = out_dir / "metrics.csv"
    csv_path.write_text("\n".join(records_to_csv_lines(records)) + "\n", encoding="utf-8")

    checkpoint_path = out_dir / "checkpoint.bin"
    trainer.save(checkpoint_path)

    certs = [
        lm.dl_certificate
        for rec in records
        for lm in rec.per_layer
        if lm.dl_certificate is not None
    ]
    verdicts = {
        "finite_loss": True,
        "dl_certificate_max": max(certs) if certs else None,
        "dl_certificate_nonpositive": (max(certs) <= CERTIFICATE_CEILING) if certs else None,
    }
    final_loss = records[-1].train_loss
    summary = {
        "config": config.to_dict(),
        "final_loss": final_loss,
        "verdicts": verdicts,
        "csv_sha": _sha256(csv_path),
    }
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    return RunResult(
        config=config,
        records=records,
        final_loss=final_loss,
        csv_path=csv_path,
        summary_path=summary_path,
        checkpoint_path=checkpoint_path,
        verdicts=verdicts,
    )


def _mean_layer_discrepancy(record: RunRecord) -> float:
    values = [lm.discrepancy for lm in record.per_layer if lm.discrepancy is not None]
    return float(np.mean(values)) if values else 0.0


def compare(config: RunConfig, methods: list[str]) -> CompareResult:
    """Run several methods from identical initialization and data order.

    Emits an aligned per-step CSV plus JSON verdicts: final losses and their
    ordering, and mean per-layer equivalent-gradient discrepancy over the
    last half of training. When both a plain ``lora`` run and a
    ``lora_pro_*`` run are present, the pairwise verdicts compare them
    directly.
    """
    if len(methods) < 2:
        raise ConfigError(f"compare needs at least 2 methods, got {len(methods)}")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"invalid config key 'method': {m!r} not in {METHODS}")

    labels = []
    for m in methods:
        label = m
        k = 2
        while label in labels:
            label = f"{m}_{k}"
            k += 1
        labels.append(label)

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict[str, RunResult] = {}
    for label, method in zip(labels, methods):
        sub = config.with_overrides(method=method, out_dir=str(out_dir / label))
        results[label] = run(sub)

    steps = config.steps
    header = ["step", "lr"]
    for label in labels:
        header += [f"loss_{label}", f"disc_{label}"]
    lines = [",".join(header)]
    for t in range(steps):
        row = [
            _fmt(results[labels[0]].records[t].step),
            _fmt(results[labels[0]].records[t].lr),
        ]
        for label in labels:
            rec = results[label].records[t]
            row += [_fmt(rec.train_loss), _fmt(_mean_layer_discrepancy(rec))]
        lines.append(",".join(row))
    csv_path = out_dir / "comparison.csv"
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    last_half = range(steps // 2, steps)
    mean_disc = {
        label: float(
            np.mean([_mean_layer_discrepancy(results[label].records[t]) for t in last_half])
        )
        for label in labels
    }
    final_loss = {label: results[label].final_loss for label in labels}
    ordering = sorted(labels, key=lambda lbl: final_loss[lbl])

    pro_label = next((lbl for lbl, m in zip(labels, methods) if m.startswith("lora_pro")), None)
    lora_label = next((lbl for lbl, m in zip(labels, methods) if m == "lora"), None)
    pair_disc = pair_loss = None
    if pro_label is not None and lora_label is not None:
        pair_disc = mean_disc[pro_label] < mean_disc[lora_label]
        pair_loss = final_loss[pro_label] < final_loss[lora_label]

    verdicts = {
        "final_loss": final_loss,
        "final_loss_ordering": ordering,
        "mean_discrepancy_last_half": mean_disc,
        "lora_pro_discrepancy_below_lora": pair_disc,
        "lora_pro_final_loss_below_lora": pair_loss,
    }
    payload = {
        "config": config.to_dict(),
        "methods": {label: m for label, m in zip(labels, methods)},
        "verdicts": verdicts,
        "csv_sha": _sha256(csv_path),
    }
    json_path = out_dir / "comparison.json"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    return CompareResult(
        labels=labels, results=results, verdicts=verdicts, csv_path=csv_path, json_path=json_path
    )
