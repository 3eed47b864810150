"""Toy training loop: AdamW with linear warmup and cosine decay."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import numerics as nx
from ..errors import ConfigError
from ..hybrid import ModelParams, init_params, model_forward, save_checkpoint
from ..numerics import NumericError
from .config import RunConfig
from .tasks import SynthDataset, synth_task

TIMING_FIELDS = ("wall_ms", "timing")


class TrainingDiverged(NumericError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass
class MetricsRecord:
    step: int
    loss: float
    accuracy: float
    lr: float
    wall_ms: float
    peak_bytes: int
    visited_blocks: dict = field(default_factory=dict)
    val_accuracy: float | None = None

    def row(self) -> dict:
        d = asdict(self)
        d["visited_blocks"] = ";".join(f"{k}:{v}" for k, v in sorted(self.visited_blocks.items()))
        d["val_accuracy"] = "" if self.val_accuracy is None else self.val_accuracy
        return d


@dataclass
class TrainResult:
    params: ModelParams
    records: list
    summary: dict
    paths: dict = field(default_factory=dict)

    @property
    def val_accuracy(self) -> float:
        return self.summary["val_accuracy"]


def lr_at(step: int, total: int, optim) -> float:
    """Learning rate for 0-based ``step``: linear warmup, then cosine decay (or constant)."""
    if optim.warmup and step < optim.warmup:
        return optim.lr * (step + 1) / optim.warmup
    if not optim.cosine:
        return optim.lr
    span = max(1, total - optim.warmup)
    progress = min(1.0, (step - optim.warmup) / span)
    floor = optim.min_lr_ratio
    return optim.lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress)))


class AdamW:
    """Adam with decoupled weight decay on matrices (ndim >= 2) only."""

    def __init__(self, params: ModelParams, optim):
        self.optim = optim
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, params: ModelParams, grads: dict, lr: float) -> None:
        o = self.optim
        self.t += 1
        c1 = 1 - o.beta1 ** self.t
        c2 = 1 - o.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= o.beta1
            m += (1 - o.beta1) * g
            v *= o.beta2
            v += (1 - o.beta2) * g * g
            if p.data.ndim >= 2 and o.weight_decay:
                p.data *= 1 - lr * o.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + o.eps)).astype(p.dtype)


def _clip(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def make_data(config: RunConfig) -> tuple[SynthDataset, SynthDataset]:
    t = config.task
    data = synth_task(t.kind, t.grid, seed=t.seed, samples=t.samples + t.val_samples,
                      classes=t.classes, **t.options())
    return data.split(t.samples)


def evaluate(params: ModelParams, data: SynthDataset, dtype, batch_size: int = 128) -> tuple[float, float]:
    correct = 0
    loss = 0.0
    for s in range(0, len(data), batch_size):
        x = data.images[s:s + batch_size].astype(dtype)
        y = data.labels[s:s + batch_size]
        logits = model_forward(x, params)
        loss += float(nx.cross_entropy(logits, y).item()) * len(y)
        correct += int((logits.numpy().argmax(axis=-1) == y).sum())
    return correct / len(data), loss / len(data)


def _check_data(config: RunConfig, data) -> None:
    m = config.model
    want = (m.channels,) + tuple(m.grid)
    for part in data:
        if part.images.shape[1:] != want:
            raise ConfigError(f"data images have shape {part.images.shape[1:]}, model expects {want}")
        if len(part) and (part.labels.min() < 0 or part.labels.max() >= m.num_classes):
            raise ConfigError(f"labels must lie in [0, {m.num_classes})")


def train(config: RunConfig, output_dir: str | None = None, write: bool = True,
          data: tuple | None = None) -> TrainResult:
    """Run one training job; writes ``metrics.csv``, ``summary.json`` and a checkpoint when ``write``."""
    config.validate(with_task=data is None)
    if data is not None:
        _check_data(config, data)
    dtype = config.np_dtype
    with nx.precision(dtype):
        train_set, val_set = data if data is not None else make_data(config)
        params = init_params(config.model, config.seed, dtype=dtype)
        for p in params.values():
            p.requires_grad = True
        opt = AdamW(params, config.optim)
        rng = np.random.default_rng([config.seed, 1])
        order = rng.permutation(len(train_set))
        cursor = 0
        records = []
        start = time.perf_counter()
        stop_reason = "steps"
        limit = config.steps if config.max_steps is None else min(config.steps, config.max_steps)
        with nx.track_memory() as mem:
            for step in range(limit):
                if cursor + config.batch_size > len(order):
                    order = rng.permutation(len(train_set))
                    cursor = 0
                idx = order[cursor:cursor + config.batch_size]
                cursor += config.batch_size
                x = train_set.images[idx].astype(dtype)
                y = train_set.labels[idx]
                stats: dict = {}
                try:
                    with nx.GradTape() as tape:
                        logits = model_forward(x, params, step=step, stats=stats)
                        loss = nx.cross_entropy(logits, y)
                    grads = nx.backward(loss, tape)
                except NumericError as exc:
                    raise TrainingDiverged(step, str(exc)) from exc
                named = {k: grads[p] for k, p in params.items()}
                gnorm = _clip(named, config.optim.grad_clip)
                if not math.isfinite(gnorm):
                    raise TrainingDiverged(step, "non-finite gradient norm")
                lr = lr_at(step, config.steps, config.optim)
                opt.step(params, named, lr)
                done = step + 1
                probe = bool(config.eval_every) and done % config.eval_every == 0
                if done % config.log_every == 0 or done == limit or probe:
                    acc = float((logits.numpy().argmax(axis=-1) == y).mean())
                    val = evaluate(params, val_set, dtype)[0] if probe else None
                    records.append(MetricsRecord(
                        done, float(loss.item()), acc, lr,
                        (time.perf_counter() - start) * 1e3, mem.peak_bytes,
                        {str(k): v.visited_blocks for k, v in stats.items()}, val))
                    target = config.target_accuracy
                    if val is not None and target is not None and val >= target:
                        stop_reason = "target_accuracy"
                        break
            else:
                done = limit
                if limit < config.steps:
                    stop_reason = "max_steps"
        for p in params.values():
            p.requires_grad = False
            p.grad = None
        val_acc, val_loss = evaluate(params, val_set, dtype)
    elapsed = (time.perf_counter() - start) * 1e3
    summary = {
        "name": config.name,
        "steps": done,
        "stop_reason": stop_reason,
        "dtype": config.dtype,
        "val_accuracy": val_acc,
        "val_loss": val_loss,
        "num_parameters": params.num_parameters(),
        "dataset_hash": train_set.content_hash(),
        "config": config.to_dict(),
        "timing": {"wall_ms": elapsed},
    }
    result = TrainResult(params, records, summary)
    if write:
        out = output_dir or config.output_dir
        if out:
            result.paths = write_outputs(result, out)
    return result


def write_outputs(result: TrainResult, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    metrics = os.path.join(out_dir, "metrics.csv")
    with open(metrics, "w", newline="") as fh:
        names = list(MetricsRecord.__dataclass_fields__)
        writer = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for r in result.records:
            writer.writerow(r.row())
    summary = os.path.join(out_dir, "summary.json")
    with open(summary, "w") as fh:
        json.dump(result.summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    manifest, payload = save_checkpoint(os.path.join(out_dir, "checkpoint"), result.params,
                                        extra={"val_accuracy": result.summary["val_accuracy"]})
    return {"metrics": metrics, "summary": summary, "manifest": manifest, "payload": payload}
