"""Hybrid-versus-pure-recurrence comparison on ``local_pattern``.

Per seed the hybrid trains until its periodic validation accuracy reaches the
target (or the step budget runs out); the pure delta-rule stack then trains on
the same schedule for the same number of steps, so both arms see identical
data and learning rates.
"""

from __future__ import annotations

import time

from ..hybrid import HybridConfig
from .config import OptimConfig, RunConfig, TaskConfig
from .tasks import TASK_CHANNELS
from .train import train

ARMS = ("ena", "pure_delta")


def benefit_config(arm: str, seed: int, steps: int = 2000, grid=(16, 16), d_model: int = 16,
                   layers: int = 4, window=(6, 6), tile=(2, 2), target: float = 0.9,
                   dtype: str = "float32") -> RunConfig:
    common = dict(d_model=d_model, heads=2, grid=tuple(grid), num_classes=4, chunk=32,
                  channels=TASK_CHANNELS["local_pattern"])
    if arm == "ena":
        model = HybridConfig.ena(layers, window=tuple(window), tile=tuple(tile), **common)
    elif arm == "pure_delta":
        model = HybridConfig(num_layers=layers, schedule=("delta",) * layers, **common)
    else:
        raise ValueError(f"unknown arm {arm!r}; expected {ARMS}")
    return RunConfig(model=model, optim=OptimConfig(lr=5e-3, warmup=50),
                     task=TaskConfig(kind="local_pattern", grid=tuple(grid), classes=4, samples=4096,
                                     val_samples=256, seed=seed),
                     steps=steps, batch_size=16, seed=seed, dtype=dtype, log_every=50,
                     eval_every=50 if arm == "ena" else 0,
                     target_accuracy=target if arm == "ena" else None, name=f"{arm}_s{seed}")


def run_benefit(seeds=(0, 1, 2), steps: int = 2000, target: float = 0.9, **kw) -> dict:
    rows = []
    start = time.perf_counter()
    for seed in seeds:
        ena = train(benefit_config("ena", seed, steps, target=target, **kw), write=False)
        used = ena.summary["steps"]
        pure_cfg = benefit_config("pure_delta", seed, steps, target=target, **kw)
        pure_cfg.max_steps = used
        pure = train(pure_cfg, write=False)
        rows.append({"seed": seed, "steps": used, "ena": ena.val_accuracy, "pure_delta": pure.val_accuracy,
                     "reached_target": ena.val_accuracy >= target,
                     "ena_wins": ena.val_accuracy > pure.val_accuracy})
    return {"rows": rows, "target": target, "wall_s": time.perf_counter() - start,
            "passed": all(r["reached_target"] and r["ena_wins"] for r in rows)}
