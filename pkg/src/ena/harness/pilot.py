"""Canned scan-strategy comparison: one row per scan method, one accuracy column per task."""

from __future__ import annotations

import csv
import io

from ..hybrid import HybridConfig
from .config import OptimConfig, RunConfig, TaskConfig
from .tasks import TASK_CHANNELS
from .train import train

# (method, scan kind or None, schedule)
PILOT_ROWS = (
    ("uni", "uni", ("delta", "delta")),
    ("flip", "flip", ("delta", "delta")),
    ("random", "random", ("delta", "delta")),
    ("switch", "switch", ("delta", "delta")),
    ("bi", "bi", ("delta", "delta")),
    ("cross", "cross", ("delta", "delta")),
    ("uni+attn", "uni", ("delta", "sta")),
)
PILOT_TASKS = ("local_pattern", "global_count")
COLUMNS = ("method", "scan", "passes") + PILOT_TASKS


def pilot_config(scan: str, schedule: tuple, task: str, grid=(8, 8), steps: int = 120,
                 seed: int = 0, d_model: int = 16, dtype: str = "float64") -> RunConfig:
    classes = 4 if task == "local_pattern" else 2
    windows = tuple({"window": [4, 4], "tile": [2, 2]} if k == "sta" else None for k in schedule)
    scans = tuple({"kind": scan, "seed": seed} if k == "delta" else None for k in schedule)
    model = HybridConfig(num_layers=len(schedule), schedule=schedule, d_model=d_model, heads=2,
                         grid=grid, num_classes=classes, windows=windows, scans=scans, chunk=16,
                         channels=TASK_CHANNELS[task])
    return RunConfig(model=model, optim=OptimConfig(lr=1e-2, warmup=steps // 5),
                     task=TaskConfig(kind=task, grid=grid, classes=classes, samples=512,
                                     val_samples=256, seed=seed),
                     steps=steps, batch_size=16, seed=seed, dtype=dtype, log_every=max(1, steps))


def run_pilot(steps: int = 120, seed: int = 0, grid=(8, 8), rows=PILOT_ROWS, tasks=PILOT_TASKS) -> dict:
    table = []
    timing = {}
    for method, scan, schedule in rows:
        row = {"method": method, "scan": scan, "passes": 4 if scan == "cross" else 2 if scan == "bi" else 1}
        for task in tasks:
            result = train(pilot_config(scan, schedule, task, grid, steps, seed), write=False)
            row[task] = round(result.val_accuracy, 6)
            timing[f"{method}/{task}"] = result.summary["timing"]["wall_ms"]
        table.append(row)
    return {"rows": table, "timing": timing,
            "settings": {"steps": steps, "seed": seed, "grid": list(grid)}}


def to_csv(rows, tasks=PILOT_TASKS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=("method", "scan", "passes") + tuple(tasks), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()
