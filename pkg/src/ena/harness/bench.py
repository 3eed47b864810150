"""Scaling benchmark: forward time, train-step time, attention FLOPs and tensor memory vs. length.

Absolute milliseconds are machine dependent; the comparable outputs are FLOP
ratios and the fitted log-log growth exponent of time against length.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time

import numpy as np

from .. import numerics as nx
from ..attention import attention_flops, full_attention_flops
from ..errors import ConfigError
from ..hybrid import ATTENTION_LAYER_KINDS, HybridConfig, init_params, layer_layout, model_forward

VARIANTS = ("full", "ena_sta", "pure_delta")
COLUMNS = ("variant", "L", "ms_fwd", "ms_train_step", "flops", "flop_ratio", "mem")
TIMING_COLUMNS = ("ms_fwd", "ms_train_step")


def sta_geometry(side: int) -> dict:
    """Tile ``side/4 x side/8`` and window ``3/4 x 3/8`` of the grid: 28.125% of keys per query."""
    if side % 8:
        raise ConfigError(f"bench grids need a side divisible by 8, got {side}")
    return {"tile": [side // 4, side // 8], "window": [3 * side // 4, 3 * side // 8]}


def variant_config(variant: str, length: int, layers: int = 2, d_model: int = 32, heads: int = 1,
                   chunk: int = 64) -> HybridConfig:
    side = math.isqrt(length)
    if side * side != length:
        raise ConfigError(f"length {length} is not a square grid")
    common = dict(d_model=d_model, heads=heads, grid=(side, side), num_classes=2, chunk=chunk)
    geom = sta_geometry(side)
    if variant == "full":
        # same kernel block as the tiled variant; one-token blocks make the executor gather
        # a private copy of every key for every query
        windows = ({"kernel_block": math.prod(geom["tile"])},) * layers
        return HybridConfig(num_layers=layers, schedule=("full_attn",) * layers, windows=windows,
                            **common).validate()
    if variant == "ena_sta":
        return HybridConfig.ena(layers, window=geom["window"], tile=geom["tile"], **common).validate()
    if variant == "pure_delta":
        return HybridConfig(num_layers=layers, schedule=("delta",) * layers, **common).validate()
    raise ConfigError(f"unknown variant {variant!r}; expected {VARIANTS}")


def model_attention_flops(config: HybridConfig) -> int:
    d_head = config.d_model // config.heads
    total = 0
    for i, kind in enumerate(config.schedule):
        if kind in ATTENTION_LAYER_KINDS:
            total += config.heads * attention_flops(layer_layout(config, i).block_mask, d_head)
    return total


def _median_ms(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return statistics.median(times)


def bench_one(variant: str, length: int, reps: int = 5, train_reps: int = 3, seed: int = 0,
              layers: int = 2, d_model: int = 32, heads: int = 1) -> dict:
    config = variant_config(variant, length, layers, d_model, heads)
    with nx.precision(np.float32):
        params = init_params(config, seed, dtype=np.float32)
        x = np.random.default_rng(seed).standard_normal((1, 1) + config.grid).astype(np.float32)
        y = np.zeros(1, dtype=np.int64)
        model_forward(x, params)  # warm caches (layouts)
        with nx.track_memory() as mem:
            ms_fwd = _median_ms(lambda: model_forward(x, params), reps)

        def step():
            for p in params.values():
                p.requires_grad = True
            with nx.GradTape() as tape:
                loss = nx.cross_entropy(model_forward(x, params), y)
            nx.backward(loss, tape)
            for p in params.values():
                p.requires_grad = False
        ms_train = _median_ms(step, train_reps) if train_reps else float("nan")
    flops = model_attention_flops(config)
    n_attn = sum(k in ATTENTION_LAYER_KINDS for k in config.schedule)
    dense = n_attn * heads * full_attention_flops(length, d_model // heads)
    return {"variant": variant, "L": length, "ms_fwd": round(ms_fwd, 3), "ms_train_step": round(ms_train, 3),
            "flops": flops, "flop_ratio": (flops / dense) if dense else 0.0, "mem": mem.peak_bytes}


def growth_exponent(lengths, times) -> float:
    """Least-squares slope of log(time) against log(L)."""
    slope, _ = np.polyfit(np.log(np.asarray(lengths, dtype=float)), np.log(np.asarray(times, dtype=float)), 1)
    return float(slope)


def run_bench(lengths=(256, 1024, 4096), variants=VARIANTS, reps: int = 5, train_reps: int = 3,
              seed: int = 0, layers: int = 2, d_model: int = 32, heads: int = 1) -> dict:
    if reps < 5:
        raise ConfigError("forward timings need at least 5 repetitions")
    rows = [bench_one(v, L, reps, train_reps, seed, layers, d_model, heads) for v in variants for L in lengths]
    exponents = {}
    for v in variants:
        mine = [r for r in rows if r["variant"] == v]
        exponents[v] = growth_exponent([r["L"] for r in mine], [r["ms_fwd"] for r in mine]) if len(mine) > 1 else None
    return {"rows": rows, "exponents": exponents,
            "settings": {"lengths": list(lengths), "variants": list(variants), "reps": reps,
                         "train_reps": train_reps, "seed": seed, "layers": layers, "d_model": d_model,
                         "heads": heads, "dtype": "float32"}}


def to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()


def stable_view(result: dict) -> dict:
    """The part of a bench result that must be identical across runs."""
    rows = [{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in result["rows"]]
    return {"rows": rows, "settings": result["settings"]}
