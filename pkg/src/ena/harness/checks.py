"""Named invariant suites with a machine-readable report."""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import attention as A
from .. import numerics as nx
from .. import recurrence as R
from .. import scan as S
from ..errors import InvariantViolation
from ..hybrid import HybridConfig, init_params, load_checkpoint, model_forward, save_checkpoint

FAULTS = ("census-flip",)
REPORT_FORMAT = "ena.check-report/1"


@dataclass
class Context:
    inject: frozenset = frozenset()
    seed: int = 0


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise InvariantViolation(message)


# ---------------------------------------------------------------------------
# scan


def scan_bijectivity(ctx: Context) -> str:
    rng = np.random.default_rng(ctx.seed)
    n_checked = 0
    for _ in range(10):
        grid = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        n = grid[0] * grid[1]
        for kind in S.SCAN_KINDS:
            if kind == "learnable":
                continue
            plan = S.ScanPlan(kind, grid, seed=int(rng.integers(1 << 16)), head_groups=2)
            groups = 2 if kind in S.MULTI_HEAD else 1
            for p_i in range(plan.num_passes):
                for g in range(groups):
                    p = S.build_permutation(plan, p_i, group=g)
                    _require(S.compose(p, S.invert(p)).is_identity(), f"{kind} on {grid} does not invert")
                    _require(np.array_equal(np.sort(p.indices), np.arange(n)), f"{kind} on {grid} is not bijective")
                    n_checked += 1
    return f"{n_checked} permutations"


def scan_roundtrip(ctx: Context) -> str:
    rng = np.random.default_rng(ctx.seed + 1)
    count = 0
    for _ in range(10):
        grid = (int(rng.integers(2, 7)), int(rng.integers(2, 7)))
        x = rng.standard_normal((2, grid[0] * grid[1], 3))
        for kind in S.SCAN_KINDS:
            if kind == "learnable":
                continue
            plan = S.ScanPlan(kind, grid, seed=3)
            y = S.apply_scan(plan, x, lambda t: t).numpy()
            back = S.invert(S.net_permutation(plan, x.shape[1])).apply(y, axis=-2)
            _require(np.array_equal(back, x), f"{kind} identity round-trip differs on {grid}")
            count += 1
    return f"{count} round-trips exact"


# ---------------------------------------------------------------------------
# delta rule


def delta_equivalence(ctx: Context) -> str:
    rng = np.random.default_rng(ctx.seed + 2)
    worst = 0.0
    for _ in range(5):
        length = int(rng.integers(1, 33))
        q = rng.standard_normal((2, length, 4))
        k = rng.standard_normal((2, length, 4))
        k /= np.linalg.norm(k, axis=-1, keepdims=True)
        v = rng.standard_normal((2, length, 3))
        beta = rng.uniform(0, 1, (2, length))
        o_ref, s_ref = R.delta_sequential(q, k, v, beta)
        for chunk in (1, 2, 4, 8, length):
            o, s = R.delta_chunked(q, k, v, beta, chunk=chunk)
            worst = max(worst, float(np.abs(o.numpy() - o_ref.numpy()).max()),
                        float(np.abs(s.numpy() - s_ref.numpy()).max()))
    _require(worst < 1e-10, f"chunked delta rule deviates by {worst:.3e}")
    return f"max deviation {worst:.1e}"


# ---------------------------------------------------------------------------
# masks


def mask_sparsity_golden(ctx: Context) -> str:
    for grid, window in (((32, 32), (24, 12)), ((64, 64), (48, 24))):
        s = A.sparsity("sta_nd", A.WindowSpec(grid, window))
        _require(s == 0.71875, f"sparsity of {window} on {grid} is {s}, expected 0.71875")
    return "0.71875 twice"


def _sta_fixture():
    spec = A.WindowSpec((8, 8), (4, 4), (2, 2))
    mask = A.build_dense_mask("sta_nd", spec)
    return spec, mask, A.block_census(mask, spec.kernel_block)


def mask_census_reconstruction(ctx: Context) -> str:
    spec, mask, bm = _sta_fixture()
    if "census-flip" in ctx.inject:
        bm.census[0, -1] = A.FULL if bm.census[0, -1] == A.EMPTY else A.EMPTY
    _require(np.array_equal(bm.to_dense(), mask), "census does not reconstruct the dense STA mask")
    _require(bm.counts()["mixed"] == 0, "STA fixture has mixed blocks")
    return f"{bm.census.size} blocks"


def mask_sta_no_mixed(ctx: Context) -> str:
    specs = [((16,), (8,), (4,)), ((8, 8), (6, 4), (2, 2)), ((8, 4, 4), (4, 2, 4), (2, 2, 2)),
             ((16, 16), (12, 6), (4, 2))]
    for grid, window, tile in specs:
        bm = A.build_block_mask("sta_nd", A.WindowSpec(grid, window, tile))
        _require(bm.counts()["mixed"] == 0, f"STA {grid}/{window}/{tile} has mixed blocks")
    return f"{len(specs)} specs"


def mask_coverage(ctx: Context) -> str:
    for kind, spec in (("sta_nd", A.WindowSpec((8, 8), (4, 6), (2, 2))),
                       ("swa_nd", A.WindowSpec((7, 5), (3, 4))),
                       ("swa_1d", A.WindowSpec((11,), (4,)))):
        per_query = A.build_dense_mask(kind, spec).sum(axis=1)
        _require(np.all(per_query == math.prod(spec.window)), f"{kind} rows do not all see prod(window) keys")
    return "3 kinds"


def mask_executor_oracle(ctx: Context) -> str:
    rng = np.random.default_rng(ctx.seed + 3)
    worst = 0.0
    for kind, spec in (("sta_nd", A.WindowSpec((8, 8), (4, 4), (2, 2))),
                       ("swa_nd", A.WindowSpec((6, 6), (3, 3), kernel_block=4)),
                       ("block_1d", A.WindowSpec((12,), (4,), kernel_block=5))):
        mask = A.build_dense_mask(kind, spec)
        bm = A.block_census(mask, spec.kernel_block)
        q, k, v = (rng.standard_normal((spec.length, 4)) for _ in range(3))
        a = A.block_sparse_attention(q, k, v, bm).numpy()
        b = A.masked_attention_reference(q, k, v, mask).numpy()
        worst = max(worst, float(np.abs(a - b).max()))
    _require(worst < 1e-10, f"block-sparse executor deviates by {worst:.3e}")
    return f"max deviation {worst:.1e}"


# ---------------------------------------------------------------------------
# gradients


def grad_primitives(ctx: Context) -> str:
    rng = np.random.default_rng(ctx.seed + 4)
    unit = lambda a: a / np.linalg.norm(a)  # noqa: E731
    x = unit(rng.standard_normal((3, 4)))
    w = unit(rng.standard_normal((4, 5)))
    gain, bias = unit(rng.standard_normal(4)), unit(rng.standard_normal(4))
    cases = {
        "matmul_gelu": lambda a, b: (nx.gelu(a @ b) ** 2).sum(),
        "layer_norm": lambda a, g, b: (nx.layer_norm(a, g, b) * np.arange(4.0)).sum(),
        "softmax": lambda a: (nx.softmax(a) * np.arange(4.0)).sum(),
        "silu_tanh": lambda a: (nx.silu(a) * nx.tanh(a)).sum(),
    }
    inputs = {"matmul_gelu": [x, w], "layer_norm": [x, gain, bias], "softmax": [x], "silu_tanh": [x]}
    worst = 0.0
    for name, f in cases.items():
        err = nx.finite_diff_check(f, inputs[name])
        _require(err < 1e-6, f"{name} gradient relative error {err:.2e}")
        worst = max(worst, err)
    return f"max relative error {worst:.1e}"


def grad_delta(ctx: Context) -> str:
    rng = np.random.default_rng(ctx.seed + 5)
    q, k, v = (rng.standard_normal((1, 6, 3)) for _ in range(3))
    beta = rng.uniform(0.2, 0.8, (1, 6))

    def f(q, k, v, b):
        o, _ = R.delta_chunked(q, nx.l2_normalize(k), v, b, chunk=4)
        return (o * o).sum()
    err = nx.finite_diff_check(f, [q, k, v, beta])
    _require(err < 1e-6, f"delta rule gradient relative error {err:.2e}")
    return f"max relative error {err:.1e}"


# ---------------------------------------------------------------------------
# model


def _tiny_config(**kw) -> HybridConfig:
    base = dict(d_model=8, heads=2, grid=(4, 4), num_classes=3)
    base.update(kw)
    return base


def hybrid_degeneracy(ctx: Context) -> str:
    base = _tiny_config()
    sta = HybridConfig.ena(2, window=(4, 4), tile=(2, 2), **base)
    full = HybridConfig.ena(2, attention="full_attn", **base)
    p_sta = init_params(sta, 7)
    p_full = init_params(full, 7)
    x = np.random.default_rng(ctx.seed + 6).standard_normal((2, 1, 4, 4))
    diff = float(np.abs(model_forward(x, p_sta).numpy() - model_forward(x, p_full).numpy()).max())
    _require(diff < 1e-10, f"window == grid logits differ from full attention by {diff:.3e}")
    return f"max deviation {diff:.1e}"


def hybrid_determinism(ctx: Context) -> str:
    config = HybridConfig.ena(2, window=(2, 2), tile=(2, 2), **_tiny_config())
    x = np.random.default_rng(ctx.seed + 7).standard_normal((2, 1, 4, 4))
    a = model_forward(x, init_params(config, 3)).numpy()
    b = model_forward(x, init_params(config, 3)).numpy()
    _require(a.tobytes() == b.tobytes(), "logits are not bit-identical across runs")
    return "bit-identical"


def checkpoint_roundtrip(ctx: Context) -> str:
    params = init_params(HybridConfig.ena(2, **_tiny_config()), 5)
    with tempfile.TemporaryDirectory() as tmp:
        save_checkpoint(os.path.join(tmp, "ckpt"), params)
        loaded, _ = load_checkpoint(os.path.join(tmp, "ckpt"))
    for name, t in params.items():
        other = loaded[name]
        _require(t.data.dtype == other.data.dtype and t.data.tobytes() == other.data.tobytes(),
                 f"{name} changed in checkpoint round-trip")
    return f"{len(params.tensors)} tensors"


SUITES: dict[str, list[tuple[str, Callable[[Context], str]]]] = {
    "scan": [("scan.bijectivity", scan_bijectivity), ("scan.identity_roundtrip", scan_roundtrip)],
    "delta": [("delta.chunked_equivalence", delta_equivalence)],
    "mask": [("mask.sparsity_golden", mask_sparsity_golden),
             ("mask.census_reconstruction", mask_census_reconstruction),
             ("mask.sta_no_mixed", mask_sta_no_mixed),
             ("mask.coverage", mask_coverage),
             ("mask.executor_oracle", mask_executor_oracle)],
    "grad": [("grad.primitives", grad_primitives), ("grad.delta", grad_delta)],
    "hybrid": [("hybrid.degeneracy", hybrid_degeneracy), ("hybrid.determinism", hybrid_determinism),
               ("hybrid.checkpoint_roundtrip", checkpoint_roundtrip)],
}


def suite_names() -> tuple:
    return ("all",) + tuple(SUITES)


def run_suite(name: str, inject=(), seed: int = 0) -> dict:
    """Run one suite (or ``all``) and return the JSON report document."""
    if name != "all" and name not in SUITES:
        raise KeyError(name)
    unknown = set(inject) - set(FAULTS)
    if unknown:
        raise ValueError(f"unknown faults {sorted(unknown)}; expected {FAULTS}")
    ctx = Context(frozenset(inject), seed)
    selected = SUITES if name == "all" else {name: SUITES[name]}
    results = []
    for suite, checks in selected.items():
        for check_name, fn in checks:
            start = time.perf_counter()
            with nx.precision(np.float64):
                try:
                    detail, status = fn(ctx), "pass"
                except Exception as exc:  # report every failure, keep going
                    detail, status = f"{type(exc).__name__}: {exc}", "fail"
            results.append({"name": check_name, "suite": suite, "status": status, "detail": detail,
                            "timing": {"ms": round((time.perf_counter() - start) * 1e3, 3)}})
    failed = [r["name"] for r in results if r["status"] != "pass"]
    return {"format": REPORT_FORMAT, "suite": name, "inject": sorted(inject), "seed": seed,
            "passed": not failed, "failed": failed, "results": results}
