"""Local attention layouts and a block-skipping attention executor.

Masks are boolean ``L x L`` arrays indexed in *kernel layout*: tokens are
grouped tile by tile (tiles in row-major order, tokens inside a tile in
row-major order), which is the identity for an all-ones tile. Every local kind
factorises over grid axes, so masks are Kronecker products of per-axis masks.

Border policy: windows are shifted inward at grid borders so that every query
keeps exactly ``prod(window)`` keys; an even window count extends one extra
unit toward higher coordinates.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np

from . import numerics as nx
from .errors import GeometryError
from .numerics import DegenerateRowError, Tensor
from .recurrence import _ParamGroup, trunc_normal

ATTENTION_KINDS = ("full", "block_1d", "swa_1d", "block_nd", "swa_nd", "sta_nd")
ONE_D = ("block_1d", "swa_1d")
BLOCK_KINDS = ("block_1d", "block_nd")
EMPTY, FULL, MIXED = 0, 1, 2
_CODES = {EMPTY: "E", FULL: "F", MIXED: "M"}
LAYOUT_FORMAT = "ena.blockmask/1"


def _tup(x) -> tuple:
    if isinstance(x, (int, np.integer)):
        return (int(x),)
    return tuple(int(v) for v in x)


@dataclass(frozen=True)
class WindowSpec:
    """Grid, tile and window geometry shared by every local-attention kind.

    ``window`` defaults to the grid and ``tile`` to all ones; ``kernel_block``
    defaults to the tile volume. For block kinds ``window`` is the block shape.
    """

    grid: tuple
    window: tuple | None = None
    tile: tuple | None = None
    kernel_block: int | None = None
    strict: bool = False

    def __post_init__(self):
        grid = _tup(self.grid)
        window = grid if self.window is None else _tup(self.window)
        tile = (1,) * len(grid) if self.tile is None else _tup(self.tile)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "window", window)
        object.__setattr__(self, "tile", tile)
        if self.kernel_block is None:
            object.__setattr__(self, "kernel_block", math.prod(tile))
        if not 1 <= len(grid) <= 3:
            raise GeometryError(f"grids must have 1 to 3 dims, got {grid}")
        if not len(grid) == len(window) == len(tile):
            raise GeometryError(f"grid {grid}, window {window} and tile {tile} must have equal rank")
        if min(grid + window + tile) < 1 or self.kernel_block < 1:
            raise GeometryError("grid, window, tile and kernel_block must be positive")

    @property
    def length(self) -> int:
        return math.prod(self.grid)

    @property
    def ndim(self) -> int:
        return len(self.grid)

    def validate(self, kind: str) -> "WindowSpec":
        if kind not in ATTENTION_KINDS:
            raise GeometryError(f"unknown attention kind {kind!r}")
        for d, (g, t) in enumerate(zip(self.grid, self.tile)):
            if g % t:
                raise GeometryError(f"tile {self.tile} does not divide grid {self.grid} (dim {d})")
        if self.strict and self.kernel_block < 128:
            raise GeometryError(f"strict layouts need kernel_block >= 128, got {self.kernel_block}")
        if kind == "full":
            return self
        if kind in ONE_D and self.ndim != 1:
            raise GeometryError(f"{kind} works on a flattened 1D grid, got {self.grid}")
        for d, (g, w) in enumerate(zip(self.grid, self.window)):
            if w > g:
                raise GeometryError(f"window {self.window} exceeds grid {self.grid} (dim {d})")
            if kind in BLOCK_KINDS and g % w:
                raise GeometryError(f"block {self.window} does not divide grid {self.grid} (dim {d})")
        if kind == "sta_nd":
            for d, (w, t) in enumerate(zip(self.window, self.tile)):
                if w % t:
                    raise GeometryError(f"window {self.window} is not a multiple of tile {self.tile} (dim {d})")
            if self.kernel_block != math.prod(self.tile):
                raise GeometryError(
                    f"tile volume {math.prod(self.tile)} must equal kernel_block {self.kernel_block}")
        return self

    def to_dict(self) -> dict:
        return {"grid": list(self.grid), "window": list(self.window), "tile": list(self.tile),
                "kernel_block": self.kernel_block, "strict": self.strict}

    @classmethod
    def from_dict(cls, d: dict) -> "WindowSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# geometry


def _clamped_start(center, size: int, extent: int):
    return np.clip(center - (size - 1) // 2, 0, extent - size)


def axis_mask(kind: str, grid: int, window: int, tile: int = 1) -> np.ndarray:
    """Per-axis ``[grid, grid]`` membership matrix for one kind."""
    q = np.arange(grid)[:, None]
    k = np.arange(grid)[None, :]
    if kind == "full":
        return np.ones((grid, grid), dtype=bool)
    if kind in BLOCK_KINDS:
        return (q // window) == (k // window)
    if kind in ("swa_1d", "swa_nd"):
        start = _clamped_start(q, window, grid)
        return (k >= start) & (k < start + window)
    if kind == "sta_nd":
        tiles, span = grid // tile, window // tile
        start = _clamped_start(q // tile, span, tiles)
        kt = k // tile
        return (kt >= start) & (kt < start + span)
    raise GeometryError(f"unknown attention kind {kind!r}")


def layout_permutation(spec: WindowSpec) -> np.ndarray:
    """Row-major token index held at each kernel-layout position."""
    shape = []
    order = []
    for d, (g, t) in enumerate(zip(spec.grid, spec.tile)):
        shape += [g // t, t]
    idx = np.arange(spec.length).reshape(shape)
    n = spec.ndim
    order = [2 * d for d in range(n)] + [2 * d + 1 for d in range(n)]
    return idx.transpose(order).reshape(-1)


def token_coords(spec: WindowSpec) -> np.ndarray:
    """Grid coordinates ``[L, N]`` of the token at each kernel-layout position."""
    return np.stack(np.unravel_index(layout_permutation(spec), spec.grid), axis=-1)


def build_dense_mask(kind: str, spec: WindowSpec) -> np.ndarray:
    spec.validate(kind)
    if kind == "full":
        return np.ones((spec.length, spec.length), dtype=bool)
    mask = np.ones((1, 1), dtype=np.uint8)
    for g, w, t in zip(spec.grid, spec.window, spec.tile):
        mask = np.kron(mask, axis_mask(kind, g, w, t).astype(np.uint8))
    mask = mask.astype(bool)
    if any(t > 1 for t in spec.tile):
        lay = layout_permutation(spec)
        mask = mask[np.ix_(lay, lay)]
    return mask


def attended_pairs(kind: str, spec: WindowSpec) -> int:
    spec.validate(kind)
    if kind == "full":
        return spec.length ** 2
    return math.prod(int(axis_mask(kind, g, w, t).sum())
                     for g, w, t in zip(spec.grid, spec.window, spec.tile))


def sparsity(kind: str, spec: WindowSpec) -> float:
    """Fraction of query-key pairs that are not attended (exact rational, returned as float)."""
    return float(1 - Fraction(attended_pairs(kind, spec), spec.length ** 2))


# ---------------------------------------------------------------------------
# census


@dataclass(eq=False)
class BlockMask:
    """Kernel-block classification of a mask, plus dense sub-masks of mixed blocks."""

    length: int
    kernel_block: int
    census: np.ndarray
    payload: dict = field(default_factory=dict)

    @property
    def num_query_blocks(self) -> int:
        return self.census.shape[0]

    @property
    def num_key_blocks(self) -> int:
        return self.census.shape[1]

    def _extents(self) -> np.ndarray:
        kb = self.kernel_block
        n = self.num_query_blocks
        sizes = np.full(n, kb)
        sizes[-1] = self.length - kb * (n - 1)
        return sizes

    def counts(self) -> dict:
        return {"empty": int((self.census == EMPTY).sum()),
                "full": int((self.census == FULL).sum()),
                "mixed": int((self.census == MIXED).sum())}

    def attended_pairs(self) -> int:
        ext = self._extents()
        area = np.outer(ext, ext)
        total = int(area[self.census == FULL].sum())
        return total + sum(int(sub.sum()) for sub in self.payload.values())

    def sparsity(self) -> float:
        return float(1 - Fraction(self.attended_pairs(), self.length ** 2))

    def block_sparsity(self) -> float:
        """Sparsity seen by a block executor: mixed blocks count as fully computed."""
        ext = self._extents()
        busy = int(np.outer(ext, ext)[self.census != EMPTY].sum())
        return float(1 - Fraction(busy, self.length ** 2))

    def visited_blocks(self) -> int:
        return int((self.census != EMPTY).sum())

    def to_dense(self) -> np.ndarray:
        kb = self.kernel_block
        dense = np.zeros((self.length, self.length), dtype=bool)
        for qb, kb_ in zip(*np.nonzero(self.census == FULL)):
            dense[qb * kb:(qb + 1) * kb, kb_ * kb:(kb_ + 1) * kb] = True
        for (qb, kb_), sub in self.payload.items():
            dense[qb * kb:qb * kb + sub.shape[0], kb_ * kb:kb_ * kb + sub.shape[1]] = sub
        return dense

    @cached_property
    def gather_plan(self):
        """Key-block indices, slot validity and element masks per query block."""
        kb = self.kernel_block
        nq = self.num_query_blocks
        rows = [np.nonzero(self.census[q] != EMPTY)[0] for q in range(nq)]
        if any(r.size == 0 for r in rows):
            raise DegenerateRowError("a query block attends no key block")
        maxc = max(r.size for r in rows)
        kidx = np.zeros((nq, maxc), dtype=np.intp)
        valid = np.zeros((nq, maxc), dtype=bool)
        elem = np.zeros((nq, kb, maxc, kb), dtype=bool)
        for q, r in enumerate(rows):
            kidx[q, :r.size] = r
            valid[q, :r.size] = True
            qn = min(kb, self.length - q * kb)
            for slot, kblk in enumerate(r):
                kn = min(kb, self.length - kblk * kb)
                if self.census[q, kblk] == FULL:
                    elem[q, :qn, slot, :kn] = True
                else:
                    elem[q, :qn, slot, :kn] = self.payload[(q, int(kblk))]
            # Padding query rows read one real key; their outputs are discarded.
            elem[q, qn:, 0, 0] = True
        return kidx, valid, elem.reshape(nq, kb, maxc * kb)

    def to_json(self, kind: str | None = None, spec: WindowSpec | None = None) -> dict:
        rle = []
        for row in self.census:
            runs = []
            for value in row:
                code = _CODES[int(value)]
                if runs and runs[-1][0] == code:
                    runs[-1][1] += 1
                else:
                    runs.append([code, 1])
            rle.append(runs)
        doc = {
            "format": LAYOUT_FORMAT,
            "kind": kind,
            "grid": list(spec.grid) if spec else None,
            "tile": list(spec.tile) if spec else None,
            "window": list(spec.window) if spec else None,
            "kernel_block": self.kernel_block,
            "length": self.length,
            "num_query_blocks": self.num_query_blocks,
            "num_key_blocks": self.num_key_blocks,
            "sparsity": self.sparsity(),
            "block_sparsity": self.block_sparsity(),
            "counts": self.counts(),
            "census_rle": rle,
        }
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "BlockMask":
        if doc.get("format") != LAYOUT_FORMAT:
            raise ValueError(f"not a block layout document: {doc.get('format')!r}")
        decode = {v: k for k, v in _CODES.items()}
        rows = []
        for runs in doc["census_rle"]:
            rows.append([decode[code] for code, n in runs for _ in range(n)])
        return cls(doc["length"], doc["kernel_block"], np.array(rows, dtype=np.int8))


def dumps_layout(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def block_census(mask: np.ndarray, kernel_block: int) -> BlockMask:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise GeometryError(f"census needs a square mask, got {mask.shape}")
    if kernel_block < 1:
        raise GeometryError("kernel_block must be >= 1")
    length = mask.shape[0]
    kb = kernel_block
    n = -(-length // kb)
    padded = np.zeros((n * kb, n * kb), dtype=np.int32)
    padded[:length, :length] = mask
    counts = padded.reshape(n, kb, n, kb).sum(axis=(1, 3))
    ext = np.full(n, kb)
    ext[-1] = length - kb * (n - 1)
    area = np.outer(ext, ext)
    census = np.full((n, n), MIXED, dtype=np.int8)
    census[counts == 0] = EMPTY
    census[counts == area] = FULL
    payload = {}
    for qb, kblk in zip(*np.nonzero(census == MIXED)):
        payload[(int(qb), int(kblk))] = mask[qb * kb:(qb + 1) * kb, kblk * kb:(kblk + 1) * kb].copy()
    return BlockMask(length, kb, census, payload)


def build_block_mask(kind: str, spec: WindowSpec) -> BlockMask:
    return block_census(build_dense_mask(kind, spec), spec.kernel_block)


# ---------------------------------------------------------------------------
# execution


@dataclass
class ExecutionStats:
    """Race-free counters of executor work."""

    visited_blocks: int = 0
    total_blocks: int = 0
    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, visited: int, total: int) -> None:
        with self._lock:
            self.visited_blocks += visited
            self.total_blocks += total
            self.calls += 1


def masked_attention_reference(q, k, v, mask) -> Tensor:
    """``softmax(Q K^T / sqrt(d))`` restricted to ``mask``, applied to ``V`` (bidirectional)."""
    q, k, v = nx.as_tensor(q), nx.as_tensor(k), nx.as_tensor(v)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.mT) * scale
    return nx.masked_row_softmax(scores, mask) @ v


_GATHER_BUDGET = 1 << 23


def block_sparse_attention(q, k, v, bm: BlockMask, stats: ExecutionStats | None = None) -> Tensor:
    """Attention that only touches non-empty kernel blocks of ``bm``.

    Query blocks are processed in groups; for each group the visited key/value
    blocks are gathered, mixed blocks apply their element mask, and empty
    blocks are never read.
    """
    q, k, v = nx.as_tensor(q), nx.as_tensor(k), nx.as_tensor(v)
    length = q.shape[-2]
    if length != bm.length:
        raise GeometryError(f"block mask covers {bm.length} tokens, inputs have {length}")
    kidx, valid, elem = bm.gather_plan
    kb = bm.kernel_block
    nq = bm.num_query_blocks
    d, dv = q.shape[-1], v.shape[-1]
    batch = q.shape[:-2]
    extra = nq * kb - length
    if extra:
        w = [(0, 0)] * q.ndim
        w[-2] = (0, extra)
        q, k, v = nx.pad(q, w), nx.pad(k, w), nx.pad(v, w)
    qb = q.reshape(batch + (nq, kb, d))
    kbk = k.reshape(batch + (nq, kb, d))
    vbk = v.reshape(batch + (nq, kb, dv))
    maxc = kidx.shape[1]
    per_block = max(1, math.prod(batch)) * maxc * kb * max(d, dv)
    group = max(1, _GATHER_BUDGET // per_block)
    scale = 1.0 / math.sqrt(d)
    outs = []
    for g0 in range(0, nq, group):
        g1 = min(nq, g0 + group)
        idx = kidx[g0:g1]
        kg = nx.take(kbk, idx, axis=-3).reshape(batch + (g1 - g0, maxc * kb, d))
        vg = nx.take(vbk, idx, axis=-3).reshape(batch + (g1 - g0, maxc * kb, dv))
        scores = (qb[..., g0:g1, :, :] @ kg.mT) * scale
        outs.append(nx.masked_row_softmax(scores, elem[g0:g1]) @ vg)
    out = outs[0] if len(outs) == 1 else nx.concat(outs, axis=-3)
    out = out.reshape(batch + (nq * kb, dv))
    if extra:
        out = out[..., :length, :]
    if stats is not None:
        stats.add(int(valid.sum()), bm.census.size)
    return out


def attention_flops(bm: BlockMask, d: int, count_mixed_as_full: bool = False) -> int:
    """Score plus value-aggregation multiply-adds (2 flops each) over attended pairs.

    Full blocks count their whole extent and mixed blocks their true entries,
    unless ``count_mixed_as_full`` charges mixed blocks like a dense kernel would.
    """
    if count_mixed_as_full:
        ext = bm._extents()
        pairs = int(np.outer(ext, ext)[bm.census != EMPTY].sum())
    else:
        pairs = bm.attended_pairs()
    return 4 * d * pairs


def full_attention_flops(length: int, d: int) -> int:
    return 4 * d * length * length


# ---------------------------------------------------------------------------
# attention token mixer


@dataclass(eq=False)
class AttentionParams(_ParamGroup):
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    num_heads: int = 1

    @classmethod
    def init(cls, d_model: int, num_heads: int, rng, dtype=None):
        proj = lambda: Tensor(trunc_normal(rng, (d_model, d_model), dtype=dtype))  # noqa: E731
        return cls(wq=proj(), wk=proj(), wv=proj(), wo=proj(), num_heads=num_heads)


class AttentionLayout:
    """Precomputed mask, census and kernel layout for one attention layer."""

    def __init__(self, kind: str, spec: WindowSpec):
        spec.validate(kind)
        self.kind = kind
        self.spec = spec
        self.mask = build_dense_mask(kind, spec)
        self.block_mask = block_census(self.mask, spec.kernel_block)
        self.layout = layout_permutation(spec)

    @property
    def length(self) -> int:
        return self.spec.length


def attention_mixer_forward(x, params: AttentionParams, layout: AttentionLayout, order=None,
                            executor: str = "block_sparse", stats: ExecutionStats | None = None) -> Tensor:
    """Multi-head local attention over a stream whose position ``j`` holds token ``order[j]``."""
    x = nx.as_tensor(x)
    b, length, d = x.shape
    if length != layout.length:
        raise GeometryError(f"layer expects {layout.length} tokens, got {length}")
    heads = params.num_heads
    gather = layout.layout
    if order is not None:
        gather = np.argsort(order)[gather]
    identity = np.array_equal(gather, np.arange(length))
    xs = x if identity else nx.permute(x, gather, axis=1)

    def split(t):
        return t.reshape(b, length, heads, d // heads).transpose(0, 2, 1, 3)

    q, k, v = split(xs @ params.wq), split(xs @ params.wk), split(xs @ params.wv)
    if executor == "block_sparse":
        out = block_sparse_attention(q, k, v, layout.block_mask, stats)
    elif executor == "dense":
        out = masked_attention_reference(q, k, v, layout.mask)
    else:
        raise ValueError(f"unknown executor {executor!r}")
    out = out.transpose(0, 2, 1, 3).reshape(b, length, d)
    if not identity:
        out = nx.permute(out, np.argsort(gather), axis=1)
    return out @ params.wo
