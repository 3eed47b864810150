"""Scan orderings for linear token mixers.

A scan turns a token grid into one (single-pass) or several (multi-pass) 1D
orderings around a shape-preserving token mixer. Hard orderings are
:class:`Permutation` gathers along the sequence axis (``y[i] = x[p[i]]``); the
learnable scan uses a Gumbel-softmax :class:`SoftPermutation` instead.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import ConfigError, GeometryError, InvariantViolation, MixerContractError
from .numerics import Tensor

SCAN_KINDS = (
    "uni", "switch", "flip", "shift1d", "shift2d", "random", "learnable",
    "multi_head_bi", "multi_head_2d", "bi", "cross",
)
MULTI_PASS = {"bi": 2, "cross": 4}
PRE_ONLY = ("flip", "random", "learnable")
POST_ONLY = ("switch", "shift1d", "shift2d")
MULTI_HEAD = ("multi_head_bi", "multi_head_2d")
_NEEDS_2D = ("shift2d", "multi_head_2d", "cross")


@dataclass(frozen=True)
class ScanPlan:
    kind: str = "uni"
    grid: tuple = ()
    shift: int = 1
    seed: int = 0
    head_groups: int = 1
    layer_index: int = 0
    resample: bool = False
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in SCAN_KINDS:
            raise ConfigError(f"unknown scan kind {self.kind!r}; expected one of {SCAN_KINDS}")
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if any(g < 1 for g in self.grid):
            raise GeometryError(f"grid dims must be positive, got {self.grid}")
        if self.shift < 0:
            raise ConfigError("shift must be nonnegative")
        if self.head_groups < 1:
            raise ConfigError("head_groups must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    @property
    def num_passes(self) -> int:
        return MULTI_PASS.get(self.kind, 1)

    @property
    def length(self) -> int:
        return math.prod(self.grid)

    def with_layer(self, layer_index: int) -> "ScanPlan":
        return ScanPlan(**{**asdict(self), "layer_index": layer_index})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScanPlan":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scan fields {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Permutation:
    indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp).reshape(-1)
        if not np.array_equal(np.sort(idx), np.arange(idx.size)):
            raise InvariantViolation("indices are not a bijection on 0..L-1")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    def __len__(self) -> int:
        return self.indices.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Permutation) and np.array_equal(self.indices, other.indices)

    def __hash__(self):
        return hash(self.indices.tobytes())

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.indices, np.arange(self.indices.size)))

    def apply(self, x, axis: int = -2):
        """Reorder ``x`` along ``axis``: position ``i`` receives element ``indices[i]``."""
        if isinstance(x, Tensor):
            return nx.permute(x, self.indices, axis)
        return np.take(np.asarray(x), self.indices, axis=axis)


def invert(p: Permutation) -> Permutation:
    inv = np.empty_like(p.indices)
    inv[p.indices] = np.arange(p.indices.size)
    return Permutation(inv)


def compose(p: Permutation, q: Permutation) -> Permutation:
    """Gather by ``p`` then by ``q``."""
    if len(p) != len(q):
        raise GeometryError(f"cannot compose permutations of lengths {len(p)} and {len(q)}")
    return Permutation(p.indices[q.indices])


# ---------------------------------------------------------------------------
# primitive orderings


def reversal(n: int) -> Permutation:
    return Permutation(np.arange(n)[::-1])


def transpose_2d(grid) -> Permutation:
    """Column-major read-out of a row-major 2D grid."""
    h, w = _grid2(grid)
    return Permutation(np.arange(h * w).reshape(h, w).T.reshape(-1))


def shift_1d(n: int, shift: int) -> Permutation:
    return Permutation((np.arange(n) + shift) % n)


def shift_2d(grid, shift: int) -> Permutation:
    h, w = _grid2(grid)
    r, c = np.divmod(np.arange(h * w), w)
    return Permutation(((r + shift) % h) * w + (c + shift) % w)


def fisher_yates(n: int, seed: int) -> Permutation:
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    return Permutation(idx)


def cross_directions(grid) -> list[Permutation]:
    """Row-major forward/reversed, column-major forward/reversed."""
    n = math.prod(grid)
    col = transpose_2d(grid)
    return [Permutation.identity(n), reversal(n), col, compose(col, reversal(n))]


def _grid2(grid) -> tuple[int, int]:
    if len(grid) != 2:
        raise GeometryError(f"this scan needs a 2D grid, got {tuple(grid)}")
    return int(grid[0]), int(grid[1])


def _normalized_shift(plan: ScanPlan) -> int:
    if plan.kind == "shift1d":
        bound = plan.length
    else:
        bound = min(_grid2(plan.grid))
    if plan.shift >= bound:
        warnings.warn(f"shift {plan.shift} >= {bound}; reduced modulo {bound}", stacklevel=3)
    return plan.shift % bound


def build_permutation(plan: ScanPlan, pass_index: int = 0, group: int = 0,
                      seed: int | None = None) -> Permutation:
    """The ordering a plan applies on pass ``pass_index`` (head group ``group``).

    For pre-only kinds this is the pre-op, for post-only kinds the post-op; the
    multi-head kinds return the pre-op of the given head group.
    """
    if not 0 <= pass_index < plan.num_passes:
        raise ValueError(f"pass_index {pass_index} out of range for {plan.kind} ({plan.num_passes} passes)")
    if plan.kind in _NEEDS_2D:
        _grid2(plan.grid)
    n = plan.length
    kind = plan.kind
    if kind == "uni":
        return Permutation.identity(n)
    if kind == "flip":
        return reversal(n)
    if kind == "switch":
        return reversal(n) if plan.layer_index % 2 == 1 else transpose_2d(plan.grid)
    if kind == "shift1d":
        return shift_1d(n, _normalized_shift(plan))
    if kind == "shift2d":
        return shift_2d(plan.grid, _normalized_shift(plan))
    if kind == "random":
        return fisher_yates(n, plan.seed if seed is None else seed)
    if kind == "bi":
        return (Permutation.identity(n), reversal(n))[pass_index]
    if kind == "cross":
        return cross_directions(plan.grid)[pass_index]
    if kind == "multi_head_bi":
        return reversal(n) if group % 2 == 1 else Permutation.identity(n)
    if kind == "multi_head_2d":
        return cross_directions(plan.grid)[group % 4]
    raise ValueError("learnable scans are soft; use gumbel_soft_permutation")


def head_permutations(plan: ScanPlan, num_heads: int) -> list[Permutation]:
    """Per-head pre-orderings for the multi-head kinds (contiguous head groups)."""
    if num_heads % plan.head_groups:
        raise ValueError(f"{num_heads} heads cannot be split into {plan.head_groups} groups")
    per_group = num_heads // plan.head_groups
    return [build_permutation(plan, 0, group=h // per_group) for h in range(num_heads)]


# ---------------------------------------------------------------------------
# learnable scan


@dataclass(eq=False)
class SoftPermutation:
    matrix: Tensor
    temperature: float

    def apply(self, x):
        return nx.matmul(self.matrix, nx.as_tensor(x))

    def hard_selection(self) -> np.ndarray:
        """Row-wise argmax; may select the same token more than once."""
        return np.argmax(self.matrix.data, axis=-1)


def near_identity_logits(n: int, scale: float | None = None, dtype=None) -> np.ndarray:
    scale = math.log(n) + 8.0 if scale is None else scale
    return np.eye(n, dtype=dtype or nx.get_default_dtype()) * scale


def gumbel_soft_permutation(logits, temperature: float, seed: int) -> SoftPermutation:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = nx.as_tensor(logits)
    rng = np.random.default_rng(seed)
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=logits.shape)
    noise = (-np.log(-np.log(u))).astype(logits.dtype)
    matrix = nx.masked_row_softmax((logits + noise) / temperature)
    return SoftPermutation(matrix, float(temperature))


# ---------------------------------------------------------------------------
# applying plans


Mixer = Callable[..., Tensor]


def _check_mixer_output(x: Tensor, y) -> Tensor:
    y = nx.as_tensor(y)
    if y.shape != x.shape:
        raise MixerContractError(f"token mixer mapped {x.shape} to {y.shape}")
    return y


def _check_length(plan: ScanPlan, x: Tensor) -> None:
    if plan.grid and plan.length != x.shape[-2]:
        raise GeometryError(f"plan grid {plan.grid} has {plan.length} tokens, sequence has {x.shape[-2]}")


def apply_single_pass(plan: ScanPlan, x, mixer: Mixer, *, logits=None,
                      seed: int | None = None) -> Tensor:
    """``post(mixer(pre(x)))`` with pre/post placement determined by the scan kind.

    Multi-head kinds hand per-head orderings to mixers that advertise
    ``headwise = True`` (``mixer(x, head_perms=...)``); other mixers get the
    channel dimension split into ``head_groups`` contiguous groups instead.
    """
    if plan.num_passes != 1:
        raise ValueError(f"{plan.kind} is a multi-pass scan")
    x = nx.as_tensor(x)
    _check_length(plan, x)
    kind = plan.kind
    if kind == "uni":
        return _check_mixer_output(x, mixer(x))
    if kind == "learnable":
        n = x.shape[-2]
        if logits is None:
            logits = near_identity_logits(n, dtype=x.dtype)
        soft = gumbel_soft_permutation(logits, plan.temperature, plan.seed if seed is None else seed)
        return _check_mixer_output(x, mixer(soft.apply(x)))
    if kind in PRE_ONLY:
        p = build_permutation(plan, seed=seed)
        return _check_mixer_output(x, mixer(p.apply(x, axis=-2)))
    if kind in POST_ONLY:
        p = build_permutation(plan)
        return p.apply(_check_mixer_output(x, mixer(x)), axis=-2)
    return _apply_multi_head(plan, x, mixer)


def _apply_multi_head(plan: ScanPlan, x: Tensor, mixer: Mixer) -> Tensor:
    if getattr(mixer, "headwise", False):
        perms = head_permutations(plan, mixer.num_heads)
        return _check_mixer_output(x, mixer(x, head_perms=perms))
    d = x.shape[-1]
    groups = plan.head_groups
    if d % groups:
        raise ValueError(f"feature dim {d} cannot be split into {groups} groups")
    width = d // groups
    perms = [build_permutation(plan, 0, group=g) for g in range(groups)]
    parts = [perms[g].apply(x[..., g * width:(g + 1) * width], axis=-2) for g in range(groups)]
    y = _check_mixer_output(x, mixer(nx.concat(parts, axis=-1)))
    back = [invert(perms[g]).apply(y[..., g * width:(g + 1) * width], axis=-2) for g in range(groups)]
    return nx.concat(back, axis=-1)


def apply_multi_pass(plan: ScanPlan, x, mixer: Mixer) -> Tensor:
    """Average of the re-aligned mixer outputs over all views.

    Views are stacked along the batch axis so one mixer call processes them
    all; each output is inverse-permuted to the original order before merging.
    """
    if plan.num_passes not in (2, 4):
        raise ValueError(f"{plan.kind} is a single-pass scan")
    x = nx.as_tensor(x)
    _check_length(plan, x)
    perms = [build_permutation(plan, i) for i in range(plan.num_passes)]
    views = nx.concat([p.apply(x, axis=-2) for p in perms], axis=0)
    y = _check_mixer_output(views, mixer(views))
    b = x.shape[0]
    total = None
    for i, p in enumerate(perms):
        part = invert(p).apply(y[i * b:(i + 1) * b], axis=-2)
        total = part if total is None else total + part
    return total / float(plan.num_passes)


def apply_scan(plan: ScanPlan | None, x, mixer: Mixer, **kwargs) -> Tensor:
    if plan is None:
        return _check_mixer_output(nx.as_tensor(x), mixer(nx.as_tensor(x)))
    if plan.num_passes == 1:
        return apply_single_pass(plan, x, mixer, **kwargs)
    return apply_multi_pass(plan, x, mixer)


def net_permutation(plan: ScanPlan | None, n: int, seed: int | None = None) -> Permutation:
    """The token reordering a single-pass hard scan leaves behind in the stream."""
    if plan is None or plan.kind in ("uni", "learnable") + MULTI_HEAD or plan.num_passes > 1:
        return Permutation.identity(n)
    return build_permutation(plan, seed=seed if plan.kind == "random" else None)
