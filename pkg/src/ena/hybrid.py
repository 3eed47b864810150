"""Hybrid encoder: pre-norm residual blocks alternating linear recurrence and local attention.

Each block computes ``x' = x + TM(N(x))`` then ``x' + CM(N(x'))``. Layer ``i``
(0-based) is linear when ``i`` is even and attention when odd under the
default schedule.

Single-pass scans that reorder tokens are applied around the whole block, so
the residual stream itself is carried in scan order. The model tracks which
token sits at each stream position and hands that ordering to attention
layers, whose windows are always defined on the original grid.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .attention import AttentionLayout, AttentionParams, ExecutionStats, WindowSpec, attention_mixer_forward
from .errors import ConfigError, GeometryError, MixerContractError
from .numerics import NumericError, ShapeError, Tensor
from .recurrence import (DeltaMixerParams, GatedDecayParams, delta_mixer_forward, gated_decay,
                         trunc_normal)
from .scan import (MULTI_HEAD, MULTI_PASS, POST_ONLY, PRE_ONLY, ScanPlan, apply_scan, near_identity_logits,
                   net_permutation)

LINEAR_KINDS = ("delta", "gated_decay")
ATTENTION_LAYER_KINDS = {"full_attn": "full", "block_attn": "block", "swa": "swa", "sta": "sta_nd"}
LAYER_KINDS = LINEAR_KINDS + tuple(ATTENTION_LAYER_KINDS)
HEADS = ("classify", "regress_hidden")
CHECKPOINT_FORMAT = "ena.checkpoint/1"


def ena_schedule(num_layers: int, linear: str = "delta", attention: str = "sta") -> tuple:
    """Parity schedule: even (0-based) layers linear, odd layers attention."""
    return tuple(linear if i % 2 == 0 else attention for i in range(num_layers))


def attention_kind(layer_kind: str, ndim: int) -> str:
    base = ATTENTION_LAYER_KINDS[layer_kind]
    if base in ("block", "swa"):
        return f"{base}_1d" if ndim == 1 else f"{base}_nd"
    return base


@dataclass(frozen=True)
class HybridConfig:
    """Architecture description. ``grid`` is the input's spatial shape; tokens live on ``grid / patch``.

    ``windows`` holds one attention geometry (``{"window", "tile", "kernel_block"}``
    in token units, or ``None`` for the token grid) per layer; ``scans`` holds one
    :class:`ScanPlan` dict or ``None`` per layer.
    """

    num_layers: int = 2
    d_model: int = 32
    heads: int = 2
    schedule: tuple = ()
    grid: tuple = (16, 16)
    patch: tuple = (1, 1)
    channels: int = 1
    windows: tuple = ()
    scans: tuple = ()
    mlp_ratio: int = 4
    head: str = "classify"
    num_classes: int = 2
    chunk: int = 64
    conv_size: int = 4
    beta_init: float = 0.1
    decay_bias: float = 0.0
    executor: str = "block_sparse"

    def __post_init__(self):
        sched = tuple(self.schedule) or ena_schedule(self.num_layers)
        object.__setattr__(self, "schedule", sched)
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        patch = tuple(int(p) for p in self.patch)
        if len(patch) == 1 and len(self.grid) > 1:
            patch = patch * len(self.grid)
        object.__setattr__(self, "patch", patch)
        windows = tuple(self.windows) or (None,) * len(sched)
        object.__setattr__(self, "windows", tuple(None if w is None else dict(w) for w in windows))
        scans = tuple(self.scans) or (None,) * len(sched)
        object.__setattr__(self, "scans", tuple(None if s is None else dict(s) for s in scans))

    def __hash__(self):
        return hash(json.dumps(self.to_dict(), sort_keys=True))

    @property
    def token_grid(self) -> tuple:
        return tuple(g // p for g, p in zip(self.grid, self.patch))

    @property
    def length(self) -> int:
        return math.prod(self.token_grid)

    @property
    def patch_dim(self) -> int:
        return self.channels * math.prod(self.patch)

    def window_spec(self, i: int) -> WindowSpec:
        geom = self.windows[i] or {}
        return WindowSpec(self.token_grid, geom.get("window"), geom.get("tile"),
                          geom.get("kernel_block"), bool(geom.get("strict", False)))

    def scan_plan(self, i: int) -> ScanPlan | None:
        plan = self.scans[i]
        if plan is None:
            return None
        plan = {"grid": self.token_grid, **plan, "layer_index": i}
        return ScanPlan.from_dict(plan)

    def validate(self) -> "HybridConfig":
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if len(self.schedule) != self.num_layers:
            raise ConfigError(f"schedule has {len(self.schedule)} entries for {self.num_layers} layers")
        for name, n in (("windows", len(self.windows)), ("scans", len(self.scans))):
            if n != self.num_layers:
                raise ConfigError(f"{name} has {n} entries for {self.num_layers} layers")
        bad = [k for k in self.schedule if k not in LAYER_KINDS]
        if bad:
            raise ConfigError(f"unknown layer kinds {bad}; expected {LAYER_KINDS}")
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} must be a positive multiple of heads {self.heads}")
        if self.mlp_ratio < 1 or self.chunk < 1 or self.conv_size < 1 or self.channels < 1:
            raise ConfigError("mlp_ratio, chunk, conv_size and channels must be positive")
        if not 0.0 < self.beta_init < 1.0:
            raise ConfigError("beta_init must lie in (0, 1)")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; expected {HEADS}")
        if self.head == "classify" and self.num_classes < 2:
            raise ConfigError("classification needs num_classes >= 2")
        if self.executor not in ("block_sparse", "dense"):
            raise ConfigError(f"unknown executor {self.executor!r}")
        if len(self.patch) != len(self.grid) or not self.grid:
            raise GeometryError(f"patch {self.patch} does not match grid {self.grid}")
        for g, p in zip(self.grid, self.patch):
            if p < 1 or g < 1 or g % p:
                raise GeometryError(f"patch {self.patch} does not divide grid {self.grid}")
        for i, kind in enumerate(self.schedule):
            if kind in ATTENTION_LAYER_KINDS:
                if self.scans[i] is not None:
                    raise ConfigError(f"layer {i}: scans apply to linear layers only")
                self.window_spec(i).validate(attention_kind(kind, len(self.token_grid)))
            else:
                if self.windows[i] is not None:
                    raise ConfigError(f"layer {i}: windows apply to attention layers only")
                plan = self.scan_plan(i)
                if plan is not None:
                    if plan.length != self.length:
                        raise GeometryError(f"layer {i}: scan grid {plan.grid} does not match tokens {self.token_grid}")
                    if plan.kind in MULTI_HEAD and self.heads % plan.head_groups:
                        raise ConfigError(f"layer {i}: {self.heads} heads not divisible into {plan.head_groups} groups")
        return self

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers, "d_model": self.d_model, "heads": self.heads,
            "schedule": list(self.schedule), "grid": list(self.grid), "patch": list(self.patch),
            "channels": self.channels, "windows": list(self.windows), "scans": list(self.scans),
            "mlp_ratio": self.mlp_ratio, "head": self.head, "num_classes": self.num_classes,
            "chunk": self.chunk, "conv_size": self.conv_size, "beta_init": self.beta_init,
            "decay_bias": self.decay_bias, "executor": self.executor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HybridConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def ena(cls, num_layers: int, *, linear: str = "delta", attention: str = "sta",
            window=None, tile=None, kernel_block=None, scan=None, **kw) -> "HybridConfig":
        """Parity-scheduled config with one shared attention geometry and scan plan."""
        sched = ena_schedule(num_layers, linear, attention)
        geom = {"window": window, "tile": tile, "kernel_block": kernel_block}
        geom = {k: list(v) if isinstance(v, tuple) else v for k, v in geom.items() if v is not None}
        windows = tuple((geom or None) if k in ATTENTION_LAYER_KINDS else None for k in sched)
        scans = tuple(scan if k in LINEAR_KINDS else None for k in sched)
        return cls(num_layers=num_layers, schedule=sched, windows=windows, scans=scans, **kw)


# ---------------------------------------------------------------------------
# parameters


@dataclass(eq=False)
class ModelParams:
    """Flat name -> tensor mapping plus the config it was built for."""

    config: HybridConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def values(self):
        return self.tensors.values()

    def items(self):
        return self.tensors.items()

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def group(self, prefix: str) -> dict:
        pre = prefix + "."
        return {k[len(pre):]: v for k, v in self.tensors.items() if k.startswith(pre)}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data.copy()) for k, v in self.tensors.items()})

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"parameter {name} is not finite")


def init_params(config: HybridConfig, seed: int = 0, dtype=None) -> ModelParams:
    config.validate()
    dt = np.dtype(dtype or nx.get_default_dtype())
    rng = np.random.default_rng(seed)
    d = config.d_model
    flat: dict[str, Tensor] = {}

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dt))

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dt))

    def weight(*shape):
        return Tensor(trunc_normal(rng, shape, dtype=dt))

    flat["embed.w"] = weight(config.patch_dim, d)
    flat["embed.b"] = zeros(d)
    flat["pos"] = zeros(config.length, d)
    hidden = config.mlp_ratio * d
    for i, kind in enumerate(config.schedule):
        pre = f"layers.{i}"
        flat[f"{pre}.norm1.g"], flat[f"{pre}.norm1.b"] = ones(d), zeros(d)
        flat[f"{pre}.norm2.g"], flat[f"{pre}.norm2.b"] = ones(d), zeros(d)
        if kind == "delta":
            mix = DeltaMixerParams.init(d, config.heads, rng, config.conv_size, config.beta_init, dt)
        elif kind == "gated_decay":
            mix = GatedDecayParams.init(d, rng, config.conv_size, config.decay_bias, dt)
        else:
            mix = AttentionParams.init(d, config.heads, rng, dt)
        flat.update(mix.to_flat(f"{pre}.mixer"))
        plan = config.scans[i]
        if plan is not None and plan.get("kind") == "learnable":
            flat[f"{pre}.scan.logits"] = Tensor(near_identity_logits(config.length, dtype=dt))
        flat[f"{pre}.mlp.w1"], flat[f"{pre}.mlp.b1"] = weight(d, hidden), zeros(hidden)
        flat[f"{pre}.mlp.w2"], flat[f"{pre}.mlp.b2"] = weight(hidden, d), zeros(d)
    flat["norm_f.g"], flat["norm_f.b"] = ones(d), zeros(d)
    out = config.num_classes if config.head == "classify" else d
    flat["head.w"], flat["head.b"] = weight(d, out), zeros(out)
    return ModelParams(config, flat)


# ---------------------------------------------------------------------------
# forward


def patchify(images, patch) -> np.ndarray:
    """``[B, C, *spatial]`` -> ``[B, L, C * prod(patch)]``, tokens row-major over the patch grid."""
    x = np.asarray(images)
    patch = tuple(int(p) for p in patch)
    spatial = x.shape[2:]
    if len(spatial) != len(patch):
        raise GeometryError(f"patch {patch} does not match spatial shape {spatial}")
    for s, p in zip(spatial, patch):
        if p < 1 or s % p:
            raise GeometryError(f"patch {patch} does not divide spatial shape {spatial}")
    b, c = x.shape[:2]
    n = len(patch)
    split = [b, c]
    for s, p in zip(spatial, patch):
        split += [s // p, p]
    x = x.reshape(split)
    order = [0] + [2 + 2 * k for k in range(n)] + [1] + [3 + 2 * k for k in range(n)]
    x = x.transpose(order)
    tokens = math.prod(s // p for s, p in zip(spatial, patch))
    return x.reshape(b, tokens, c * math.prod(patch))


def patch_embed(images, patch, weight, bias, pos) -> Tensor:
    x = nx.as_tensor(patchify(images, patch), dtype=nx.as_tensor(weight).dtype)
    return x @ weight + bias + pos


def mlp(x, w1, b1, w2, b2) -> Tensor:
    return nx.gelu(x @ w1 + b1) @ w2 + b2


def block_forward(x, norm1, mixer, norm2, channel_mixer) -> Tensor:
    """``x' = x + mixer(N1(x))``; return ``x' + channel_mixer(N2(x'))``. Norms are ``(gain, bias)``."""
    x = nx.as_tensor(x)
    y = mixer(nx.layer_norm(x, *norm1))
    if nx.as_tensor(y).shape != x.shape:
        raise MixerContractError(f"token mixer mapped {x.shape} to {nx.as_tensor(y).shape}")
    x = x + y
    return x + channel_mixer(nx.layer_norm(x, *norm2))


@lru_cache(maxsize=64)
def _layout(kind: str, spec: WindowSpec) -> AttentionLayout:
    return AttentionLayout(kind, spec)


def layer_layout(config: HybridConfig, i: int) -> AttentionLayout:
    return _layout(attention_kind(config.schedule[i], len(config.token_grid)), config.window_spec(i))


def _layer_mixer(config, params, i, order, stats):
    kind = config.schedule[i]
    group = params.group(f"layers.{i}.mixer")
    if kind == "delta":
        p = DeltaMixerParams(**group, num_heads=config.heads)

        def run(t, head_perms=None):
            return delta_mixer_forward(t, p, config.chunk, head_perms)
        run.headwise, run.num_heads = True, config.heads
        return run
    if kind == "gated_decay":
        p = GatedDecayParams(**group)
        return lambda t: gated_decay(t, p)
    p = AttentionParams(**group, num_heads=config.heads)
    layout = layer_layout(config, i)
    layer_stats = None if stats is None else stats.setdefault(i, ExecutionStats())
    return lambda t: attention_mixer_forward(t, p, layout, order, config.executor, layer_stats)


def _scan_seed(plan: ScanPlan, step: int) -> int:
    return plan.seed + step if plan.resample else plan.seed


def model_forward(images, params: ModelParams, *, step: int = 0, stats: dict | None = None,
                  return_hidden: bool = False) -> Tensor:
    """Logits ``[B, classes]`` (or ``[B, L, d]`` hidden states for ``regress_hidden``).

    ``stats`` collects an :class:`ExecutionStats` per attention layer index.
    ``step`` feeds per-step reseeding of resampled random or learnable scans.
    """
    config = params.config
    x = patch_embed(images, config.patch, params["embed.w"], params["embed.b"], params["pos"])
    n = config.length
    order = None
    for i, kind in enumerate(config.schedule):
        try:
            pre = f"layers.{i}"
            norm1 = (params[f"{pre}.norm1.g"], params[f"{pre}.norm1.b"])
            norm2 = (params[f"{pre}.norm2.g"], params[f"{pre}.norm2.b"])
            w = [params[f"{pre}.mlp.{k}"] for k in ("w1", "b1", "w2", "b2")]

            def cm(t, w=w):
                return mlp(t, *w)
            mixer = _layer_mixer(config, params, i, order, stats)
            plan = config.scan_plan(i)
            if plan is None or plan.kind == "uni":
                x = block_forward(x, norm1, mixer, norm2, cm)
            elif plan.kind in PRE_ONLY + POST_ONLY:
                seed = _scan_seed(plan, step)
                kw = {"seed": seed}
                if plan.kind == "learnable":
                    kw["logits"] = params[f"{pre}.scan.logits"]
                x = apply_scan(plan, x, lambda t: block_forward(t, norm1, mixer, norm2, cm), **kw)
                moved = net_permutation(plan, n, seed=seed).indices
                order = moved if order is None else order[moved]
            elif plan.kind in MULTI_HEAD or plan.kind in MULTI_PASS:
                x = block_forward(x, norm1, lambda t: apply_scan(plan, t, mixer), norm2, cm)
            else:  # pragma: no cover - ScanPlan validates kinds
                raise ConfigError(f"unsupported scan {plan.kind}")
        except (NumericError, ShapeError, GeometryError, MixerContractError) as exc:
            raise type(exc)(f"layer {i} ({kind}): {exc}") from exc
    x = nx.layer_norm(x, params["norm_f.g"], params["norm_f.b"])
    if config.head == "regress_hidden" or return_hidden:
        if order is not None:
            x = nx.permute(x, np.argsort(order), axis=1)
        return x @ params["head.w"] + params["head.b"] if not return_hidden else x
    return x.mean(axis=1) @ params["head.w"] + params["head.b"]


def predict_proba(images, params: ModelParams, batch_size: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        logits = model_forward(images[s:s + batch_size], params).numpy()
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out.append(e / e.sum(axis=-1, keepdims=True))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, params: ModelParams, extra: dict | None = None) -> tuple[str, str]:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian payload)."""
    base = os.fspath(path)
    for suffix in (".json", ".bin"):
        if base.endswith(suffix):
            base = base[:-len(suffix)]
    manifest_path, payload_path = base + ".json", base + ".bin"
    entries = []
    offset = 0
    with open(payload_path, "wb") as fh:
        for name in sorted(params.tensors):
            arr = params.tensors[name].data
            raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>=|"),
                            "offset": offset, "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    manifest = {"format": CHECKPOINT_FORMAT, "config": params.config.to_dict(),
                "payload": os.path.basename(payload_path), "tensors": entries, "extra": extra or {}}
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest_path, payload_path


def load_checkpoint(path: str) -> tuple[ModelParams, dict]:
    base = os.fspath(path)
    if base.endswith(".bin"):
        base = base[:-4]
    manifest_path = base if base.endswith(".json") else base + ".json"
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{manifest_path} is not a checkpoint manifest")
    payload_path = os.path.join(os.path.dirname(manifest_path), manifest["payload"])
    with open(payload_path, "rb") as fh:
        blob = fh.read()
    tensors = {}
    for e in manifest["tensors"]:
        dt = np.dtype("<" + e["dtype"]) if np.dtype(e["dtype"]).itemsize > 1 else np.dtype(e["dtype"])
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
        tensors[e["name"]] = Tensor(arr)
    return ModelParams(HybridConfig.from_dict(manifest["config"]), tensors), manifest
