"""Linear-time token mixers: the delta rule, a gated-decay recurrence, short convolution.

State convention: per head, ``S`` is a ``d_v x d_k`` matrix, written as
``S_t = S_{t-1} - beta_t (S_{t-1} k_t - v_t) k_t^T`` and read as ``o_t = S_t q_t``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import NumericError, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=None) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype or nx.get_default_dtype())


class _ParamGroup:
    """Dataclass mixin mapping tensor fields to and from flat ``prefix.name`` dicts."""

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if isinstance(getattr(self, f.name), Tensor)}

    def to_flat(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.tensors().items()}

    @classmethod
    def from_flat(cls, flat: dict, prefix: str, **extra):
        names = [f.name for f in dataclasses.fields(cls) if f.name not in extra]
        return cls(**{n: flat[f"{prefix}.{n}"] for n in names}, **extra)


# ---------------------------------------------------------------------------
# short convolution


def short_conv(x, kernels, activation: bool = True) -> Tensor:
    """Causal depthwise convolution over axis -2, optionally followed by SiLU.

    ``kernels`` is ``[channels, c]``; tap ``c - 1`` multiplies the current step,
    tap ``j`` the step ``c - 1 - j`` positions back (zero-padded on the left).
    """
    x, kernels = nx.as_tensor(x), nx.as_tensor(kernels)
    if kernels.ndim != 2 or kernels.shape[0] != x.shape[-1]:
        raise nx.ShapeError(f"kernels {kernels.shape} do not match channels of {x.shape}")
    c = kernels.shape[1]
    if c < 1:
        raise ValueError("convolution window must be >= 1")
    length = x.shape[-2]
    widths = [(0, 0)] * x.ndim
    widths[-2] = (c - 1, 0)
    xp = nx.pad(x, widths) if c > 1 else x
    out = None
    for j in range(c):
        term = xp[..., j:j + length, :] * kernels[:, j]
        out = term if out is None else out + term
    return nx.silu(out) if activation else out


# ---------------------------------------------------------------------------
# delta rule


def delta_sequential(q, k, v, beta, s0=None):
    """Token-by-token delta rule. Returns ``(outputs [..., L, d_v], final state)``."""
    q, k, v, beta = (nx.as_tensor(t) for t in (q, k, v, beta))
    batch = q.shape[:-2]
    length, dk = q.shape[-2:]
    dv = v.shape[-1]
    state = nx.as_tensor(s0) if s0 is not None else Tensor(np.zeros(batch + (dv, dk), dtype=q.dtype))
    outs = []
    for t in range(length):
        try:
            kt = k[..., t, :]
            vt = v[..., t, :]
            correction = beta[..., t, None, None] * (state @ kt[..., :, None] - vt[..., :, None])
            state = state - correction @ kt[..., None, :]
            outs.append((state @ q[..., t, :, None])[..., 0])
        except NumericError as exc:
            raise NumericError(f"delta rule diverged at step {t}: {exc}") from exc
    return nx.stack(outs, axis=-2), state


def delta_chunked(q, k, v, beta, s0=None, chunk: int = 64):
    """Chunkwise-parallel delta rule, equal to :func:`delta_sequential` up to rounding.

    Within a chunk the rank-one updates are folded into a unit lower-triangular
    system (``T = (I + diag(beta) tril(K K^T, -1))^{-1}``); states are carried
    only across chunk boundaries.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    q, k, v, beta = (nx.as_tensor(t) for t in (q, k, v, beta))
    batch = q.shape[:-2]
    length, dk = q.shape[-2:]
    dv = v.shape[-1]
    n = -(-length // chunk)
    extra = n * chunk - length
    if extra:
        w = [(0, 0)] * (len(batch) + 2)
        w[-2] = (0, extra)
        q, k, v = nx.pad(q, w), nx.pad(k, w), nx.pad(v, w)
        beta = nx.pad(beta, w[:-1])
    qc = q.reshape(batch + (n, chunk, dk))
    kc = k.reshape(batch + (n, chunk, dk))
    vc = v.reshape(batch + (n, chunk, dv))
    bc = beta.reshape(batch + (n, chunk))[..., None]
    dtype = q.dtype
    strict = np.tril(np.ones((chunk, chunk), dtype=dtype), -1)
    causal = np.tril(np.ones((chunk, chunk), dtype=dtype))
    inv = nx.unit_lower_inverse((kc @ kc.mT) * strict * bc)
    w_mat = inv @ (kc * bc)
    u_mat = inv @ (vc * bc)
    qk = (qc @ kc.mT) * causal
    state = nx.as_tensor(s0) if s0 is not None else Tensor(np.zeros(batch + (dv, dk), dtype=dtype))
    outs = []
    for i in range(n):
        try:
            st = state.mT
            delta = u_mat[..., i, :, :] - w_mat[..., i, :, :] @ st
            outs.append(qc[..., i, :, :] @ st + qk[..., i, :, :] @ delta)
            state = state + delta.mT @ kc[..., i, :, :]
        except NumericError as exc:
            raise NumericError(f"delta rule diverged in chunk {i} (steps {i * chunk}..): {exc}") from exc
    out = nx.concat(outs, axis=-2)
    if extra:
        out = out[..., :length, :]
    return out, state


# ---------------------------------------------------------------------------
# gated decay


def gated_decay_scan(inputs, gates) -> Tensor:
    """``h_t = g_t * h_{t-1} + (1 - g_t) * i_t`` with ``h_0 = 0``."""
    inputs, gates = nx.as_tensor(inputs), nx.as_tensor(gates)
    return nx.linear_scan(gates, (1.0 - gates) * inputs)


@dataclass(eq=False)
class GatedDecayParams(_ParamGroup):
    wi: Tensor
    wg: Tensor
    bg: Tensor
    wo: Tensor
    conv_i: Tensor

    @classmethod
    def init(cls, d_model: int, rng, conv_size: int = 4, gate_bias: float = 0.0, dtype=None):
        return cls(
            wi=Tensor(trunc_normal(rng, (d_model, d_model), dtype=dtype)),
            wg=Tensor(trunc_normal(rng, (d_model, d_model), dtype=dtype)),
            bg=Tensor(np.full(d_model, gate_bias, dtype=dtype or nx.get_default_dtype())),
            wo=Tensor(trunc_normal(rng, (d_model, d_model), dtype=dtype)),
            conv_i=Tensor(_conv_init(rng, d_model, conv_size, dtype)),
        )


def gated_decay(x, params: GatedDecayParams) -> Tensor:
    x = nx.as_tensor(x)
    inputs = short_conv(x @ params.wi, params.conv_i)
    gates = nx.sigmoid(x @ params.wg + params.bg)
    return gated_decay_scan(inputs, gates) @ params.wo


# ---------------------------------------------------------------------------
# delta mixer


def _conv_init(rng, channels: int, size: int, dtype=None) -> np.ndarray:
    # Near pass-through: unit weight on the current step plus small noise.
    k = trunc_normal(rng, (channels, size), dtype=dtype)
    k[:, -1] += 1.0
    return k


@dataclass(eq=False)
class DeltaMixerParams(_ParamGroup):
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wb: Tensor
    bb: Tensor
    wo: Tensor
    conv_q: Tensor
    conv_k: Tensor
    conv_v: Tensor
    num_heads: int = 1

    @classmethod
    def init(cls, d_model: int, num_heads: int, rng, conv_size: int = 4,
             beta_init: float = 0.1, dtype=None):
        if d_model % num_heads:
            raise ConfigError(f"d_model {d_model} is not divisible by {num_heads} heads")
        dt = dtype or nx.get_default_dtype()
        proj = lambda: Tensor(trunc_normal(rng, (d_model, d_model), dtype=dt))  # noqa: E731
        return cls(
            wq=proj(), wk=proj(), wv=proj(),
            wb=Tensor(trunc_normal(rng, (d_model, num_heads), dtype=dt)),
            bb=Tensor(np.full(num_heads, math.log(beta_init / (1.0 - beta_init)), dtype=dt)),
            wo=proj(),
            conv_q=Tensor(_conv_init(rng, d_model, conv_size, dt)),
            conv_k=Tensor(_conv_init(rng, d_model, conv_size, dt)),
            conv_v=Tensor(_conv_init(rng, d_model, conv_size, dt)),
            num_heads=num_heads,
        )


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, length, d = t.shape
    return t.reshape(b, length, heads, d // heads).transpose(0, 2, 1, 3)


def _gather_heads(t: Tensor, index: np.ndarray) -> Tensor:
    heads = np.arange(index.shape[0])[:, None]
    if t.ndim == 4:
        return t[:, heads, index, :]
    return t[:, heads, index]


def delta_mixer_forward(x, params: DeltaMixerParams, chunk: int = 64, head_perms=None) -> Tensor:
    """Projection, short conv, head split, L2-normalised q/k, chunked delta rule, output projection.

    ``head_perms`` optionally reorders each head's sequence before the
    recurrence and restores the original order afterwards.
    """
    x = nx.as_tensor(x)
    b, length, d = x.shape
    heads = params.num_heads
    if d % heads:
        raise ConfigError(f"d_model {d} is not divisible by {heads} heads")
    q = nx.l2_normalize(_split_heads(short_conv(x @ params.wq, params.conv_q), heads))
    k = nx.l2_normalize(_split_heads(short_conv(x @ params.wk, params.conv_k), heads))
    v = _split_heads(short_conv(x @ params.wv, params.conv_v), heads)
    beta = nx.sigmoid(x @ params.wb + params.bb).transpose(0, 2, 1)
    if head_perms is not None:
        index = np.stack([p.indices for p in head_perms])
        inverse = np.argsort(index, axis=1)
        q, k, v, beta = (_gather_heads(t, index) for t in (q, k, v, beta))
    out, _ = delta_chunked(q, k, v, beta, chunk=chunk)
    if head_perms is not None:
        out = _gather_heads(out, inverse)
    return out.transpose(0, 2, 1, 3).reshape(b, length, d) @ params.wo


class DeltaMixer:
    """Callable delta-rule token mixer; accepts per-head scan orderings."""

    headwise = True

    def __init__(self, params: DeltaMixerParams, chunk: int = 64):
        self.params = params
        self.chunk = chunk
        self.num_heads = params.num_heads

    def __call__(self, x, head_perms=None) -> Tensor:
        return delta_mixer_forward(x, self.params, self.chunk, head_perms)


class GatedDecayMixer:
    headwise = False

    def __init__(self, params: GatedDecayParams):
        self.params = params

    def __call__(self, x) -> Tensor:
        return gated_decay(x, self.params)
