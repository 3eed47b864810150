"""Independent reference implementations shared by the unit and acceptance tests.

Written in plain Python/numpy without the package's Tensor type so they can
serve as a second route to every value they check.
"""

import math

import numpy as np

from ena.hybrid import patchify


def attention_oracle(q, k, v, mask):
    """Two plain loops over queries and keys, no vectorised softmax."""
    length, d = q.shape
    out = np.zeros((length, v.shape[1]))
    for i in range(length):
        keys = [j for j in range(length) if mask[i, j]]
        scores = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in keys]
        top = max(scores)
        weights = [math.exp(s - top) for s in scores]
        total = sum(weights)
        for w, j in zip(weights, keys):
            out[i] += (w / total) * v[j]
    return out


def delta_loop_oracle(q, k, v, beta):
    """Per-token delta rule for one sequence, same association order as the package."""
    length, dk = q.shape
    s = np.zeros((v.shape[1], dk))
    out = np.zeros((length, v.shape[1]))
    for t in range(length):
        kt = k[t][:, None]
        correction = beta[t] * (s @ kt - v[t][:, None])
        s = s - correction @ kt.T
        out[t] = (s @ q[t][:, None])[:, 0]
    return out, s


def np_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def np_encoder(imgs, params):
    """Plain pre-norm Transformer encoder with mean pooling, read off a full-attention ModelParams."""
    cfg = params.config
    p = {k: v.numpy() for k, v in params.items()}
    x = patchify(imgs, cfg.patch) @ p["embed.w"] + p["embed.b"] + p["pos"]
    b, n, d = x.shape
    h = cfg.heads
    for i in range(cfg.num_layers):
        pre = f"layers.{i}"
        y = np_ln(x, p[f"{pre}.norm1.g"], p[f"{pre}.norm1.b"])
        q, k, v = (y @ p[f"{pre}.mixer.{w}"] for w in ("wq", "wk", "wv"))
        q, k, v = (t.reshape(b, n, h, d // h).transpose(0, 2, 1, 3) for t in (q, k, v))
        s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(d // h)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        x = x + o @ p[f"{pre}.mixer.wo"]
        y = np_ln(x, p[f"{pre}.norm2.g"], p[f"{pre}.norm2.b"])
        x = x + np_gelu(y @ p[f"{pre}.mlp.w1"] + p[f"{pre}.mlp.b1"]) @ p[f"{pre}.mlp.w2"] + p[f"{pre}.mlp.b2"]
    x = np_ln(x, p["norm_f.g"], p["norm_f.b"])
    return x.mean(1) @ p["head.w"] + p["head.b"]
