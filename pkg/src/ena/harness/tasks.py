"""Synthetic grid classification tasks.

``local_pattern``: a dense 3x3 block of +-1 cells sits at a random location
among sparse 1x3 decoy strips; the class is the number of +1 cells in the block.
Decoy signs are random, so the global sign total is uninformative and only the
2D neighbourhood of the block decides the label.

``global_count``: a binary grid labelled by the parity of its active cells.

Cells are one-hot encoded over their states (empty/+1/-1, or off/on), so no
token embeds to an exact zero vector: pre-norm LayerNorm would amplify such
tokens by ``1/sqrt(eps)``, and with 1x1 patches a signed single channel only
tells a normalised token the sign of its cell.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError

TASK_KINDS = ("local_pattern", "global_count")
TASK_CHANNELS = {"local_pattern": 3, "global_count": 2}
MAX_TOKENS = 4096
MOTIF = 3


@dataclass(eq=False)
class SynthDataset:
    images: np.ndarray
    labels: np.ndarray
    meta: dict

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.meta["classes"])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.meta, sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def split(self, n_first: int) -> tuple["SynthDataset", "SynthDataset"]:
        a = SynthDataset(self.images[:n_first], self.labels[:n_first], {**self.meta, "part": "train"})
        b = SynthDataset(self.images[n_first:], self.labels[n_first:], {**self.meta, "part": "val"})
        return a, b


def _balanced_labels(rng, n: int, classes: int) -> np.ndarray:
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    return labels


def plus_counts(classes: int) -> list[int]:
    """Number of +1 cells in the motif for each class, spread over 0..9."""
    if not 2 <= classes <= MOTIF * MOTIF + 1:
        raise ConfigError(f"local_pattern supports 2..{MOTIF * MOTIF + 1} classes, got {classes}")
    cells = MOTIF * MOTIF
    return [round(i * cells / (classes - 1)) for i in range(classes)]


def _free(blocked: np.ndarray, r0: int, r1: int, c0: int, c1: int) -> bool:
    return not blocked[max(r0, 0):r1, max(c0, 0):c1].any()


def local_pattern(grid, samples: int, classes: int = 4, seed: int = 0, location: str = "random",
                  decoys: int = 3) -> SynthDataset:
    """Dense 3x3 +-1 motif whose count of +1 cells is the class, plus isolated 1x3 decoy strips.

    Decoys carry random signs and keep a one-cell gap from everything else, so
    the motif is the only fully occupied 3x3 block and the label is a function
    of the image.
    """
    h, w = grid
    if h < MOTIF or w < MOTIF:
        raise ConfigError(f"grid {grid} is smaller than the {MOTIF}x{MOTIF} motif")
    if location not in ("random", "corner"):
        raise ConfigError(f"location must be 'random' or 'corner', got {location!r}")
    if decoys < 0:
        raise ConfigError("decoys must be nonnegative")
    counts = plus_counts(classes)
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(rng, samples, classes)
    signed = np.zeros((samples, h, w))
    for i in range(samples):
        img = signed[i]
        blocked = np.zeros((h, w), dtype=bool)
        if location == "corner":
            r = c = 0
        else:
            r = int(rng.integers(0, h - MOTIF + 1))
            c = int(rng.integers(0, w - MOTIF + 1))
        cells = -np.ones(MOTIF * MOTIF)
        cells[rng.permutation(MOTIF * MOTIF)[:counts[labels[i]]]] = 1.0
        img[r:r + MOTIF, c:c + MOTIF] = cells.reshape(MOTIF, MOTIF)
        blocked[max(r - 1, 0):r + MOTIF + 1, max(c - 1, 0):c + MOTIF + 1] = True
        for _ in range(decoys):
            for _attempt in range(20):
                dr = int(rng.integers(0, h))
                dc = int(rng.integers(0, w - MOTIF + 1))
                if _free(blocked, dr, dr + 1, dc, dc + MOTIF):
                    img[dr, dc:dc + MOTIF] = rng.choice([-1.0, 1.0], size=MOTIF)
                    blocked[max(dr - 1, 0):dr + 2, max(dc - 1, 0):dc + MOTIF + 1] = True
                    break
    meta = {"kind": "local_pattern", "grid": [h, w], "classes": classes, "samples": samples,
            "seed": seed, "location": location, "decoys": decoys}
    images = np.stack([signed == 0, signed > 0, signed < 0], axis=1).astype(np.float64)
    return SynthDataset(images, labels, meta)


def global_count(grid, samples: int, seed: int = 0, density: float = 0.5) -> SynthDataset:
    rng = np.random.default_rng(seed)
    n = math.prod(grid)
    labels = _balanced_labels(rng, samples, 2)
    bits = (rng.random((samples, n)) < density).astype(np.int64)
    flip = rng.integers(0, n, size=samples)
    wrong = (bits.sum(axis=1) % 2) != labels
    bits[wrong, flip[wrong]] ^= 1
    bits = bits.reshape((samples,) + tuple(grid))
    images = np.stack([bits == 0, bits == 1], axis=1).astype(np.float64)
    meta = {"kind": "global_count", "grid": list(grid), "classes": 2, "samples": samples,
            "seed": seed, "density": density}
    return SynthDataset(images, labels, meta)


def synth_task(kind: str, grid, seed: int = 0, samples: int = 1024, classes: int = 4,
               **options) -> SynthDataset:
    grid = tuple(int(g) for g in grid)
    if kind not in TASK_KINDS:
        raise ConfigError(f"unknown task {kind!r}; expected {TASK_KINDS}")
    if math.prod(grid) > MAX_TOKENS:
        raise ConfigError(f"grid {grid} exceeds {MAX_TOKENS} cells")
    if samples < 1:
        raise ConfigError("samples must be positive")
    if kind == "local_pattern":
        if len(grid) != 2:
            raise ConfigError("local_pattern needs a 2D grid")
        return local_pattern(grid, samples, classes, seed, **options)
    return global_count(grid, samples, seed, **options)
