"""Patch tokenization, input normalization and synchronized masking."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ContractViolation, DegenerateMaskError
from ..rng import make_rng

PATCH = 16
PATCH_VOXELS = PATCH ** 3


def normalize_ct(values, lo: float = -1000.0, hi: float = 1000.0) -> np.ndarray:
    """Map [lo, hi] HU affinely onto [-1, 1], clamped."""
    v = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
    return 2.0 * (v - lo) / (hi - lo) - 1.0


def normalize_pet(values, scale: float = 5.0, cap: float = 2.0) -> np.ndarray:
    return np.clip(np.asarray(values, dtype=np.float64) / scale, 0.0, cap)


def patchify(volume: np.ndarray, patch: int = PATCH):
    """Non-overlapping ``patch``^3 blocks flattened row-major; returns (patches, coords)."""
    h, w, d = volume.shape
    if h % patch or w % patch or d % patch:
        raise ContractViolation(f"dims {volume.shape} not divisible by patch size {patch}")
    nh, nw, nd = h // patch, w // patch, d // patch
    blocks = volume.reshape(nh, patch, nw, patch, nd, patch).transpose(0, 2, 4, 1, 3, 5)
    patches = blocks.reshape(nh * nw * nd, patch ** 3)
    coords = np.stack(np.meshgrid(np.arange(nh), np.arange(nw), np.arange(nd), indexing="ij"), -1)
    return patches, coords.reshape(-1, 3)


def dominant_classes(labels: np.ndarray, patch: int = PATCH, num_classes: int = 181) -> np.ndarray:
    """Per-patch majority label; background only when it is a strict majority, ties to lowest id."""
    flat, _ = patchify(labels.astype(np.int64), patch)
    out = np.zeros(len(flat), dtype=np.int64)
    half = flat.shape[1] / 2.0
    for i, row in enumerate(flat):
        counts = np.bincount(row, minlength=num_classes)
        if counts[0] > half:
            continue
        fg = counts[1:]
        out[i] = 0 if fg.max() == 0 else int(np.argmax(fg)) + 1
    return out


def mask_count(n: int, ratio: float) -> int:
    """round(ratio * n) with halves rounded up."""
    return int(math.floor(ratio * n + 0.5 + 1e-9))


def sample_mask(n: int, ratio: float, seed, *keys):
    """Uniform random masked subset of size round(ratio*n); returns sorted (visible, masked)."""
    if n < 2:
        raise DegenerateMaskError(f"need at least 2 patches to mask, got {n}")
    m = mask_count(n, ratio)
    if m <= 0 or m >= n:
        raise DegenerateMaskError(f"masking {m} of {n} patches leaves nothing to {'hide' if m <= 0 else 'see'}")
    rng = make_rng(seed, *keys)
    perm = rng.permutation(n)
    return np.sort(perm[m:]), np.sort(perm[:m])
