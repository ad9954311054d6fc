"""Self-similarity context descriptor on the 6-neighbourhood.

For every voxel the 12 unordered pairs of face neighbours whose offsets are
orthogonal are compared by mean squared patch distance. Each distance becomes
a channel ``exp(-d / sigma2)`` where ``sigma2`` is the mean of the 12 distances
at that voxel, and channels are finally divided by their per-voxel maximum.
Borders are handled by clamping coordinates to the grid.
"""
from __future__ import annotations

from itertools import combinations

import numpy as np
from scipy import ndimage

# face-neighbour offsets in array (z, y, x) order
NEIGHBOURS = np.array([
    (0, 0, 1), (0, 0, -1),
    (0, 1, 0), (0, -1, 0),
    (1, 0, 0), (-1, 0, 0),
])
# the 12 orthogonal pairs, in lexicographic index order
PAIRS = tuple((a, b) for a, b in combinations(range(6), 2) if NEIGHBOURS[a] @ NEIGHBOURS[b] == 0)
N_CHANNELS = len(PAIRS)
SIGMA2_FLOOR = 1e-6


def _shifted(padded: np.ndarray, offset, shape) -> np.ndarray:
    dz, dy, dx = (int(o) + 1 for o in offset)
    return padded[dz:dz + shape[0], dy:dy + shape[1], dx:dx + shape[2]]


def compute_ssc(vol, patch_radius: int = 1) -> np.ndarray:
    """Return the descriptor volume, float32 of shape ``vol.shape + (12,)``.

    ``vol`` may be a Volume or a plain (nz, ny, nx) array.
    """
    img = np.asarray(vol.data if hasattr(vol, "data") else vol, dtype=np.float64)
    shape = img.shape
    padded = np.pad(img, 1, mode="edge")
    size = 2 * int(patch_radius) + 1
    dist = np.empty(shape + (N_CHANNELS,), dtype=np.float64)
    for ch, (a, b) in enumerate(PAIRS):
        diff = _shifted(padded, NEIGHBOURS[a], shape) - _shifted(padded, NEIGHBOURS[b], shape)
        dist[..., ch] = ndimage.uniform_filter(diff * diff, size=size, mode="nearest")
    # box filtering can leave tiny negative round-off
    np.maximum(dist, 0.0, out=dist)
    sigma2 = np.maximum(dist.mean(axis=-1, keepdims=True), SIGMA2_FLOOR)
    desc = np.exp(-dist / sigma2)
    desc /= desc.max(axis=-1, keepdims=True)
    return desc.astype(np.float32)
