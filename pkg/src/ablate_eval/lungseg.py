"""Classical lung parenchyma segmentation and mask handling.

Air-like voxels are thresholded, components connected to the volume border
(outside air) are discarded, small pockets are dropped, and the remaining lung
components are smoothed by a morphological closing and slice-wise hole filling.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import LungNotFoundError, ValidationError
from .io import load_mask
from .volume import GridMeta, Mask, Volume, check_same_grid, resample

log = logging.getLogger(__name__)

_FACE = ndimage.generate_binary_structure(3, 1)


@dataclass
class LungSegConfig:
    air_threshold: float = -320.0  # HU
    min_component_volume: float = 50_000.0  # mm^3
    closing_radius: float = 3.0  # mm
    fill_holes: bool = True

    def __post_init__(self):
        if self.closing_radius < 0:
            raise ValidationError("closing_radius must be >= 0")
        if self.min_component_volume <= 0:
            raise ValidationError("min_component_volume must be > 0")

    def to_json(self) -> dict:
        return asdict(self)


def ball(radius_mm: float, spacing) -> np.ndarray:
    """Ellipsoidal structuring element covering ``radius_mm`` at the given (x, y, z) spacing."""
    sx, sy, sz = spacing
    rz, ry, rx = (int(np.floor(radius_mm / s)) for s in (sz, sy, sx))
    z, y, x = np.ogrid[-rz:rz + 1, -ry:ry + 1, -rx:rx + 1]
    return (x * sx) ** 2 + (y * sy) ** 2 + (z * sz) ** 2 <= radius_mm ** 2 + 1e-9


def candidate_components(vol: Volume, cfg: LungSegConfig) -> np.ndarray:
    """Thresholded air components that are large and do not touch the border."""
    air = vol.data < cfg.air_threshold
    labels, n = ndimage.label(air, structure=_FACE)
    if n == 0:
        return np.zeros_like(air)
    border = np.zeros(n + 1, dtype=bool)
    for axis in range(3):
        for idx in (0, -1):
            border[np.unique(np.take(labels, idx, axis=axis))] = True
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    min_voxels = cfg.min_component_volume / vol.grid.voxel_volume
    keep = (~border) & (counts >= min_voxels)
    keep[0] = False
    return keep[labels]


def segment_lung(vol: Volume, cfg: Optional[LungSegConfig] = None) -> Mask:
    cfg = cfg or LungSegConfig()
    if vol.unit != "HU":
        raise ValidationError("segment_lung expects a volume in HU")
    mask = candidate_components(vol, cfg)
    if not mask.any():
        raise LungNotFoundError("no lung found: no interior air component passes the size filter")
    if cfg.closing_radius > 0:
        se = ball(cfg.closing_radius, vol.grid.spacing)
        pad = [(r, r) for r in (np.array(se.shape) // 2)]
        padded = np.pad(mask, pad)
        closed = ndimage.binary_closing(padded, structure=se)
        mask = closed[tuple(slice(p[0], p[0] + n) for p, n in zip(pad, mask.shape))]
    if cfg.fill_holes:
        for k in range(mask.shape[0]):
            mask[k] = ndimage.binary_fill_holes(mask[k])
    return Mask(mask, vol.grid)


def apply_lung_mask(vol: Volume, lung: Mask, fill: float = -1000.0) -> Volume:
    check_same_grid(vol, lung, what="apply_lung_mask inputs")
    return vol.with_data(np.where(lung.data, vol.data, np.float32(fill)))


def ingest_mask(path, grid: GridMeta, report: Optional[dict] = None) -> Mask:
    """Load an externally produced mask and bring it onto ``grid`` (nearest neighbour).

    Any nonzero value counts as foreground. An empty mask triggers a warning
    that is also appended to ``report["warnings"]`` when a report is passed.
    """
    m = load_mask(path)
    if not m.grid.same_as(grid):
        if not np.allclose(m.grid.spacing, grid.spacing):
            m = resample(m, grid.spacing, mode="nearest")
        m = _regrid(m, grid)
    if m.count == 0:
        msg = f"mask {path} is empty"
        warnings.warn(msg)
        log.warning(msg)
        if report is not None:
            report.setdefault("warnings", []).append(msg)
    return m


def _regrid(m: Mask, grid: GridMeta) -> Mask:
    """Nearest-neighbour placement of a mask onto a grid with the same spacing."""
    if m.grid.same_as(grid):
        return m
    idx = [np.arange(n) for n in grid.dims]
    out = np.zeros(grid.shape, dtype=bool)
    # map target voxel centres to source indices per axis (axis-aligned grids)
    src = []
    for a in range(3):
        world = grid.origin[a] + idx[a] * grid.spacing[a]
        src.append(np.rint((world - m.grid.origin[a]) / m.grid.spacing[a]).astype(np.int64))
    sx, sy, sz = src
    vx = (sx >= 0) & (sx < m.grid.dims[0])
    vy = (sy >= 0) & (sy < m.grid.dims[1])
    vz = (sz >= 0) & (sz < m.grid.dims[2])
    sub = m.data[np.ix_(sz[vz], sy[vy], sx[vx])]
    out[np.ix_(np.flatnonzero(vz), np.flatnonzero(vy), np.flatnonzero(vx))] = sub
    return Mask(out, grid)
