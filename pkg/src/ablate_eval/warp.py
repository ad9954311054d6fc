"""Dense warping and composition of the rigid and deformable stages.

The composite is defined on the fixed grid: the output voxel at ``x`` is read
from the moving image at ``T1^-1(x + u(x))``, where ``u`` is the deformable
displacement field and ``T1`` the rigid transform. Everything is sampled in
one pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ValidationError
from .rigid import RigidTransform, pull_resample
from .volume import DisplacementField, Mask, Volume


@dataclass(frozen=True)
class CompositeTransform:
    rigid: RigidTransform
    field: DisplacementField

    def source_points(self, points: np.ndarray, displacement: np.ndarray) -> np.ndarray:
        return self.rigid.inverse()(points + displacement)


def apply_field(vol, field: DisplacementField, mode: str = "trilinear", oob: Optional[float] = None):
    """Pull ``vol`` through a displacement field: ``out(x) = vol(x + u(x))``.

    The output lives on ``field.grid``. Masks always use nearest neighbour.
    """
    return apply_composite(vol, CompositeTransform(RigidTransform.identity(), field), mode, oob)


def apply_composite(vol, T: CompositeTransform, mode: str = "trilinear", oob: Optional[float] = None):
    """Resample ``vol`` through rigid then deformable transform in a single pass."""
    if mode not in ("trilinear", "nearest"):
        raise ValidationError(f"unknown interpolation mode {mode!r}")
    field = T.field
    zero_field = not np.any(field.data)
    if T.rigid.is_identity() and zero_field and vol.grid == field.grid:
        return vol
    mapping = None if T.rigid.is_identity() else T.rigid.inverse()
    offsets = None if zero_field else field.data
    if isinstance(vol, Mask):
        out = pull_resample(vol.data.astype(np.uint8), vol.grid, field.grid, mapping,
                            order=0, oob=0, offsets=offsets)
        return Mask(out.astype(bool), field.grid)
    order = 1 if mode == "trilinear" else 0
    fill = float(vol.data.min()) if oob is None else oob
    out = pull_resample(vol.data, vol.grid, field.grid, mapping, order=order, oob=fill, offsets=offsets)
    return Volume(out, field.grid, vol.unit)


def warp_mask(mask: Mask, T: CompositeTransform) -> Mask:
    """Nearest-neighbour warp of a binary mask through ``T``."""
    return apply_composite(mask, T, mode="nearest")
