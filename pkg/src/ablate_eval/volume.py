"""Volume, mask and displacement-field data model plus the preprocessing chain.

Arrays are stored C-ordered with shape ``(nz, ny, nx)`` (x fastest), while all
grid metadata (dims, spacing, origin) and world points are given in ``(x, y, z)``
order. World axes are aligned with voxel axes: voxel ``(i, j, k)`` sits at
``origin + spacing * (i, j, k)`` mm.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import GridMismatchError, ValidationError

Unit = Literal["HU", "normalized"]
UNITS = ("HU", "normalized")

# Default CT display/normalization window in HU.
DEFAULT_WINDOW = (-1000.0, 400.0)

# Continuous indices this far outside [0, n-1] still count as inside the grid.
_EDGE_TOL = 1e-3


def _triple(values, cast, name):
    try:
        out = tuple(cast(v) for v in values)
    except TypeError as exc:
        raise ValidationError(f"{name} must be a 3-sequence") from exc
    if len(out) != 3:
        raise ValidationError(f"{name} must have 3 components, got {len(out)}")
    return out


@dataclass(frozen=True)
class GridMeta:
    dims: tuple  # (nx, ny, nz)
    spacing: tuple = (1.0, 1.0, 1.0)  # mm per voxel
    origin: tuple = (0.0, 0.0, 0.0)  # mm

    def __post_init__(self):
        dims = _triple(self.dims, int, "dims")
        spacing = _triple(self.spacing, float, "spacing")
        origin = _triple(self.origin, float, "origin")
        if min(dims) < 1:
            raise ValidationError(f"dims must be >= 1, got {dims}")
        if not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValidationError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple:
        """Array shape ``(nz, ny, nx)``."""
        return self.dims[::-1]

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        """Volume of one voxel in mm^3."""
        return float(np.prod(self.spacing))

    @property
    def center(self) -> np.ndarray:
        """Geometric center of the voxel-center lattice, in mm."""
        return np.asarray(self.origin) + 0.5 * (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def axes_mm(self):
        """World coordinates of voxel centers along x, y and z."""
        return tuple(o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.dims))

    def world_to_index(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def index_to_world(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=np.float64)
        return idx * np.asarray(self.spacing) + np.asarray(self.origin)

    def same_as(self, other: "GridMeta", atol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=atol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=atol)
        )

    def to_json(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing), "origin": list(self.origin)}

    @classmethod
    def from_json(cls, d: dict) -> "GridMeta":
        return cls(d["dims"], d["spacing"], d.get("origin", (0.0, 0.0, 0.0)))


def _frozen(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar CT volume. ``data`` is float32 with shape ``grid.shape``."""

    data: np.ndarray
    grid: GridMeta
    unit: str = "HU"

    def __post_init__(self):
        if self.unit not in UNITS:
            raise ValidationError(f"unit must be one of {UNITS}, got {self.unit!r}")
        arr = np.asarray(self.data)
        if arr.shape != self.grid.shape:
            raise ValidationError(f"data shape {arr.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "data", _frozen(np.ascontiguousarray(arr, dtype=np.float32)))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), unit="HU"):
        data = np.asarray(data)
        return cls(data, GridMeta(data.shape[::-1], spacing, origin), unit)

    def with_data(self, data, unit: Optional[str] = None) -> "Volume":
        return Volume(data, self.grid, self.unit if unit is None else unit)

    def equals(self, other: "Volume") -> bool:
        return (
            self.unit == other.unit
            and self.grid == other.grid
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary mask; ``data`` is a bool array with shape ``grid.shape``."""

    data: np.ndarray
    grid: GridMeta

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.shape != self.grid.shape:
            raise ValidationError(f"mask shape {arr.shape} does not match grid {self.grid.shape}")
        if arr.dtype != bool:
            if not np.isin(arr, (0, 1)).all():
                raise ValidationError("mask values must be 0 or 1")
            arr = arr.astype(bool)
        object.__setattr__(self, "data", _frozen(np.ascontiguousarray(arr)))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        data = np.asarray(data)
        return cls(data, GridMeta(data.shape[::-1], spacing, origin))

    @classmethod
    def empty(cls, grid: GridMeta) -> "Mask":
        return cls(np.zeros(grid.shape, dtype=bool), grid)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    @property
    def volume_mm3(self) -> float:
        return self.count * self.grid.voxel_volume

    def equals(self, other: "Mask") -> bool:
        return self.grid == other.grid and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Dense displacement field in mm; ``data`` has shape ``grid.shape + (3,)``
    with components ordered (ux, uy, uz)."""

    data: np.ndarray
    grid: GridMeta
    units: str = field(default="mm")

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.shape != self.grid.shape + (3,):
            raise ValidationError(f"field shape {arr.shape} does not match grid {self.grid.shape + (3,)}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise ValidationError("displacement field contains non-finite values")
        object.__setattr__(self, "data", _frozen(arr))

    @classmethod
    def zeros(cls, grid: GridMeta) -> "DisplacementField":
        return cls(np.zeros(grid.shape + (3,), dtype=np.float32), grid)

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.data.astype(np.float64) ** 2, axis=-1))


def check_same_grid(*items, what: str = "inputs") -> GridMeta:
    grids = [it.grid if hasattr(it, "grid") else it for it in items if it is not None]
    first = grids[0]
    for g in grids[1:]:
        if not first.same_as(g):
            raise GridMismatchError(f"{what} are on different grids: {first} vs {g}")
    return first


# ----------------------------------------------------------------------------
# Sampling


def sample_index(data: np.ndarray, coords_zyx: np.ndarray, order: int = 1, oob=None) -> np.ndarray:
    """Interpolate ``data`` at continuous array indices.

    Args:
        data: array of shape (nz, ny, nx).
        coords_zyx: array of shape (3, ...) holding (z, y, x) indices.
        order: 1 for trilinear, 0 for nearest neighbour.
        oob: value for points outside the voxel-center lattice; ``None`` clamps
            to the nearest edge voxel instead.
    """
    coords = np.asarray(coords_zyx, dtype=np.float64)
    out = ndimage.map_coordinates(
        data, coords, order=order, mode="nearest", prefilter=False,
        output=np.float64 if order == 1 else None,
    )
    if oob is not None:
        outside = np.zeros(coords.shape[1:], dtype=bool)
        for axis, n in enumerate(data.shape):
            c = coords[axis]
            outside |= (c < -_EDGE_TOL) | (c > n - 1 + _EDGE_TOL)
        out = np.where(outside, oob, out)
    return out


def sample_trilinear(vol: Volume, point, oob: Optional[float] = None) -> float | np.ndarray:
    """Trilinear value of ``vol`` at world point(s) ``point`` (mm, x-y-z order).

    Points outside the grid take ``oob`` (default: the volume minimum).
    """
    pts = np.asarray(point, dtype=np.float64)
    idx = vol.grid.world_to_index(pts)
    coords = np.moveaxis(idx[..., ::-1], -1, 0)
    if coords.ndim == 1:
        coords = coords[:, None]
    fill = float(vol.data.min()) if oob is None else oob
    vals = sample_index(vol.data, coords, order=1, oob=fill)
    return float(vals[0]) if pts.ndim == 1 else vals.reshape(pts.shape[:-1])


# ----------------------------------------------------------------------------
# Preprocessing


def resample(vol, target_spacing: Sequence[float], mode: str = "trilinear"):
    """Resample a Volume or Mask to ``target_spacing`` keeping the origin.

    Output dims are ``round(extent / target_spacing)`` (at least 1), where the
    extent is ``dims * spacing``. Samples beyond the last input voxel center
    are clamped to the edge voxel.
    """
    if mode not in ("trilinear", "nearest"):
        raise ValidationError(f"unknown interpolation mode {mode!r}")
    target = _triple(target_spacing, float, "target_spacing")
    if min(target) <= 0:
        raise ValidationError("target_spacing must be positive")
    grid = vol.grid
    if np.allclose(target, grid.spacing, rtol=0, atol=1e-12):
        return vol
    dims = tuple(
        max(1, int(round(n * s / t))) for n, s, t in zip(grid.dims, grid.spacing, target)
    )
    new_grid = GridMeta(dims, target, grid.origin)
    axes = [np.arange(n) * t / s for n, s, t in zip(dims, grid.spacing, target)]
    coords = np.stack(np.meshgrid(axes[2], axes[1], axes[0], indexing="ij"))
    if isinstance(vol, Mask):
        out = sample_index(vol.data.astype(np.uint8), coords, order=0)
        return Mask(out.astype(bool), new_grid)
    order = 1 if mode == "trilinear" else 0
    out = sample_index(vol.data, coords, order=order)
    return Volume(out, new_grid, vol.unit)


def _crop_pad_slices(n: int, target: int):
    """Return (src_slice, dst_slice, shift) for centered crop/pad along one axis.

    ``shift`` is the index in the input of output voxel 0.
    """
    diff = target - n
    if diff >= 0:
        before = diff // 2
        return slice(0, n), slice(before, before + n), -before
    start = (-diff) // 2
    return slice(start, start + target), slice(0, target), start


def crop_or_pad(vol, target_dims: Sequence[int], fill: float = -1000.0):
    """Center ``vol`` in a grid of ``target_dims`` voxels.

    The excess is split floor/ceil (floor before, ceil after). Padded voxels take
    ``fill``; the origin moves so retained voxels keep their world position.
    Works for both Volume and Mask (masks pad with 0).
    """
    dims = _triple(target_dims, int, "target_dims")
    if min(dims) < 1:
        raise ValidationError("target_dims must be >= 1")
    grid = vol.grid
    src, dst, shifts = [], [], []
    for n, t in zip(grid.dims, dims):
        s, d, shift = _crop_pad_slices(n, t)
        src.append(s)
        dst.append(d)
        shifts.append(shift)
    origin = tuple(o + sh * sp for o, sh, sp in zip(grid.origin, shifts, grid.spacing))
    new_grid = GridMeta(dims, grid.spacing, origin)
    is_mask = isinstance(vol, Mask)
    out = np.zeros(new_grid.shape, dtype=bool) if is_mask else np.full(new_grid.shape, fill, dtype=np.float32)
    out[tuple(dst[::-1])] = vol.data[tuple(src[::-1])]
    return Mask(out, new_grid) if is_mask else Volume(out, new_grid, vol.unit)


def normalize(vol: Volume, window: Optional[Sequence[float]] = None) -> Volume:
    """Map intensities to [0, 1].

    With ``window=(lo, hi)`` values are clamped linearly; without a window the
    volume's own min/max is used and a constant volume maps to all zeros.
    """
    data = vol.data.astype(np.float64)
    if window is not None:
        lo, hi = float(window[0]), float(window[1])
        if not lo < hi:
            raise ValidationError(f"window must satisfy low < high, got {window}")
    else:
        lo, hi = float(data.min()), float(data.max())
        if hi <= lo:
            return vol.with_data(np.zeros_like(data), unit="normalized")
    out = np.clip((data - lo) / (hi - lo), 0.0, 1.0)
    return vol.with_data(out, unit="normalized")


def denormalize(vol: Volume, window: Sequence[float]) -> Volume:
    """Inverse of a windowed :func:`normalize` (values inside the window)."""
    lo, hi = float(window[0]), float(window[1])
    return vol.with_data(vol.data.astype(np.float64) * (hi - lo) + lo, unit="HU")
