"""Rigid alignment of the masked preoperative lung onto the postoperative lung.

A :class:`RigidTransform` maps moving-image world coordinates onto fixed-image
world coordinates, ``T(x) = R (x - c) + c + t``. Resampling uses pull
semantics: ``apply_rigid(moving, T)`` evaluates ``moving(T^-1(x))`` at every
fixed-grid voxel ``x``, so the transform returned by :func:`register_rigid`
can be applied directly to the moving image.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import NumericalError, ValidationError
from .volume import GridMeta, Mask, Volume, check_same_grid, sample_index

log = logging.getLogger(__name__)

# z-slices processed per chunk when resampling, bounds peak memory
_CHUNK = 16


def euler_to_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    """Rotation ``Rz(az) @ Ry(ay) @ Rx(ax)`` (radians)."""
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def matrix_to_euler(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_to_matrix` away from gimbal lock."""
    ay = math.asin(-max(-1.0, min(1.0, r[2, 0])))
    ax = math.atan2(r[2, 1], r[2, 2])
    az = math.atan2(r[1, 0], r[0, 0])
    return np.array([ax, ay, az])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.abs(r.T @ r - np.eye(3)).max() >= 1e-6 or abs(np.linalg.det(r) - 1) > 1e-6:
            raise ValidationError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), center)

    @classmethod
    def from_pose(cls, pose, center) -> "RigidTransform":
        """Build from ``(ax, ay, az, tx, ty, tz)``; angles in radians, t in mm."""
        pose = np.asarray(pose, dtype=np.float64)
        return cls(euler_to_matrix(*pose[:3]), pose[3:], center)

    @property
    def pose(self) -> np.ndarray:
        return np.concatenate([matrix_to_euler(self.rotation), self.translation])

    @property
    def angle_deg(self) -> float:
        """Total rotation angle in degrees."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return math.degrees(math.acos(max(-1.0, min(1.0, c))))

    def __call__(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.center) @ self.rotation.T + self.center + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation, self.center)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other`` (apply ``other`` first), expressed about ``self.center``."""
        r = self.rotation @ other.rotation
        # T(x) = R (x - c) + c + t  <=>  T(x) = R x + (c + t - R c)
        off_self = self.center + self.translation - self.rotation @ self.center
        off_other = other.center + other.translation - other.rotation @ other.center
        off = self.rotation @ off_other + off_self
        c = self.center
        return RigidTransform(r, off - c + r @ c, c)

    def is_identity(self) -> bool:
        return np.array_equal(self.rotation, np.eye(3)) and not np.any(self.translation)

    def to_json(self) -> dict:
        d = {
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
            "center": [float(v) for v in self.center],
        }
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RigidTransform":
        return cls(np.reshape(d["rotation"], (3, 3)), d["translation"], d["center"], d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "RigidTransform":
        return cls.from_json(json.loads(Path(path).read_text()))


def pull_resample(data: np.ndarray, src_grid: GridMeta, out_grid: GridMeta, mapping=None,
                  order: int = 1, oob: Optional[float] = None,
                  offsets: Optional[np.ndarray] = None) -> np.ndarray:
    """Evaluate ``data`` (on ``src_grid``) at ``mapping(x + offsets(x))`` for every
    voxel ``x`` of ``out_grid``.

    ``offsets`` is an optional displacement array (mm) of shape
    ``out_grid.shape + (3,)``; ``mapping`` receives world points of shape
    (nz_chunk, ny, nx, 3) and returns source world points of the same shape.
    """
    xs, ys, zs = out_grid.axes_mm()
    out = np.empty(out_grid.shape, dtype=np.float64 if order == 1 else data.dtype)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    for z0 in range(0, len(zs), _CHUNK):
        zc = zs[z0:z0 + _CHUNK]
        pts = np.empty((len(zc),) + yy.shape + (3,))
        pts[..., 0] = xx
        pts[..., 1] = yy
        pts[..., 2] = zc[:, None, None]
        if offsets is not None:
            pts += offsets[z0:z0 + _CHUNK]
        if mapping is not None:
            pts = mapping(pts)
        src = src_grid.world_to_index(pts)
        coords = np.moveaxis(src[..., ::-1], -1, 0)
        out[z0:z0 + _CHUNK] = sample_index(data, coords, order=order, oob=oob)
    return out


def apply_rigid(vol, T: RigidTransform, mode: str = "trilinear", oob: Optional[float] = None):
    """Resample ``vol`` (Volume or Mask) through ``T`` onto its own grid.

    Output voxel ``x`` takes the value at ``T^-1(x)``. Outside the grid the
    volume minimum (masks: 0) is used unless ``oob`` is given.
    """
    if T.is_identity():
        return vol
    inv = T.inverse()
    if isinstance(vol, Mask):
        out = pull_resample(vol.data.astype(np.uint8), vol.grid, vol.grid, inv, order=0, oob=0)
        return Mask(out.astype(bool), vol.grid)
    order = 1 if mode == "trilinear" else 0
    fill = float(vol.data.min()) if oob is None else oob
    return vol.with_data(pull_resample(vol.data, vol.grid, vol.grid, inv, order=order, oob=fill))


# ----------------------------------------------------------------------------
# Similarity


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, (Volume, Mask)) else np.asarray(x)


def ncc(a, b, region=None) -> float:
    """Normalized cross-correlation of two images, optionally inside ``region``.

    Returns 0 when either image has zero variance over the region.
    """
    if isinstance(a, Volume) and isinstance(b, Volume):
        check_same_grid(a, b, region if isinstance(region, Mask) else None, what="ncc inputs")
    x = _as_array(a).astype(np.float64)
    y = _as_array(b).astype(np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch {x.shape} vs {y.shape}")
    if region is not None:
        m = _as_array(region).astype(bool)
        if not m.any():
            raise ValidationError("ncc region is empty")
        x, y = x[m], y[m]
    else:
        x, y = x.ravel(), y.ravel()
    x = x - x.mean()
    y = y - y.mean()
    sxx = float(np.dot(x, x))
    syy = float(np.dot(y, y))
    if sxx <= 0.0 or syy <= 0.0:
        return 0.0
    r = float(np.dot(x, y)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# ----------------------------------------------------------------------------
# Registration


@dataclass
class RigidRegConfig:
    pyramid_levels: int = 3
    max_iters_per_level: int = 100
    init_step_rot: float = 0.05  # radians
    init_step_trans: float = 4.0  # mm
    step_shrink: float = 0.5
    converge_tol: float = 1e-5
    min_step_rot: float = 5e-4
    min_step_trans: float = 0.05

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValidationError("pyramid_levels must be >= 1")
        for name in ("max_iters_per_level", "init_step_rot", "init_step_trans", "converge_tol",
                     "min_step_rot", "min_step_trans"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if not 0 < self.step_shrink < 1:
            raise ValidationError("step_shrink must lie in (0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


def downsample(data: np.ndarray, grid: GridMeta, is_mask: bool = False):
    """3x3x3 box smoothing followed by keeping every second voxel."""
    if is_mask:
        sm = ndimage.maximum_filter(data.astype(np.uint8), size=3, mode="nearest") > 0
    else:
        sm = ndimage.uniform_filter(data.astype(np.float64), size=3, mode="nearest")
    out = sm[::2, ::2, ::2]
    new_grid = GridMeta(out.shape[::-1], tuple(2 * s for s in grid.spacing), grid.origin)
    return np.ascontiguousarray(out), new_grid


def register_rigid(moving: Volume, fixed: Volume, cfg: Optional[RigidRegConfig] = None,
                   region: Optional[Mask] = None) -> RigidTransform:
    """Find the rigid transform maximizing NCC between warped ``moving`` and ``fixed``.

    Coarse-to-fine pyramid with derivative-free coordinate descent over three
    Euler angles about the fixed-grid center and a translation. ``region``
    restricts the similarity to a mask on the fixed grid (the pipeline passes the
    union of both lung masks). The best pose seen is returned; its full
    resolution NCC is never below that of the identity pose.
    """
    cfg = cfg or RigidRegConfig()
    grid = check_same_grid(moving, fixed, region, what="rigid registration inputs")
    mv = moving.data.astype(np.float64)
    fx = fixed.data.astype(np.float64)
    if np.ptp(mv) == 0 or np.ptp(fx) == 0:
        raise NumericalError("rigid registration needs non-constant images")
    center = grid.center

    pyramid = [(mv, fx, None if region is None else region.data, grid)]
    for _ in range(cfg.pyramid_levels - 1):
        m, f, r, g = pyramid[-1]
        if min(g.dims) < 8:
            break
        m2, g2 = downsample(m, g)
        f2, _ = downsample(f, g)
        r2 = None if r is None else downsample(r, g, is_mask=True)[0]
        pyramid.append((m2, f2, r2, g2))

    def objective(level, pose):
        m, f, r, g = pyramid[level]
        T = RigidTransform.from_pose(pose, center)
        warped = pull_resample(m, g, g, T.inverse(), order=1, oob=float(m.min()))
        val = ncc(warped, f, r)
        if not math.isfinite(val):
            raise NumericalError("non-finite similarity during rigid registration")
        return val

    pose = np.zeros(6)
    history = []
    n_levels = len(pyramid)
    for level in range(n_levels - 1, -1, -1):
        scale = cfg.step_shrink ** (n_levels - 1 - level)
        steps = np.array([cfg.init_step_rot] * 3 + [cfg.init_step_trans] * 3) * scale
        best = objective(level, pose)
        n_eval = 1
        for _ in range(cfg.max_iters_per_level):
            start = best
            for i in range(6):
                for sign in (1.0, -1.0):
                    cand = pose.copy()
                    cand[i] += sign * steps[i]
                    val = objective(level, cand)
                    n_eval += 1
                    if val > best:
                        best, pose = val, cand
                        break
            if best - start < cfg.converge_tol:
                steps *= cfg.step_shrink
                if steps[0] < cfg.min_step_rot and steps[3] < cfg.min_step_trans:
                    break
        history.append({"level": level, "spacing": list(pyramid[level][3].spacing),
                        "ncc": best, "evaluations": n_eval})
        log.debug("rigid level %d: ncc=%.6f after %d evaluations", level, best, n_eval)

    final = objective(0, pose)
    ident = objective(0, np.zeros(6))
    if ident >= final:
        pose, final = np.zeros(6), ident
    T = RigidTransform.from_pose(pose, center)
    meta = {"ncc": final, "ncc_identity": ident, "levels": history,
            "region": "mask" if region is not None else "full volume"}
    return RigidTransform(T.rotation, T.translation, T.center, meta)
