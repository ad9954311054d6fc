"""Deterministic synthetic chest CT phantoms.

A phantom is an axis-aligned body cylinder (running along z) holding two
ellipsoidal lungs with parenchymal texture, a few soft-edged vessel tubes and
an optional spherical tumor. Geometry scales with the physical extent of the
grid so the same config works at 96^3 test size and 256^3 demo size.

All randomness is drawn through :mod:`ablate_eval._rng`, keyed by seed, stream
and voxel index.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import _rng
from .errors import ValidationError
from .rigid import RigidTransform, apply_rigid
from .volume import DisplacementField, GridMeta, Mask, Volume
from .warp import apply_field

# rng streams
_S_LUNG_NOISE = 1
_S_BODY_NOISE = 2
_S_TEXTURE = 3
_S_VESSEL = 4
_S_ABLATION_NOISE = 5


@dataclass
class PhantomConfig:
    seed: int = 0
    dims: tuple = (96, 96, 96)
    spacing: tuple = (1.25, 1.25, 1.25)
    origin: tuple = (0.0, 0.0, 0.0)
    exterior_hu: float = -1000.0
    body_hu: float = 0.0
    body_noise: float = 20.0
    lung_hu: float = -800.0
    lung_noise: float = 30.0  # uniform half-width, HU
    texture_amplitude: float = 40.0  # std of the smooth parenchymal texture, HU
    texture_sigma_mm: float = 2.5
    vessels_per_lung: int = 4
    vessel_radius_mm: float = 1.5
    vessel_hu: float = 50.0
    tumor: bool = True
    tumor_center: Optional[tuple] = None  # mm; default: centre of the right lung
    tumor_radius_mm: float = 10.0
    tumor_hu: float = 30.0

    def __post_init__(self):
        if self.tumor_radius_mm <= 0 or self.vessel_radius_mm <= 0 or self.texture_sigma_mm <= 0:
            raise ValidationError("phantom radii must be positive")
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if self.tumor_center is not None:
            self.tumor_center = tuple(float(c) for c in self.tumor_center)

    @property
    def grid(self) -> GridMeta:
        return GridMeta(self.dims, self.spacing, self.origin)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Anatomy:
    """Analytic shapes of a phantom, in world mm."""

    body_center: np.ndarray  # (x, y)
    body_radius: float
    lung_centers: tuple
    lung_semi_axes: np.ndarray
    tumor_center: np.ndarray
    tumor_radius: float

    @property
    def lung_minor_axis(self) -> float:
        return 2.0 * float(self.lung_semi_axes.min())


def anatomy(cfg: PhantomConfig) -> Anatomy:
    grid = cfg.grid
    extent = np.asarray(grid.dims) * np.asarray(grid.spacing)
    c = grid.center
    semi = np.array([0.16, 0.27, 0.38]) * extent
    dx = 0.2 * extent[0]
    lungs = (c + np.array([dx, 0.0, 0.0]), c - np.array([dx, 0.0, 0.0]))
    tumor_c = np.asarray(cfg.tumor_center if cfg.tumor_center is not None else lungs[0], dtype=np.float64)
    return Anatomy(c[:2], 0.46 * min(extent[0], extent[1]), lungs, semi, tumor_c, cfg.tumor_radius_mm)


def _coords(grid: GridMeta):
    xs, ys, zs = grid.axes_mm()
    return xs[None, None, :], ys[None, :, None], zs[:, None, None]


def _ellipsoid(grid, center, semi) -> np.ndarray:
    x, y, z = _coords(grid)
    return (((x - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2
            + ((z - center[2]) / semi[2]) ** 2) <= 1.0


def _sphere_dist(grid, center) -> np.ndarray:
    x, y, z = _coords(grid)
    return np.sqrt((x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2)


def _sphere_inside_ellipsoid(center, radius, e_center, semi, n: int = 2000) -> bool:
    # golden-spiral directions
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5 ** 0.5) * k
    d = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    pts = center + radius * d
    return bool(np.all((((pts - e_center) / semi) ** 2).sum(axis=1) <= 1.0))


def _voxel_index(grid: GridMeta) -> np.ndarray:
    return np.arange(grid.size, dtype=np.uint64).reshape(grid.shape)


def _segment_distance(grid, a, b, lo, hi) -> np.ndarray:
    """Distance from voxel centers inside the index box [lo, hi) to segment ab."""
    xs, ys, zs = grid.axes_mm()
    x = xs[lo[0]:hi[0]][None, None, :]
    y = ys[lo[1]:hi[1]][None, :, None]
    z = zs[lo[2]:hi[2]][:, None, None]
    ab = b - a
    denom = float(ab @ ab)
    t = ((x - a[0]) * ab[0] + (y - a[1]) * ab[1] + (z - a[2]) * ab[2]) / denom
    t = np.clip(t, 0.0, 1.0)
    return np.sqrt((x - a[0] - t * ab[0]) ** 2 + (y - a[1] - t * ab[1]) ** 2 + (z - a[2] - t * ab[2]) ** 2)


def _vessel_endpoints(cfg: PhantomConfig, lung: int, vessel: int, center, semi):
    """Two points inside the lung (scaled unit-ball samples, rejection by counter)."""
    pts = []
    counter = (lung * 1000 + vessel) * 4096
    while len(pts) < 2:
        u = _rng.uniform(cfg.seed, _S_VESSEL, np.arange(counter, counter + 3)) * 2.0 - 1.0
        counter += 3
        if u @ u <= 1.0:
            pts.append(center + 0.75 * u * semi)
    return pts


def make_phantom(cfg: Optional[PhantomConfig] = None):
    """Generate ``(volume, lung_mask, tumor_mask)``.

    Masks are the analytic shapes evaluated at voxel centers; the tumor mask is
    empty when ``cfg.tumor`` is false.
    """
    cfg = cfg or PhantomConfig()
    grid = cfg.grid
    anat = anatomy(cfg)
    if cfg.tumor and not any(
        _sphere_inside_ellipsoid(anat.tumor_center, anat.tumor_radius, lc, anat.lung_semi_axes)
        for lc in anat.lung_centers
    ):
        raise ValidationError("tumor sphere must lie inside a lung")

    x, y, _ = _coords(grid)
    body = ((x - anat.body_center[0]) ** 2 + (y - anat.body_center[1]) ** 2) <= anat.body_radius ** 2
    body = np.broadcast_to(body, grid.shape)
    lung = np.zeros(grid.shape, dtype=bool)
    for lc in anat.lung_centers:
        lung |= _ellipsoid(grid, lc, anat.lung_semi_axes)

    idx = _voxel_index(grid)
    vol = np.full(grid.shape, cfg.exterior_hu, dtype=np.float64)
    body_noise = (2.0 * _rng.uniform(cfg.seed, _S_BODY_NOISE, idx) - 1.0) * cfg.body_noise
    vol[body] = cfg.body_hu + body_noise[body]

    tex = 2.0 * _rng.uniform(cfg.seed, _S_TEXTURE, idx) - 1.0
    sigma_vox = [cfg.texture_sigma_mm / s for s in grid.spacing[::-1]]
    tex = ndimage.gaussian_filter(tex, sigma_vox, mode="wrap")
    tex *= cfg.texture_amplitude / max(tex.std(), 1e-12)
    lung_noise = (2.0 * _rng.uniform(cfg.seed, _S_LUNG_NOISE, idx) - 1.0) * cfg.lung_noise
    parenchyma = cfg.lung_hu + tex + lung_noise
    vol[lung] = parenchyma[lung]

    # soft-edged vessel tubes, one voxel of partial-volume ramp
    ramp = min(grid.spacing)
    for li, lc in enumerate(anat.lung_centers):
        for vi in range(cfg.vessels_per_lung):
            a, b = _vessel_endpoints(cfg, li, vi, lc, anat.lung_semi_axes)
            pad = cfg.vessel_radius_mm + ramp
            lo_mm = np.minimum(a, b) - pad
            hi_mm = np.maximum(a, b) + pad
            lo = np.clip(np.floor(grid.world_to_index(lo_mm)).astype(int), 0, grid.dims)
            hi = np.clip(np.ceil(grid.world_to_index(hi_mm)).astype(int) + 1, 0, grid.dims)
            d = _segment_distance(grid, a, b, lo, hi)
            w = np.clip(0.5 + (cfg.vessel_radius_mm - d) / ramp, 0.0, 1.0)
            box = (slice(lo[2], hi[2]), slice(lo[1], hi[1]), slice(lo[0], hi[0]))
            sub = vol[box]
            inside = lung[box] & (w > 0)
            sub[inside] = (1.0 - w[inside]) * sub[inside] + w[inside] * cfg.vessel_hu

    if cfg.tumor:
        tumor = _sphere_dist(grid, anat.tumor_center) <= anat.tumor_radius
        vol[tumor] = cfg.tumor_hu + 0.5 * body_noise[tumor]
    else:
        tumor = np.zeros(grid.shape, dtype=bool)

    return Volume(vol, grid, "HU"), Mask(lung, grid), Mask(tumor, grid)


# ----------------------------------------------------------------------------
# Synthetic deformations


@dataclass
class SyntheticField:
    """Sum of Gaussian bumps ``u(x) = sum_k peak_k * exp(-|x - c_k|^2 / (2 sigma_k^2))``."""

    centers: list = field(default_factory=list)  # mm
    peaks: list = field(default_factory=list)  # mm vectors
    sigmas: list = field(default_factory=list)  # mm

    def __post_init__(self):
        if not (len(self.centers) == len(self.peaks) == len(self.sigmas)):
            raise ValidationError("centers, peaks and sigmas must have equal length")
        if any(s <= 0 for s in self.sigmas):
            raise ValidationError("bump sigmas must be positive")

    def evaluate(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        out = np.zeros(p.shape)
        for c, pk, s in zip(self.centers, self.peaks, self.sigmas):
            r2 = np.sum((p - np.asarray(c)) ** 2, axis=-1)
            out += np.exp(-r2 / (2.0 * s * s))[..., None] * np.asarray(pk)
        return out

    def dense(self, grid: GridMeta) -> DisplacementField:
        xs, ys, zs = grid.axes_mm()
        zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
        return DisplacementField(self.evaluate(np.stack([xx, yy, zz], axis=-1)), grid)

    def max_magnitude(self, grid: GridMeta) -> float:
        return float(self.dense(grid).magnitude().max())

    def to_json(self) -> dict:
        return {"centers": [list(map(float, c)) for c in self.centers],
                "peaks": [list(map(float, p)) for p in self.peaks],
                "sigmas": [float(s) for s in self.sigmas]}


def respiratory_field(cfg: PhantomConfig, peak_mm: float = 8.0, sigma_frac: float = 0.22,
                      lateral: float = 0.3) -> SyntheticField:
    """One bump per lung with a dominant superior-inferior (z) component.

    Peaks are scaled so the largest displacement magnitude on the phantom grid
    equals ``peak_mm``.
    """
    anat = anatomy(cfg)
    extent = np.asarray(cfg.dims) * np.asarray(cfg.spacing)
    sigma = sigma_frac * float(extent.min())
    d = np.array([lateral, 0.5 * lateral, 1.0])
    d /= np.linalg.norm(d)
    centers, peaks = [], []
    for i, lc in enumerate(anat.lung_centers):
        sign = 1.0 if i == 0 else -1.0
        centers.append(lc + np.array([0.0, 0.0, 0.15 * anat.lung_semi_axes[2]]))
        peaks.append(d * np.array([sign, 1.0, 1.0]))
    unit = SyntheticField(centers, peaks, [sigma, sigma])
    scale = peak_mm / unit.max_magnitude(cfg.grid)
    return SyntheticField(centers, [p * scale for p in peaks], [sigma, sigma])


def apply_synthetic_field(vol, f: SyntheticField, cfg: Optional[PhantomConfig] = None):
    """Deform ``vol`` by pull sampling ``out(x) = vol(x + u(x))``.

    Returns the deformed Volume (or Mask) and the dense ground-truth field on the
    volume's grid. When ``cfg`` is given the field magnitude is checked against
    0.4 x the lung minor axis.
    """
    dense = f.dense(vol.grid)
    if cfg is not None:
        limit = 0.4 * anatomy(cfg).lung_minor_axis
        if float(dense.magnitude().max()) >= limit:
            raise ValidationError(f"synthetic field magnitude must stay below {limit:.2f} mm")
    return apply_field(vol, dense), dense


def simulate_ablation(vol: Volume, tumor: Mask, zone_radius: float, offset_mm: Sequence[float] = (0.0, 0.0, 0.0),
                      ablation_hu: float = -150.0, noise: float = 20.0, blend_mm: float = 2.0,
                      seed: int = 0, center: Optional[Sequence[float]] = None):
    """Replace a sphere with ablation-zone tissue.

    The sphere is centred on the tumor centroid plus ``offset_mm`` (or on
    ``center``). Inside it voxels take ``ablation_hu`` plus uniform noise; a
    linear blend over ``blend_mm`` outside the sphere joins it to the
    surrounding tissue. The treatment mask is the analytic sphere.
    """
    if zone_radius <= 0:
        raise ValidationError("zone_radius must be positive")
    grid = vol.grid
    if center is None:
        if tumor.count == 0:
            raise ValidationError("tumor mask is empty; pass an explicit center")
        com = np.array(ndimage.center_of_mass(tumor.data))[::-1]
        center = grid.index_to_world(com) + np.asarray(offset_mm, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    d = _sphere_dist(grid, center)
    zone = d <= zone_radius
    w = np.clip((zone_radius + blend_mm - d) / blend_mm, 0.0, 1.0) if blend_mm > 0 else zone.astype(float)
    w[zone] = 1.0
    n = (2.0 * _rng.uniform(seed, _S_ABLATION_NOISE, _voxel_index(grid)) - 1.0) * noise
    data = vol.data.astype(np.float64)
    out = (1.0 - w) * data + w * (ablation_hu + n)
    return vol.with_data(out), Mask(zone, grid)


# ----------------------------------------------------------------------------
# Paired cases


@dataclass
class PhantomCase:
    """Pre/post phantom pair with ground truth.

    ``pre`` is the undeformed phantom moved by ``rigid_truth``; ``post`` is the
    phantom deformed by ``field_truth`` with an ablation zone. Registering pre
    onto post should recover ``rigid_truth.inverse()`` followed by
    ``field_truth``.
    """

    pre: Volume
    post: Volume
    pre_lung: Mask
    post_lung: Mask
    pre_tumor: Mask
    post_tumor: Mask  # ground-truth tumor position in the post frame
    treatment: Mask
    field_truth: DisplacementField
    rigid_truth: RigidTransform
    config: PhantomConfig


def make_case(cfg: Optional[PhantomConfig] = None, peak_mm: float = 8.0,
              rigid_pose: Sequence[float] = (0, 0, 0, 0, 0, 0), zone_radius: Optional[float] = None,
              zone_offset_mm: Sequence[float] = (0.0, 0.0, 0.0), ablation: bool = True) -> PhantomCase:
    cfg = cfg or PhantomConfig()
    vol, lung, tumor = make_phantom(cfg)
    sf = respiratory_field(cfg, peak_mm) if peak_mm > 0 else SyntheticField()
    post, dense = apply_synthetic_field(vol, sf, cfg)
    post_lung, _ = apply_synthetic_field(lung, sf)
    post_tumor, _ = apply_synthetic_field(tumor, sf)
    if ablation and tumor.count:
        radius = zone_radius if zone_radius is not None else cfg.tumor_radius_mm + 6.0
        post, treatment = simulate_ablation(post, post_tumor, radius, zone_offset_mm, seed=cfg.seed)
    else:
        treatment = Mask.empty(vol.grid)
    T = RigidTransform.from_pose(rigid_pose, vol.grid.center)
    pre = apply_rigid(vol, T, oob=cfg.exterior_hu)
    return PhantomCase(pre, post, apply_rigid(lung, T), post_lung, apply_rigid(tumor, T), post_tumor,
                       treatment, dense, T, cfg)
