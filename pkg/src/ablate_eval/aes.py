"""Ablation Effectiveness Scale.

Regions: T is the (registered) tumor, B the observed treatment zone and A the
planned zone, T grown by a clinical margin. Coverage and excess ratios

    CR1 = |T & B| / |T|,  CR2 = |B & A| / |A|,  ER = |B \\ A| / |B|

feed a two-branch exponential score in (-1, 1): negative when the tumor is
under-covered (CR1 < lambda), non-negative otherwise.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volume import Mask, Volume, check_same_grid

CLASSES = ("under", "average", "over")


@dataclass(frozen=True)
class AESParams:
    alpha: float = 1.0
    beta: float = 2.0
    gamma: float = 0.5
    theta: float = 2.0
    lam: float = 0.75
    margin_mm: float = 5.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.theta, self.margin_mm) < 0:
            raise ValidationError("AES parameters must be non-negative")
        if not 0 < self.lam < 1:
            raise ValidationError("lambda must lie in (0, 1)")
        if not 5.0 <= self.margin_mm <= 10.0:
            raise ValidationError("margin_mm must lie in [5, 10] mm")

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AESParams":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass(frozen=True)
class RegionVolumes:
    """Voxel counts of the set-algebra regions and the voxel volume (mm^3)."""

    n_T: int
    n_B: int
    n_A: int
    n_TB: int
    n_BA: int
    n_B_minus_A: int
    voxel_volume: float

    def mm3(self) -> dict:
        v = self.voxel_volume
        return {
            "T": self.n_T * v, "B": self.n_B * v, "A": self.n_A * v,
            "T_and_B": self.n_TB * v, "B_and_A": self.n_BA * v, "B_minus_A": self.n_B_minus_A * v,
        }


SURFACE_SIGMA = 0.7  # voxels, smoothing before the sub-voxel boundary estimate
SURFACE_UPSAMPLE = 5  # odd, so coarse voxel centres land on fine voxel centres


def _surface_distance(T: np.ndarray, spacing_zyx, reach: float) -> np.ndarray:
    """Distance (mm) from each voxel centre to a smooth sub-voxel estimate of ``T``.

    The boundary is the 0.5 level set of the Gaussian-smoothed indicator,
    linearly interpolated onto a finer grid; the exact EDT is taken there and
    read back at the coarse voxel centres. Work is confined to the bounding box
    of ``T`` grown by ``reach`` mm. Voxels outside that box get ``inf``.
    """
    k = SURFACE_UPSAMPLE
    idx = np.argwhere(T)
    pad = np.ceil(reach / np.asarray(spacing_zyx)).astype(int) + 2
    lo = np.maximum(idx.min(axis=0) - pad, 0)
    hi = np.minimum(idx.max(axis=0) + pad + 1, T.shape)
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    smooth = ndimage.gaussian_filter(T[box].astype(np.float64), SURFACE_SIGMA, mode="constant")
    axes = [(np.arange(n * k) + 0.5) / k - 0.5 for n in smooth.shape]
    fine = ndimage.map_coordinates(smooth, np.meshgrid(*axes, indexing="ij"), order=1, mode="nearest") >= 0.5
    out = np.full(T.shape, np.inf)
    if fine.any():
        d = ndimage.distance_transform_edt(~fine, sampling=np.asarray(spacing_zyx) / k)
        out[box] = d[k // 2::k, k // 2::k, k // 2::k]
    return out


def dilate_mask(T: Mask, margin: float) -> Mask:
    """All voxels within ``margin`` mm (Euclidean, physical spacing) of ``T``.

    Distances are measured both to the centres of the tumor voxels and to a
    smooth sub-voxel estimate of the tumor surface; a voxel joins A if either
    is within the margin. The centre distance alone systematically shrinks the
    margin of a voxelised sphere by a fraction of a voxel, while the surface
    estimate vanishes for masks only a voxel or two wide.
    """
    if margin < 0:
        raise ValidationError("margin must be >= 0")
    if not T.data.any():
        raise ValidationError("cannot dilate an empty tumor mask")
    if margin == 0:
        return T
    sx, sy, sz = T.grid.spacing
    tol = 1e-9
    dist = ndimage.distance_transform_edt(~T.data, sampling=(sz, sy, sx))
    surf = _surface_distance(T.data, (sz, sy, sx), margin)
    return Mask((dist <= margin + tol) | (surf <= margin + tol) | T.data, T.grid)


def region_volumes(T: Mask, B: Mask, A: Mask) -> RegionVolumes:
    grid = check_same_grid(T, B, A, what="AES regions")
    t, b, a = T.data, B.data, A.data
    n_T = int(np.count_nonzero(t))
    if n_T == 0:
        raise ValidationError("tumor mask T is empty")
    n_B = int(np.count_nonzero(b))
    n_BA = int(np.count_nonzero(b & a))
    return RegionVolumes(
        n_T=n_T, n_B=n_B, n_A=int(np.count_nonzero(a)),
        n_TB=int(np.count_nonzero(t & b)), n_BA=n_BA, n_B_minus_A=n_B - n_BA,
        voxel_volume=grid.voxel_volume,
    )


def coverage_ratios(rv: RegionVolumes):
    """Return ``(CR1, CR2, ER, b_empty)``; ER is 0 by convention when B is empty."""
    if rv.n_T == 0 or rv.n_A == 0:
        raise ValidationError("coverage ratios need non-empty T and A")
    cr1 = rv.n_TB / rv.n_T
    cr2 = rv.n_BA / rv.n_A
    if rv.n_B == 0:
        return cr1, cr2, 0.0, True
    return cr1, cr2, rv.n_B_minus_A / rv.n_B, False


def aes_score(cr1: float, cr2: float, er: float, params: AESParams = AESParams()) -> float:
    for name, v in (("CR1", cr1), ("CR2", cr2), ("ER", er)):
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"{name}={v} outside [0, 1]")
    p = params
    if cr1 < p.lam:
        return -1.0 + math.exp(-p.alpha * (1.0 - cr1) - p.beta * er)
    return 1.0 - math.exp(-p.gamma * (1.0 - cr2) - p.theta * er)


def classify(aes: float, lam: float = 0.75) -> str:
    if aes < -lam:
        return "under"
    if aes > lam:
        return "over"
    return "average"


@dataclass
class AESReport:
    volumes: RegionVolumes
    cr1: float
    cr2: float
    er: float
    aes: float
    cls: str
    params: AESParams
    flags: list = field(default_factory=list)
    inputs: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "volumes_mm3": self.volumes.mm3(),
            "voxel_counts": {k: v for k, v in asdict(self.volumes).items() if k.startswith("n_")},
            "cr1": self.cr1, "cr2": self.cr2, "er": self.er, "aes": self.aes,
            "class": self.cls, "params": self.params.to_json(),
            "flags": list(self.flags), "inputs": dict(self.inputs),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def evaluate_case(T_reg: Mask, B: Mask, params: AESParams = AESParams(), inputs: Optional[dict] = None) -> AESReport:
    """Score one case from the registered tumor mask and the treatment mask."""
    A = dilate_mask(T_reg, params.margin_mm)
    rv = region_volumes(T_reg, B, A)
    cr1, cr2, er, b_empty = coverage_ratios(rv)
    aes = aes_score(cr1, cr2, er, params)
    flags = []
    cls = classify(aes, params.lam)
    if b_empty:
        flags.append("B empty")
        cls = "under"
    return AESReport(rv, cr1, cr2, er, aes, cls, params, flags, dict(inputs or {}))


@dataclass
class HURegionStats:
    bin_edges: np.ndarray
    pre_hist: np.ndarray
    post_hist: np.ndarray
    pre_mean: float
    post_mean: float
    pre_median: float
    post_median: float
    pre_below: float  # fraction of values below the threshold
    post_below: float
    threshold: float
    n: int

    @property
    def pre_above(self) -> float:
        return 1.0 - self.pre_below

    @property
    def post_above(self) -> float:
        return 1.0 - self.post_below

    def to_json(self) -> dict:
        return {
            "bin_edges": self.bin_edges.tolist(),
            "pre_hist": self.pre_hist.tolist(), "post_hist": self.post_hist.tolist(),
            "pre_mean": self.pre_mean, "post_mean": self.post_mean,
            "pre_median": self.pre_median, "post_median": self.post_median,
            "pre_below": self.pre_below, "post_below": self.post_below,
            "pre_above": self.pre_above, "post_above": self.post_above,
            "threshold": self.threshold, "n": self.n,
        }


HU_BINS = np.arange(-1000.0, 400.0 + 25.0, 25.0)


def hu_region_stats(pre_registered: Volume, post: Volume, T_reg: Mask, B: Mask,
                    threshold: float = -600.0) -> HURegionStats:
    """Compare pre/post intensities in the treated-but-not-tumor region ``B \\ T``."""
    check_same_grid(pre_registered, post, T_reg, B, what="HU statistics inputs")
    region = B.data & ~T_reg.data
    n = int(region.sum())
    if n == 0:
        raise ValidationError("region B \\ T is empty")
    a = pre_registered.data[region].astype(np.float64)
    b = post.data[region].astype(np.float64)
    return HURegionStats(
        bin_edges=HU_BINS.copy(),
        pre_hist=np.histogram(a, HU_BINS)[0], post_hist=np.histogram(b, HU_BINS)[0],
        pre_mean=float(a.mean()), post_mean=float(b.mean()),
        pre_median=float(np.median(a)), post_median=float(np.median(b)),
        pre_below=float((a < threshold).mean()), post_below=float((b < threshold).mean()),
        threshold=float(threshold), n=n,
    )
