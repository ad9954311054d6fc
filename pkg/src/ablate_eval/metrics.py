"""Image similarity and agreement statistics for evaluating registrations."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy import stats as sps

from .errors import ValidationError
from .rigid import ncc
from .volume import Mask, Volume, check_same_grid


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, (Volume, Mask)) else np.asarray(x)


def ssim3d(a, b, window: int = 7, k1: float = 0.01, k2: float = 0.03,
           dynamic_range: Optional[float] = None, region=None) -> float:
    """Mean SSIM over all fully contained ``window``^3 cubes (stride 1).

    Local statistics use uniform weights and population (biased) variances.
    ``dynamic_range`` defaults to the value range of ``b`` (the fixed image).
    With ``region`` only cubes whose centre voxel lies in the region count.
    """
    if isinstance(a, Volume) and isinstance(b, Volume):
        check_same_grid(a, b, what="ssim inputs")
    x = _arr(a).astype(np.float64)
    y = _arr(b).astype(np.float64)
    if x.shape != y.shape:
        raise ValidationError("ssim inputs differ in shape")
    if min(x.shape) < window:
        raise ValidationError(f"volume smaller than the {window}^3 window")
    L = float(np.ptp(y)) if dynamic_range is None else float(dynamic_range)
    if L <= 0:
        raise ValidationError("dynamic_range must be > 0")
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2

    def local_mean(v):
        m = ndimage.uniform_filter(v, window, mode="constant")
        h = window // 2
        return m[tuple(slice(h, n - (window - 1 - h)) for n in v.shape)]

    # center the data first so the moment differences lose less precision
    shift = 0.5 * (x.mean() + y.mean())
    x = x - shift
    y = y - shift
    mx, my = local_mean(x), local_mean(y)
    vx = local_mean(x * x) - mx * mx
    vy = local_mean(y * y) - my * my
    cxy = local_mean(x * y) - mx * my
    # luminance uses the un-shifted means
    ux, uy = mx + shift, my + shift
    s = ((2 * ux * uy + c1) * (2 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    if region is not None:
        h = window // 2
        r = _arr(region).astype(bool)[tuple(slice(h, n - (window - 1 - h)) for n in x.shape)]
        if not r.any():
            raise ValidationError("no SSIM window is centred inside the region")
        return float(s[r].mean())
    return float(s.mean())


def rmse(a, b, region=None) -> float:
    if isinstance(a, Volume) and isinstance(b, Volume):
        check_same_grid(a, b, region, what="rmse inputs")
    d = _arr(a).astype(np.float64) - _arr(b).astype(np.float64)
    if region is not None:
        r = _arr(region).astype(bool)
        if not r.any():
            raise ValidationError("rmse region is empty")
        d = d[r]
    return float(math.sqrt(np.mean(d * d)))


def dice(a, b) -> float:
    if isinstance(a, Mask) and isinstance(b, Mask):
        check_same_grid(a, b, what="dice inputs")
    x = _arr(a).astype(bool)
    y = _arr(b).astype(bool)
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((x & y).sum()) / total


def average_ranks(v: Sequence[float]) -> list:
    """1-based ranks with ties sharing their mean rank, as exact Fractions."""
    order = sorted(range(len(v)), key=lambda i: v[i])
    ranks = [Fraction(0)] * len(v)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
            j += 1
        r = Fraction(i + j + 2, 2)
        for k in range(i, j + 1):
            ranks[order[k]] = r
        i = j + 1
    return ranks


def _rank_corr(rx, ry) -> Fraction | float:
    n = len(rx)
    mx = sum(rx) / n
    my = sum(ry) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sxx = sum((a - mx) ** 2 for a in rx)
    syy = sum((b - my) ** 2 for b in ry)
    if sxx == 0 or syy == 0:
        raise ValidationError("spearman needs non-constant inputs")
    ratio = sxy * sxy / (sxx * syy)
    # exact when the square root is rational, e.g. always without ties
    num, den = ratio.numerator, ratio.denominator
    rn, rd = math.isqrt(num), math.isqrt(den)
    if rn * rn == num and rd * rd == den:
        mag = Fraction(rn, rd)
        return mag if sxy >= 0 else -mag
    return float(sxy) / math.sqrt(float(sxx) * float(syy))


def spearman(x: Sequence[float], y: Sequence[float], exact_p: bool = False):
    """Spearman rank correlation and a two-sided p-value.

    The p-value uses the Student-t approximation with n - 2 degrees of
    freedom; with ``exact_p`` and n <= 10 it is the exact permutation p-value.
    Returns ``(rho, p)`` as floats.
    """
    x = list(x)
    y = list(y)
    if len(x) != len(y):
        raise ValidationError("spearman inputs differ in length")
    n = len(x)
    if n < 3:
        raise ValidationError("spearman needs at least 3 observations")
    rx, ry = average_ranks(x), average_ranks(y)
    rho = _rank_corr(rx, ry)
    r = float(rho)
    if exact_p and n <= 10:
        hits = 0
        total = 0
        for perm in itertools.permutations(ry):
            total += 1
            if abs(float(_rank_corr(rx, list(perm)))) >= abs(r) - 1e-12:
                hits += 1
        return r, hits / total
    if abs(r) >= 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * sps.t.sf(abs(t), n - 2))


def cohen_kappa(r1: Sequence, r2: Sequence) -> float:
    """Unweighted Cohen's kappa, computed exactly from the confusion counts."""
    r1 = list(r1)
    r2 = list(r2)
    if len(r1) != len(r2):
        raise ValidationError("rating lists differ in length")
    n = len(r1)
    if n == 0:
        raise ValidationError("no ratings")
    cats = sorted(set(r1) | set(r2), key=repr)
    agree = sum(1 for a, b in zip(r1, r2) if a == b)
    p_o = Fraction(agree, n)
    p_e = sum(Fraction(r1.count(c) * r2.count(c), n * n) for c in cats)
    if p_e == 1:
        if p_o == 1:
            return 1.0
        raise ValidationError("kappa undefined: chance agreement is 1")
    return float((p_o - p_e) / (1 - p_e))


def kappa_from_table(table) -> float:
    """Cohen's kappa from a square confusion table of integer counts."""
    t = [[int(v) for v in row] for row in table]
    r1, r2 = [], []
    for i, row in enumerate(t):
        for j, v in enumerate(row):
            r1 += [i] * v
            r2 += [j] * v
    return cohen_kappa(r1, r2)


@dataclass
class MetricReport:
    ncc: float
    ssim: float
    rmse: float
    dice: Optional[float]
    region: str  # "lung" or "volume"

    def to_json(self) -> dict:
        return asdict(self)


def compare(moving: Volume, fixed: Volume, moving_lung: Optional[Mask] = None,
            fixed_lung: Optional[Mask] = None) -> dict:
    """Similarity of a (registered) moving image to the fixed image.

    Returns reports for the whole volume and, when lung masks are given,
    restricted to the fixed lung mask.
    """
    check_same_grid(moving, fixed, moving_lung, fixed_lung, what="metric inputs")
    d = dice(moving_lung, fixed_lung) if moving_lung is not None and fixed_lung is not None else None
    L = float(np.ptp(fixed.data)) or 1.0
    out = {"volume": MetricReport(ncc(moving, fixed), ssim3d(moving, fixed, dynamic_range=L),
                                  rmse(moving, fixed), d, "volume")}
    if fixed_lung is not None:
        out["lung"] = MetricReport(ncc(moving, fixed, fixed_lung),
                                   ssim3d(moving, fixed, dynamic_range=L, region=fixed_lung),
                                   rmse(moving, fixed, fixed_lung), d, "lung")
    return out


def reports_json(reports: dict) -> dict:
    return {k: v.to_json() for k, v in reports.items()}


def write_csv(rows: Sequence[dict], path) -> None:
    """Write batch metric rows (flat dicts) with a stable, sorted header."""
    keys = sorted({k for r in rows for k in r})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)
