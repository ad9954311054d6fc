import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from ablate_eval.aes import (AESParams, aes_score, classify, coverage_ratios, dilate_mask, evaluate_case,
                             hu_region_stats, region_volumes)
from ablate_eval.errors import ValidationError
from ablate_eval.volume import GridMeta, Mask, Volume

unit = st.floats(0.0, 1.0)


def triple_loop(T, B, A):
    nz, ny, nx = T.shape
    c = dict(T=0, B=0, A=0, TB=0, BA=0, BmA=0)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                t, b, a = bool(T[z, y, x]), bool(B[z, y, x]), bool(A[z, y, x])
                c["T"] += t
                c["B"] += b
                c["A"] += a
                c["TB"] += t and b
                c["BA"] += b and a
                c["BmA"] += b and not a
    return c


def sphere(grid, center, r):
    xs, ys, zs = grid.axes_mm()
    z, y, x = np.meshgrid(zs, ys, xs, indexing="ij")
    return Mask((x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2 <= r * r, grid)


def test_closed_forms():
    p = AESParams()
    assert aes_score(1.0, 1.0, 0.0, p) == 0.0
    assert aes_score(0.0, 0.0, 1.0, p) == pytest.approx(-1 + math.exp(-3), abs=1e-12)
    assert aes_score(0.5, 0.5, 0.3, p) == pytest.approx(-1 + math.exp(-1.1), abs=1e-12)
    assert aes_score(0.9, 0.5, 0.1, p) == pytest.approx(1 - math.exp(-0.5 * 0.5 - 2 * 0.1), abs=1e-12)


def test_branch_switches_at_lambda():
    p = AESParams()
    assert aes_score(0.75, 1.0, 0.0, p) == 0.0
    assert aes_score(0.7499999, 1.0, 0.0, p) < -0.2


@given(unit, unit, unit)
def test_range_and_sign(cr1, cr2, er):
    s = aes_score(cr1, cr2, er)
    assert -1.0 < s < 1.0
    assert (s < 0) == (cr1 < 0.75)


@given(unit, unit, unit, unit)
def test_monotonicity(cr1, cr2, er, d):
    # under-coverage: more tumor coverage is better (closer to 0)
    lo, hi = sorted((cr1 * 0.75, d * 0.75))
    assume(hi < 0.75)
    assert aes_score(lo, cr2, er) <= aes_score(hi, cr2, er) + 1e-15
    # covered tumor: lower planned coverage or more excess raise the score
    a, b = sorted((cr2, d))
    assert aes_score(0.9, a, er) >= aes_score(0.9, b, er) - 1e-15
    e1, e2 = sorted((er, d))
    assert aes_score(0.9, cr2, e1) <= aes_score(0.9, cr2, e2) + 1e-15


def test_input_validation():
    with pytest.raises(ValidationError):
        aes_score(1.2, 0.5, 0.1)
    with pytest.raises(ValidationError):
        AESParams(margin_mm=4.0)
    with pytest.raises(ValidationError):
        AESParams(lam=1.0)
    assert AESParams.from_json(AESParams().to_json()) == AESParams()
    assert "lambda" in AESParams().to_json()


def test_classify_band_edges_are_average():
    assert classify(-0.75) == "average"
    assert classify(0.75) == "average"
    assert classify(-0.7500001) == "under"
    assert classify(0.7500001) == "over"


@pytest.mark.parametrize("seed", range(25))
def test_region_algebra_matches_triple_loop(seed):
    rng = np.random.default_rng(seed)
    g = GridMeta((8, 8, 8), (1.0, 2.0, 0.5))
    T = rng.random(g.shape) < 0.3
    T[0, 0, 0] = True
    B = rng.random(g.shape) < 0.4
    A = rng.random(g.shape) < 0.5
    A[0, 0, 0] = True
    rv = region_volumes(Mask(T, g), Mask(B, g), Mask(A, g))
    c = triple_loop(T, B, A)
    assert (rv.n_T, rv.n_B, rv.n_A, rv.n_TB, rv.n_BA, rv.n_B_minus_A) == \
        (c["T"], c["B"], c["A"], c["TB"], c["BA"], c["BmA"])
    cr1, cr2, er, empty = coverage_ratios(rv)
    assert (cr1, cr2, er) == (c["TB"] / c["T"], c["BA"] / c["A"], c["BmA"] / c["B"])
    assert rv.mm3()["T"] == c["T"] * 1.0


def test_dilate_single_voxel_is_lattice_ball():
    g = GridMeta((15, 15, 15))
    T = np.zeros(g.shape, dtype=bool)
    T[7, 7, 7] = True
    A = dilate_mask(Mask(T, g), 5.0)
    # integer points with |p| <= 5
    r = np.arange(-7, 8)
    z, y, x = np.meshgrid(r, r, r, indexing="ij")
    assert A.count == int((x * x + y * y + z * z <= 25).sum())
    A4 = dilate_mask(Mask(T, g), 4.0)
    assert A4.count == 257


def test_dilate_respects_anisotropic_spacing():
    g = GridMeta((21, 21, 21), (0.5, 0.5, 2.0))
    T = np.zeros(g.shape, dtype=bool)
    T[10, 10, 10] = True
    A = dilate_mask(Mask(T, g), 5.0)
    zs = np.flatnonzero(A.data[:, 10, 10]) - 10
    xs = np.flatnonzero(A.data[10, 10, :]) - 10
    assert zs.min() == -2 and zs.max() == 2
    assert xs.min() == -10 and xs.max() == 10


def test_dilated_sphere_volume_near_analytic():
    g = GridMeta((64, 64, 64), (1.25, 1.25, 1.25))
    c = g.center
    A = dilate_mask(sphere(g, c, 10.0), 5.0)
    analytic = 4.0 / 3.0 * math.pi * 15.0 ** 3
    assert abs(A.volume_mm3 / analytic - 1.0) < 0.03


@given(st.floats(0.0, 4.0))
def test_dilation_contains_tumor_and_grows(margin):
    g = GridMeta((12, 12, 12))
    T = sphere(g, g.center, 2.5)
    A = dilate_mask(T, margin)
    assert np.all(A.data[T.data])
    assert dilate_mask(T, margin + 1.0).count >= A.count


def test_empty_inputs():
    g = GridMeta((6, 6, 6))
    with pytest.raises(ValidationError):
        dilate_mask(Mask.empty(g), 5.0)
    T = sphere(g, g.center, 1.5)
    rep = evaluate_case(T, Mask.empty(g))
    assert rep.flags == ["B empty"]
    assert rep.cls == "under"
    assert rep.er == 0.0


def test_evaluate_case_classes():
    g = GridMeta((48, 48, 48), (1.25, 1.25, 1.25))
    c = g.center
    T = sphere(g, c, 8.0)
    # perfect planned ablation
    exact = evaluate_case(T, dilate_mask(T, 5.0))
    assert exact.aes == pytest.approx(0.0, abs=1e-12) and exact.cls == "average"
    # tumor missed and most of the treated volume outside the plan
    B = sphere(g, c + np.array([21.0, 0.0, 0.0]), 8.0)
    under = evaluate_case(T, B)
    assert under.cr1 < 0.75 and under.er > 0.45
    assert under.cls == "under"
    # generous margin well beyond the plan
    over = evaluate_case(T, sphere(g, c, 28.0))
    assert over.cls == "over"
    js = over.to_json()
    assert set(js) == {"volumes_mm3", "voxel_counts", "cr1", "cr2", "er", "aes", "class", "params", "flags",
                       "inputs"}


def test_hu_region_stats():
    g = GridMeta((10, 10, 10))
    T = sphere(g, g.center, 2.0)
    B = sphere(g, g.center, 4.0)
    pre = Volume(np.full(g.shape, -800.0), g)
    post = Volume(np.full(g.shape, -100.0), g)
    st_ = hu_region_stats(pre, post, T, B)
    assert st_.n == B.count - T.count
    assert st_.pre_below == 1.0 and st_.post_above == 1.0
    assert st_.pre_hist.sum() == st_.n
    with pytest.raises(ValidationError):
        hu_region_stats(pre, post, B, T)
