import colorsys
import io
import json
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from ablate_eval.differencing import (RenderConfig, contour, difference, encode_png, hsv_to_rgb, render_slice,
                                      render_slices, write_slices)
from ablate_eval.errors import GridMismatchError, ValidationError
from ablate_eval.volume import GridMeta, Mask, Volume
from golden import GOLDEN, golden_inputs, golden_png


@given(st.integers(0, 10_000))
def test_difference_of_identical_is_zero(seed):
    rng = np.random.default_rng(seed)
    g = GridMeta((5, 6, 7))
    a = Volume(rng.normal(size=g.shape) * 500, g)
    d = difference(a, a)
    assert not np.any(d.data)
    b = Volume(rng.normal(size=g.shape) * 500, g)
    np.testing.assert_array_equal(difference(a, b).data, -difference(b, a).data)


def test_difference_validates():
    a = Volume(np.zeros((2, 2, 2)), GridMeta((2, 2, 2)))
    with pytest.raises(GridMismatchError):
        difference(a, Volume(np.zeros((2, 2, 3)), GridMeta((3, 2, 2))))
    with pytest.raises(ValidationError):
        difference(a, a.with_data(a.data, unit="normalized"))


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_hsv_matches_colorsys(h, s, v):
    got = hsv_to_rgb(np.array([h]), np.array([s]), np.array([v]))[0]
    np.testing.assert_allclose(got, colorsys.hsv_to_rgb(h, s, v), atol=1e-12)


def test_colour_mapping_extremes():
    cfg = RenderConfig()
    fixed = np.full((1, 3), 400.0)
    img = render_slice(np.array([[-1000.0, 0.0, 1000.0]]), fixed, None, None, cfg)
    np.testing.assert_array_equal(img[0], [[0, 0, 255], [255, 255, 255], [255, 0, 0]])
    dark = render_slice(np.array([[400.0]]), np.array([[-1000.0]]), None, None, cfg)
    np.testing.assert_array_equal(dark[0, 0], [0, 0, 0])


def test_contour_four_neighbour():
    m = np.zeros((5, 5), dtype=bool)
    m[1:4, 1:4] = True
    c = contour(m)
    assert c.sum() == 8 and not c[2, 2]
    assert contour(np.ones((3, 3), dtype=bool)).sum() == 8


def test_golden_png_bytes():
    assert golden_png() == GOLDEN.read_bytes()


def test_golden_png_decodes_to_render():
    diff, fixed, tumor, treat = golden_inputs()
    img = render_slice(diff, fixed, tumor, treat, RenderConfig())
    decoded = np.asarray(Image.open(io.BytesIO(GOLDEN.read_bytes())).convert("RGB"))
    np.testing.assert_array_equal(decoded, img)


def test_png_structure():
    img = np.arange(300 * 250 * 3, dtype=np.uint64).reshape(300, 250, 3).astype(np.uint8)
    data = encode_png(img)
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    # the stream spans several stored blocks and still inflates cleanly
    start = data.index(b"IDAT") + 4
    length = int.from_bytes(data[start - 8:start - 4], "big")
    raw = zlib.decompress(data[start:start + length])
    assert len(raw) == 300 * (1 + 250 * 3)
    np.testing.assert_array_equal(np.asarray(Image.open(io.BytesIO(data))), img)


def test_render_and_write_slices(tmp_path):
    g = GridMeta((8, 8, 6))
    rng = np.random.default_rng(0)
    diff = Volume(rng.normal(size=g.shape) * 200, g)
    fixed = Volume(rng.normal(size=g.shape) * 300 - 500, g)
    t = np.zeros(g.shape, dtype=bool)
    t[2:4, 3:5, 3:5] = True
    images = render_slices(diff, fixed, Mask(t, g), None, RenderConfig(case="c1"))
    assert sorted(images) == [2, 3]
    # rows flip so increasing y is up
    raw = render_slice(diff.data[2][::-1], fixed.data[2][::-1], t[2][::-1], None, RenderConfig())
    np.testing.assert_array_equal(images[2], raw)
    index = write_slices(images, tmp_path, RenderConfig(case="c1"))
    assert [s["file"] for s in index["slices"]] == ["c1_axial_002.png", "c1_axial_003.png"]
    assert json.loads((tmp_path / "index.json").read_text())["render"]["diff_window"] == 400.0
    cor = render_slices(diff, fixed, cfg=RenderConfig(slice_axis="coronal", slices=[1]))
    assert cor[1].shape == (6, 8, 3)
    with pytest.raises(ValidationError):
        render_slices(diff, fixed, cfg=RenderConfig(slices=[99]))
    with pytest.raises(ValidationError):
        RenderConfig(diff_window=0)
