"""Subtraction of the registered preoperative image and HSV slice rendering.

Colour mapping for a slice pixel with signed difference ``d``::

    t   = clamp(d / diff_window, -1, 1)
    hue = (1 - t) / 3          # -1 -> blue, 0 -> green, +1 -> red
    sat = |t|
    val = fixed-image grey level in the display window

Tumor contours are drawn in yellow and treatment contours in blue. PNGs are
written by a small encoder that stores the image data uncompressed inside
zlib framing, so output bytes depend only on pixel values.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .volume import DEFAULT_WINDOW, Mask, Volume, check_same_grid

YELLOW = (255, 255, 0)
BLUE = (0, 0, 255)
_AXES = {"axial": 0, "coronal": 1, "sagittal": 2}


def difference(post: Volume, registered_pre: Volume) -> Volume:
    """Voxelwise ``post - registered_pre`` on the postoperative grid."""
    check_same_grid(post, registered_pre, what="difference inputs")
    if post.unit != registered_pre.unit:
        raise ValidationError(f"unit mismatch: {post.unit} vs {registered_pre.unit}")
    return post.with_data(post.data.astype(np.float32) - registered_pre.data.astype(np.float32))


@dataclass
class RenderConfig:
    slice_axis: str = "axial"
    diff_window: float = 400.0  # HU mapped to full saturation
    gray_window: tuple = DEFAULT_WINDOW
    tumor_color: tuple = YELLOW
    treatment_color: tuple = BLUE
    slices: Optional[Sequence[int]] = None  # explicit slice indices; default: slices touching the masks
    case: str = "case"

    def __post_init__(self):
        if self.diff_window <= 0:
            raise ValidationError("diff_window must be > 0")
        if self.slice_axis not in _AXES:
            raise ValidationError(f"slice_axis must be one of {sorted(_AXES)}")
        lo, hi = self.gray_window
        if not lo < hi:
            raise ValidationError("gray_window must be increasing")

    def to_json(self) -> dict:
        d = asdict(self)
        d["gray_window"] = list(self.gray_window)
        d["tumor_color"] = list(self.tumor_color)
        d["treatment_color"] = list(self.treatment_color)
        d["slices"] = None if self.slices is None else [int(s) for s in self.slices]
        return d


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorised HSV -> RGB with all channels in [0, 1]."""
    h = np.mod(h, 1.0) * 6.0
    i = np.floor(h).astype(np.int64) % 6
    f = h - np.floor(h)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        sel = i == k
        rgb[sel, 0] = r[sel]
        rgb[sel, 1] = g[sel]
        rgb[sel, 2] = b[sel]
    return rgb


def contour(mask2d: np.ndarray) -> np.ndarray:
    """Pixels in the mask with at least one 4-neighbour outside it (image edge counts as outside)."""
    m = np.pad(mask2d.astype(bool), 1)
    inner = m[1:-1, 1:-1]
    all_in = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return inner & ~all_in


def render_slice(diff2d: np.ndarray, fixed2d: np.ndarray, tumor2d: Optional[np.ndarray],
                 treat2d: Optional[np.ndarray], cfg: RenderConfig) -> np.ndarray:
    """One RGB uint8 image (rows, cols, 3)."""
    t = np.clip(diff2d.astype(np.float64) / cfg.diff_window, -1.0, 1.0)
    lo, hi = cfg.gray_window
    val = np.clip((fixed2d.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    rgb = hsv_to_rgb((1.0 - t) / 3.0, np.abs(t), val)
    img = np.floor(rgb * 255.0 + 0.5).astype(np.uint8)
    if tumor2d is not None:
        img[contour(tumor2d)] = cfg.tumor_color
    if treat2d is not None:
        img[contour(treat2d)] = cfg.treatment_color
    return img


def _take(vol: np.ndarray, axis: int, k: int) -> np.ndarray:
    # flip rows so that increasing y/z is drawn upwards
    return np.flipud(np.take(vol, k, axis=axis))


def select_slices(axis: int, masks: Sequence[Optional[Mask]]) -> list:
    hit = None
    for m in masks:
        if m is None:
            continue
        other = tuple(a for a in range(3) if a != axis)
        a = m.data.any(axis=other)
        hit = a if hit is None else hit | a
    return [] if hit is None else [int(k) for k in np.flatnonzero(hit)]


def render_slices(diff: Volume, fixed: Volume, tumor_reg: Optional[Mask] = None,
                  treatment: Optional[Mask] = None, cfg: Optional[RenderConfig] = None) -> dict:
    """Render HSV slices; returns ``{slice_index: rgb_array}``.

    Without explicit ``cfg.slices`` only slices that intersect the tumor or the
    treatment mask are emitted.
    """
    cfg = cfg or RenderConfig()
    check_same_grid(diff, fixed, tumor_reg, treatment, what="render inputs")
    axis = _AXES[cfg.slice_axis]
    ks = list(cfg.slices) if cfg.slices is not None else select_slices(axis, (tumor_reg, treatment))
    out = {}
    for k in ks:
        if not 0 <= k < diff.data.shape[axis]:
            raise ValidationError(f"slice {k} out of range")
        out[int(k)] = render_slice(
            _take(diff.data, axis, k), _take(fixed.data, axis, k),
            None if tumor_reg is None else _take(tumor_reg.data, axis, k),
            None if treatment is None else _take(treatment.data, axis, k), cfg)
    return out


# ----------------------------------------------------------------------------
# PNG encoding


def _chunk(kind: bytes, payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + kind + payload + struct.pack(">I", zlib.crc32(kind + payload))


def encode_png(img: np.ndarray) -> bytes:
    """8-bit RGB PNG using stored (uncompressed) deflate blocks.

    zlib's compressor output may differ between library versions; stored blocks
    make the byte stream a pure function of the pixels.
    """
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError("expected an (rows, cols, 3) uint8 image")
    h, w, _ = img.shape
    raw = b"".join(b"\x00" + img[r].tobytes() for r in range(h))
    blocks = []
    step = 65535
    for i in range(0, max(len(raw), 1), step):
        part = raw[i:i + step]
        final = 1 if i + step >= len(raw) else 0
        blocks.append(struct.pack("<BHH", final, len(part), len(part) ^ 0xFFFF) + part)
    stream = b"\x78\x01" + b"".join(blocks) + struct.pack(">I", zlib.adler32(raw))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", stream) + _chunk(b"IEND", b"")


def write_slices(images: dict, out_dir, cfg: RenderConfig) -> dict:
    """Write ``<case>_<axis>_<index>.png`` files plus ``index.json``; returns the index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k in sorted(images):
        name = f"{cfg.case}_{cfg.slice_axis}_{k:03d}.png"
        (out / name).write_bytes(encode_png(images[k]))
        files.append({"slice": int(k), "file": name})
    index = {"slices": files, "render": cfg.to_json(),
             "hue_map": "hue=(1-t)/3, sat=|t|, val=gray; t=clamp(diff/diff_window,-1,1)"}
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return index
