"""Volume, mask and displacement-field file formats.

Two volume formats are supported:

* NIfTI-1 single file (``.nii`` / ``.nii.gz``), little-endian, int16, float32
  or uint8 payloads. Only axis-aligned affines with positive diagonal are
  accepted.
* Raw + sidecar: ``<name>.raw`` holds float32 little-endian voxels (x fastest)
  and ``<name>.json`` holds ``{dims, spacing, origin, unit}``.

Displacement fields use the raw + sidecar layout with interleaved float32
``(ux, uy, uz)`` triples and ``"units": "mm"``.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import nibabel as nib
import numpy as np

from .errors import UnsupportedGeometryError, VolumeIOError
from .volume import DisplacementField, GridMeta, Mask, Volume

NIFTI_DTYPES = {"int16": np.int16, "float32": np.float32, "uint8": np.uint8}


def _is_nifti(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def _raw_pair(path: Path):
    if path.suffix.lower() in (".raw", ".json"):
        stem = path.with_suffix("")
    else:
        stem = path
    return stem.with_suffix(".raw"), stem.with_suffix(".json")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ----------------------------------------------------------------------------
# NIfTI


def _read_nifti(path: Path):
    try:
        img = nib.load(str(path))
        if not isinstance(img, nib.Nifti1Image):
            raise VolumeIOError(f"{path}: not a NIfTI-1 image")
        hdr = img.header
        arr = np.asanyarray(img.dataobj)
    except VolumeIOError:
        raise
    except Exception as exc:  # nibabel raises a zoo of types for damaged files
        msg = str(exc)
        if "Expected" in msg or "buffer" in msg or "truncat" in msg.lower():
            raise VolumeIOError(f"{path}: payload size mismatch ({msg})") from exc
        raise VolumeIOError(f"{path}: unreadable NIfTI file ({msg})") from exc
    if arr.ndim == 4 and arr.shape[3] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise VolumeIOError(f"{path}: expected a 3D image, got shape {arr.shape}")
    if arr.dtype.kind not in "iuf":
        raise VolumeIOError(f"{path}: unsupported datatype {arr.dtype}")

    affine = img.affine
    lin = affine[:3, :3]
    diag = np.diag(lin)
    if not np.allclose(lin, np.diag(diag), atol=1e-6) or np.any(diag <= 0):
        raise UnsupportedGeometryError(
            f"{path}: only axis-aligned geometry with positive spacing is supported"
        )
    grid = GridMeta(arr.shape, tuple(diag), tuple(affine[:3, 3]))
    descrip = hdr["descrip"].tobytes().split(b"\0")[0].decode("ascii", "ignore")
    unit = "normalized" if "unit=normalized" in descrip else "HU"
    # nibabel arrays are (x, y, z); ours are (z, y, x)
    data = np.ascontiguousarray(np.transpose(arr, (2, 1, 0)))
    return data, grid, unit


def _write_nifti(path: Path, data_zyx: np.ndarray, grid: GridMeta, unit: str, dtype):
    affine = np.diag(list(grid.spacing) + [1.0])
    affine[:3, 3] = grid.origin
    arr = np.transpose(data_zyx, (2, 1, 0)).astype(dtype)
    img = nib.Nifti1Image(arr, affine)
    img.header.set_data_dtype(dtype)
    img.header.set_xyzt_units("mm")
    img.header["descrip"] = f"unit={unit}".encode()
    img.set_qform(affine, code=1)
    img.set_sform(affine, code=1)
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise VolumeIOError(f"cannot write {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# raw + sidecar


def _read_raw(path: Path, components: int = 1):
    raw, side = _raw_pair(path)
    try:
        meta = json.loads(side.read_text())
        payload = raw.read_bytes()
    except (OSError, ValueError) as exc:
        raise VolumeIOError(f"{path}: unreadable raw/sidecar pair ({exc})") from exc
    try:
        grid = GridMeta.from_json(meta)
    except (KeyError, ValueError) as exc:
        raise VolumeIOError(f"{side}: invalid sidecar ({exc})") from exc
    expected = grid.size * components * 4
    if len(payload) != expected:
        raise VolumeIOError(
            f"{raw}: payload size mismatch (expected {expected} bytes, found {len(payload)})"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    shape = grid.shape + ((components,) if components > 1 else ())
    return data.reshape(shape), grid, meta


def _write_raw(path: Path, data: np.ndarray, meta: dict):
    raw, side = _raw_pair(path)
    try:
        raw.write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
        side.write_text(json.dumps(meta, indent=2))
    except OSError as exc:
        raise VolumeIOError(f"cannot write {raw}: {exc}") from exc


# ----------------------------------------------------------------------------
# public API


def load_volume(path) -> Volume:
    """Load a volume from NIfTI or raw+sidecar."""
    path = Path(path)
    if _is_nifti(path):
        if not path.exists():
            raise VolumeIOError(f"{path}: no such file")
        data, grid, unit = _read_nifti(path)
        return Volume(data.astype(np.float32), grid, unit)
    data, grid, meta = _read_raw(path)
    return Volume(data, grid, meta.get("unit", "HU"))


def save_volume(vol: Volume, path, dtype: str = "float32") -> None:
    """Write ``vol``; NIfTI payload dtype is float32 unless ``dtype`` says otherwise."""
    path = Path(path)
    if _is_nifti(path):
        if dtype not in NIFTI_DTYPES:
            raise VolumeIOError(f"unsupported NIfTI datatype {dtype!r}")
        _write_nifti(path, vol.data, vol.grid, vol.unit, NIFTI_DTYPES[dtype])
        return
    _write_raw(path, vol.data, {**vol.grid.to_json(), "unit": vol.unit})


def load_mask(path) -> Mask:
    """Load a mask; any nonzero voxel counts as foreground."""
    path = Path(path)
    if _is_nifti(path):
        if not path.exists():
            raise VolumeIOError(f"{path}: no such file")
        data, grid, _ = _read_nifti(path)
    else:
        data, grid, _ = _read_raw(path)
    return Mask(data != 0, grid)


def save_mask(mask: Mask, path) -> None:
    path = Path(path)
    if _is_nifti(path):
        _write_nifti(path, mask.data.astype(np.uint8), mask.grid, "HU", np.uint8)
        return
    _write_raw(path, mask.data.astype(np.float32), {**mask.grid.to_json(), "unit": "mask"})


def save_field(field: DisplacementField, path) -> None:
    _write_raw(Path(path), field.data, {**field.grid.to_json(), "units": "mm"})


def load_field(path) -> DisplacementField:
    data, grid, meta = _read_raw(Path(path), components=3)
    if meta.get("units", "mm") != "mm":
        raise VolumeIOError(f"{path}: displacement units must be mm")
    return DisplacementField(data, grid)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + os.linesep)
