import nibabel as nib
import numpy as np
import pytest

from ablate_eval.errors import UnsupportedGeometryError, VolumeIOError
from ablate_eval.io import (file_sha256, load_field, load_mask, load_volume, save_field, save_mask,
                            save_volume)
from ablate_eval.volume import DisplacementField, GridMeta, Mask, Volume


@pytest.fixture
def vol():
    rng = np.random.default_rng(0)
    g = GridMeta((5, 4, 3), (0.7, 1.1, 2.5), (-10.0, 4.0, 2.0))
    return Volume(rng.normal(size=g.shape).astype(np.float32) * 300, g)


@pytest.mark.parametrize("name", ["v.nii", "v.nii.gz", "v.raw"])
def test_volume_roundtrip(tmp_path, vol, name):
    save_volume(vol, tmp_path / name)
    back = load_volume(tmp_path / name)
    assert back.grid.same_as(vol.grid)
    np.testing.assert_array_equal(back.data, vol.data)
    assert back.unit == "HU"


def test_nifti_axis_order(tmp_path, vol):
    save_volume(vol, tmp_path / "v.nii")
    arr = np.asanyarray(nib.load(str(tmp_path / "v.nii")).dataobj)
    # nibabel sees (x, y, z)
    assert arr.shape == vol.grid.dims
    assert arr[4, 1, 2] == vol.data[2, 1, 4]


def test_int16_payload(tmp_path, vol):
    v = vol.with_data(np.round(vol.data))
    save_volume(v, tmp_path / "v.nii", dtype="int16")
    np.testing.assert_array_equal(load_volume(tmp_path / "v.nii").data, v.data)


def test_normalized_unit_survives(tmp_path, vol):
    v = vol.with_data(np.clip(vol.data, 0, 1), unit="normalized")
    save_volume(v, tmp_path / "n.nii")
    assert load_volume(tmp_path / "n.nii").unit == "normalized"


def test_mask_and_field_roundtrip(tmp_path, vol):
    m = Mask(vol.data > 0, vol.grid)
    save_mask(m, tmp_path / "m.nii")
    assert load_mask(tmp_path / "m.nii").equals(Mask(m.data, load_mask(tmp_path / "m.nii").grid))
    f = DisplacementField(np.random.default_rng(1).normal(size=vol.grid.shape + (3,)), vol.grid)
    save_field(f, tmp_path / "f.raw")
    back = load_field(tmp_path / "f.raw")
    np.testing.assert_array_equal(back.data, f.data)
    # x fastest, components interleaved
    raw = np.fromfile(tmp_path / "f.raw", dtype="<f4")
    assert raw[3 * 1 + 2] == f.data[0, 0, 1, 2]


def test_rotated_affine_rejected(tmp_path):
    aff = np.eye(4)
    aff[:2, :2] = [[0, -1], [1, 0]]
    nib.save(nib.Nifti1Image(np.zeros((3, 3, 3), np.float32), aff), str(tmp_path / "r.nii"))
    with pytest.raises(UnsupportedGeometryError):
        load_volume(tmp_path / "r.nii")


def test_truncated_payload(tmp_path, vol):
    save_volume(vol, tmp_path / "v.raw")
    (tmp_path / "v.raw").write_bytes((tmp_path / "v.raw").read_bytes()[:-4])
    with pytest.raises(VolumeIOError, match="size mismatch"):
        load_volume(tmp_path / "v.raw")
    with pytest.raises(VolumeIOError):
        load_volume(tmp_path / "missing.nii")


def test_sha256_stable(tmp_path, vol):
    save_volume(vol, tmp_path / "a.raw")
    save_volume(vol, tmp_path / "b.raw")
    assert file_sha256(tmp_path / "a.raw") == file_sha256(tmp_path / "b.raw")
