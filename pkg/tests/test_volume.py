import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import map_coordinates

from svfthick.volume import (MVOL_MAGIC, GridMeta, LabelVolume, ScalarVolume, VectorField,
                             VolumeFormatError, load_volume, spatial_gradient, store_volume,
                             trilinear_sample)

from conftest import nifti_bytes


def test_containers_validate_shape_and_freeze():
    v = ScalarVolume.from_array(np.zeros((3, 4, 5)), (1, 2, 3))
    assert v.meta.dims == (3, 4, 5) and v.meta.spacing_mm == (1.0, 2.0, 3.0)
    assert v.data.dtype == np.float64
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1
    assert ScalarVolume.from_array(np.zeros((2, 2, 2), np.float32)).data.dtype == np.float32
    with pytest.raises(VolumeFormatError, match="dims"):
        ScalarVolume(np.zeros((3, 3, 3)), GridMeta((3, 3, 4)))
    with pytest.raises(VolumeFormatError, match="non-finite"):
        ScalarVolume.from_array(np.full((2, 2, 2), np.nan))
    with pytest.raises(VolumeFormatError, match="spacing"):
        GridMeta((2, 2, 2), (1, 0, 1))
    with pytest.raises(VolumeFormatError):
        VectorField(np.zeros((2, 2, 2, 2)), GridMeta((2, 2, 2)))
    with pytest.raises(VolumeFormatError, match="integers"):
        LabelVolume.from_array(np.full((2, 2, 2), 0.5))
    with pytest.raises(VolumeFormatError, match="non-negative"):
        LabelVolume.from_array(-np.ones((2, 2, 2), int))


def test_trilinear_sample_matches_scipy_order1(rng):
    data = rng.normal(size=(4, 5, 6))
    pts = rng.uniform(-1.0, 7.0, size=(40, 3))
    ours = np.array([trilinear_sample(data, p) for p in pts])
    clamped = np.clip(pts, 0, np.array(data.shape) - 1)
    ref = map_coordinates(data, clamped.T, order=1, mode="nearest")
    np.testing.assert_allclose(ours, ref, atol=1e-12)


def test_trilinear_sample_is_exact_on_affine_functions():
    x, y, z = np.meshgrid(*(np.arange(n, dtype=float) for n in (4, 4, 4)), indexing="ij")
    f = 0.5 + 2 * x - 3 * y + 0.25 * z
    assert trilinear_sample(f, (1.3, 2.7, 0.4)) == pytest.approx(0.5 + 2.6 - 8.1 + 0.1, abs=1e-12)
    assert trilinear_sample(f, (3, 3, 3)) == pytest.approx(f[3, 3, 3])


def test_spatial_gradient_against_explicit_indices(rng):
    data = rng.normal(size=(4, 3, 5))
    g = spatial_gradient(data)
    assert g.shape == (4, 3, 5, 3)
    # interior: central, faces: one-sided, written out with explicit indices
    assert g[1, 1, 1, 0] == pytest.approx((data[2, 1, 1] - data[0, 1, 1]) / 2)
    assert g[0, 1, 1, 0] == pytest.approx(data[1, 1, 1] - data[0, 1, 1])
    assert g[3, 2, 4, 0] == pytest.approx(data[3, 2, 4] - data[2, 2, 4])
    assert g[2, 0, 3, 1] == pytest.approx(data[2, 1, 3] - data[2, 0, 3])
    assert g[2, 1, 2, 2] == pytest.approx((data[2, 1, 3] - data[2, 1, 1]) / 2)
    with pytest.raises(ValueError):
        spatial_gradient(np.zeros((1, 3, 3)))


def test_mvol_layout_is_x_fastest_and_interleaved(tmp_path):
    data = np.arange(2 * 3 * 1 * 3, dtype=np.float64).reshape(2, 3, 1, 3)
    store_volume(VectorField.from_array(data, (1, 1, 2)), tmp_path / "v.mvol")
    raw = (tmp_path / "v.mvol").read_bytes()
    assert raw[:8] == MVOL_MAGIC
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen])
    assert header == {"dims": [2, 3, 1], "spacing_mm": [1.0, 1.0, 2.0], "dtype": "f64", "channels": 3}
    payload = np.frombuffer(raw[12 + hlen:], "<f8")
    # first voxel's three channels, then voxel x=1
    np.testing.assert_array_equal(payload[:6], [data[0, 0, 0, 0], data[0, 0, 0, 1], data[0, 0, 0, 2],
                                                data[1, 0, 0, 0], data[1, 0, 0, 1], data[1, 0, 0, 2]])


@settings(max_examples=25, deadline=None)
@given(st.tuples(*(st.integers(1, 5),) * 3), st.sampled_from([np.float32, np.float64]),
       st.integers(0, 2 ** 31 - 1))
def test_mvol_round_trip_bit_exact(tmp_path_factory, dims, dtype, seed):
    rng = np.random.default_rng(seed)
    path = tmp_path_factory.mktemp("rt") / "x.mvol"
    for vol, kind in ((ScalarVolume.from_array(rng.normal(size=dims).astype(dtype), (0.5, 1, 2)), "scalar"),
                      (VectorField.from_array(rng.normal(size=dims + (3,)).astype(dtype)), "vector"),
                      (LabelVolume.from_array(rng.integers(0, 9, size=dims)), "label")):
        store_volume(vol, path)
        back = load_volume(path, kind)
        assert back.meta == vol.meta
        a, b = (vol.labels, back.labels) if kind == "label" else (vol.data, back.data)
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()


def test_mvol_errors_name_the_field(tmp_path):
    store_volume(ScalarVolume.from_array(np.zeros((2, 2, 2))), tmp_path / "a.mvol")
    raw = (tmp_path / "a.mvol").read_bytes()
    (tmp_path / "short.mvol").write_bytes(raw[:-8])
    with pytest.raises(VolumeFormatError, match="dims"):
        load_volume(tmp_path / "short.mvol")
    (tmp_path / "ver.mvol").write_bytes(b"MVOL\x00\x00\x00\x02" + raw[8:])
    with pytest.raises(VolumeFormatError, match="magic"):
        load_volume(tmp_path / "ver.mvol")
    header = json.dumps({"dims": [2, 2, 2], "spacing_mm": [1, 1, 1], "dtype": "u8", "channels": 1}).encode()
    (tmp_path / "dt.mvol").write_bytes(MVOL_MAGIC + struct.pack("<I", len(header)) + header + bytes(8))
    with pytest.raises(VolumeFormatError, match="dtype"):
        load_volume(tmp_path / "dt.mvol")
    with pytest.raises(VolumeFormatError, match="channels"):
        load_volume(tmp_path / "a.mvol", "vector")


def test_pv_maps_are_validated_and_clamped(tmp_path):
    data = np.full((2, 2, 2), 0.5)
    data[0, 0, 0] = 1.0 + 5e-5
    data[1, 1, 1] = -5e-5
    store_volume(ScalarVolume.from_array(data), tmp_path / "pv.mvol")
    pv = load_volume(tmp_path / "pv.mvol", "pv")
    assert pv.data.max() == 1.0 and pv.data.min() == 0.0
    data[0, 0, 0] = 1.01
    store_volume(ScalarVolume.from_array(data), tmp_path / "bad.mvol")
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "bad.mvol", "pv")


@pytest.mark.parametrize("datatype", [2, 4, 16])
@pytest.mark.parametrize("endian", ["<", ">"])
def test_nifti_reader_parses_hand_built_file(tmp_path, datatype, endian):
    data = (np.arange(3 * 4 * 2).reshape(3, 4, 2) % 50).astype(float)
    (tmp_path / "a.nii").write_bytes(nifti_bytes(data, datatype, (0.8, 1.0, 1.25), endian))
    vol = load_volume(tmp_path / "a.nii")
    assert vol.meta.dims == (3, 4, 2)
    assert vol.meta.spacing_mm == pytest.approx((0.8, 1.0, 1.25))
    np.testing.assert_array_equal(vol.data, data)


def test_nifti_scaling_and_errors(tmp_path):
    data = np.array([[[1, 2], [3, 4]]] * 2, dtype=float)
    (tmp_path / "s.nii").write_bytes(nifti_bytes(data, 4, slope=0.5, inter=1.0))
    np.testing.assert_allclose(load_volume(tmp_path / "s.nii").data, data * 0.5 + 1.0)
    (tmp_path / "m.nii").write_bytes(nifti_bytes(data, 4, magic=b"ni1\x00"))
    with pytest.raises(VolumeFormatError, match="magic"):
        load_volume(tmp_path / "m.nii")
    (tmp_path / "t.nii").write_bytes(nifti_bytes(data, 4)[:-2])
    with pytest.raises(VolumeFormatError, match="vox_offset"):
        load_volume(tmp_path / "t.nii")
    raw = bytearray(nifti_bytes(data, 4))
    struct.pack_into("<h", raw, 70, 64)
    (tmp_path / "d.nii").write_bytes(bytes(raw))
    with pytest.raises(VolumeFormatError, match="datatype"):
        load_volume(tmp_path / "d.nii")
    (tmp_path / "h.nii").write_bytes(b"\x00" * 400)
    with pytest.raises(VolumeFormatError, match="sizeof_hdr"):
        load_volume(tmp_path / "h.nii")


def test_interpolation_examples(rng):
    assert trilinear_sample(np.full((3, 3, 3), 2.5), (0.3, 1.7, 2.2)) == pytest.approx(2.5)
    assert trilinear_sample(np.array([0.0, 1.0]).reshape(2, 1, 1), (0.5, 0, 0)) == 0.5
    data = rng.normal(size=(4, 4, 4))
    assert trilinear_sample(data, (1, 3, 2)) == data[1, 3, 2]
    with pytest.raises(ValueError):
        trilinear_sample(data, (0, np.nan, 0))


def test_gradient_examples():
    assert np.all(spatial_gradient(np.full((3, 4, 5), 7.0)) == 0)
    ramp = np.broadcast_to(np.arange(5.0)[:, None, None], (5, 4, 3))
    g = spatial_gradient(ramp)
    np.testing.assert_allclose(g[1:-1, 1:-1, 1:-1], np.broadcast_to([1.0, 0.0, 0.0], (3, 2, 1, 3)))


def test_store_small_files(tmp_path):
    vals = np.arange(8.0).reshape(2, 2, 2)
    store_volume(ScalarVolume.from_array(vals), tmp_path / "a.mvol")
    raw = (tmp_path / "a.mvol").read_bytes()
    (hlen,) = struct.unpack_from("<I", raw, 8)
    np.testing.assert_array_equal(np.frombuffer(raw[12 + hlen:], "<f8"), vals.ravel(order="F"))
    store_volume(ScalarVolume.from_array(np.ones((1, 1, 1), np.float32)), tmp_path / "b.mvol")
    raw = (tmp_path / "b.mvol").read_bytes()
    (hlen,) = struct.unpack_from("<I", raw, 8)
    assert len(raw) == 12 + hlen + 4
    with pytest.raises(TypeError):
        store_volume(np.zeros((2, 2, 2)), tmp_path / "c.mvol")
