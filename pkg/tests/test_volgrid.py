import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctseverity.errors import EmptySegmentationError, ValidationError
from ctseverity.phantom import default_lungs, PhantomSpec, generate_phantom, write_phantom
from ctseverity.volgrid import (
    BoundingBox,
    RegionLabels,
    Spacing,
    VoxelVolume,
    crop_pad_to,
    load_volume,
    lung_bounding_box,
    resample_nearest,
    resample_trilinear,
    save_volume,
)


def test_spacing_validation():
    assert Spacing.of((3, 1, 1)).voxel_volume == 3.0
    with pytest.raises(ValidationError):
        Spacing(0.0, 1.0, 1.0)


def test_roundtrip_hu(tmp_path, rng):
    data = rng.integers(-1024, 1500, size=(4, 4, 4)).astype(np.int16)
    save_volume(VoxelVolume(data, (1, 1, 1)), tmp_path / "ct")
    back = load_volume(tmp_path / "ct")
    assert back.kind == "hounsfield"
    np.testing.assert_array_equal(back.data, data)


def test_single_voxel_payload_is_two_bytes(tmp_path):
    save_volume(VoxelVolume(np.zeros((1, 1, 1)), (1, 1, 1)), tmp_path / "z")
    assert (tmp_path / "z.raw").stat().st_size == 2


def test_hu_extremes(tmp_path):
    data = np.array([-2048, 4096, 0, -1]).reshape(1, 2, 2)
    save_volume(VoxelVolume(data, (1, 1, 1)), tmp_path / "e")
    np.testing.assert_array_equal(load_volume(tmp_path / "e").data, data)


def test_probability_bit_exact(tmp_path, rng):
    p = rng.random((3, 4, 5)).astype(np.float32)
    save_volume(VoxelVolume(p, (2, 1, 1), "probability"), tmp_path / "p")
    raw = (tmp_path / "p.raw").read_bytes()
    assert raw == p.astype("<f4").tobytes()
    back = load_volume(tmp_path / "p")
    assert back.data.dtype == np.float32
    assert back.data.tobytes() == p.tobytes()


def test_labels_roundtrip(tmp_path):
    lab = np.arange(8, dtype=np.uint8).reshape(2, 2, 2) % 6
    save_volume(RegionLabels(lab, (1, 1, 1)), tmp_path / "l")
    back = load_volume(tmp_path / "l")
    assert isinstance(back, RegionLabels)
    np.testing.assert_array_equal(back.labels, lab)


def test_size_mismatch(tmp_path):
    save_volume(VoxelVolume(np.zeros((2, 2, 2)), (1, 1, 1)), tmp_path / "m")
    (tmp_path / "m.raw").write_bytes(b"\0" * 14)  # 7 voxels
    with pytest.raises(ValidationError, match="size mismatch"):
        load_volume(tmp_path / "m")


def test_missing_and_bad_header(tmp_path):
    with pytest.raises(ValidationError):
        load_volume(tmp_path / "nope")
    save_volume(VoxelVolume(np.zeros((1, 1, 1)), (1, 1, 1)), tmp_path / "h")
    (tmp_path / "h.json").write_text('{"dims":[1,1,1],"spacing_mm":[1,1,1],"dtype":"int64","kind":"hounsfield"}')
    with pytest.raises(ValidationError):
        load_volume(tmp_path / "h")


def test_volume_rejects_bad_probability():
    with pytest.raises(ValidationError):
        VoxelVolume(np.full((1, 1, 1), 1.5), (1, 1, 1), "probability")


def test_phantom_dims_on_disk(tmp_path):
    spec = PhantomSpec((20, 24, 28), (2, 2, 2), default_lungs((20, 24, 28), Spacing(2, 2, 2)))
    write_phantom(tmp_path, spec, 0)
    for name in ("ct", "lobes", "disease", "prob"):
        assert load_volume(tmp_path / name).dims == (20, 24, 28)


# -- resampling -------------------------------------------------------------

def test_trilinear_identity(rng):
    v = VoxelVolume(rng.normal(size=(4, 5, 6)), (3, 1, 1))
    out = resample_trilinear(v, (3, 1, 1))
    assert out.dims == v.dims
    np.testing.assert_array_equal(out.data, v.data)


@given(st.floats(-1000, 1000), st.tuples(*[st.sampled_from([0.5, 0.7, 1.0, 2.0, 3.0])] * 3))
def test_trilinear_constant(value, target):
    v = VoxelVolume(np.full((5, 6, 7), value), (1.0, 1.5, 2.0))
    out = resample_trilinear(v, target)
    assert np.max(np.abs(out.data - value)) < 1e-6


def test_trilinear_ramp_halved_dx():
    nx = 10
    ramp = np.broadcast_to(np.arange(nx, dtype=np.float64) * 2.0, (2, 3, nx)).copy()
    out = resample_trilinear(VoxelVolume(ramp, (1, 1, 1.0)), (1, 1, 0.5))
    assert out.dims == (2, 3, 2 * nx)
    # output centre i sits at source index (i + 0.5) / 2 - 0.5
    pos = (np.arange(2 * nx) + 0.5) / 2 - 0.5
    inner = (pos >= 0) & (pos <= nx - 1)
    np.testing.assert_allclose(out.data[0, 0, inner], 2.0 * pos[inner], atol=1e-6)


def test_target_dims_rounding():
    v = VoxelVolume(np.zeros((10, 10, 10)), (1, 1, 1))
    assert resample_trilinear(v, (3, 1, 4)).dims == (3, 10, 3)  # 3.33 -> 3, 2.5 -> 3


def test_nearest_identity_and_labels_subset(rng):
    lab = np.zeros((4, 8, 8), np.uint8)
    lab[:, :, 4:] = 2
    lab[:, :, :4] = 1
    r = RegionLabels(lab, (1, 1, 1))
    assert resample_nearest(r, (1, 1, 1)) is r
    down = resample_nearest(r, (2, 2, 2))
    assert set(np.unique(down.labels)) == {1, 2}


def _brute_nearest(lab, s_in, s_out, out_dims):
    out = np.empty(out_dims, lab.dtype)
    for i, j, k in itertools.product(*map(range, out_dims)):
        src = []
        for idx, a, b, n in zip((i, j, k), s_in, s_out, lab.shape):
            c = (idx + 0.5) * b  # output centre in mm
            src.append(min(int(c // a), n - 1))
        out[i, j, k] = lab[tuple(src)]
    return out


@pytest.mark.parametrize("target", [(2, 2, 2), (1, 3, 0.5), (0.7, 1.3, 2.5)])
def test_nearest_checkerboard_matches_brute_force(target):
    idx = np.indices((6, 7, 8)).sum(axis=0)
    lab = (idx % 2 + 1).astype(np.uint8)
    out = resample_nearest(RegionLabels(lab, (1, 1, 1)), target)
    np.testing.assert_array_equal(out.labels, _brute_nearest(lab, (1, 1, 1), target, out.dims))


@given(st.integers(0, 5), st.tuples(*[st.sampled_from([0.4, 1.0, 1.7, 3.0])] * 3))
def test_nearest_never_invents_labels(seed, target):
    lab = np.random.default_rng(seed).integers(0, 4, size=(5, 6, 7)).astype(np.uint8)
    out = resample_nearest(RegionLabels(lab, (1, 1, 1)), target)
    assert set(np.unique(out.labels)) <= set(np.unique(lab))


# -- crop / pad ---------------------------------------------------------------

def test_crop_pad_identity(rng):
    v = VoxelVolume(rng.normal(size=(3, 4, 5)), (1, 1, 1))
    out = crop_pad_to(v, BoundingBox(((0, 2), (0, 3), (0, 4))), (3, 4, 5))
    np.testing.assert_array_equal(out.data, v.data)


def test_crop_pad_centered():
    v = VoxelVolume(np.ones((2, 2, 2)), (1, 1, 1))
    out = crop_pad_to(v, BoundingBox(((0, 1),) * 3), (4, 4, 4), fill=0.0)
    assert (out.data == 0).sum() == 56 and (out.data == 1).sum() == 8
    assert out.data[1:3, 1:3, 1:3].all()


@given(st.integers(0, 20))
def test_crop_pad_preserves_multiset(seed):
    r = np.random.default_rng(seed)
    data = r.integers(0, 50, size=(6, 6, 6)).astype(np.float64)
    lo = r.integers(0, 3, 3)
    hi = lo + r.integers(0, 3, 3)
    box = BoundingBox(tuple(zip(lo.tolist(), hi.tolist())))
    out = crop_pad_to(VoxelVolume(data, (1, 1, 1)), box, (5, 5, 5), fill=-1.0)
    inside = data[box.slices()]
    np.testing.assert_array_equal(np.sort(out.data[out.data >= 0]), np.sort(inside.ravel()))


def test_lung_bbox():
    lab = np.zeros((5, 6, 7), np.uint8)
    lab[2, 3, 4] = 1
    assert lung_bounding_box(RegionLabels(lab, (1, 1, 1))).ranges == ((2, 2), (3, 3), (4, 4))
    with pytest.raises(EmptySegmentationError):
        lung_bounding_box(RegionLabels(np.zeros((2, 2, 2), np.uint8), (1, 1, 1)))


def test_lung_bbox_phantom_and_crop_membership():
    dims, sp = (24, 24, 24), Spacing(4, 4, 4)
    spec = PhantomSpec(dims, sp, default_lungs(dims, sp))
    ct, lobes, *_, truth = generate_phantom(spec, 0)
    box = lung_bounding_box(lobes)
    assert box.ranges == truth.lung_bbox
    out = crop_pad_to(lobes, box, tuple(n + 2 for n in box.shape))
    assert (out.labels > 0).sum() == (lobes.labels > 0).sum()
