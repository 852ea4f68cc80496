import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vsx import data
from vsx.errors import DataError

labels = arrays(np.uint8, (3, 4, 5), elements=st.sampled_from(data.VALID_LABELS))


def test_label_membership():
    raw = np.array([[[4, 2, 1, 0]]])
    mask = data.map_labels(raw)
    assert tuple(mask[:, 0, 0, 0]) == (1, 1, 1)
    assert tuple(mask[:, 0, 0, 1]) == (1, 0, 0)
    assert tuple(mask[:, 0, 0, 2]) == (1, 1, 0)
    assert tuple(mask[:, 0, 0, 3]) == (0, 0, 0)


def test_bad_label_names_voxel():
    raw = np.zeros((2, 2, 2), np.uint8)
    raw[1, 0, 1] = 3
    with pytest.raises(DataError, match=r"\(1, 0, 1\)=3"):
        data.map_labels(raw)


@given(labels)
def test_mapped_masks_nest(raw):
    mask = data.map_labels(raw)
    assert data.is_nested(mask)
    assert set(np.unique(mask)) <= {0, 1}


def test_brats_crop_and_pad():
    v = np.zeros((240, 240, 155), np.float32)
    out, info = data.crop_and_pad(v, (170, 170, 100))
    assert out.shape == (176, 176, 112)
    assert info.crop_offset == (35, 35, 27) and info.cropped == (170, 170, 100)


def test_identity_crop():
    v = np.random.default_rng(0).random((2, 16, 32, 48)).astype(np.float32)
    out, info = data.crop_and_pad(v, (16, 32, 48))
    assert out.tobytes() == v.tobytes() and info.crop_offset == (0, 0, 0)


def test_target_larger_than_source():
    with pytest.raises(ValueError, match="axis 2"):
        data.crop_and_pad(np.zeros((8, 8, 8)), (8, 8, 9))


def test_image_and_mask_stay_aligned():
    rng = np.random.default_rng(1)
    raw = rng.choice([0, 0, 0, 1, 2, 4], size=(40, 36, 30))
    image = np.where(raw > 0, rng.random(raw.shape) + 1, 0.0)
    img_out, info = data.crop_and_pad(image, (30, 30, 20))
    lab_out, info2 = data.crop_and_pad(raw, (30, 30, 20))
    assert info == info2
    np.testing.assert_array_equal(np.argwhere(img_out != 0), np.argwhere(lab_out != 0))


def test_inverse_mapping_restores_coordinates():
    src = (40, 36, 30)
    v = np.arange(np.prod(src), dtype=np.float64).reshape(src) + 1
    out, info = data.crop_and_pad(v, (25, 20, 17))
    coords = np.argwhere(out != 0)
    back = info.to_source(coords)
    np.testing.assert_array_equal(v[tuple(back.T)], out[tuple(coords.T)])
    np.testing.assert_array_equal(info.from_source(back), coords)
    assert len(coords) == 25 * 20 * 17


@pytest.mark.parametrize("n, want", [(368, (257, 74, 37)), (10, (7, 2, 1)), (0, (0, 0, 0)), (1, (1, 0, 0))])
def test_split_counts(n, want):
    assert data.split_counts(n) == want


@given(st.integers(0, 500), st.integers(0, 2**32 - 1))
def test_split_is_partition(n, seed):
    parts = data.split_dataset(list(range(n)), seed=seed)
    merged = sorted(parts["train"] + parts["val"] + parts["test"])
    assert merged == list(range(n))
    assert tuple(len(parts[k]) for k in data.SPLITS) == data.split_counts(n)


def test_split_deterministic():
    a = data.split_dataset(list(range(50)), seed=7)
    assert a == data.split_dataset(list(range(50)), seed=7)
    assert a != data.split_dataset(list(range(50)), seed=8)


def test_bad_ratios():
    with pytest.raises(ValueError):
        data.split_counts(10, (0.5, 0.2, 0.2))


@pytest.mark.parametrize("seed", range(5))
def test_phantom_nesting_and_determinism(seed):
    a = data.make_phantom((32, 32, 32), seed)
    b = data.make_phantom((32, 32, 32), seed)
    assert data.is_nested(a.mask)
    assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()
    assert a.mask[2].sum() > 0
    np.testing.assert_array_equal(data.map_labels(a.labels), a.mask)


def test_phantom_too_small():
    with pytest.raises(ValueError, match="16"):
        data.make_phantom((16, 15, 16))


@pytest.mark.parametrize("seed", range(4))
def test_ellipsoid_rasterisation_volume(seed):
    geo = data.phantom_geometry((32, 32, 32), np.random.default_rng(seed))
    for name in ("WT", "TC", "ET"):
        center, axes = geo[name]
        count = data.ellipsoid_mask((32, 32, 32), center, axes).sum()
        analytic = 4 / 3 * math.pi * np.prod(axes)
        assert abs(count - analytic) / analytic < 0.10, (name, count, analytic)


def test_normalize_properties():
    rng = np.random.default_rng(0)
    v = np.zeros((3, 8, 8, 8), np.float32)
    v[0, 2:6, 2:6, 2:6] = rng.normal(3, 2, size=(4, 4, 4))
    v[1, 1:7] = 5.0
    out = data.normalize_intensities(v)
    nz = v[0] != 0
    assert abs(out[0][nz].mean()) < 1e-4 and abs(out[0][nz].std() - 1) < 1e-4
    assert not out[0][~nz].any()
    assert not out[1].any() and not out[2].any()


def test_volume_roundtrip(tmp_path):
    v = np.random.default_rng(2).normal(size=(4, 3, 5, 7)).astype(np.float32)
    data.write_volume(tmp_path / "v.vsxv", v)
    raw = (tmp_path / "v.vsxv").read_bytes()
    assert raw[:4] == b"VSXV" and len(raw) == data._HEADER.size + v.size * 4
    assert data.read_volume(tmp_path / "v.vsxv").tobytes() == v.tobytes()


def test_volume_rejects_corruption(tmp_path):
    buf = data.encode_volume(np.zeros((2, 2, 2), np.float32))
    with pytest.raises(DataError, match="payload"):
        data.decode_volume(buf[:-1])
    with pytest.raises(DataError, match="VSXV"):
        data.decode_volume(b"XXXX" + buf[4:])


def test_nifti_roundtrip(tmp_path):
    v = np.random.default_rng(3).normal(size=(5, 6, 7)).astype(np.float32)
    data.write_nifti(tmp_path / "v.nii", v)
    assert data.read_nifti(tmp_path / "v.nii").tobytes() == v.tobytes()


def test_nifti_rejects_other_datatypes(tmp_path):
    data.write_nifti(tmp_path / "v.nii", np.zeros((2, 2, 2), np.float32))
    buf = bytearray((tmp_path / "v.nii").read_bytes())
    buf[70:72] = (4).to_bytes(2, "little")
    (tmp_path / "bad.nii").write_bytes(bytes(buf))
    with pytest.raises(DataError, match="datatype"):
        data.read_nifti(tmp_path / "bad.nii")


def test_phantom_set_manifest(tmp_path):
    man = data.write_phantom_set(tmp_path, 10, (16, 16, 16), seed=3)
    entries = data.read_manifest(man)
    assert [sum(e.split == s for e in entries) for s in data.SPLITS] == [7, 2, 1]
    cases = data.load_split(man, "val")
    assert len(cases) == 2 and all(c.image.shape == (4, 16, 16, 16) for c in cases)
    assert all(data.is_nested(c.mask) for c in cases)


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        data.read_manifest(tmp_path / "none.jsonl")
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "image_path": "x", "mask_path": "y", "split": "holdout"}\n')
    with pytest.raises(DataError, match="holdout"):
        data.read_manifest(bad)
