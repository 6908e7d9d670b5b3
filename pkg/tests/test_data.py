import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsseg.data import (FormatError, NonStandardAngleWarning, TransformKind, UnsupportedTransform, apply_transform,
                          centered_blob_3d, decode_volume, encode_volume, gen_blobs_3d, gen_shapes_2d, load_dataset,
                          rotate_array, rotate_volume, rotation_matrix, save_dataset, sphere_mask, standard_transforms)
from capsseg.metrics import seg_metrics


def _same(a, b):
    return all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(a.samples, b.samples))


# ------------------------------------------------------------------ generators


def test_shapes_deterministic_and_labelled():
    a, b = gen_shapes_2d(3, 20), gen_shapes_2d(3, 20)
    assert _same(a, b)
    assert not _same(a, gen_shapes_2d(4, 20))
    for n in (2, 3):
        ds = gen_shapes_2d(5, 30, n_classes=n, channels=3)
        assert ds.masks().max() < n
        assert ds.images().shape == (30, 3, 64, 64)
    assert gen_shapes_2d(5, 30, n_classes=3).masks().max() == 2


def test_shapes_foreground_fraction():
    frac = (gen_shapes_2d(11, 1000, 32).masks() > 0).mean()
    assert 0.05 <= frac <= 0.5


def test_blobs_deterministic_and_labelled():
    a = gen_blobs_3d(1, 5, 16, n_classes=3)
    assert _same(a, gen_blobs_3d(1, 5, 16, n_classes=3))
    assert a.masks().max() < 3 and a.masks().shape == (5, 16, 16, 16)


@pytest.mark.parametrize("r", [4.0, 5.0, 6.0, 8.0])
@pytest.mark.parametrize("center", [None, (11, 11, 11)])
def test_sphere_volume(r, center):
    count = sphere_mask(24, r, center).sum()
    assert abs(count - 4 / 3 * math.pi * r ** 3) <= 0.1 * 4 / 3 * math.pi * r ** 3


def test_centered_blob_noise_free_is_symmetric():
    b = centered_blob_3d(0, noise_std=0.0)
    for axes in ((1, 2), (1, 3), (2, 3)):
        assert np.array_equal(np.rot90(b.image, axes=axes), b.image)
    noisy = centered_blob_3d(0)
    assert not np.array_equal(noisy.image, b.image)
    assert np.array_equal(noisy.mask, b.mask)


def test_generator_rejects_bad_arguments():
    with pytest.raises(ValueError):
        gen_shapes_2d(0, 2, n_classes=1)
    with pytest.raises(ValueError):
        gen_shapes_2d(0, 2, size=4)


# ------------------------------------------------------------------ transforms


def test_transform_identity_and_zero_channel():
    img = gen_shapes_2d(0, 1, 16, channels=3).samples[0].image
    assert apply_transform(img, TransformKind("identity")) is img
    z = apply_transform(img, TransformKind("zero_channel", channel=0))
    assert z[0].sum() == 0.0 and np.array_equal(z[1:], img[1:])
    with pytest.raises(UnsupportedTransform):
        apply_transform(img[:1], TransformKind("zero_channel", channel=0))
    assert len(standard_transforms(3)) == 7 and len(standard_transforms(1)) == 4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([(16, 16), (12, 20), (8, 8, 8)]))
def test_swap_is_involution(seed, shape):
    img = np.random.default_rng(seed).uniform(size=(2,) + shape).astype(np.float32)
    t = TransformKind("swap_patches", seed=seed)
    once = apply_transform(img, t)
    assert np.array_equal(apply_transform(once, t), img)
    assert np.array_equal(np.sort(once.ravel()), np.sort(img.ravel()))


def test_blur_and_noise():
    img = np.zeros((1, 9, 9), dtype=np.float32)
    img[0, 4, 4] = 1.0
    b = apply_transform(img, TransformKind("blur"))
    assert b.dtype == np.float32 and b[0, 4, 4] < 1.0 and b.sum() == pytest.approx(1.0, rel=1e-5)
    flat = np.full((1, 9, 9), 0.5, dtype=np.float32)
    assert np.array_equal(apply_transform(flat, TransformKind("blur")), flat)
    n1 = apply_transform(flat, TransformKind("noise", seed=3))
    assert np.array_equal(n1, apply_transform(flat, TransformKind("noise", seed=3)))
    assert 0.0 <= n1.min() and n1.max() <= 1.0 and n1.std() > 0
    with pytest.raises(ValueError):
        apply_transform(flat, TransformKind("noise"))
    with pytest.raises(ValueError):
        TransformKind("mirror")


# ------------------------------------------------------------------ rotation


def test_rotation_identity_and_orthogonality():
    vol = np.random.default_rng(0).uniform(size=(9, 9, 9))
    assert np.array_equal(rotate_array(vol, 0, "z"), vol)
    for axis in ("x", "y", "z", "all"):
        R = rotation_matrix(30, axis)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)


def test_right_angle_rotation_preserves_voxels():
    m = np.zeros((12, 12, 12), dtype=np.uint8)
    m[2:9, 4:7, 3:11] = 1
    for axis in ("x", "y", "z"):
        r = rotate_array(m, 90, axis, labels=True)
        assert r.sum() == m.sum()
        assert np.array_equal(rotate_array(r, 90, axis, labels=True, inverse=True), m)


def test_rotation_keeps_dice():
    rng = np.random.default_rng(1)
    true = (rng.uniform(size=(10, 10, 10)) > 0.6).astype(np.uint8)
    pred = (rng.uniform(size=(10, 10, 10)) > 0.6).astype(np.uint8)
    before = seg_metrics(pred, true, 2).dice
    after = seg_metrics(rotate_array(pred, 90, "y", labels=True), rotate_array(true, 90, "y", labels=True), 2).dice
    assert before == after


def test_nonstandard_angle_warns():
    s = centered_blob_3d(0, size=8, radius=2.0)
    with pytest.warns(NonStandardAngleWarning):
        rotate_volume(s, 20, "x")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rotate_volume(s, 45, "x")
    with pytest.raises(ValueError):
        rotate_array(np.zeros((4, 4, 4)), 45, "w")


# ------------------------------------------------------------------ file formats


@pytest.mark.parametrize("arr", [np.arange(24, dtype=np.float32).reshape(2, 3, 4), np.ones((5, 1, 2), dtype=np.uint8),
                                 np.zeros((3,), dtype=np.float32)])
def test_volume_round_trip(arr):
    buf = encode_volume(arr)
    back = decode_volume(buf)
    assert back.dtype == arr.dtype and np.array_equal(back, arr)
    assert encode_volume(back) == buf


def test_volume_errors_carry_offsets():
    buf = encode_volume(np.ones((2, 2), dtype=np.float32))
    for cut in (0, 3, 7, 9, len(buf) - 1):
        with pytest.raises(FormatError) as e:
            decode_volume(buf[:cut])
        assert e.value.offset is not None
    with pytest.raises(FormatError):
        decode_volume(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        decode_volume(buf + b"\0")
    bad = bytearray(buf)
    bad[8] = 9  # dtype code
    with pytest.raises(FormatError):
        decode_volume(bytes(bad))
    with pytest.raises(TypeError):
        encode_volume(np.ones(3, dtype=np.int32))


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=64))
def test_volume_decoder_never_crashes(blob):
    try:
        decode_volume(blob)
    except FormatError:
        pass


def test_dataset_round_trip(tmp_path):
    ds = gen_shapes_2d(2, 6, 16, n_classes=3)
    save_dataset(tmp_path / "a", ds)
    back = load_dataset(tmp_path / "a")
    assert back.n_classes == 3 and _same(ds, back)
    assert back.names == ds.names or back.names == [f"{i:05d}" for i in range(6)]
    save_dataset(tmp_path / "b", back)
    for sub in ("images", "masks"):
        for f in sorted((tmp_path / "a" / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()
    assert (tmp_path / "a" / "manifest.txt").read_bytes() == (tmp_path / "b" / "manifest.txt").read_bytes()


def test_dataset_corruption(tmp_path):
    save_dataset(tmp_path, gen_shapes_2d(2, 2, 16))
    f = sorted((tmp_path / "images").iterdir())[0]
    f.write_bytes(f.read_bytes()[:10])
    with pytest.raises(FormatError):
        load_dataset(tmp_path)
