import struct

import numpy as np
import pytest

from dance import data as D


def write_raw_images(path, pixels, shape):
    path.write_bytes(struct.pack(">IIII", D.IDX_IMAGES, *shape) + bytes(pixels))


def test_idx_bytes_rescale(tmp_path):
    p = tmp_path / "img.idx"
    write_raw_images(p, [0, 255, 128, 64], (1, 2, 2))
    x = D.load_idx_images(p)
    np.testing.assert_allclose(x.ravel(), [0.0, 1.0, 0.50196, 0.25098], atol=1e-5)
    assert x.shape == (1, 2, 2)


def test_idx_truncated_body(tmp_path):
    p = tmp_path / "img.idx"
    write_raw_images(p, [0, 255, 128], (1, 2, 2))
    with pytest.raises(D.DataError, match="truncated"):
        D.load_idx_images(p)


def test_idx_truncated_header(tmp_path):
    p = tmp_path / "img.idx"
    p.write_bytes(struct.pack(">I", D.IDX_IMAGES) + b"\0\0")
    with pytest.raises(D.DataError, match="truncated"):
        D.load_idx_images(p)


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "img.idx"
    p.write_bytes(struct.pack(">IIII", 0x0801, 1, 1, 1) + b"\0")
    with pytest.raises(D.DataError, match="magic"):
        D.load_idx_images(p)


def test_idx_label_count_mismatch(tmp_path):
    write_raw_images(tmp_path / "i", [0] * 8, (2, 2, 2))
    (tmp_path / "l").write_bytes(struct.pack(">II", D.IDX_LABELS, 3) + bytes([0, 1, 1]))
    with pytest.raises(D.DataError):
        D.load_idx(tmp_path / "i", tmp_path / "l")


def test_synthetic_round_trip_through_idx(tmp_path):
    ds = D.synthetic_shapes(20, seed=3)
    D.write_idx(ds, tmp_path / "i", tmp_path / "l")
    back = D.load_idx(tmp_path / "i", tmp_path / "l")
    # 8-bit storage: values come back on the 1/255 grid
    quant = np.rint(ds.images * 255) / 255
    assert np.array_equal(back.images, quant)
    assert np.array_equal(back.labels, ds.labels)
    D.write_idx(back, tmp_path / "i2", tmp_path / "l2")
    again = D.load_idx(tmp_path / "i2", tmp_path / "l2")
    assert np.array_equal(again.images, back.images)
    assert (tmp_path / "i").read_bytes() == (tmp_path / "i2").read_bytes()


def test_synthetic_shapes_properties():
    ds = D.synthetic_shapes(200, seed=0)
    assert ds.images.shape == (200, 16, 16)
    assert set(np.unique(ds.labels)) == {0, 1}
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    for img, m, y in zip(ds.images, ds.masks, ds.labels):
        assert img[m > 0].min() >= 0.6
        n = int(m.sum())
        if y == 0:
            assert n in (9, 16, 25, 36)
        else:
            assert n in (9, 13, 17)
    ds.validate(2)
    with pytest.raises(D.DataError):
        ds.validate(1)


def test_synthetic_shapes_seeded():
    a, b = D.synthetic_shapes(10, seed=5), D.synthetic_shapes(10, seed=5)
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, D.synthetic_shapes(10, seed=6).images)


def test_subset_keeps_masks():
    ds = D.synthetic_shapes(10, seed=1)
    sub = ds.subset([2, 4])
    assert np.array_equal(sub.masks, ds.masks[[2, 4]])
    assert len(sub) == 2
