"""Dataset ingestion: folder loading, synthetic generation, splitting."""

import numpy as np
import pytest
from PIL import Image

from advlab import data


def _write_png(path, array):
    Image.fromarray((array * 255).round().astype(np.uint8)).save(path)


def _folder(tmp_path, shapes=((8, 8, 3), (8, 8, 3)), per_class=3):
    root = tmp_path / "ds"
    rng = np.random.default_rng(0)
    for name, shape in zip(("cats", "dogs"), shapes):
        cdir = root / name
        cdir.mkdir(parents=True)
        for i in range(per_class):
            _write_png(cdir / f"{i:03d}.png", rng.random(shape))
    return root


def test_folder_loader_reads_and_scales(tmp_path):
    root = tmp_path / "ds"
    (root / "aaa").mkdir(parents=True)
    (root / "bbb").mkdir()
    img = np.zeros((8, 8, 3))
    img[0, 0] = [1.0, 0.0, 1.0]
    _write_png(root / "aaa" / "x.png", img)
    _write_png(root / "bbb" / "y.png", np.full((8, 8, 3), 128 / 255.0))
    images, labels, names = data.load_image_folder(root)
    assert names == ["aaa", "bbb"]         # sorted, and sorted drives labels
    assert images.shape == (2, 8, 8, 3)
    assert np.array_equal(labels, [0, 1])
    assert images.dtype == np.float64
    assert np.array_equal(images[0][0, 0], [1.0, 0.0, 1.0])
    assert np.all(images[1] == 128 / 255.0)
    assert images.min() >= 0.0 and images.max() <= 1.0


def test_folder_loader_round_trips_8bit(tmp_path):
    root = _folder(tmp_path, per_class=2)
    images, _, _ = data.load_image_folder(root)
    # values are exact multiples of 1/255 after the round trip
    assert np.allclose(images * 255, np.round(images * 255), atol=1e-9)


def test_folder_loader_aggregates_problems(tmp_path):
    root = _folder(tmp_path, per_class=2)
    (root / "cats" / "broken.png").write_bytes(b"not a png")
    _write_png(root / "dogs" / "odd.png",
               np.random.default_rng(1).random((4, 4, 3)))
    with pytest.raises(ValueError) as err:
        data.load_image_folder(root)
    msg = str(err.value)
    assert "broken.png" in msg and "odd.png" in msg


def test_folder_loader_structural_errors(tmp_path):
    with pytest.raises(ValueError):
        data.load_image_folder(tmp_path / "missing")
    root = tmp_path / "one"
    (root / "only").mkdir(parents=True)
    with pytest.raises(ValueError):
        data.load_image_folder(root)
    three = tmp_path / "three"
    for name in ("a", "b", "c"):
        (three / name).mkdir(parents=True)
    with pytest.raises(ValueError):
        data.load_image_folder(three)
    empty = tmp_path / "empty"
    (empty / "a").mkdir(parents=True)
    (empty / "b").mkdir()
    with pytest.raises(ValueError):
        data.load_image_folder(empty)


def test_synthetic_is_deterministic_and_bounded():
    a_imgs, a_labs = data.synthetic_images(12, seed=3)
    b_imgs, b_labs = data.synthetic_images(12, seed=3)
    assert np.array_equal(a_imgs, b_imgs)
    assert np.array_equal(a_labs, b_labs)
    c_imgs, _ = data.synthetic_images(12, seed=4)
    assert not np.array_equal(a_imgs, c_imgs)
    assert a_imgs.shape == (12, 32, 32, 3)
    assert a_imgs.min() >= 0.0 and a_imgs.max() <= 1.0
    assert np.array_equal(a_labs, [i % 2 for i in range(12)])
    small, _ = data.synthetic_images(4, seed=0, size=16)
    assert small.shape == (4, 16, 16, 3)
    with pytest.raises(ValueError):
        data.synthetic_images(1)


def test_split_is_stratified_and_disjoint():
    images = np.arange(25, dtype=np.float64).reshape(25, 1, 1, 1)
    labels = np.array([0] * 15 + [1] * 10)
    ds = data.split(images, labels, ratio=0.8, seed=1)
    # floor(15*0.8)=12 and floor(10*0.8)=8
    assert int((ds.train_labels == 0).sum()) == 12
    assert int((ds.train_labels == 1).sum()) == 8
    assert len(ds.test_labels) == 5
    train_vals = set(ds.train_images.ravel().tolist())
    test_vals = set(ds.test_images.ravel().tolist())
    assert not train_vals & test_vals
    assert train_vals | test_vals == set(float(i) for i in range(25))

    again = data.split(images, labels, ratio=0.8, seed=1)
    assert np.array_equal(ds.train_images, again.train_images)
    other = data.split(images, labels, ratio=0.8, seed=2)
    assert not np.array_equal(ds.train_images, other.train_images)


def test_split_rejects_bad_ratio_and_missing_class():
    images = np.zeros((4, 1, 1, 1))
    labels = np.array([0, 1, 0, 1])
    for ratio in (0.0, 1.0, -0.5, 2.0):
        with pytest.raises(ValueError):
            data.split(images, labels, ratio=ratio)
    with pytest.raises(ValueError):
        data.split(np.zeros((4, 1, 1, 1)), np.zeros(4, dtype=int), ratio=0.5)


def test_ingest_routes_specs(tmp_path):
    ds = data.ingest({"kind": "synthetic", "count": 10, "seed": 1, "size": 16})
    assert ds.train_images.shape[1:] == (16, 16, 3)
    assert ds.class_names == ["blobs", "stripes"]
    assert "synthetic" in ds.source

    root = _folder(tmp_path, per_class=4)
    from_dict = data.ingest({"kind": "folder", "path": str(root)},
                            split_ratio=0.5, split_seed=0)
    from_str = data.ingest(str(root), split_ratio=0.5, split_seed=0)
    assert from_dict.class_names == ["cats", "dogs"]
    assert np.array_equal(from_dict.train_images, from_str.train_images)

    with pytest.raises(ValueError):
        data.ingest({"kind": "carrier_pigeon"})
