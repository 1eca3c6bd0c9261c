import numpy as np
import pytest

from vip.errors import DecodeError, EmptyDatasetError, InvalidDatasetError, PreprocessError
from vip.ingestion import (
    IMAGENET_MEAN,
    FeatureCache,
    ImageSpec,
    decode_image,
    iterate_dataset,
    list_images,
    preprocess,
    resize_bilinear,
)
from vip.model import ModelConfig

from .helpers import make_dataset, write_image


def cfg(patch):
    return ModelConfig(depth=1, dim=8, heads=1, patch_size=patch)


@pytest.mark.parametrize("patch,count", [(14, 256), (16, 196)])
def test_patch_counts(patch, count):
    img = ImageSpec.from_array(np.random.default_rng(0).random((300, 400, 3)))
    out = preprocess(img, cfg(patch), resize=256, crop=224)
    assert out.shape == (count, 3 * patch * patch)


def test_gray_mean_image_normalizes_to_zero():
    pixels = np.broadcast_to(np.array(IMAGENET_MEAN, dtype=np.float32), (240, 320, 3))
    out = preprocess(ImageSpec.from_array(pixels), cfg(14))
    np.testing.assert_allclose(out, 0.0, atol=1e-6)


def test_patch_layout_channel_row_col():
    # crop == resize == image size: no resampling, so patches are exact slices.
    x = np.random.default_rng(1).random((4, 4, 3)).astype(np.float32)
    out = preprocess(x, cfg(2), resize=4, crop=4, mean=(0, 0, 0), std=(1, 1, 1))
    assert out.shape == (4, 12)
    # second patch in row-major order: rows 0-1, cols 2-3
    np.testing.assert_array_equal(out[1], x[0:2, 2:4, :].transpose(2, 0, 1).ravel())


def test_resize_then_center_crop_offsets():
    x = np.zeros((10, 20, 3), dtype=np.float32)
    x[:, 9:11] = 1.0
    out = preprocess(x, cfg(2), resize=10, crop=4, mean=(0, 0, 0), std=(1, 1, 1))
    grid = out.reshape(2, 2, 3, 2, 2).transpose(0, 3, 1, 4, 2).reshape(4, 4, 3)
    np.testing.assert_array_equal(grid[:, 1:3, 0], 1.0)
    np.testing.assert_array_equal(grid[:, [0, 3], 0], 0.0)


def test_resize_bilinear_constant_and_identity():
    c = np.full((5, 7, 3), 0.25, dtype=np.float32)
    np.testing.assert_allclose(resize_bilinear(c, 9, 3), 0.25, atol=1e-7)
    x = np.random.default_rng(0).random((6, 6, 3)).astype(np.float32)
    np.testing.assert_array_equal(resize_bilinear(x, 6, 6), x)


def test_preprocess_errors():
    img = np.zeros((20, 20, 3), dtype=np.float32)
    with pytest.raises(PreprocessError):
        preprocess(img, cfg(14), resize=200, crop=100)
    with pytest.raises(PreprocessError, match="smaller than crop"):
        preprocess(img, cfg(2), resize=10, crop=12)


def test_preprocess_deterministic():
    img = ImageSpec.from_array(np.random.default_rng(3).random((50, 70, 3)))
    a = preprocess(img, cfg(4), resize=40, crop=32)
    b = preprocess(img, cfg(4), resize=40, crop=32)
    assert a.tobytes() == b.tobytes()


def test_decode_errors_and_labels(tmp_path):
    bad = tmp_path / "x.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(DecodeError):
        decode_image(bad)
    p = write_image(tmp_path / "dogs" / "a.png", np.full((3, 3, 3), 255))
    spec = decode_image(p, "dogs")
    assert spec.pixels.shape == (3, 3, 3) and spec.pixels.max() == 1.0
    assert len(spec.content_hash) == 64


class TestDataset:
    def test_sorted_order_and_labels(self, tmp_path):
        for name in ("c.png", "a.png", "b.png"):
            write_image(tmp_path / name, np.zeros((4, 4, 3)))
        entries = list_images(tmp_path)
        assert [p.name for p, _ in entries] == ["a.png", "b.png", "c.png"]
        assert all(label is None for _, label in entries)
        assert [p.name for p, _ in list_images(tmp_path, limit=2)] == ["a.png", "b.png"]

    def test_seeded_shuffle_repeatable(self, tmp_path):
        make_dataset(tmp_path, n_classes=4, per_class=3, size=4)
        a = [p for p, _ in list_images(tmp_path, seed=7, shuffle=True)]
        b = [p for p, _ in list_images(tmp_path, seed=7, shuffle=True)]
        assert a == b
        assert sorted(a) == [p for p, _ in list_images(tmp_path)]

    def test_directory_labels_and_iteration(self, tmp_path):
        make_dataset(tmp_path, n_classes=2, per_class=2, size=4)
        specs = list(iterate_dataset(tmp_path))
        assert [s.label for s in specs] == ["class000", "class000", "class001", "class001"]

    def test_labels_csv(self, tmp_path):
        write_image(tmp_path / "x.png", np.zeros((4, 4, 3)))
        write_image(tmp_path / "sub" / "y.png", np.zeros((4, 4, 3)))
        (tmp_path / "labels.csv").write_text("path,label\nx.png,cat\nsub/y.png,dog\n")
        assert [label for _, label in list_images(tmp_path)] == ["dog", "cat"]

    def test_empty_and_missing(self, tmp_path):
        with pytest.raises(EmptyDatasetError):
            list_images(tmp_path)
        with pytest.raises(InvalidDatasetError):
            list_images(tmp_path / "missing")


class TestCache:
    def test_round_trip_bit_identical(self, tmp_path):
        cache = FeatureCache(tmp_path)
        feats = {"full": np.random.default_rng(0).standard_normal(16).astype(np.float32)}
        key = FeatureCache.key("abc", "cfg", {"layer": 1})
        assert cache.get(key) is None
        cache.put(key, feats, {"config_hash": "cfg"})
        got = cache.get(key)
        assert got["full"].tobytes() == feats["full"].tobytes()
        assert cache.info(key)["config_hash"] == "cfg"

    def test_key_depends_on_content_config_and_version(self):
        k = FeatureCache.key("abc", "cfg", {"layer": 1})
        assert k != FeatureCache.key("abd", "cfg", {"layer": 1})
        assert k != FeatureCache.key("abc", "cfg2", {"layer": 1})
        assert k != FeatureCache.key("abc", "cfg", {"layer": 2})
        assert k != FeatureCache.key("abc", "cfg", {"layer": 1}, version="9.9")

    def test_env_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("VIP_CACHE_DIR", str(tmp_path / "elsewhere"))
        assert FeatureCache().root == tmp_path / "elsewhere"
