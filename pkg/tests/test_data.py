"""Synthetic scenes, manifests, and sample ingestion."""

import numpy as np
import pytest

from malvision.data import (DatasetManifest, SampleEntry, gen_synthetic,
                            load_batch, load_image_file, load_manifest,
                            load_sample, render_scene, save_manifest)
from malvision.errors import DataError
from malvision.tensor import load_tensor, save_tensor


class TestRenderScene:
    def test_single_circle_seg_has_two_classes(self):
        rng = np.random.default_rng(0)
        _, _, seg, label = render_scene(rng, 32, 3, shape_types=[0])
        assert sorted(np.unique(seg).tolist()) == [0, 1]
        assert label == 0

    def test_empty_scene_depth_is_constant_one(self):
        rng = np.random.default_rng(1)
        img, depth, seg, _ = render_scene(rng, 16, 3, shape_types=[],
                                          noise=0.0)
        assert (depth == 1.0).all()
        assert (seg == 0).all()
        assert np.allclose(img, img[0, 0, 0])

    def test_deterministic_under_seed(self):
        a = render_scene(np.random.default_rng(7), 32, 3)
        b = render_scene(np.random.default_rng(7), 32, 3)
        for x, y in zip(a[:3], b[:3]):
            assert np.array_equal(x, y)

    def test_dominant_label_is_most_visible_type(self):
        rng = np.random.default_rng(2)
        _, _, seg, label = render_scene(rng, 48, 3)
        counts = np.bincount(seg[seg > 0] - 1, minlength=3)
        assert label == counts.argmax()

    def test_values_in_unit_range(self):
        img, _, _, _ = render_scene(np.random.default_rng(3), 32, 3)
        assert img.min() >= 0.0 and img.max() <= 1.0


class TestGenSynthetic:
    def test_same_seed_byte_identical(self, tmp_path):
        m1 = gen_synthetic("seg", 3, 16, seed=5, out_dir=tmp_path / "a",
                           n_test=2)
        m2 = gen_synthetic("seg", 3, 16, seed=5, out_dir=tmp_path / "b",
                           n_test=2)
        assert m1.read_bytes() == m2.read_bytes()
        man = load_manifest(m1)
        for split, entries in man.splits.items():
            for e in entries:
                rel = e.image
                assert ((tmp_path / "a" / rel).read_bytes()
                        == (tmp_path / "b" / rel).read_bytes())
                if e.seg:
                    assert ((tmp_path / "a" / e.seg).read_bytes()
                            == (tmp_path / "b" / e.seg).read_bytes())

    def test_different_seed_differs(self, tmp_path):
        m1 = gen_synthetic("ar", 2, 16, seed=1, out_dir=tmp_path / "a")
        m2 = gen_synthetic("ar", 2, 16, seed=2, out_dir=tmp_path / "b")
        assert m1.read_bytes() != m2.read_bytes()

    def test_classify_labels_balanced(self, tmp_path):
        path = gen_synthetic("classify", 9, 16, seed=0, out_dir=tmp_path)
        man = load_manifest(path)
        labels = [e.label for e in man.splits["train"]]
        assert sorted(set(labels)) == [0, 1, 2]
        assert labels.count(0) == labels.count(1) == labels.count(2)

    def test_depth_task_references_depth_files(self, tmp_path):
        path = gen_synthetic("depth", 2, 16, seed=0, out_dir=tmp_path)
        man = load_manifest(path)
        for e in man.splits["train"]:
            assert e.depth is not None
            depth = load_tensor(man.root / e.depth)
            assert depth.shape == (16, 16)

    def test_rejects_empty_and_unknown(self, tmp_path):
        with pytest.raises(DataError):
            gen_synthetic("classify", 0, 16, seed=0, out_dir=tmp_path)
        with pytest.raises(DataError):
            gen_synthetic("wat", 1, 16, seed=0, out_dir=tmp_path)


class TestLoadSample:
    def test_round_trip_with_identity_stats(self, tmp_path):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 1, size=(3, 8, 8)).astype(np.float32)
        save_tensor(tmp_path / "x.tnsr", img)
        manifest = DatasetManifest(
            root=tmp_path, task="ar", image_size=8, channels=3,
            stats={"mean": [0.0, 0.0, 0.0], "std": [1.0, 1.0, 1.0]},
            splits={"train": [SampleEntry(image="x.tnsr")]})
        loaded, targets = load_sample(manifest, 0)
        assert np.array_equal(loaded, img)
        assert targets == {}

    def test_normalization_applied(self, tmp_path):
        img = np.full((1, 4, 4), 3.0, dtype=np.float32)
        save_tensor(tmp_path / "x.tnsr", img)
        manifest = DatasetManifest(
            root=tmp_path, task="ar", image_size=4, channels=1,
            stats={"mean": [1.0], "std": [2.0]},
            splits={"train": [SampleEntry(image="x.tnsr")]})
        loaded, _ = load_sample(manifest, 0)
        assert np.allclose(loaded, 1.0)

    def test_index_out_of_range(self, tmp_path):
        manifest = DatasetManifest(
            root=tmp_path, task="ar", image_size=4, channels=1,
            stats={"mean": [0.0], "std": [1.0]}, splits={"train": []})
        with pytest.raises(DataError):
            load_sample(manifest, 0)

    def test_corrupt_file_names_path(self, tmp_path):
        (tmp_path / "bad.tnsr").write_bytes(b"garbage")
        manifest = DatasetManifest(
            root=tmp_path, task="ar", image_size=4, channels=1,
            stats={"mean": [0.0], "std": [1.0]},
            splits={"train": [SampleEntry(image="bad.tnsr")]})
        with pytest.raises(DataError, match="bad.tnsr"):
            load_sample(manifest, 0)

    def test_png_gray_gradient_decodes_to_fractions(self, tmp_path):
        from PIL import Image

        row = np.arange(256, dtype=np.uint8).reshape(1, 256)
        Image.fromarray(row, mode="L").save(tmp_path / "g.png")
        arr = load_image_file(tmp_path / "g.png")
        assert arr.shape == (1, 1, 256)
        want = np.arange(256) / 255.0
        assert np.allclose(arr[0, 0], want, atol=1e-7)
        assert (np.diff(arr[0, 0]) > 0).all()

    def test_png_rgb(self, tmp_path):
        from PIL import Image

        rgb = np.zeros((4, 4, 3), dtype=np.uint8)
        rgb[..., 1] = 255
        Image.fromarray(rgb, mode="RGB").save(tmp_path / "c.png")
        arr = load_image_file(tmp_path / "c.png")
        assert arr.shape == (3, 4, 4)
        assert np.allclose(arr[1], 1.0) and np.allclose(arr[0], 0.0)

    def test_load_batch_preserves_order(self, tmp_path):
        path = gen_synthetic("classify", 6, 16, seed=0, out_dir=tmp_path)
        man = load_manifest(path)
        imgs, targets = load_batch(man, [3, 0, 5])
        assert imgs.shape == (3, 3, 16, 16)
        one, t_one = load_sample(man, 3)
        assert np.array_equal(imgs[0], one)
        assert targets[0]["label"] == t_one["label"]


class TestManifestValidation:
    def test_missing_file_rejected(self, tmp_path):
        manifest = DatasetManifest(
            root=tmp_path, task="ar", image_size=4, channels=1,
            stats={"mean": [0.0], "std": [1.0]},
            splits={"train": [SampleEntry(image="nope.tnsr")]})
        save_manifest(manifest, tmp_path / "manifest.json")
        with pytest.raises(DataError, match="nope.tnsr"):
            load_manifest(tmp_path / "manifest.json")

    def test_classify_requires_labels(self, tmp_path):
        save_tensor(tmp_path / "x.tnsr",
                    np.zeros((1, 4, 4), dtype=np.float32))
        manifest = DatasetManifest(
            root=tmp_path, task="classify", image_size=4, channels=1,
            stats={"mean": [0.0], "std": [1.0]},
            splits={"train": [SampleEntry(image="x.tnsr")]})
        save_manifest(manifest, tmp_path / "manifest.json")
        with pytest.raises(DataError, match="label"):
            load_manifest(tmp_path / "manifest.json")

    def test_unknown_task_rejected(self, tmp_path):
        (tmp_path / "manifest.json").write_text(
            '{"task": "nope", "image_size": 4, "channels": 1, '
            '"stats": {"mean": [0], "std": [1]}, "splits": {}}')
        with pytest.raises(DataError, match="task"):
            load_manifest(tmp_path / "manifest.json")
