import json

import numpy as np
import pytest

from bigbatch.data import (
    DataError,
    DatasetSpec,
    class_means,
    generate_dataset,
    load_dataset,
    nearest_mean_probe,
    save_dataset,
)


class TestSpec:
    def test_defaults(self):
        spec = DatasetSpec(size=100, classes=4)
        assert spec.resolved_eval_size() == 25
        assert spec.resolved_blob_sigma() == 8 / 6

    def test_eval_size_floor(self):
        spec = DatasetSpec(size=10, classes=5)
        assert spec.resolved_eval_size() == 5  # at least one per class

    def test_validation(self):
        with pytest.raises(DataError):
            DatasetSpec(size=10, classes=1)
        with pytest.raises(DataError):
            DatasetSpec(size=2, classes=4)
        with pytest.raises(DataError):
            DatasetSpec(size=10, classes=2, height=1)
        with pytest.raises(DataError):
            DatasetSpec(size=10, classes=2, separation=0.0)
        with pytest.raises(DataError):
            DatasetSpec(size=10, classes=2, noise_sigma=-1.0)


class TestClassMeans:
    def test_minimum_separation_is_exact(self):
        for classes, sep, sigma in [(2, 4.0, 1.0), (4, 6.0, 0.5), (5, 3.0, 2.0)]:
            spec = DatasetSpec(size=100, classes=classes, separation=sep,
                               noise_sigma=sigma)
            means = class_means(spec).reshape(classes, -1)
            dmin = min(
                float(np.linalg.norm(means[i] - means[j]))
                for i in range(classes) for j in range(i + 1, classes)
            )
            assert abs(dmin - sep * sigma) < 1e-9 * sep * sigma

    def test_shape(self):
        spec = DatasetSpec(size=50, classes=3, height=6, width=10)
        assert class_means(spec).shape == (3, 1, 6, 10)

    def test_channel_means_differ_after_pooling(self):
        # The signed amplitude ramp keeps classes apart even when all
        # spatial structure is averaged away.
        spec = DatasetSpec(size=50, classes=4)
        pooled = class_means(spec).mean(axis=(1, 2, 3))
        gaps = [abs(pooled[i] - pooled[j])
                for i in range(4) for j in range(i + 1, 4)]
        assert min(gaps) > 0.01

    def test_deterministic(self):
        spec = DatasetSpec(size=50, classes=3)
        assert np.array_equal(class_means(spec), class_means(spec))


class TestGeneration:
    def test_shapes_and_balance(self):
        spec = DatasetSpec(size=64, classes=4, height=5, width=7)
        ds = generate_dataset(spec, seed=3)
        assert ds.images.shape == (64, 1, 5, 7)
        assert ds.labels.shape == (64,)
        assert ds.eval_images.shape == (16, 1, 5, 7)
        counts = np.bincount(ds.labels, minlength=4)
        assert counts.max() - counts.min() <= 1  # balanced up to remainder
        assert ds.labels.dtype == np.int64

    def test_seed_determinism(self):
        spec = DatasetSpec(size=32, classes=2)
        a = generate_dataset(spec, seed=5)
        b = generate_dataset(spec, seed=5)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.content_hash() == b.content_hash()
        c = generate_dataset(spec, seed=6)
        assert a.content_hash() != c.content_hash()

    def test_train_and_eval_draws_are_independent(self):
        spec = DatasetSpec(size=16, classes=2, eval_size=16)
        ds = generate_dataset(spec, seed=1)
        assert not np.array_equal(ds.images, ds.eval_images)

    def test_hash_covers_labels(self):
        spec = DatasetSpec(size=16, classes=2)
        ds = generate_dataset(spec, seed=1)
        h0 = ds.content_hash()
        ds.labels = ds.labels.copy()
        ds.labels[0] = (ds.labels[0] + 1) % 2
        assert ds.content_hash() != h0

    def test_two_classes_at_four_sigma_probe_accuracy(self):
        # Bayes accuracy for two classes 4 sigma apart is Phi(2) ~ 0.977;
        # the nearest-mean probe on a large sample should land close.
        spec = DatasetSpec(size=2000, classes=2, separation=4.0)
        ds = generate_dataset(spec, seed=7)
        acc = nearest_mean_probe(ds.images, ds.labels)
        assert acc > 0.95
        assert acc < 1.0  # the task is noisy by design

    def test_wider_separation_is_easier(self):
        near = generate_dataset(DatasetSpec(size=800, classes=4, separation=2.0), 9)
        far = generate_dataset(DatasetSpec(size=800, classes=4, separation=6.0), 9)
        assert nearest_mean_probe(far.images, far.labels) > \
            nearest_mean_probe(near.images, near.labels)


class TestSaveLoad:
    def test_round_trip(self, tmp_path):
        spec = DatasetSpec(size=24, classes=3)
        ds = generate_dataset(spec, seed=2)
        meta = save_dataset(ds, tmp_path)
        assert meta["content_hash"] == ds.content_hash()
        back = load_dataset(tmp_path)
        assert back.spec == spec
        assert back.seed == 2
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.eval_labels, ds.eval_labels)

    def test_files_byte_stable(self, tmp_path):
        spec = DatasetSpec(size=24, classes=3)
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        save_dataset(generate_dataset(spec, seed=2), a_dir)
        save_dataset(generate_dataset(spec, seed=2), b_dir)
        for name in ("images.npy", "labels.npy", "eval_images.npy",
                     "eval_labels.npy", "meta.json"):
            assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()

    def test_missing_meta(self, tmp_path):
        with pytest.raises(DataError, match="meta.json"):
            load_dataset(tmp_path)

    def test_tamper_detection(self, tmp_path):
        ds = generate_dataset(DatasetSpec(size=16, classes=2), seed=4)
        save_dataset(ds, tmp_path)
        tampered = ds.labels.copy()
        tampered[0] = 1 - tampered[0]
        np.save(tmp_path / "labels.npy", tampered)
        with pytest.raises(DataError, match="hash"):
            load_dataset(tmp_path)

    def test_meta_is_json_with_spec(self, tmp_path):
        save_dataset(generate_dataset(DatasetSpec(size=16, classes=2), 0), tmp_path)
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["spec"]["size"] == 16
        assert meta["seed"] == 0
        assert len(meta["content_hash"]) == 64


class TestProbe:
    def test_perfect_when_noiseless(self):
        spec = DatasetSpec(size=40, classes=4)
        means = class_means(spec)
        labels = np.arange(40) % 4
        images = means[labels]
        assert nearest_mean_probe(images, labels) == 1.0
