"""Dataset tests: synthetic generator properties, disk layout round-trips,
resizing semantics, augmentation, and batching."""

import numpy as np
import pytest
from PIL import Image

from liifseg import data as dat
from liifseg.errors import DataError, ParameterError


class TestSynthFace:
    def test_same_seed_identical(self):
        a = dat.synth_face(42, 64)
        b = dat.synth_face(42, 64)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.image, b.image)

    def test_different_seeds_differ(self):
        a = dat.synth_face(1, 64)
        b = dat.synth_face(2, 64)
        assert not np.array_equal(a.labels, b.labels)

    def test_rejects_tiny_resolution(self):
        with pytest.raises(ParameterError):
            dat.synth_face(0, 16)

    @pytest.mark.parametrize("chunk", range(10))
    def test_at_least_six_labels_across_thousand_seeds(self, chunk):
        for seed in range(chunk * 100, (chunk + 1) * 100):
            labels = dat.synth_face(seed, 64).labels
            assert len(np.unique(labels)) >= 6, f"seed {seed}"

    def test_eye_pixels_inside_skin_ellipse(self):
        for seed in (0, 7, 99, 1234):
            sample = dat.synth_face(seed, 96)
            geom = dat._sample_face_geometry(np.random.default_rng(seed))
            centers = (np.arange(96) + 0.5) / 96
            xs, ys = np.meshgrid(centers, centers, indexing="xy")
            u, v = geom.face_frame(xs, ys)
            eyes = (sample.labels == dat.EYE_L) | (sample.labels == dat.EYE_R)
            assert eyes.any()
            assert (u[eyes] ** 2 + v[eyes] ** 2 <= 1.0).all()

    def test_labels_are_exact_ids(self):
        sample = dat.synth_face(3, 64)
        assert sample.labels.dtype.kind == "i"
        assert set(np.unique(sample.labels)) <= set(range(8))

    def test_image_range_and_dtype(self):
        sample = dat.synth_face(4, 64)
        assert sample.image.dtype == np.float32
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0

    def test_reduced_class_count(self):
        sample = dat.synth_face(5, 64, num_classes=3)
        assert sample.num_classes == 3
        assert sample.labels.max() <= 2


class TestDatasetLayout:
    def _write(self, root, n=3, res=48):
        samples = [dat.synth_face(s, res) for s in range(n)]
        ids = [f"{i:04d}" for i in range(n)]
        dat.write_dataset(samples, ids, root, "train")
        return samples, ids

    def test_round_trip(self, tmp_path):
        samples, _ = self._write(tmp_path)
        loaded = dat.load_dataset(tmp_path, "train", num_classes=8)
        assert len(loaded) == 3
        for orig, back in zip(samples, loaded):
            np.testing.assert_array_equal(orig.labels, back.labels)
            # images round-trip through 8-bit quantization
            assert np.abs(orig.image - back.image).max() <= 1 / 255 + 1e-6

    def test_empty_split(self, tmp_path):
        (tmp_path / "train.txt").write_text("")
        assert dat.load_dataset(tmp_path, "train") == []

    def test_missing_mask_names_id(self, tmp_path):
        self._write(tmp_path)
        (tmp_path / "masks" / "0001.png").unlink()
        with pytest.raises(DataError) as err:
            dat.load_dataset(tmp_path, "train", num_classes=8)
        assert "0001" in str(err.value)

    def test_size_mismatch_rejected(self, tmp_path):
        self._write(tmp_path)
        Image.new("L", (10, 20)).save(tmp_path / "masks" / "0002.png")
        with pytest.raises(DataError) as err:
            dat.load_dataset(tmp_path, "train", num_classes=8)
        assert "0002" in str(err.value)

    def test_mask_value_exceeding_classes_rejected(self, tmp_path):
        self._write(tmp_path)
        bad = np.full((48, 48), 20, dtype=np.uint8)
        Image.fromarray(bad, mode="L").save(tmp_path / "masks" / "0000.png")
        with pytest.raises(DataError) as err:
            dat.load_dataset(tmp_path, "train", num_classes=8)
        assert "0000" in str(err.value)

    def test_lexicographic_order(self, tmp_path):
        samples = [dat.synth_face(s, 32) for s in range(3)]
        dat.write_dataset(samples, ["b", "a", "c"], tmp_path, "train")
        # rewrite split file scrambled; loading must sort
        (tmp_path / "train.txt").write_text("c\nb\na\n")
        loaded = dat.load_dataset(tmp_path, "train", num_classes=8)
        np.testing.assert_array_equal(loaded[0].labels, samples[1].labels)  # id 'a'

    def test_missing_split_file(self, tmp_path):
        with pytest.raises(DataError):
            dat.load_dataset(tmp_path, "nope")


class TestResizeSample:
    def test_same_resolution_unchanged(self):
        s = dat.synth_face(0, 48)
        out = dat.resize_sample(s, 48)
        np.testing.assert_array_equal(out.labels, s.labels)
        np.testing.assert_array_equal(out.image, s.image)

    def test_constant_image_stays_constant(self):
        img = np.full((3, 16, 16), 0.25, dtype=np.float32)
        labels = np.zeros((16, 16), dtype=np.int64)
        out = dat.resize_sample(dat.SegSample(img, labels, 8), 33)
        np.testing.assert_allclose(out.image, 0.25, atol=1e-6)

    def test_checkerboard_downscale_picks_exact_samples(self):
        # 2x nearest downscale reads the documented index map: src = floor((i + .5) * 2)
        labels = np.indices((8, 8)).sum(axis=0) % 2
        img = labels[None].repeat(3, axis=0).astype(np.float32)
        out = dat.resize_sample(dat.SegSample(img, labels, 8), 4)
        idx = np.floor((np.arange(4) + 0.5) * 2).astype(int)
        np.testing.assert_array_equal(out.labels, labels[idx][:, idx])

    def test_labels_remain_valid_ids(self):
        s = dat.synth_face(1, 96)
        for res in (32, 48, 127):
            out = dat.resize_sample(s, res)
            assert out.labels.shape == (res, res)
            assert set(np.unique(out.labels)) <= set(np.unique(s.labels))


class TestAugment:
    def test_neutral_policy_is_identity(self):
        s = dat.synth_face(2, 64)
        out = dat.augment(s, dat.AugmentPolicy.neutral(), np.random.default_rng(0))
        np.testing.assert_array_equal(out.labels, s.labels)
        np.testing.assert_allclose(out.image, s.image, atol=1e-6)

    def test_labels_subset_of_original_plus_background(self):
        rng = np.random.default_rng(1)
        policy = dat.AugmentPolicy(crop=48)
        for seed in range(10):
            s = dat.synth_face(seed, 64)
            out = dat.augment(s, policy, rng)
            assert set(np.unique(out.labels)) <= set(np.unique(s.labels)) | {0}
            assert out.labels.shape == (48, 48)

    def test_fixed_seed_reproduces(self):
        s = dat.synth_face(3, 64)
        policy = dat.AugmentPolicy(crop=56)
        a = dat.augment(s, policy, np.random.default_rng(7))
        b = dat.augment(s, policy, np.random.default_rng(7))
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.image, b.image)

    def test_jitter_touches_image_not_labels(self):
        s = dat.synth_face(4, 64)
        policy = dat.AugmentPolicy(
            rotation_deg=(0, 0), shear_deg=(0, 0), scale=(1, 1), crop=None,
            brightness=(1.3, 1.3), contrast=(1, 1), saturation=(1, 1), hue=(0, 0),
        )
        out = dat.augment(s, policy, np.random.default_rng(5))
        np.testing.assert_array_equal(out.labels, s.labels)
        assert not np.allclose(out.image, s.image)

    def test_image_stays_in_unit_range(self):
        rng = np.random.default_rng(6)
        policy = dat.AugmentPolicy(crop=None)
        for seed in range(5):
            out = dat.augment(dat.synth_face(seed, 64), policy, rng)
            assert out.image.min() >= 0.0 and out.image.max() <= 1.0


class TestBatches:
    def _samples(self, n, res=32):
        return [dat.synth_face(s, res) for s in range(n)]

    def test_partial_final_batch(self):
        sizes = [img.shape[0] for img, _ in dat.batches(self._samples(10), 4, 0)]
        assert sizes == [4, 4, 2]

    def test_same_seed_same_order(self):
        samples = self._samples(8)
        a = [lab for _, lab in dat.batches(samples, 3, 11)]
        b = [lab for _, lab in dat.batches(samples, 3, 11)]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_multiset_equals_dataset(self):
        samples = self._samples(7)
        seen = []
        for imgs, labs in dat.batches(samples, 2, 5):
            assert imgs.shape[1:] == (3, 32, 32)
            seen.extend(labs)
        assert len(seen) == 7
        originals = sorted(s.labels.tobytes() for s in samples)
        returned = sorted(lab.tobytes() for lab in seen)
        assert originals == returned

    def test_batch_size_validation(self):
        with pytest.raises(ParameterError):
            next(dat.batches(self._samples(2), 0, 0))
