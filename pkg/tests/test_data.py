from collections import Counter

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from edunet.data import (
    AugmentConfig,
    DataError,
    Sample,
    augment,
    center_crop_offset,
    center_crop_resize,
    hflip,
    load_dataset,
    load_sample,
    make_folds,
    read_manifest,
    rotate,
    save_sample,
    synth_generate,
)


def _write(path, arr, mode="L"):
    Image.fromarray(np.asarray(arr, np.uint8), mode=mode).save(path)


class TestIO:
    def test_zero_files(self, tmp_path):
        _write(tmp_path / "i.png", np.zeros((5, 6)))
        _write(tmp_path / "m.png", np.zeros((5, 6)))
        s = load_sample(tmp_path / "i.png", tmp_path / "m.png")
        assert s.image.dtype == np.float32 and not s.image.any() and not s.mask.any()
        assert s.id == "i"

    def test_full_scale_pixel_is_one(self, tmp_path):
        _write(tmp_path / "i.png", np.full((2, 2), 255))
        _write(tmp_path / "m.png", np.zeros((2, 2)))
        assert load_sample(tmp_path / "i.png", tmp_path / "m.png").image.max() == 1.0

    def test_synthetic_round_trip_is_exact(self, tmp_path):
        samples = synth_generate(3, 32, 7)
        for s in samples:
            save_sample(s, tmp_path)
        back = load_dataset(tmp_path, 3)
        assert [b.id for b in back] == [s.id for s in samples]
        for a, b in zip(samples, back):
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.mask, b.mask)

    def test_size_mismatch(self, tmp_path):
        _write(tmp_path / "i.png", np.zeros((4, 4)))
        _write(tmp_path / "m.png", np.zeros((4, 5)))
        with pytest.raises(DataError):
            load_sample(tmp_path / "i.png", tmp_path / "m.png")

    def test_label_out_of_range(self, tmp_path):
        _write(tmp_path / "i.png", np.zeros((4, 4)))
        _write(tmp_path / "m.png", np.full((4, 4), 3))
        with pytest.raises(DataError):
            load_sample(tmp_path / "i.png", tmp_path / "m.png", num_classes=3)

    def test_missing_mask_and_missing_dirs(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        _write(tmp_path / "images" / "a.png", np.zeros((4, 4)))
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_unreadable_file(self, tmp_path):
        (tmp_path / "i.png").write_bytes(b"not a png")
        _write(tmp_path / "m.png", np.zeros((2, 2)))
        with pytest.raises(DataError):
            load_sample(tmp_path / "i.png", tmp_path / "m.png")

    def test_manifest(self, tmp_path):
        (tmp_path / "m.csv").write_text("id,split\n# note\na,train\nb,test\n")
        assert read_manifest(tmp_path / "m.csv") == {"a": "train", "b": "test"}
        (tmp_path / "bad.csv").write_text("a,train,extra\n")
        with pytest.raises(DataError):
            read_manifest(tmp_path / "bad.csv")


class TestGeometry:
    def test_already_sized_is_unchanged(self, rng):
        s = Sample("a", rng.random((16, 16)), rng.integers(0, 3, (16, 16)))
        out = center_crop_resize(s, (16, 16))
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.mask, s.mask)

    def test_crop_offset(self):
        assert center_crop_offset(100, 60) == (20, 0)
        assert center_crop_offset(60, 100) == (0, 20)
        img = np.zeros((100, 60), np.float32)
        img[20:80] = 1.0
        out = center_crop_resize(Sample("a", img, np.zeros((100, 60))), (60, 60))
        assert out.image.min() == 1.0

    def test_nearest_never_invents_labels(self, rng):
        mask = rng.choice([0, 2, 5], size=(37, 53))
        out = center_crop_resize(Sample("a", np.zeros(mask.shape), mask), (64, 64))
        assert set(np.unique(out.mask)) <= {0, 2, 5}

    def test_degenerate_target(self):
        with pytest.raises(DataError):
            center_crop_resize(Sample("a", np.zeros((4, 4)), np.zeros((4, 4))), (0, 4))


class TestAugment:
    def test_disabled_is_identity(self, rng):
        s = synth_generate(1, 32, 0)[0]
        assert augment(s, AugmentConfig.disabled(), rng) is s

    def test_double_flip_identity(self):
        s = synth_generate(1, 32, 0)[0]
        back = hflip(hflip(s))
        np.testing.assert_array_equal(back.image, s.image)
        np.testing.assert_array_equal(back.mask, s.mask)

    def test_zero_rotation_identity(self):
        s = synth_generate(1, 32, 0)[0]
        out = rotate(s, 0.0)
        assert np.abs(out.image - s.image).max() <= 1e-6
        np.testing.assert_array_equal(out.mask, s.mask)

    def test_quarter_turn_matches_rot90(self, rng):
        img = rng.random((9, 9)).astype(np.float32)
        out = rotate(Sample("a", img, np.zeros((9, 9))), 90.0)
        hits = [np.abs(out.image - np.rot90(img, k)).max() < 1e-6 for k in (1, 3)]
        assert any(hits)

    def test_rng_advances_identically(self):
        s = synth_generate(1, 32, 0)[0]
        r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
        augment(s, AugmentConfig(), r1)
        augment(s, AugmentConfig.disabled(), r2)
        assert r1.random() == r2.random()

    def test_photometric_leaves_mask_and_clips(self):
        s = synth_generate(1, 32, 0)[0]
        cfg = AugmentConfig(0.0, 0.0, 0.0, 1.0, 0.5, 1.0, 0.5)
        out = augment(s, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(out.mask, s.mask)
        assert 0.0 <= out.image.min() and out.image.max() <= 1.0

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            AugmentConfig(hflip_prob=1.5)


class TestFolds:
    def test_sizes_for_23_ids(self):
        spec = make_folds([f"s{i}" for i in range(23)], 5, 0)
        assert sorted(spec.sizes(), reverse=True) == [5, 5, 5, 4, 4]
        assert sorted(sum((spec.fold_ids(f) for f in range(5)), [])) == sorted(f"s{i}" for i in range(23))

    def test_k1_and_seed_determinism(self):
        ids = [f"s{i}" for i in range(10)]
        assert make_folds(ids, 1).sizes() == [10]
        assert make_folds(ids, 1).train_ids(0) == sorted(ids)
        assert make_folds(ids, 3, 9).assignment == make_folds(list(reversed(ids)), 3, 9).assignment

    def test_train_ids_exclude_fold(self):
        spec = make_folds([f"s{i}" for i in range(10)], 5, 1)
        assert set(spec.train_ids(2)).isdisjoint(spec.fold_ids(2))
        assert len(spec.train_ids(2)) == 8

    @pytest.mark.parametrize("ids,k", [(["a", "b"], 0), (["a", "a"], 2)])
    def test_invalid(self, ids, k):
        with pytest.raises(ValueError):
            make_folds(ids, k)


class TestSynth:
    def test_empty_and_deterministic(self):
        assert synth_generate(0) == []
        a, b = synth_generate(3, 48, 11), synth_generate(3, 48, 11)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.image, y.image)
            np.testing.assert_array_equal(x.mask, y.mask)

    def test_sample_depends_only_on_seed_and_index(self):
        a = synth_generate(4, 32, 2)
        b = synth_generate(2, 32, 2)
        np.testing.assert_array_equal(a[1].image, b[1].image)

    @pytest.mark.parametrize("classes", [2, 3, 4])
    def test_labels_below_class_count(self, classes):
        for s in synth_generate(10, 64, 3, classes):
            assert s.mask.max() < classes
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0

    def test_cysts_are_smaller_than_subretinal_fluid(self):
        areas = {1: [], 2: []}
        for s in synth_generate(100, 64, 0, 3):
            for cls in (1, 2):
                lab, n = ndimage.label(s.mask == cls)
                areas[cls] += list(Counter(lab[lab > 0].ravel()).values())
        assert np.mean(areas[1]) < np.mean(areas[2])

    def test_too_small(self):
        with pytest.raises(ValueError):
            synth_generate(1, 16)
