import json
import warnings

import numpy as np
import pytest

from mcl import data
from mcl.errors import ConfigurationError, InvalidParameterError

WHITE = (245, 245, 245)
PURPLE = (150, 60, 170)


def disk_slide(h=800, w=1000, radius=300, fg=PURPLE, bg=WHITE):
    yy, xx = np.mgrid[:h, :w]
    disk = (yy - h / 2) ** 2 + (xx - w / 2) ** 2 <= radius**2
    img = np.empty((h, w, 3), np.uint8)
    img[:] = bg
    img[disk] = fg
    return img, disk


def iou(a, b):
    return (a & b).sum() / (a | b).sum()


class TestSegmentation:
    def test_white_slide_gives_empty_mask(self):
        with pytest.warns(RuntimeWarning):
            m = data.segment_tissue(np.full((100, 100, 3), 255, np.uint8))
        assert not m.mask.any()

    def test_disk_iou(self):
        img, disk = disk_slide()
        m = data.segment_tissue(img, downsample=4)
        assert iou(m.full_resolution(img.shape), disk) >= 0.9

    def test_swapped_palette_gives_complement(self):
        img, disk = disk_slide()
        inv, _ = disk_slide(fg=WHITE, bg=PURPLE)
        n = data.segment_tissue(img).full_resolution(img.shape).sum()
        n_inv = data.segment_tissue(inv).full_resolution(inv.shape).sum()
        assert abs(n_inv - (disk.size - n)) <= 0.02 * (disk.size - n)

    def test_background_slide_yields_no_tiles(self):
        img = np.full((1000, 1000, 3), 240, np.uint8)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert data.tile_slide(img, data.segment_tissue(img), 500) == []


class TestTiling:
    def test_full_tissue_four_tiles(self):
        img = np.zeros((1000, 1000, 3), np.uint8)
        tiles = data.tile_slide(img, np.ones((1000, 1000), bool), 500)
        assert len(tiles) == 4
        assert sorted(t.origin for t in tiles) == [(0, 0), (0, 500), (500, 0), (500, 500)]

    def test_left_half(self):
        mask = np.zeros((1000, 1000), bool)
        mask[:, :500] = True
        tiles = data.tile_slide(np.zeros((1000, 1000, 3), np.uint8), mask, 500)
        assert [t.origin for t in tiles] == [(0, 0), (0, 500)]

    def test_margin_dropped(self):
        assert len(data.tile_slide(np.zeros((1000, 1250, 3), np.uint8), np.ones((1000, 1250), bool), 500)) == 4

    def test_too_small(self):
        with pytest.warns(RuntimeWarning):
            assert data.tile_slide(np.zeros((100, 100, 3), np.uint8), np.ones((100, 100), bool), 500) == []

    def test_downsampled_mask_coverage(self):
        mask = data.TissueMask(np.ones((250, 250), bool), 4, 0.1)
        assert len(data.tile_slide(np.zeros((1000, 1000, 3), np.uint8), mask, 500)) == 4


class TestBlobFilter:
    def test_blank_discarded(self):
        assert not data.blob_filter(np.full((500, 500, 3), 250, np.uint8), threshold=0.2)

    def test_full_tissue_kept(self):
        rng = np.random.default_rng(0)
        tex = np.clip(np.array(PURPLE) + rng.normal(0, 10, (500, 500, 3)), 0, 255).astype(np.uint8)
        assert data.blob_filter(tex, threshold=0.2)

    def test_small_speck_discarded(self):
        patch = np.full((500, 500, 3), 250, np.uint8)
        patch[100:135, 100:135] = PURPLE  # 0.49% of the tile
        assert not data.blob_filter(patch, threshold=0.2)
        patch[100:160, 100:160] = PURPLE  # 1.44%
        assert data.blob_filter(patch, threshold=0.2)


class TestCrops:
    def test_500_to_224(self):
        crops = data.crop_subregions(np.zeros((500, 500, 3), np.uint8), 224)
        assert [o for o, _ in crops] == [(0, 0), (0, 224), (224, 0), (224, 224)]
        assert all(c.shape == (224, 224, 3) for _, c in crops)

    def test_identity_and_nine(self):
        assert len(data.crop_subregions(np.zeros((224, 224, 3), np.uint8))) == 1
        assert len(data.crop_subregions(np.zeros((672, 672, 3), np.uint8))) == 9

    def test_crop_too_large(self):
        with pytest.raises(InvalidParameterError):
            data.crop_subregions(np.zeros((100, 100, 3), np.uint8), 224)


class TestAugment:
    def image(self):
        return np.random.default_rng(3).integers(0, 256, (32, 32, 3), dtype=np.uint8)

    def test_identity(self):
        img = self.image()
        out = data.augment(img, data.AugmentationConfig.identity(), np.random.default_rng(0))
        assert np.array_equal(out, img)
        assert np.array_equal(data.augment(img, data.AugmentationConfig(enabled=False), np.random.default_rng(0)), img)

    def test_rotation_180_twice(self):
        img = self.image()
        cfg = data.AugmentationConfig(rotations=(180,), flip_horizontal=False, flip_vertical=False, hue_shift=0,
                                      saturation_shift=0, value_shift=0, brightness=0, contrast=0)
        rng = np.random.default_rng(0)
        assert np.array_equal(data.augment(data.augment(img, cfg, rng), cfg, rng), img)

    def test_deterministic_and_shape(self):
        img = self.image()
        a = data.augment(img, data.AugmentationConfig(), np.random.default_rng(7))
        b = data.augment(img, data.AugmentationConfig(), np.random.default_rng(7))
        assert np.array_equal(a, b) and a.shape == img.shape and a.dtype == np.uint8


def make_bag(pid, modality, grade, n, value=0):
    crops = np.full((n, 4, 4, 3), value, np.uint8)
    crops[:, 0, 0, 0] = np.arange(n)
    return data.PatientBag(pid, modality, grade, crops, [(i, 0) for i in range(n)])


def make_dataset(n_patients=3, n_crops=4):
    ffpe = [make_bag(f"p{i}", "ffpe", i % 3, n_crops, 10) for i in range(n_patients)]
    frozen = [make_bag(f"p{i}", "frozen", i % 3, n_crops, 200) for i in range(n_patients)]
    return data.PairedDataset(ffpe, frozen)


class TestSampling:
    def test_single_patient(self):
        ds = make_dataset(1)
        b = data.sample_paired_batch(ds, 2, np.random.default_rng(0))
        assert b.patient_ids == ["p0", "p0"]
        assert b.ffpe_images.shape == (2, 4, 4, 3)

    def test_same_patient_invariant(self):
        ds = make_dataset(3)
        b = data.sample_paired_batch(ds, 16, np.random.default_rng(0))
        for pid, label in zip(b.patient_ids, b.labels):
            assert label == ds.ffpe[pid].grade == ds.frozen[pid].grade
        assert np.all(b.ffpe_images[:, 1, 1] == 10) and np.all(b.frozen_images[:, 1, 1] == 200)

    def test_deterministic(self):
        ds = make_dataset(3)
        a = data.sample_paired_batch(ds, 8, np.random.default_rng(5))
        b = data.sample_paired_batch(ds, 8, np.random.default_rng(5))
        assert a.patient_ids == b.patient_ids and np.array_equal(a.ffpe_images, b.ffpe_images)

    def test_uniform_over_patients(self):
        ds = make_dataset(3)
        rng = np.random.default_rng(11)
        counts = {p: 0 for p in ds.patients}
        for _ in range(10000 // 20):
            for p in data.sample_paired_batch(ds, 20, rng).patient_ids:
                counts[p] += 1
        for c in counts.values():
            assert abs(c / 10000 - 1 / 3) <= 0.05 / 3

    def test_missing_modality_is_configuration_error(self):
        with pytest.raises(ConfigurationError):
            data.PairedDataset([make_bag("a", "ffpe", 0, 2)], [])

    def test_modality_blind_composition(self):
        ffpe = [make_bag(f"p{i}", "ffpe", 0, 6) for i in range(3)]
        frozen = [make_bag(f"p{i}", "frozen", 0, 2) for i in range(3)]
        rng = np.random.default_rng(2)
        mods = []
        for _ in range(1000):
            mods += data.sample_batch(ffpe + frozen, 8, rng).modalities
        assert abs(mods.count("ffpe") / len(mods) - 0.75) <= 0.05


class TestSplit:
    def cohort(self):
        grades = [0] * 108 + [1] * 94 + [2] * 297
        return {f"TCGA-{i:03d}": g for i, g in enumerate(grades)}

    def test_default_sizes(self):
        split = data.split_dataset(self.cohort(), (0.64, 0.16, 0.20), seed=0)
        assert tuple(map(len, split)) == (319, 80, 100)

    def test_partition_and_determinism(self):
        cohort = self.cohort()
        a = data.split_dataset(cohort, seed=3)
        assert a == data.split_dataset(cohort, seed=3)
        assert sorted(a.train + a.val + a.test) == sorted(cohort)
        data.check_no_leakage(a)

    def test_stratified(self):
        cohort = self.cohort()
        split = data.split_dataset(cohort, seed=1)
        test_grades = np.bincount([cohort[p] for p in split.test])
        np.testing.assert_allclose(test_grades / 100, [108 / 499, 94 / 499, 297 / 499], atol=0.02)

    def test_fallback_warns(self):
        with pytest.warns(RuntimeWarning):
            split = data.split_dataset({"a": 0, "b": 1, "c": 1, "d": 1, "e": 1}, (0.6, 0.2, 0.2))
        assert sum(map(len, split)) == 5

    def test_leakage_detected(self):
        with pytest.raises(ConfigurationError):
            data.check_no_leakage(data.DatasetSplit(["a"], ["a"], []))


def write_slide(tmp_path, name, rgb):
    path = tmp_path / name
    data.save_png(path, rgb)
    return str(path)


class TestPatchStore:
    def test_preprocess_roundtrip_and_determinism(self, tmp_path):
        rng = np.random.default_rng(0)
        records = []
        for pid, grade in (("A", 0), ("B", 2)):
            for mod in data.MODALITIES:
                img = np.full((700, 1200, 3), 245, np.uint8)
                img[:500, :1000] = np.clip(np.array(PURPLE) + rng.normal(0, 8, (500, 1000, 3)), 0, 255)
                records.append(data.SlideRecord(pid, mod, grade, write_slide(tmp_path, f"{pid}_{mod}.png", img)))
        data.write_manifest(tmp_path / "slides.csv", records)
        loaded = data.read_manifest(tmp_path / "slides.csv")
        assert loaded == records
        m1 = data.preprocess(loaded, tmp_path / "p1")
        m2 = data.preprocess(loaded, tmp_path / "p2")
        assert (tmp_path / "p1" / data.PATCH_MANIFEST).read_bytes() == (tmp_path / "p2" / data.PATCH_MANIFEST).read_bytes()
        assert m1["counts"] == {"ffpe": 4, "frozen": 4}
        assert (tmp_path / "p1" / "A" / "ffpe" / "500_0.png").exists()
        ds = data.load_patch_store(tmp_path / "p1")
        assert ds.patients == ["A", "B"]
        assert len(ds.ffpe["A"]) == 8 and ds.ffpe["B"].grade == 2
        assert ds.ffpe["A"].origins[:4] == [(0, 0), (224, 0), (0, 224), (224, 224)]
        assert json.loads((tmp_path / "p1" / data.PATCH_MANIFEST).read_text())["slides"][0]["tiles_kept"] == 2

    def test_manifest_requires_both_modalities(self, tmp_path):
        (tmp_path / "m.csv").write_text("patient_id,modality,grade,image_path\nA,FFPE,II,a.png\n")
        with pytest.raises(ConfigurationError):
            data.read_manifest(tmp_path / "m.csv")
