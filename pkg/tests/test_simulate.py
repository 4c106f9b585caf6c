import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from physzern import io
from physzern.optics import blur_image, psf_from_coeffs
from physzern.simulate import (
    RADIAL_ORDERS,
    AmplitudeProfile,
    LensRecord,
    NoiseSpec,
    SimConfig,
    derived_rng,
    generate_dataset,
    load_clean_images,
    procedural_texture,
    quantize16,
    read_folds,
    read_lens_set,
    sample_lens_population,
    sample_plan,
    split_lens_folds,
    train_test_lenses,
    verify_manifest,
    write_folds,
    write_lens_set,
)
from physzern.zernike import N_COEFFS


class TestLensPopulation:
    def test_full_database_lens_count(self):
        lenses = sample_lens_population(109, seed=0)
        assert len(lenses) == 109
        assert len({lens.lens_id for lens in lenses}) == 109

    def test_deterministic(self):
        a = sample_lens_population(12, seed=4)
        b = sample_lens_population(12, seed=4)
        assert [x.lens_id for x in a] == [x.lens_id for x in b]
        assert all(np.array_equal(x.coeffs, y.coeffs) for x, y in zip(a, b))

    def test_seed_changes_population(self):
        a = sample_lens_population(3, seed=1)
        b = sample_lens_population(3, seed=2)
        assert not np.array_equal(a[0].coeffs, b[0].coeffs)

    def test_per_order_rms(self):
        coeffs = np.stack([lens.coeffs for lens in sample_lens_population(10_000, seed=3)])
        sigmas = AmplitudeProfile().sigmas()
        for n in range(1, 8):
            cols = RADIAL_ORDERS == n
            rms = np.sqrt(np.mean(coeffs[:, cols] ** 2))
            assert rms == pytest.approx(0.08 / 2 ** (n - 1), rel=0.05)
            assert np.all(sigmas[cols] == 0.08 / 2 ** (n - 1))

    def test_count_must_be_positive(self):
        with pytest.raises(ValueError):
            sample_lens_population(0)

    def test_csv_round_trip(self, tmp_path):
        lenses = sample_lens_population(5, seed=8)
        write_lens_set(tmp_path / "l.csv", lenses)
        back = read_lens_set(tmp_path / "l.csv")
        assert [x.lens_id for x in back] == [x.lens_id for x in lenses]
        assert all(np.array_equal(x.coeffs, y.coeffs) for x, y in zip(back, lenses))
        header = (tmp_path / "l.csv").read_text().splitlines()[0].split(",")
        assert header == ["lens_id"] + [f"a{j}" for j in range(2, 38)]

    def test_duplicate_ids_rejected(self, tmp_path):
        rec = LensRecord("x", np.zeros(N_COEFFS))
        write_lens_set(tmp_path / "d.csv", [rec, rec])
        with pytest.raises(ValueError):
            read_lens_set(tmp_path / "d.csv")


class TestTexture:
    def test_deterministic_and_bounded(self):
        a = procedural_texture(64, 11)
        assert np.array_equal(a, procedural_texture(64, 11))
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_high_frequency_content(self):
        img = procedural_texture(128, 2)
        spec = np.abs(np.fft.fft2(img - img.mean())) ** 2
        f = np.fft.fftfreq(128)
        high = np.maximum(np.abs(f)[:, None], np.abs(f)[None, :]) > 0.125
        assert spec[high].sum() / spec.sum() > 0.01

    def test_minimum_size(self):
        with pytest.raises(ValueError):
            procedural_texture(16, 0)


class TestNoise:
    def test_zero_sigma_is_identity(self, rng):
        img = rng.random((8, 8))
        np.testing.assert_array_equal(NoiseSpec(0.0, clip=False).apply(img, rng), img)

    def test_clip(self, rng):
        out = NoiseSpec(0.5, clip=True).apply(np.full((16, 16), 0.5), rng)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            NoiseSpec(-1.0)


def test_derived_streams_are_order_free():
    a = derived_rng(3, "lens01", 4).random(3)
    derived_rng(3, "lens00", 0).random(10)
    assert np.array_equal(a, derived_rng(3, "lens01", 4).random(3))
    assert not np.array_equal(a, derived_rng(3, "lens01", 5).random(3))


class TestSamplePlan:
    def test_full_database_corpus_size(self):
        lenses = sample_lens_population(109, seed=0)
        assert len(sample_plan(lenses, 1010)) == 110_090

    def test_ids_unique(self):
        plan = sample_plan(sample_lens_population(3), 4)
        assert len({sid for _, _, sid in plan}) == 12


class TestGenerateDataset:
    def test_small_dataset(self, tmp_path):
        lenses = sample_lens_population(2, seed=1)
        cfg = SimConfig(patch=32, patches_per_lens=3, n_samples=32, psf_crop=16, seed=2)
        man = generate_dataset(lenses, [("t", procedural_texture(48, 0))], cfg, tmp_path)
        assert len(man) == 6
        ids = {lens.lens_id for lens in lenses}
        assert all(r["lens_id"] in ids for r in man.records)
        assert verify_manifest(tmp_path) == []
        meta = json.loads((tmp_path / "dataset.json").read_text())
        assert meta["sim_config"]["patch"] == 32 and meta["n_samples"] == 6
        rec = man.records[0]
        assert {"sample_id", "lens_id", "blurred_path", "clean_path", "noise_sigma"} <= set(rec)
        assert io.read_pgm(tmp_path / rec["blurred_path"]).shape == (32, 32)

    def test_identity_kernel_leaves_patch_unchanged(self, tmp_path):
        lenses = [LensRecord("flat", np.zeros(N_COEFFS))]
        cfg = SimConfig(patch=32, patches_per_lens=2, n_samples=32, psf_crop=1, noise_sigma=0.0, seed=0)
        man = generate_dataset(lenses, [("t", procedural_texture(64, 1))], cfg, tmp_path)
        for rec in man.records:
            np.testing.assert_array_equal(io.read_pgm(tmp_path / rec["blurred_path"]), io.read_pgm(tmp_path / rec["clean_path"]))

    def test_blur_reproducible_from_manifest(self, tmp_path):
        lenses = sample_lens_population(1, seed=4)
        cfg = SimConfig(patch=32, patches_per_lens=2, n_samples=32, psf_crop=16, noise_sigma=0.0, seed=3)
        man = generate_dataset(lenses, [("t", procedural_texture(64, 1))], cfg, tmp_path)
        psf = psf_from_coeffs(lenses[0].coeffs, cfg.geometry())
        for rec in man.records:
            clean = io.read_pgm(tmp_path / rec["clean_path"])
            expected = quantize16(blur_image(clean, psf, "edge"))
            np.testing.assert_allclose(io.read_pgm(tmp_path / rec["blurred_path"]), expected, atol=1e-12)

    def test_deterministic(self, tmp_path):
        lenses = sample_lens_population(2, seed=1)
        cfg = SimConfig(patch=32, patches_per_lens=2, n_samples=32, psf_crop=16, seed=6)
        images = [("t", procedural_texture(48, 0))]
        generate_dataset(lenses, images, cfg, tmp_path / "a")
        generate_dataset(lenses, images, cfg, tmp_path / "b")
        for rel in ["manifest.jsonl", "lenses.csv", "blurred/lens000_00001.pgm", "psf/lens001.abr"]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_patch_larger_than_image(self, tmp_path):
        cfg = SimConfig(patch=64, n_samples=32, psf_crop=16)
        with pytest.raises(ValueError):
            generate_dataset(sample_lens_population(1), [("t", np.zeros((32, 32)))], cfg, tmp_path)

    def test_unreadable_image_named(self, tmp_path):
        (tmp_path / "broken.png").write_bytes(b"not an image")
        with pytest.raises(OSError, match="broken.png"):
            load_clean_images(tmp_path)

    def test_loads_pgm_and_png(self, tmp_path):
        from PIL import Image

        io.write_pgm16(tmp_path / "a.pgm", np.full((4, 4), 0.5))
        Image.fromarray(np.full((4, 4), 255, dtype=np.uint8)).save(tmp_path / "b.png")
        imgs = dict(load_clean_images(tmp_path))
        assert imgs["a"][0, 0] == pytest.approx(0.5, abs=1e-5)
        assert imgs["b"][0, 0] == 1.0

    def test_missing_blurred_file_detected(self, tmp_path):
        cfg = SimConfig(patch=32, patches_per_lens=1, n_samples=32, psf_crop=16)
        man = generate_dataset(sample_lens_population(1), [("t", procedural_texture(48, 0))], cfg, tmp_path)
        (tmp_path / man.records[0]["blurred_path"]).unlink()
        assert verify_manifest(tmp_path)


class TestFolds:
    def test_full_database_split_sizes(self):
        ids = [lens.lens_id for lens in sample_lens_population(109)]
        folds = split_lens_folds(ids, 5, seed=0)
        assert sorted(len(f) for f in folds) == [21, 22, 22, 22, 22]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 150), st.integers(2, 20), st.integers(0, 2**31 - 1))
    def test_partition_property(self, count, k, seed):
        k = min(k, count)
        ids = [f"L{i}" for i in range(count)]
        folds = split_lens_folds(ids, k, seed)
        flat = [x for f in folds for x in f]
        assert sorted(flat) == sorted(ids)
        assert len(set(flat)) == len(flat)
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1

    def test_deterministic(self):
        ids = [f"L{i}" for i in range(20)]
        assert split_lens_folds(ids, 5, 3) == split_lens_folds(list(reversed(ids)), 5, 3)

    @pytest.mark.parametrize("k", [1, 21])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            split_lens_folds([f"L{i}" for i in range(20)], k, 0)

    def test_train_test_disjoint(self):
        folds = split_lens_folds([f"L{i}" for i in range(20)], 5, 1)
        for i in range(5):
            train, test = train_test_lenses(folds, i)
            assert not set(train) & set(test)
            assert len(train) + len(test) == 20

    def test_file_round_trip_and_overlap_check(self, tmp_path):
        folds = split_lens_folds([f"L{i}" for i in range(7)], 3, 2)
        write_folds(tmp_path / "f.json", folds)
        assert read_folds(tmp_path / "f.json") == folds
        (tmp_path / "bad.json").write_text(json.dumps({"0": ["a", "b"], "1": ["b"]}))
        with pytest.raises(ValueError):
            read_folds(tmp_path / "bad.json")
