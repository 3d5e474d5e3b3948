import math

import numpy as np
import pytest

from mbtnet.data import (DatasetManifest, DatasetPlan, ManifestError, ManifestRecord,
                         SynthConfig, extract_patches, generate_voronoi_mosaic,
                         histogram_equalize, load_manifest, load_split, read_mask, read_png_gray,
                         save_manifest, synthesize_dataset, voronoi_border_mask,
                         write_png_gray)


def border_oracle(shape, points, width):
    """Per pixel: on the border when within ``width / 2`` of some side of its cell.

    A Voronoi cell is the intersection of half-planes, so the distance from an
    interior pixel to the cell boundary is the smallest distance to any bisector.
    """
    out = np.zeros(shape, np.uint8)
    pts = [tuple(map(float, p)) for p in points]
    for i in range(shape[0]):
        for j in range(shape[1]):
            d = [math.hypot(i - py, j - px) for py, px in pts]
            a = d.index(min(d))
            gaps = [(d[b] ** 2 - d[a] ** 2) / (2 * math.hypot(pts[a][0] - pts[b][0],
                                                            pts[a][1] - pts[b][1]))
                    for b in range(len(pts)) if b != a]
            out[i, j] = min(gaps) <= width / 2
    return out


class TestMosaic:
    def test_four_corner_cross(self):
        points = [(0, 0), (0, 15), (15, 0), (15, 15)]
        mask = voronoi_border_mask((16, 16), points, 2)
        expected = np.zeros((16, 16), np.uint8)
        expected[7:9, :] = 1
        expected[:, 7:9] = 1
        np.testing.assert_array_equal(mask, expected)
        np.testing.assert_array_equal(mask, border_oracle((16, 16), points, 2))

    def test_random_seeds_match_oracle(self):
        for seed in range(5):
            points = np.random.default_rng(seed).uniform(0, 20, size=(6, 2))
            np.testing.assert_array_equal(voronoi_border_mask((20, 20), points, 2),
                                          border_oracle((20, 20), points, 2))

    def test_deterministic(self):
        cfg = SynthConfig(image_size=(48, 48), cell_count=8, seed=11)
        a, b = generate_voronoi_mosaic(cfg), generate_voronoi_mosaic(cfg)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

    def test_borders_are_thin(self):
        _, mask = generate_voronoi_mosaic(SynthConfig())
        assert 0 < mask.mean() < 0.25

    def test_noise_free_cells_are_smooth(self):
        cfg = SynthConfig(image_size=(64, 64), cell_count=10, noise=0.0, fuzzy_fraction=0.0)
        image, mask = generate_voronoi_mosaic(cfg)
        noisy, _ = generate_voronoi_mosaic(SynthConfig(image_size=(64, 64), cell_count=10))
        interior = mask == 0
        # neighbouring interior pixels differ far less than under default noise
        smooth = np.abs(np.diff(image.astype(float), axis=1))[interior[:, 1:] & interior[:, :-1]]
        rough = np.abs(np.diff(noisy.astype(float), axis=1))[interior[:, 1:] & interior[:, :-1]]
        assert np.median(smooth) < np.median(rough)
        assert np.median(smooth) <= 0.05 * 255

    def test_crowded_config_rejected(self):
        with pytest.raises(ValueError, match="fit"):
            generate_voronoi_mosaic(SynthConfig(image_size=(16, 16), cell_count=200))

    @pytest.mark.parametrize("kwargs", [dict(cell_count=3), dict(border_width=0),
                                        dict(fuzzy_fraction=1.5)])
    def test_config_invariants(self, kwargs):
        with pytest.raises(ValueError):
            SynthConfig(**kwargs)

    def test_config_file_round_trip(self, tmp_path):
        cfg = SynthConfig(cell_count=17, brightness=(0.4, 0.9), seed=5)
        cfg.save(tmp_path / "s.cfg")
        assert SynthConfig.from_file(tmp_path / "s.cfg") == cfg


class TestEqualize:
    def test_constant(self):
        out = histogram_equalize(np.full((4, 4), 90, np.uint8))
        assert len(np.unique(out)) == 1

    def test_two_levels(self):
        img = np.full((4, 4), 200, np.uint8)
        img[0] = 10
        out = histogram_equalize(img)
        assert set(out[0]) == {round(0.25 * 255)} and set(out[1:].ravel()) == {255}

    def test_monotone_and_near_uniform(self):
        img = np.random.default_rng(0).integers(0, 256, size=(64, 64)).astype(np.uint8)
        out = histogram_equalize(img)
        order = np.argsort(img.ravel(), kind="stable")
        assert np.all(np.diff(out.ravel()[order].astype(int)) >= 0)
        hist = np.bincount(out.ravel(), minlength=256)
        cdf = np.cumsum(hist) / out.size
        uniform = (np.arange(256) + 1) / 256
        largest_bin = np.bincount(img.ravel(), minlength=256).max() / img.size
        assert np.abs(cdf - uniform)[hist > 0].max() < largest_bin + 1 / 256


class TestPatches:
    def test_full_image_identity(self):
        img = np.random.default_rng(0).integers(0, 256, (16, 16)).astype(np.uint8)
        mask = np.zeros((16, 16), np.uint8)
        (rec,) = extract_patches(img, mask, (16, 16), 1, seed=0)
        np.testing.assert_array_equal(rec.image[0], img / np.float32(255))

    def test_corner_range(self):
        img = np.zeros((266, 480), np.uint8)
        recs = extract_patches(img, img, (192, 192), 200, seed=1)
        corners = [tuple(map(int, r.ident.split("@")[1].split(","))) for r in recs]
        assert all(0 <= t <= 74 and 0 <= l <= 288 for t, l in corners)
        assert max(t for t, _ in corners) > 60 and max(l for _, l in corners) > 250

    def test_seeded(self):
        img = np.random.default_rng(2).integers(0, 256, (40, 40)).astype(np.uint8)
        mask = (img > 200).astype(np.uint8)
        a = extract_patches(img, mask, (16, 16), 5, seed=3)
        b = extract_patches(img, mask, (16, 16), 5, seed=3)
        assert [r.ident for r in a] == [r.ident for r in b]

    def test_marker_alignment(self):
        img = np.zeros((50, 50), np.uint8)
        mask = np.zeros((50, 50), np.uint8)
        img[23, 31] = 255
        mask[23, 31] = 1
        for rec in extract_patches(img, mask, (32, 32), 20, seed=4):
            assert np.array_equal(np.argwhere(rec.image[0] == 1), np.argwhere(rec.masks.final))

    def test_too_large(self):
        with pytest.raises(ValueError, match="fit"):
            extract_patches(np.zeros((8, 8)), np.zeros((8, 8)), (9, 8), 1, seed=0)


def _tiny_plan():
    return DatasetPlan(patch=(32, 32), train=4, val=2, test=2, patches_per_image=2)


class TestManifest:
    def test_round_trip(self, tmp_path):
        manifest = synthesize_dataset(tmp_path, SynthConfig(image_size=(48, 48), cell_count=10),
                                      _tiny_plan())
        assert manifest.counts() == {"train": 4, "val": 2, "test": 2}
        loaded = load_manifest(tmp_path / "manifest.tsv")
        assert loaded == manifest
        save_manifest(loaded, tmp_path / "copy.tsv")
        assert (tmp_path / "copy.tsv").read_bytes() == (tmp_path / "manifest.tsv").read_bytes()

    def test_default_counts(self):
        plan = DatasetPlan()
        assert (plan.train, plan.val, plan.test, plan.patch) == (64, 8, 8, (64, 64))

    def test_missing_mask_named(self, tmp_path):
        write_png_gray(tmp_path / "a.png", np.zeros((8, 8)))
        (tmp_path / "m.tsv").write_text("train\ta.png\tmissing.png\n")
        with pytest.raises(ManifestError, match="missing.png"):
            load_manifest(tmp_path / "m.tsv")

    def test_malformed_line_number(self, tmp_path):
        (tmp_path / "m.tsv").write_text("train\ta.png\tb.png\nnonsense\n")
        with pytest.raises(ManifestError, match=":2:"):
            load_manifest(tmp_path / "m.tsv", check_files=False)

    def test_overlap_rejected(self, tmp_path):
        for name in ("a.png", "b.png"):
            write_png_gray(tmp_path / name, np.zeros((8, 8)))
        manifest = DatasetManifest([ManifestRecord("train", "a.png", "b.png"),
                                    ManifestRecord("val", "a.png", "b.png")], root=tmp_path)
        with pytest.raises(ManifestError, match="overlap"):
            manifest.validate()

    def test_load_split_matches_disk(self, tmp_path):
        manifest = synthesize_dataset(tmp_path, SynthConfig(image_size=(48, 48), cell_count=10),
                                      _tiny_plan())
        recs = load_split(manifest, "val")
        first = manifest.split("val")[0]
        np.testing.assert_array_equal(recs[0].masks.final, read_mask(tmp_path / first.mask))
        np.testing.assert_array_equal(recs[0].image[0] * 255,
                                      read_png_gray(tmp_path / first.image))

    def test_synthesis_deterministic(self, tmp_path):
        cfg = SynthConfig(image_size=(48, 48), cell_count=10, seed=9)
        synthesize_dataset(tmp_path / "a", cfg, _tiny_plan())
        synthesize_dataset(tmp_path / "b", cfg, _tiny_plan())
        for path in sorted((tmp_path / "a").rglob("*")):
            if path.is_file():
                assert path.read_bytes() == (tmp_path / "b" / path.relative_to(tmp_path / "a")
                                             ).read_bytes()
