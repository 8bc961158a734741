import numpy as np
import pytest

from fovseg.datagen import (
    ManifestError,
    SceneConfig,
    SceneRecord,
    gen_scene,
    generate_dataset,
    load_image_png,
    load_mask_png,
    make_shape,
    read_manifest,
    save_image_png,
    save_mask_png,
    write_manifest,
)

SMALL = SceneConfig(resolution_range=(64, 160), footprint_range=(4, 32))


class TestGenScene:
    def test_deterministic_bytes(self, tmp_path):
        out = []
        for _ in range(2):
            img, mask, rec = gen_scene(SMALL, np.random.default_rng(77))
            pi = tmp_path / f"i{len(out)}.png"
            pm = tmp_path / f"m{len(out)}.png"
            save_image_png(pi, img)
            save_mask_png(pm, mask)
            out.append((pi.read_bytes(), pm.read_bytes(), rec))
        assert out[0][0] == out[1][0]
        assert out[0][1] == out[1][1]
        assert out[0][2] == out[1][2]

    def test_masks_nonempty_and_bounded(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            img, mask, rec = gen_scene(SMALL, rng)
            assert mask.any()
            assert 0.0 < rec.rel_area <= 0.25
            assert rec.shape in SMALL.shapes
            assert img.shape[:2] == mask.shape
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_log_uniform_footprint_median(self):
        # Median of a log-uniform draw sits at the geometric mean.
        cfg = SceneConfig(resolution_range=(256, 256), footprint_range=(4, 64))
        rng = np.random.default_rng(9)
        fps = [gen_scene(cfg, rng)[2].footprint for _ in range(800)]
        geo_mean = np.sqrt(4 * 64)
        assert abs(np.median(fps) - geo_mean) / geo_mean < 0.10

    def test_resolution_and_footprint_overrides(self):
        rng = np.random.default_rng(3)
        shape = make_shape(SMALL, rng)
        img, mask, rec = gen_scene(SMALL, rng, resolution=96, footprint=24,
                                   shape=shape)
        assert img.shape == (96, 96, 3)
        assert 18 <= rec.footprint <= 26

    def test_same_shape_at_two_scales(self):
        cfg = SceneConfig(resolution_range=(128, 2048), footprint_range=(4, 128))
        shape = make_shape(cfg, np.random.default_rng(1))
        _, mask_a, rec_a = gen_scene(cfg, np.random.default_rng(2),
                                     resolution=128, footprint=40, shape=shape)
        _, mask_b, rec_b = gen_scene(cfg, np.random.default_rng(3),
                                     resolution=1024, footprint=40, shape=shape)
        assert rec_a.shape == rec_b.shape
        assert abs(rec_a.footprint - rec_b.footprint) <= 2
        # identical footprint, ~64x difference in relative area
        assert rec_b.rel_area < rec_a.rel_area / 32

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SceneConfig(resolution_range=(64, 32))
        with pytest.raises(ValueError):
            SceneConfig(resolution_range=(64, 128), footprint_range=(4, 128))
        with pytest.raises(ValueError):
            SceneConfig(shapes=("ellipse", "blob"))


class TestPngRoundTrip:
    def test_mask_threshold_semantics(self, tmp_path):
        from PIL import Image

        arr = np.array([[0, 127, 128, 255]], dtype=np.uint8)
        path = tmp_path / "m.png"
        Image.fromarray(arr, mode="L").save(path)
        assert load_mask_png(path).tolist() == [[False, False, True, True]]

    def test_image_roundtrip_quantized(self, tmp_path, rng):
        img = rng.random((16, 16, 3)).astype(np.float32)
        path = tmp_path / "i.png"
        save_image_png(path, img)
        back = load_image_png(path)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6

    def test_mask_roundtrip_exact(self, tmp_path, rng):
        mask = rng.random((16, 16)) > 0.5
        path = tmp_path / "m.png"
        save_mask_png(path, mask)
        assert np.array_equal(load_mask_png(path), mask)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        records = [
            SceneRecord(image="images/0.png", mask="masks/0.png",
                        shape="ellipse", footprint=31.0, rel_area=0.0123),
            SceneRecord(image="images/1.png", mask="masks/1.png",
                        shape="star", footprint=7.0, rel_area=0.25,
                        prompt=(10.5, 20.25, 9.0, -1.5, 4.0)),
        ]
        path = tmp_path / "manifest.tsv"
        write_manifest(records, path)
        assert read_manifest(path) == records

    def test_empty_manifest(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        write_manifest([], path)
        assert read_manifest(path) == []

    def test_prompt_override_precision(self, tmp_path):
        prompt = (123.456789012345, -0.000123456789, 98765.4321,
                  1.0 / 3.0, 2.0 / 7.0)
        rec = SceneRecord(image="a.png", mask="b.png", shape="polygon",
                          footprint=10.0, rel_area=0.01, prompt=prompt)
        path = tmp_path / "manifest.tsv"
        write_manifest([rec], path)
        back = read_manifest(path)[0].prompt
        for a, b in zip(back, prompt):
            assert a == pytest.approx(b, rel=1e-9)

    def test_malformed_line_reports_lineno(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("a.png\tb.png\tellipse\t3.0\t0.1\t\n"
                        "broken line without tabs\n")
        with pytest.raises(ManifestError, match=":2:"):
            read_manifest(path)

    def test_bad_float_reports_lineno(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("a.png\tb.png\tellipse\tnot_a_number\t0.1\t\n")
        with pytest.raises(ManifestError, match=":1:"):
            read_manifest(path)


class TestGenerateDataset:
    def test_writes_files_and_manifest(self, tmp_path):
        manifest = generate_dataset(SMALL, 4, tmp_path, seed=3)
        records = read_manifest(manifest)
        assert len(records) == 4
        for rec in records:
            img = load_image_png(tmp_path / rec.image)
            mask = load_mask_png(tmp_path / rec.mask)
            assert img.shape[:2] == mask.shape
            assert mask.any()

    def test_worker_count_does_not_change_output(self, tmp_path):
        m1 = generate_dataset(SMALL, 6, tmp_path / "a", seed=3, workers=1)
        m2 = generate_dataset(SMALL, 6, tmp_path / "b", seed=3, workers=2)
        r1 = read_manifest(m1)
        r2 = read_manifest(m2)
        assert r1 == r2
        for rec1, rec2 in zip(r1, r2):
            b1 = (tmp_path / "a" / rec1.image).read_bytes()
            b2 = (tmp_path / "b" / rec2.image).read_bytes()
            assert b1 == b2
