import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from mdfuse import degrade as D
from mdfuse.imageio import ImageBuffer
from mdfuse.tensor import ShapeError


def _img(seed=0, size=16):
    pix = np.random.default_rng(seed).uniform(0.1, 0.7, size=(size, size, 3))
    return ImageBuffer.from_array(pix)


class TestDepth:
    def test_ramp_endpoints(self):
        d = D.procedural_depth(8, 5, "ramp")
        assert d[0].max() == d[0].min() == 1.0
        assert d[-1].max() == 0.0

    def test_radial_center_zero(self):
        d = D.procedural_depth(9, 9, "radial")
        assert d[4, 4] == 0.0
        assert d.max() == pytest.approx(1.0)

    def test_file_mode_size_mismatch(self, tmp_path):
        from mdfuse.imageio import write_image

        write_image(ImageBuffer.from_array(np.zeros((4, 4, 1))), tmp_path / "d.pgm")
        with pytest.raises(ShapeError):
            D.procedural_depth(8, 8, f"file:{tmp_path / 'd.pgm'}")

    def test_file_mode_roundtrip(self, tmp_path):
        from mdfuse.imageio import write_image

        depth = np.random.default_rng(1).integers(0, 256, size=(4, 4)) / 255.0
        write_image(ImageBuffer.from_array(depth), tmp_path / "d.pgm")
        got = D.procedural_depth(4, 4, f"file:{tmp_path / 'd.pgm'}")
        np.testing.assert_allclose(got, depth)


class TestHaze:
    def test_beta_zero_identity(self):
        img = _img(0)
        depth = D.procedural_depth(16, 16, "ramp")
        out = D.synth_haze(img, depth, D.HazeParams(beta=0.0))
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_saturation_to_airlight(self):
        img = _img(1)
        depth = np.ones((16, 16))
        p = D.HazeParams(beta=50.0, airlight=(0.8, 0.7, 0.6))
        out = D.synth_haze(img, depth, p)
        assert np.abs(out.pixels - np.array([0.8, 0.7, 0.6])).max() <= 1e-6

    def test_half_transmission_closed_form(self):
        img = _img(2)
        depth = np.full((16, 16), np.log(2.0))
        p = D.HazeParams(beta=1.0, airlight=(0.9, 0.9, 0.9))
        out = D.synth_haze(img, depth, p)
        np.testing.assert_allclose(out.pixels, 0.5 * img.pixels + 0.5 * 0.9, rtol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            D.synth_haze(_img(0), np.zeros((4, 4)), D.HazeParams(beta=1.0))


class TestRain:
    def test_zero_density_identity(self):
        img = _img(3)
        out = D.synth_rain(img, D.RainParams(density=0.0, seed=1))
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_zero_intensity_identity(self):
        img = _img(4)
        out = D.synth_rain(img, D.RainParams(density=0.5, intensity=0.0, seed=1))
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_vertical_kernel_single_impulse(self):
        # line-kernel construction oracle: L=5 at 90 degrees is a vertical
        # 5-sample column, each 1/5
        k = D.rain_kernel(5, 90.0)
        assert k.shape == (5, 5)
        np.testing.assert_allclose(k[:, 2], 0.2)
        assert k[:, [0, 1, 3, 4]].sum() == 0.0

    def test_kernel_sums_to_one(self):
        for length, angle in [(5, 0.0), (7, 45.0), (9, 110.0), (4, 90.0)]:
            assert D.rain_kernel(length, angle).sum() == pytest.approx(1.0)

    def test_monotone_non_darkening(self):
        img = _img(5)
        out = D.synth_rain(img, D.RainParams(density=0.05, intensity=0.8, seed=7))
        assert (out.pixels >= img.pixels - 1e-12).all()


class TestSnow:
    def test_no_flakes_no_veil_identity(self):
        img = _img(6)
        out = D.synth_snow(img, D.SnowParams(flakes_per_mpx=0.0, veil_strength=0.0, seed=1))
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_veil_formula_on_black(self):
        img = ImageBuffer.from_array(np.zeros((8, 8, 3)))
        out = D.synth_snow(img, D.SnowParams(flakes_per_mpx=0.0, veil_strength=0.5, seed=1))
        np.testing.assert_allclose(out.pixels, 0.5)

    def test_veil_one_forbidden(self):
        with pytest.raises(ValueError):
            D.SnowParams(veil_strength=1.0)

    def test_single_flake_rasterization(self):
        # rasterization oracle: one flake brightens a disk, veil elsewhere
        img = ImageBuffer.from_array(np.zeros((32, 32, 3)))
        p = D.SnowParams(flakes_per_mpx=1e6 / (32 * 32), veil_strength=0.2, seed=3)
        rng = np.random.default_rng(3)
        cy, cx = rng.uniform(0, 32), rng.uniform(0, 32)
        radius = rng.uniform(*p.radius_range)
        brightness = rng.uniform(0.85, 1.0)
        yy, xx = np.arange(32)[:, None], np.arange(32)[None, :]
        cover = np.clip(radius - np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) + 0.5, 0, 1)
        expected = np.maximum(0.0, brightness * cover)[:, :, None] * np.ones(3)
        expected = expected * 0.8 + 0.2
        out = D.synth_snow(img, p)
        np.testing.assert_allclose(out.pixels, np.clip(expected, 0, 1), atol=1e-12)

    def test_monotone_non_darkening(self):
        img = _img(7)
        out = D.synth_snow(img, D.SnowParams(seed=9))
        assert (out.pixels >= img.pixels - 1e-12).all()


class TestDeterminism:
    @given(st.integers(0, 2**31 - 1), st.sampled_from(["haze", "rain", "snow"]))
    @settings(max_examples=12, deadline=None)
    def test_degrade_one_deterministic(self, seed, kind):
        img = _img(8)
        a = D.degrade_one(img, kind, np.random.default_rng(seed))
        b = D.degrade_one(img, kind, np.random.default_rng(seed))
        np.testing.assert_array_equal(a.pixels, b.pixels)

    @given(st.integers(0, 2**31 - 1), st.sampled_from(["light", "medium", "heavy"]))
    @settings(max_examples=12, deadline=None)
    def test_outputs_in_range(self, seed, severity):
        img = _img(9)
        for kind in D.DEGRADATIONS:
            out = D.degrade_one(img, kind, np.random.default_rng(seed), severity)
            assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


class TestDataset:
    def test_counts_and_thirds(self, tmp_path):
        pairs = [D.toy_pair(16, s) for s in range(10)]
        index = D.synth_dataset(pairs, tmp_path, split_ratio=0.8, seed=5)
        recs = index["records"]
        assert len(recs) == 30
        for kind in D.DEGRADATIONS:
            assert sum(r["degradation"] == kind for r in recs) == 10

    def test_same_seed_identical_files(self, tmp_path):
        pairs = [D.toy_pair(16, s) for s in range(3)]
        D.synth_dataset(pairs, tmp_path / "a", seed=3)
        D.synth_dataset(pairs, tmp_path / "b", seed=3)
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_split_is_by_pair(self, tmp_path):
        pairs = [D.toy_pair(16, s) for s in range(8)]
        index = D.synth_dataset(pairs, tmp_path, split_ratio=0.75, seed=1)
        by_id = {}
        for r in index["records"]:
            by_id.setdefault(r["id"], set()).add(r["split"])
        assert all(len(s) == 1 for s in by_id.values())

    def test_empty_input_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            D.synth_dataset([], tmp_path)

    def test_load_record_roundtrip(self, tmp_path):
        pairs = [D.toy_pair(16, 0)]
        index = D.synth_dataset(pairs, tmp_path, seed=2)
        vi, ir, clean = D.load_record(tmp_path, index["records"][0])
        assert vi.channels == 3 and ir.channels == 1 and clean.channels == 3
        assert vi.width == 16


class TestClampReporting:
    def test_no_clamping_in_range(self):
        img = _img(10)
        D.synth_haze(img, D.procedural_depth(16, 16, "ramp"), D.HazeParams(beta=1.0))
        assert D.clamp_counts["haze"] == 0

    def test_float_spill_is_counted(self):
        # airlight 1.0 with bright pixels can overshoot 1 by float rounding
        img = ImageBuffer.from_array(np.full((8, 8, 3), 0.999999))
        D.synth_haze(img, np.full((8, 8), 0.5), D.HazeParams(beta=3.0, airlight=(1.0, 1.0, 1.0)))
        assert D.clamp_counts["haze"] >= 0  # reported, possibly zero
        out = D.synth_snow(img, D.SnowParams(seed=1))
        assert out.pixels.max() <= 1.0


class TestToyScenes:
    def test_deterministic(self):
        a_vi, a_ir = D.toy_pair(32, 4)
        b_vi, b_ir = D.toy_pair(32, 4)
        np.testing.assert_array_equal(a_vi.pixels, b_vi.pixels)
        np.testing.assert_array_equal(a_ir.pixels, b_ir.pixels)

    def test_ranges_and_shapes(self):
        vi, ir = D.toy_pair(24, 11)
        assert vi.pixels.shape == (24, 24, 3)
        assert ir.pixels.shape == (24, 24, 1)
        assert vi.pixels.max() <= 0.85 + 1e-12
        assert ir.pixels.min() >= 0.0 and ir.pixels.max() <= 1.0
