import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from mdfuse import imageio as io
from mdfuse.layers import ParamStore
from mdfuse.tensor import ShapeError


class TestImages:
    def test_p5_extreme_value(self, tmp_path):
        f = tmp_path / "a.pgm"
        f.write_bytes(b"P5\n1 1\n255\n\xff")
        img = io.read_image(f)
        assert img.channels == 1
        assert img.pixels[0, 0, 0] == 1.0

    def test_p6_scaling(self, tmp_path):
        f = tmp_path / "a.ppm"
        f.write_bytes(b"P6\n1 1\n255\n" + bytes([128, 0, 255]))
        img = io.read_image(f)
        np.testing.assert_allclose(img.pixels[0, 0], [128 / 255, 0.0, 1.0])

    def test_write_read_write_bytewise(self, tmp_path):
        rng = np.random.default_rng(0)
        img = io.ImageBuffer.from_array(rng.integers(0, 256, size=(5, 7, 3)) / 255.0)
        f1, f2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
        io.write_image(img, f1)
        io.write_image(io.read_image(f1), f2)
        assert f1.read_bytes() == f2.read_bytes()

    def test_header_comments_and_whitespace(self, tmp_path):
        f = tmp_path / "a.pgm"
        f.write_bytes(b"P5\n# a comment\n  2 1\n255\n\x00\x80")
        img = io.read_image(f)
        assert img.width == 2 and img.height == 1

    def test_malformed_header(self, tmp_path):
        f = tmp_path / "a.pgm"
        f.write_bytes(b"P5\nxx 1\n255\n\x00")
        with pytest.raises(io.FormatError):
            io.read_image(f)

    def test_bad_magic(self, tmp_path):
        f = tmp_path / "a.img"
        f.write_bytes(b"P4\n1 1\n255\n\x00")
        with pytest.raises(io.FormatError):
            io.read_image(f)

    def test_truncated_payload(self, tmp_path):
        f = tmp_path / "a.ppm"
        f.write_bytes(b"P6\n2 2\n255\n\x00\x00\x00")
        with pytest.raises(io.FormatError, match="truncated"):
            io.read_image(f)

    def test_unsupported_maxval(self, tmp_path):
        f = tmp_path / "a.pgm"
        f.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(io.FormatError, match="maxval"):
            io.read_image(f)

    def test_out_of_range_pixels_rejected(self, tmp_path):
        img = io.ImageBuffer.from_array(np.full((2, 2, 1), 1.5))
        with pytest.raises(io.FormatError):
            io.write_image(img, tmp_path / "a.pgm")

    @given(st.integers(1, 8), st.integers(1, 8), st.sampled_from([1, 3]), st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_quantization_error_bound(self, w, h, c, seed):
        pix = np.random.default_rng(seed).uniform(0, 1, size=(h, w, c))
        img = io.ImageBuffer(w, h, c, pix)
        with tempfile.TemporaryDirectory() as tmp:
            f = Path(tmp) / "x.img"
            io.write_image(img, f)
            back = io.read_image(f)
        assert np.abs(back.pixels - pix).max() <= 1.0 / 510 + 1e-12


class TestTensorFile:
    def test_roundtrip_exact(self, tmp_path):
        arr = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        f = tmp_path / "t.mdat"
        io.save_tensor(arr, f)
        np.testing.assert_array_equal(io.load_tensor(f), arr)

    def test_header_size(self, tmp_path):
        arr = np.zeros((2, 3, 4), dtype=np.float32)
        f = tmp_path / "t.mdat"
        io.save_tensor(arr, f)
        data = f.read_bytes()
        rank = 3
        assert len(data) == (8 + 4 + 4 * rank) + 4 * arr.size

    def test_corrupt_magic(self, tmp_path):
        f = tmp_path / "t.mdat"
        io.save_tensor(np.zeros(3, dtype=np.float32), f)
        raw = bytearray(f.read_bytes())
        raw[0] = ord(b"X")
        f.write_bytes(bytes(raw))
        with pytest.raises(io.FormatError, match="magic"):
            io.load_tensor(f)

    def test_size_mismatch(self, tmp_path):
        f = tmp_path / "t.mdat"
        io.save_tensor(np.zeros(4, dtype=np.float32), f)
        f.write_bytes(f.read_bytes()[:-4])
        with pytest.raises(io.FormatError, match="size"):
            io.load_tensor(f)

    @given(st.lists(st.integers(1, 6), min_size=0, max_size=4), st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip_property(self, shape, seed):
        arr = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
        with tempfile.TemporaryDirectory() as tmp:
            f = Path(tmp) / "t.mdat"
            io.save_tensor(arr, f)
            back = io.load_tensor(f)
        assert back.shape == arr.shape
        np.testing.assert_array_equal(back, arr)


class TestCheckpoint:
    def _tensors(self):
        rng = np.random.default_rng(5)
        return {
            "enc.w": rng.normal(size=(3, 4)).astype(np.float32),
            "enc.b": rng.normal(size=4).astype(np.float32),
            "buffer:bn.mean": rng.normal(size=2),
        }

    def test_save_load_bit_equal(self, tmp_path):
        tensors = self._tensors()
        meta = {"step": 7, "seed": 3, "config": {"width": 4}}
        io.save_checkpoint(tensors, meta, tmp_path / "ck")
        meta2, back = io.load_checkpoint(tmp_path / "ck")
        assert meta2 == meta
        assert set(back) == set(tensors)
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k])
            assert back[k].dtype == tensors[k].dtype

    def test_save_load_save_byte_identical(self, tmp_path):
        tensors = self._tensors()
        meta = {"step": 1, "seed": 0}
        io.save_checkpoint(tensors, meta, tmp_path / "a")
        m, t2 = io.load_checkpoint(tmp_path / "a")
        io.save_checkpoint(t2, m, tmp_path / "b")
        for fn in ("manifest.json", "params.bin"):
            assert (tmp_path / "a" / fn).read_bytes() == (tmp_path / "b" / fn).read_bytes()

    def test_offsets_non_overlapping(self, tmp_path):
        io.save_checkpoint(self._tensors(), {}, tmp_path / "ck")
        meta, _ = {}, None
        import json

        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        spans = sorted(
            (e["offset"], e["offset"] + int(np.prod(e["shape"]) or 1) * (4 if e["dtype"] == "f32" else 8))
            for e in manifest["tensors"].values()
        )
        for (_, end), (start, _) in zip(spans, spans[1:]):
            assert start >= end

    def test_assign_params_shape_error_names_tensor(self, tmp_path):
        store = ParamStore(0)
        store.get("enc.w", (3, 4))
        io.save_checkpoint({"enc.w": np.zeros((2, 2), dtype=np.float32)}, {}, tmp_path / "ck")
        _, tensors = io.load_checkpoint(tmp_path / "ck")
        with pytest.raises(ShapeError, match="enc.w"):
            io.assign_params(store, tensors)

    def test_assign_params_missing_name(self, tmp_path):
        store = ParamStore(0)
        store.get("enc.w", (3, 4))
        io.save_checkpoint({"other": np.zeros(1, dtype=np.float32)}, {}, tmp_path / "ck")
        _, tensors = io.load_checkpoint(tmp_path / "ck")
        with pytest.raises(KeyError, match="enc.w"):
            io.assign_params(store, tensors)
