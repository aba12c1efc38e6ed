"""Conformance tests: the service against the primary package's client."""

import base64
import json
import urllib.request

import numpy as np
import pytest

from mdfuse.degrade import toy_pair, degrade_one
from mdfuse.imageio import read_image, write_image
from mdfuse.prior import MockProvider, ProviderError, ServiceProvider, encode_png, quantize_u8

from vlmservice import PriorService, ServiceConfig
from vlmservice import png as vpng


@pytest.fixture(scope="module")
def service():
    svc = PriorService(ServiceConfig(port=0, mode="mock", seed=0)).start()
    yield svc
    svc.stop()


@pytest.fixture(scope="module")
def slow_service():
    svc = PriorService(ServiceConfig(port=0, mode="mock", seed=0, delay_s=1.0)).start()
    yield svc
    svc.stop()


def _post(endpoint, payload):
    req = urllib.request.Request(
        endpoint + "/prior", data=json.dumps(payload).encode(),
        headers={"Content-Type": "application/json"}, method="POST",
    )
    try:
        with urllib.request.urlopen(req, timeout=5) as resp:
            return resp.status, json.loads(resp.read().decode())
    except urllib.error.HTTPError as e:
        return e.code, json.loads(e.read().decode())


class TestHealth:
    def test_health_ok(self, service):
        client = ServiceProvider(service.endpoint)
        assert client.health() is True

    def test_health_reports_not_ok_when_down(self):
        client = ServiceProvider("http://127.0.0.1:9", timeout_s=0.2)
        assert client.health() is False


class TestPngDecoder:
    def test_decodes_client_encoder_output(self):
        rng = np.random.default_rng(0)
        pix = rng.integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
        back = vpng.decode(encode_png(pix))
        np.testing.assert_array_equal(back, pix)

    def test_all_filter_types(self):
        # hand-build a PNG using each filter type per row
        import struct
        import zlib

        rng = np.random.default_rng(1)
        pix = rng.integers(0, 256, size=(5, 6, 3), dtype=np.uint8).astype(np.int32)
        stride = 6 * 3
        rows = []
        prev = np.zeros(stride, dtype=np.int32)
        flat = pix.reshape(5, stride)
        for r, ftype in enumerate([0, 1, 2, 3, 4]):
            cur = flat[r]
            if ftype == 0:
                enc = cur
            elif ftype == 1:
                left = np.concatenate([np.zeros(3, np.int32), cur[:-3]])
                enc = (cur - left) % 256
            elif ftype == 2:
                enc = (cur - prev) % 256
            elif ftype == 3:
                left = np.concatenate([np.zeros(3, np.int32), cur[:-3]])
                enc = (cur - (left + prev) // 2) % 256
            else:
                left = np.concatenate([np.zeros(3, np.int32), cur[:-3]])
                ul = np.concatenate([np.zeros(3, np.int32), prev[:-3]])
                p = left + prev - ul
                pa, pb, pc = np.abs(p - left), np.abs(p - prev), np.abs(p - ul)
                paeth = np.where((pa <= pb) & (pa <= pc), left, np.where(pb <= pc, prev, ul))
                enc = (cur - paeth) % 256
            rows.append(bytes([ftype]) + enc.astype(np.uint8).tobytes())
            prev = cur

        def chunk(tag, data):
            return struct.pack(">I", len(data)) + tag + data + struct.pack(
                ">I", zlib.crc32(tag + data) & 0xFFFFFFFF
            )

        blob = (
            b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", struct.pack(">IIBBBBB", 6, 5, 8, 2, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(b"".join(rows)))
            + chunk(b"IEND", b"")
        )
        np.testing.assert_array_equal(vpng.decode(blob), pix.astype(np.uint8))

    def test_gray_and_rgba(self):
        import struct
        import zlib

        def chunk(tag, data):
            return struct.pack(">I", len(data)) + tag + data + struct.pack(
                ">I", zlib.crc32(tag + data) & 0xFFFFFFFF
            )

        gray = np.arange(12, dtype=np.uint8).reshape(3, 4)
        raw = b"".join(b"\x00" + gray[r].tobytes() for r in range(3))
        blob = (
            b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", struct.pack(">IIBBBBB", 4, 3, 8, 0, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(raw))
            + chunk(b"IEND", b"")
        )
        out = vpng.decode(blob)
        assert out.shape == (3, 4, 3)
        np.testing.assert_array_equal(out[:, :, 0], gray)

    def test_bad_signature(self):
        with pytest.raises(vpng.PngError):
            vpng.decode(b"nope")


class TestWireProtocol:
    def test_response_schema_via_client(self, service):
        vi, _ = toy_pair(32, 5)
        client = ServiceProvider(service.endpoint)
        raw = client.extract(vi)
        assert raw.tokens.shape == (8, 64)
        assert np.isfinite(raw.tokens).all()
        assert raw.provider_id == "service:mock"

    def test_mock_mode_deterministic(self, service):
        vi, _ = toy_pair(32, 6)
        client = ServiceProvider(service.endpoint)
        a = client.extract(vi)
        b = client.extract(vi)
        np.testing.assert_array_equal(a.tokens, b.tokens)

    def test_malformed_json_is_400(self, service):
        req = urllib.request.Request(
            service.endpoint + "/prior", data=b"{not json", method="POST"
        )
        with pytest.raises(urllib.error.HTTPError) as exc:
            urllib.request.urlopen(req, timeout=5)
        assert exc.value.code == 400

    def test_missing_image_is_400(self, service):
        status, body = _post(service.endpoint, {"prompt": "hi"})
        assert status == 400

    def test_bad_png_is_400(self, service):
        status, _ = _post(
            service.endpoint,
            {"image_png_b64": base64.b64encode(b"not a png").decode(), "prompt": ""},
        )
        assert status == 400

    def test_oversized_image_is_413(self):
        svc = PriorService(ServiceConfig(port=0, mode="mock", max_edge=16)).start()
        try:
            vi, _ = toy_pair(32, 7)
            payload = {
                "image_png_b64": base64.b64encode(encode_png(quantize_u8(vi.pixels))).decode(),
                "prompt": "",
            }
            status, _ = _post(svc.endpoint, payload)
            assert status == 413
        finally:
            svc.stop()

    def test_unknown_path_is_404(self, service):
        status, _ = _post(service.endpoint + "/nope", {})
        assert status == 404 or status == 400  # /nope/prior does not exist


class TestClientAgreement:
    def test_matches_in_process_mock_on_20_images(self, service, tmp_path):
        # images go to disk first so both providers see quantized pixels
        client = ServiceProvider(service.endpoint, seed=0)
        local = MockProvider(seed=0)
        rng = np.random.default_rng(0)
        worst = 0.0
        for i in range(20):
            vi, _ = toy_pair(48, 300 + i)
            kind = ("haze", "rain", "snow")[i % 3]
            img = degrade_one(vi, kind, np.random.default_rng(i), "medium")
            path = tmp_path / f"{i}.ppm"
            write_image(img, path)
            img = read_image(path)
            remote = client.extract(img).tokens
            inproc = local.extract(img).tokens
            worst = max(worst, float(np.abs(remote - inproc).max()))
        assert worst <= 1e-5, worst


class TestTimeoutRetries:
    def test_injected_timeout_triggers_exact_retry_count(self, slow_service):
        vi, _ = toy_pair(16, 8)
        before = slow_service.counters["prior_requests"]
        client = ServiceProvider(slow_service.endpoint, timeout_s=0.15, retries=2)
        with pytest.raises(ProviderError, match="3 attempts"):
            client.extract(vi)
        assert client.attempts_made == 3
        # give the delayed handlers time to finish logging their requests
        import time

        time.sleep(1.2)
        assert slow_service.counters["prior_requests"] - before == 3

    def test_primary_suite_independent_of_service(self):
        # the in-process mock needs no service: a plain extraction works with
        # no server running at all
        vi, _ = toy_pair(16, 9)
        raw = MockProvider(seed=1).extract(vi)
        assert raw.tokens.shape == (8, 64)
