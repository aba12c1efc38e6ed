"""HTTP service for semantic-prior extraction.

Wire protocol:
  POST /prior   {"image_png_b64": str, "prompt": str}
                -> 200 {"tokens": [[float; C_org]; S], "model": str}
                   400 malformed request, 413 oversized image, 500 failure
  GET  /health  -> 200 {"status": "ok"}

Modes: "mock" serves the deterministic descriptor tokens and needs no model
weights; "blip2" wraps a pretrained vision-language model in VQA mode and
returns its last-hidden-layer token features (requires the blip2 extra).
A configurable response delay supports client timeout/retry testing.
"""

from __future__ import annotations

import argparse
import base64
import binascii
import json
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import mockprior, png


@dataclass
class ServiceConfig:
    port: int = 8093
    mode: str = "mock"  # mock | blip2
    device: str = "cpu"
    max_edge: int = 1024
    prompt_default: str = "Describe the weather condition and the scene in this image."
    seed: int = 0
    delay_s: float = 0.0  # injectable response delay

    def __post_init__(self):
        if self.mode not in ("mock", "blip2"):
            raise ValueError(f"unknown mode {self.mode!r}")


class RequestError(ValueError):
    def __init__(self, status, message):
        super().__init__(message)
        self.status = status


class Blip2Backend:
    """Lazy wrapper over a pretrained BLIP-2 VQA model."""

    def __init__(self, cfg):
        try:
            import torch
            from transformers import Blip2ForConditionalGeneration, Blip2Processor
        except ImportError as e:
            raise RuntimeError(
                "blip2 mode needs torch+transformers (install the 'blip2' extra)"
            ) from e
        self._torch = torch
        name = "Salesforce/blip2-opt-2.7b"
        self.processor = Blip2Processor.from_pretrained(name)
        self.model = Blip2ForConditionalGeneration.from_pretrained(name).to(cfg.device)
        self.model.eval()
        self.device = cfg.device

    def tokens(self, pixels_u8, prompt):
        from PIL import Image

        torch = self._torch
        image = Image.fromarray(pixels_u8)
        inputs = self.processor(images=image, text=f"Question: {prompt} Answer:",
                                return_tensors="pt").to(self.device)
        with torch.no_grad():
            out = self.model.generate(
                **inputs, max_new_tokens=32, output_hidden_states=True,
                return_dict_in_generate=True,
            )
        # last hidden layer of every generated answer position
        states = [step[-1][:, -1, :] for step in out.hidden_states]
        tokens = torch.cat(states, dim=0).float().cpu().numpy()
        return tokens


class MockBackend:
    def __init__(self, cfg):
        self.seed = cfg.seed

    def tokens(self, pixels_u8, prompt):
        return mockprior.mock_tokens(pixels_u8, seed=self.seed)


def _make_handler(cfg, backend, counters):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):  # keep test output quiet
            pass

        def _reply(self, status, payload):
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/health":
                self._reply(200, {"status": "ok"})
            else:
                self._reply(404, {"error": f"no such path {self.path}"})

        def do_POST(self):
            if self.path != "/prior":
                self._reply(404, {"error": f"no such path {self.path}"})
                return
            counters["prior_requests"] += 1
            if cfg.delay_s > 0:
                time.sleep(cfg.delay_s)
            try:
                pixels, prompt = self._parse()
                tokens = backend.tokens(pixels, prompt)
                tokens = np.asarray(tokens, dtype=np.float64)
                if tokens.ndim != 2 or not np.isfinite(tokens).all():
                    raise RuntimeError(f"backend produced bad tokens {tokens.shape}")
                self._reply(200, {"tokens": tokens.tolist(), "model": cfg.mode})
            except RequestError as e:
                self._reply(e.status, {"error": str(e)})
            except Exception as e:
                self._reply(500, {"error": f"prior extraction failed: {e}"})

        def _parse(self):
            try:
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length).decode())
            except (ValueError, UnicodeDecodeError) as e:
                raise RequestError(400, f"malformed JSON body: {e}") from None
            if not isinstance(payload, dict) or "image_png_b64" not in payload:
                raise RequestError(400, "missing image_png_b64")
            try:
                raw = base64.b64decode(payload["image_png_b64"], validate=True)
            except (binascii.Error, TypeError) as e:
                raise RequestError(400, f"bad base64: {e}") from None
            try:
                pixels = png.decode(raw)
            except png.PngError as e:
                raise RequestError(400, f"bad PNG: {e}") from None
            if max(pixels.shape[:2]) > cfg.max_edge:
                raise RequestError(413, f"image edge {max(pixels.shape[:2])} exceeds {cfg.max_edge}")
            prompt = payload.get("prompt", cfg.prompt_default)
            return pixels, prompt

    return Handler


class PriorService:
    """Embeddable server; also driven by the CLI entry point."""

    def __init__(self, cfg=None):
        self.cfg = cfg or ServiceConfig()
        backend = MockBackend(self.cfg) if self.cfg.mode == "mock" else Blip2Backend(self.cfg)
        self.counters = {"prior_requests": 0}
        handler = _make_handler(self.cfg, backend, self.counters)
        self.httpd = ThreadingHTTPServer(("127.0.0.1", self.cfg.port), handler)
        self._thread = None

    @property
    def endpoint(self):
        host, port = self.httpd.server_address
        return f"http://{host}:{port}"

    def start(self):
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def serve_forever(self):
        print(f"serving {self.cfg.mode} prior extraction on {self.endpoint}")
        self.httpd.serve_forever()


def main(argv=None):
    p = argparse.ArgumentParser(prog="vlmservice")
    p.add_argument("--port", type=int, default=8093)
    p.add_argument("--mode", choices=("mock", "blip2"), default="mock")
    p.add_argument("--device", default="cpu")
    p.add_argument("--max-edge", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delay", type=float, default=0.0, help="inject response delay (s)")
    args = p.parse_args(argv)
    cfg = ServiceConfig(port=args.port, mode=args.mode, device=args.device,
                        max_edge=args.max_edge, seed=args.seed, delay_s=args.delay)
    PriorService(cfg).serve_forever()


if __name__ == "__main__":
    main()
