"""HTTP adapters for external captioning and generation backends.

Wire contract (see README for the full field reference):

    POST {base}/caption   {"image_b64", "count", "seed", "idempotency_key"}
        -> {"captions": [<count> strings]}
    POST {base}/generate  {"prompt", "size", "seed", "idempotency_key"}
        -> {"image_b64": <PNG>}

Transient failures (timeouts, connection drops, 5xx, 429) are retried up to
a budget with exponential backoff; the idempotency key is a content hash of
the request, so a retried call can never produce duplicate work server-side.
Malformed responses fail immediately. Credentials and endpoints come from
configuration / environment, never from pipeline artifacts.
"""

from __future__ import annotations

import base64
import io
import os
from dataclasses import dataclass, field
from typing import Optional

import httpx
import numpy as np
from PIL import Image

from .captioning import CaptionError, CaptionerDescriptor, CaptionerUnavailableError
from .generation import GenerationError, GeneratorDescriptor
from .hashing import stable_hash

ENV_CAPTIONER_URL = "DEBIASKIT_CAPTIONER_URL"
ENV_GENERATOR_URL = "DEBIASKIT_GENERATOR_URL"
ENV_API_TOKEN = "DEBIASKIT_API_TOKEN"


class AdapterFailure(RuntimeError):
    def __init__(self, reason: str, retries: int = 0):
        super().__init__(reason)
        self.reason = reason
        self.retries = retries


class AdapterTimeout(AdapterFailure):
    pass


class AdapterRateLimited(AdapterFailure):
    pass


class AdapterMalformedResponse(AdapterFailure):
    pass


class AdapterUnavailable(AdapterFailure):
    pass


def encode_image_png_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image_png_b64(data: str) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"))
    with Image.open(io.BytesIO(raw)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


@dataclass
class AdapterStats:
    requests: int = 0
    attempts: int = 0
    retries: int = 0
    failures: int = 0


@dataclass
class HttpEndpoint:
    """Shared retrying POST machinery for both adapters."""

    base_url: str
    timeout_s: float = 10.0
    max_retries: int = 3
    backoff_s: float = 0.05
    token: Optional[str] = None
    client: Optional[httpx.Client] = None  # injectable for tests
    stats: AdapterStats = field(default_factory=AdapterStats)

    def __post_init__(self):
        if self.client is None:
            self.client = httpx.Client(base_url=self.base_url, timeout=self.timeout_s)

    def post_json(self, path: str, payload: dict) -> dict:
        import time

        headers = {}
        token = self.token or os.environ.get(ENV_API_TOKEN)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self.stats.requests += 1
        last: AdapterFailure | None = None
        for attempt in range(self.max_retries + 1):
            if attempt > 0:
                self.stats.retries += 1
                time.sleep(self.backoff_s * (2 ** (attempt - 1)))
            self.stats.attempts += 1
            try:
                resp = self.client.post(path, json=payload, headers=headers)
            except httpx.TimeoutException:
                last = AdapterTimeout(f"timeout after {self.timeout_s}s", retries=attempt)
                continue
            except httpx.ConnectError as e:
                last = AdapterUnavailable(f"cannot reach backend: {e}", retries=attempt)
                continue
            except httpx.HTTPError as e:
                last = AdapterFailure(f"transport error: {e}", retries=attempt)
                continue
            if resp.status_code == 429:
                last = AdapterRateLimited("rate limited (429)", retries=attempt)
                continue
            if resp.status_code >= 500:
                last = AdapterFailure(f"server error {resp.status_code}", retries=attempt)
                continue
            if resp.status_code != 200:
                self.stats.failures += 1
                raise AdapterMalformedResponse(
                    f"unexpected status {resp.status_code}: {resp.text[:200]}", retries=attempt
                )
            try:
                return resp.json()
            except ValueError:
                self.stats.failures += 1
                raise AdapterMalformedResponse("response body is not JSON", retries=attempt)
        self.stats.failures += 1
        assert last is not None
        last.retries = self.max_retries
        raise last


class HttpCaptioner:
    """Captioner backed by an external HTTP endpoint."""

    def __init__(self, base_url: Optional[str] = None, **endpoint_kwargs):
        url = base_url or os.environ.get(ENV_CAPTIONER_URL)
        if not url:
            raise CaptionerUnavailableError(
                f"no captioner endpoint configured (set {ENV_CAPTIONER_URL})"
            )
        self.endpoint = HttpEndpoint(base_url=url, **endpoint_kwargs)
        self.descriptor = CaptionerDescriptor(id="external-http", deterministic=False)

    @property
    def stats(self) -> AdapterStats:
        return self.endpoint.stats

    def caption(self, image: np.ndarray, count: int, seed: int,
                attributes: Optional[dict] = None) -> list[str]:
        image_b64 = encode_image_png_b64(image)
        payload = {
            "image_b64": image_b64,
            "count": count,
            "seed": seed,
            "idempotency_key": stable_hash("caption", image_b64, count, seed),
        }
        try:
            body = self.endpoint.post_json("/caption", payload)
        except AdapterUnavailable as e:
            raise CaptionerUnavailableError(str(e)) from e
        except AdapterFailure as e:
            raise CaptionError(f"{type(e).__name__}: {e.reason}") from e
        captions = body.get("captions")
        if not isinstance(captions, list) or len(captions) != count or not all(
            isinstance(c, str) and c.strip() for c in captions
        ):
            raise CaptionError(
                f"malformed response: expected {count} non-empty captions, got {captions!r}"
            )
        return list(captions)


class HttpGenerator:
    """Image generator backed by an external HTTP endpoint."""

    def __init__(self, base_url: Optional[str] = None, **endpoint_kwargs):
        url = base_url or os.environ.get(ENV_GENERATOR_URL)
        if not url:
            raise GenerationError(
                f"no generator endpoint configured (set {ENV_GENERATOR_URL})"
            )
        self.endpoint = HttpEndpoint(base_url=url, **endpoint_kwargs)
        self.descriptor = GeneratorDescriptor(id="external-http", deterministic=False)

    @property
    def stats(self) -> AdapterStats:
        return self.endpoint.stats

    def generate(self, prompt: str, size: int, seed: int) -> np.ndarray:
        payload = {
            "prompt": prompt,
            "size": size,
            "seed": seed,
            "idempotency_key": stable_hash("generate", prompt, size, seed),
        }
        try:
            body = self.endpoint.post_json("/generate", payload)
        except AdapterFailure as e:
            raise GenerationError(f"{type(e).__name__}: {e.reason}") from e
        data = body.get("image_b64")
        if not isinstance(data, str):
            raise GenerationError("malformed response: missing image_b64")
        try:
            image = decode_image_png_b64(data)
        except Exception as e:
            raise GenerationError(f"malformed response: undecodable image: {e}") from e
        if image.shape[0] != size or image.shape[1] != size:
            raise GenerationError(
                f"malformed response: expected {size}x{size} image, got {image.shape}"
            )
        return image
