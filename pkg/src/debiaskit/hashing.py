"""Stable content hashing and seed derivation.

All run caching, idempotency keys and per-item seeds flow through these
helpers so pipeline outputs are reproducible across processes and platforms
(Python's built-in ``hash`` is salted and unusable here).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

_SEP = b"\x1f"


def stable_hash(*parts: Any) -> str:
    """SHA-256 hex digest over the string forms of ``parts``."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            h.update(part)
        else:
            h.update(str(part).encode("utf-8"))
        h.update(_SEP)
    return h.hexdigest()


def derive_seed(*parts: Any) -> int:
    """Derive a 31-bit seed from arbitrary parts.

    Order-independent pipelines seed each item as
    ``derive_seed(base_seed, item_key, ...)`` so results do not depend on
    scheduling.
    """
    digest = hashlib.sha256(stable_hash(*parts).encode("ascii")).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def file_sha256(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
