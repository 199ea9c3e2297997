"""Run configuration resolution and hashing."""

from __future__ import annotations

import hashlib
import json


def config_hash(d: dict) -> str:
    """Stable short hash of a JSON-serializable config mapping."""
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
