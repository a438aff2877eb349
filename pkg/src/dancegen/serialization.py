"""Config digests and JSON output shared by the file writers."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def config_digest(data: dict) -> str:
    """SHA-256 of the canonical (sorted-key) JSON form of ``data``."""
    return hashlib.sha256(json.dumps(data, sort_keys=True, default=str).encode()).hexdigest()


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, default=str))
    return path
