"""Build identity and the provenance block stamped into every output."""

from __future__ import annotations

import hashlib
from functools import lru_cache
from pathlib import Path

VERSION = "0.1.0"


@lru_cache(maxsize=1)
def build_id() -> str:
    """Version plus a content hash of the package sources, git-tree style."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha1()
    for path in sorted(root.rglob("*.py")):
        rel = path.relative_to(root).as_posix()
        data = path.read_bytes()
        h.update(f"blob {rel} {len(data)}\0".encode())
        h.update(data)
    return f"vrdp-{VERSION}+{h.hexdigest()[:12]}"


def stamp(config_hash: str, seed: int) -> dict:
    return {"config_hash": config_hash, "seed": int(seed), "build_id": build_id()}
