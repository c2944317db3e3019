"""Small helpers shared across csrecon."""
from __future__ import annotations

import hashlib
import os
import re

MASK64 = (1 << 64) - 1
DEBUG_ENV = "CSRECON_DEBUG"


def derive_seed(root: int, tag: str) -> int:
    """Child seed for a named stream: root XOR the first 8 bytes of sha256(tag)."""
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return (int(root) ^ int.from_bytes(digest[:8], "little")) & MASK64


def text_hash(text: str) -> int:
    """64-bit content hash used to tie checkpoints to their config text."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def debug_checks_enabled() -> bool:
    return os.environ.get(DEBUG_ENV, "0").strip().lower() not in ("", "0", "false", "no")


def slugify(*values: str) -> str:
    """파일 이름용 slug (이미지 이름 -> 결과 파일명)"""
    combined = "-".join(v for v in values if v)
    normalized = re.sub(r"[^a-zA-Z0-9]+", "-", combined).strip("-").lower()
    return normalized or "image"
