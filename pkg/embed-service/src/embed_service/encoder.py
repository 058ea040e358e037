"""Deterministic hashed n-gram sentence encoder.

Feature-hashes lowercased word unigrams and character trigrams into a fixed
number of signed buckets, then L2-normalizes. No model download, no state:
the same text always maps to the same unit vector.
"""

from __future__ import annotations

import hashlib
import math
import re

DIMENSIONS = 256
MODEL_ID = "hashed-ngram-256-v1"

_WORD_RE = re.compile(r"[a-z0-9]+")


def _features(text: str) -> list[str]:
    lowered = text.casefold()
    words = _WORD_RE.findall(lowered)
    padded = f"\x02{lowered}\x03"
    trigrams = [padded[i : i + 3] for i in range(len(padded) - 2)]
    return [f"w:{w}" for w in words] + [f"c:{t}" for t in trigrams]


def _bucket(feature: str) -> tuple[int, float]:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
    index = int.from_bytes(digest[:4], "big") % DIMENSIONS
    sign = 1.0 if digest[4] & 1 else -1.0
    return index, sign


def embed_text(text: str) -> list[float]:
    """Unit-normalized embedding of one nonempty text."""
    if not text:
        raise ValueError("cannot embed an empty text")
    vector = [0.0] * DIMENSIONS
    for feature in _features(text):
        index, sign = _bucket(feature)
        vector[index] += sign
    norm = math.sqrt(sum(v * v for v in vector))
    if norm == 0.0:  # pragma: no cover - padding guarantees at least one trigram
        vector[0] = 1.0
        norm = 1.0
    return [v / norm for v in vector]


def embed_batch(texts: list[str]) -> list[list[float]]:
    return [embed_text(t) for t in texts]
