"""Synthetic desk-scale corpus.

One document per line. Token ids ramp roughly linearly along each line
with Gaussian jitter, so a token's identity says two things a tiny model
can exploit: neighbours have nearby identities (context predicts masked
tokens) and a token's value hints at its offset in the line (context
plus identity predicts masked positions). Real text has both properties
in weaker form; the ramp just makes them learnable in minutes.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["generate_corpus", "read_corpus", "write_corpus"]


def generate_corpus(
    lines: int = 2000,
    words: int = 1995,
    body_len_range: tuple[int, int] = (24, 36),
    noise: float = 10.0,
    seed: int = 0,
) -> list[str]:
    """Ramp lines over a `words`-token vocabulary ("tok0000", "tok0001", ...)."""
    if words < 10:
        raise ValueError(f"words={words} is too small for a usable vocabulary")
    lo, hi = body_len_range
    if not 2 <= lo <= hi:
        raise ValueError(f"bad body_len_range {body_len_range}")
    rng = np.random.default_rng(seed)
    names = [f"tok{i:04d}" for i in range(words)]
    out = []
    for _ in range(lines):
        n = int(rng.integers(lo, hi + 1))
        centers = np.linspace(0, words - 1, n)
        ids = np.clip(
            np.rint(centers + rng.normal(0.0, noise, size=n)), 0, words - 1
        ).astype(np.int64)
        out.append(" ".join(names[i] for i in ids))
    return out


def write_corpus(path: str | Path, lines: list[str]) -> None:
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path: str | Path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]
