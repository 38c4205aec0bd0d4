"""Synthetic OCR-style corpus: strings rendered from 8x8 binary glyphs."""

from __future__ import annotations

import numpy as np

from .model import TrainingExample
from .tiler import Image

ALPHABET = "0123456789"
GLYPH = 8


def make_glyphs(alphabet: str = ALPHABET, seed: int = 0) -> dict[str, np.ndarray]:
    """Distinct random 8x8 binary glyphs, roughly half the pixels lit."""
    rng = np.random.default_rng([seed, 101])
    glyphs: dict[str, np.ndarray] = {}
    seen: set[bytes] = set()
    for ch in alphabet:
        while True:
            g = (rng.random((GLYPH, GLYPH)) < 0.5).astype(np.float64)
            key = g.tobytes()
            if key not in seen:
                seen.add(key)
                glyphs[ch] = g
                break
    return glyphs


def render(text: str, glyphs: dict[str, np.ndarray], scale: int = 2, channels: int = 3) -> Image:
    """Glyphs side by side, each upscaled ``scale``x with nearest-neighbour."""
    row = np.concatenate([np.kron(glyphs[c], np.ones((scale, scale))) for c in text], axis=1)
    return Image(np.repeat(row[:, :, None], channels, axis=2))


def make_ocr_corpus(n: int = 32, n_chars: int = 4, seed: int = 0, prompt: str = "OCR",
                    alphabet: str = ALPHABET, scale: int = 2, channels: int = 3) -> list[TrainingExample]:
    """``n`` examples with distinct random strings as transcription targets."""
    if n > 64:
        raise ValueError("the synthetic corpus holds at most 64 examples")
    if n > len(alphabet) ** n_chars:
        raise ValueError(f"cannot draw {n} distinct strings of length {n_chars}")
    glyphs = make_glyphs(alphabet, seed)
    rng = np.random.default_rng([seed, 102])
    texts: list[str] = []
    while len(texts) < n:
        s = "".join(alphabet[i] for i in rng.integers(0, len(alphabet), n_chars))
        if s not in texts:
            texts.append(s)
    return [TrainingExample(prompt, s, render(s, glyphs, scale, channels)) for s in texts]
