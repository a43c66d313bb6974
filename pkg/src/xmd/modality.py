"""Deterministic text-to-frames surrogate for a TTS system.

Each token owns a fixed row of an acoustic codebook; synthesis repeats that row
``frames_per_token`` times and adds seeded Gaussian jitter.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .taskgen import Sample

FRAMES_PER_TOKEN = 2
FRAME_DIM = 24
DEFAULT_SIGMA = 0.05
CODEBOOK_SEED = 20240917
FRAME_DECIMALS = 6


@dataclass(frozen=True)
class AcousticCodebook:
    rows: np.ndarray  # (V, frame_dim)

    @property
    def frame_dim(self) -> int:
        return self.rows.shape[1]

    def min_pairwise_distance(self) -> float:
        r = self.rows
        sq = (r * r).sum(axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * r @ r.T
        np.fill_diagonal(d2, np.inf)
        return float(np.sqrt(max(d2.min(), 0.0)))


def make_codebook(vocab_size: int, frame_dim: int = FRAME_DIM,
                  seed: int = CODEBOOK_SEED) -> AcousticCodebook:
    rows = np.random.default_rng(seed).standard_normal((vocab_size, frame_dim))
    book = AcousticCodebook(rows)
    if vocab_size > 1 and book.min_pairwise_distance() <= 0.1:
        raise ValueError("codebook rows are not well separated; pick another seed")
    return book


@dataclass(frozen=True)
class SpeechQuery:
    frames: np.ndarray  # (num_frames, frame_dim)
    source: tuple[int, ...]
    seed: int
    sigma: float


def synthesize(codebook: AcousticCodebook, tokens: Sequence[int], seed: int,
               sigma: float = DEFAULT_SIGMA,
               frames_per_token: int = FRAMES_PER_TOKEN) -> SpeechQuery:
    if sigma < 0:
        raise ValueError(f"jitter sigma must be >= 0, got {sigma}")
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot synthesize an empty query")
    if ids.min() < 0 or ids.max() >= codebook.rows.shape[0]:
        raise ValueError(f"token id out of range for codebook of {codebook.rows.shape[0]} rows")
    frames = np.repeat(codebook.rows[ids], frames_per_token, axis=0)
    if sigma > 0:
        rng = np.random.default_rng(seed)
        frames = frames + sigma * rng.standard_normal(frames.shape)
    return SpeechQuery(frames, tuple(int(i) for i in ids), seed, float(sigma))


def sample_seed(seed: int, sample_id: int) -> int:
    return int(seed) ^ int(sample_id)


def synthesize_dataset(codebook: AcousticCodebook, samples: Sequence[Sample], seed: int,
                       sigma: float = DEFAULT_SIGMA) -> list[Sample]:
    """Attach frames to every sample, seeding each from its id (not its position).

    Frames are rounded to the precision they are stored with, so in-memory and
    reloaded datasets agree bit for bit.
    """
    out = []
    for s in samples:
        sq = synthesize(codebook, s.q, sample_seed(seed, s.id), sigma)
        out.append(dataclasses.replace(s, frames=np.round(sq.frames, FRAME_DECIMALS)))
    return out
