"""Frozen toy encoders standing in for a pretrained audio model and a language model.

The audio encoder is a windowed single-bin DFT (Goertzel-style) filterbank
tuned to the lexicon's signature frequencies, log1p-compressed and projected
by a fixed random matrix. The text encoder is a fixed random embedding table
followed by one pass of neighbour averaging and unit normalization.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .corpus import Lexicon, SubwordSequence
from .signal import Waveform


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d_audio: int
    d_text: int
    frame_rate: float
    frame_length: float
    seed: int

    def __post_init__(self):
        if self.d_audio < 1 or self.d_text < 1:
            raise EncoderError("embedding dimensions must be >= 1")
        if self.frame_rate <= 0:
            raise EncoderError("frame_rate must be positive")
        if self.frame_length < 1.0 / self.frame_rate:
            raise EncoderError("frame_length must cover at least one hop (1/frame_rate)")

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        names = {f.name for f in fields(cls)}
        if set(d) != names:
            raise EncoderError(f"encoder config: unknown keys {sorted(set(d) - names)}, missing {sorted(names - set(d))}")
        return cls(**d)


@dataclass
class EmbeddingMatrix:
    """Column embeddings: ``values`` has shape (dim, count)."""

    values: torch.Tensor
    frame_rate: Optional[float] = None

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def count(self) -> int:
        return self.values.shape[1]

    @property
    def columns(self) -> torch.Tensor:
        """(count, dim) view, one row per embedding."""
        return self.values.T


def frame_count(n_samples: int, sample_rate: int, frame_rate: float) -> int:
    return int(math.floor(n_samples / sample_rate * frame_rate + 1e-9))


class AudioEncoder:
    """Frame t is centered at (t + 0.5) / frame_rate seconds."""

    def __init__(self, config: EncoderConfig, lexicon: Lexicon, sample_rate: int):
        self.config = config
        self.sample_rate = sample_rate
        self.frame_rate = config.frame_rate
        self.win = int(round(config.frame_length * sample_rate))
        t = np.arange(self.win) / sample_rate
        window = np.hanning(self.win + 2)[1:-1]
        freqs = np.asarray(lexicon.frequencies)
        arg = 2 * np.pi * t[:, None] * freqs[None, :]
        self.cos_basis = torch.from_numpy(window[:, None] * np.cos(arg))
        self.sin_basis = torch.from_numpy(window[:, None] * np.sin(arg))
        rng = np.random.default_rng([config.seed, 0xA0D])
        n = len(freqs)
        self.projection = torch.from_numpy(rng.uniform(-1, 1, size=(config.d_audio, n)) / math.sqrt(n))

    def n_frames(self, n_samples: int) -> int:
        return frame_count(n_samples, self.sample_rate, self.frame_rate)

    def frame_offsets(self, n_frames: int) -> np.ndarray:
        centers = (np.arange(n_frames) + 0.5) / self.frame_rate * self.sample_rate
        return np.round(centers - self.win / 2).astype(np.int64)

    def filterbank(self, samples: torch.Tensor) -> torch.Tensor:
        """(T, U) log1p squared magnitudes at the signature frequencies."""
        n = samples.shape[-1]
        n_frames = self.n_frames(n)
        if n_frames < 1:
            raise EncoderError(f"input of {n} samples is shorter than one frame")
        starts = self.frame_offsets(n_frames)
        pad_left = max(0, -int(starts[0]))
        pad_right = max(0, int(starts[-1]) + self.win - n)
        padded = torch.nn.functional.pad(samples, (pad_left, pad_right))
        idx = torch.from_numpy(starts + pad_left)[:, None] + torch.arange(self.win)[None, :]
        frames = padded[idx]
        re = frames @ self.cos_basis.to(samples.dtype)
        im = frames @ self.sin_basis.to(samples.dtype)
        return torch.log1p(re * re + im * im)

    def __call__(self, waveform) -> EmbeddingMatrix:
        samples = waveform.samples if isinstance(waveform, Waveform) else waveform
        if not isinstance(samples, torch.Tensor):
            samples = torch.from_numpy(np.asarray(samples, dtype=np.float64))
        bank = self.filterbank(samples)
        values = self.projection.to(bank.dtype) @ bank.T
        return EmbeddingMatrix(values, self.frame_rate)

    def full_frames(self, n_samples: int) -> np.ndarray:
        """Indices of frames whose window lies entirely inside the signal."""
        starts = self.frame_offsets(self.n_frames(n_samples))
        return np.flatnonzero((starts >= 0) & (starts + self.win <= n_samples))


class TextEncoder:
    def __init__(self, config: EncoderConfig, n_subwords: int):
        self.config = config
        rng = np.random.default_rng([config.seed, 0x7E7])
        self.table = torch.from_numpy(rng.standard_normal((n_subwords, config.d_text)))

    def __call__(self, tokens) -> EmbeddingMatrix:
        ids = list(tokens.tokens if isinstance(tokens, SubwordSequence) else tokens)
        if not ids:
            raise EncoderError("empty token list")
        n = self.table.shape[0]
        bad = [t for t in ids if not 0 <= t < n]
        if bad:
            raise EncoderError(f"unknown token ids {bad}")
        emb = self.table[torch.tensor(ids)]
        m = len(ids)
        # reflect at the ends; a single token is its own neighbour
        left = [1 if m > 1 else 0] + list(range(m - 1))
        right = list(range(1, m)) + [m - 2 if m > 1 else 0]
        mixed = 0.5 * emb + 0.25 * emb[left] + 0.25 * emb[right]
        mixed = mixed / mixed.norm(dim=1, keepdim=True)
        return EmbeddingMatrix(mixed.T.contiguous(), None)


class Encoders:
    """Audio and text encoder pair sharing one config and lexicon."""

    def __init__(self, config: EncoderConfig, lexicon: Lexicon, sample_rate: int):
        self.config = config
        self.lexicon = lexicon
        self.audio = AudioEncoder(config, lexicon, sample_rate)
        self.text = TextEncoder(config, lexicon.n_subwords)


def audio_encode(waveform, config: EncoderConfig, lexicon: Lexicon) -> EmbeddingMatrix:
    rate = waveform.sample_rate if isinstance(waveform, Waveform) else None
    if rate is None:
        raise EncoderError("audio_encode needs a Waveform (sample rate required)")
    return AudioEncoder(config, lexicon, rate)(waveform)


def text_encode(tokens, config: EncoderConfig, lexicon: Lexicon) -> EmbeddingMatrix:
    return TextEncoder(config, lexicon.n_subwords)(tokens)


_EMB_MAGIC = b"TTRE"


def save_embedding(path, emb: EmbeddingMatrix) -> None:
    values = emb.values.detach().to(torch.float64).numpy()
    rate = float("nan") if emb.frame_rate is None else float(emb.frame_rate)
    header = _EMB_MAGIC + struct.pack("<QQd", emb.dim, emb.count, rate)
    Path(path).write_bytes(header + values.astype("<f8").tobytes(order="C"))


def load_embedding(path) -> EmbeddingMatrix:
    blob = Path(path).read_bytes()
    if blob[:4] != _EMB_MAGIC:
        raise EncoderError(f"{path}: not an embedding cache file")
    dim, count, rate = struct.unpack("<QQd", blob[4:28])
    values = np.frombuffer(blob[28:], dtype="<f8")
    if values.size != dim * count:
        raise EncoderError(f"{path}: expected {dim * count} values, found {values.size}")
    return EmbeddingMatrix(torch.from_numpy(values.reshape(dim, count).copy()), None if math.isnan(rate) else rate)
