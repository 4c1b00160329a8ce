"""Subword-level alignment of audio embedding frames to subword tokens.

Word intervals are split evenly into their subwords. Frame ``t`` (center
time ``(t + 0.5) / R``) belongs to subword ``m`` when
``beta[m-1] <= center < beta[m]`` and the center lies inside the parent word.
Boundaries use absolute word times, so silent gaps between words stay
unassigned. A subword that captures no frame gets its nearest frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .corpus import SubwordSequence, TimedTranscript


class AlignmentError(ValueError):
    pass


class Segment(NamedTuple):
    m: int
    frame_start: int
    frame_end: int

    @property
    def size(self) -> int:
        return self.frame_end - self.frame_start


@dataclass(frozen=True)
class AlignmentMap:
    segments: tuple[Segment, ...]
    frame_rate: float
    total_frames: int

    def __len__(self) -> int:
        return len(self.segments)

    def frame_groups(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (frame index, segment index) arrays in segment order."""
        frames = np.concatenate([np.arange(s.frame_start, s.frame_end) for s in self.segments])
        groups = np.concatenate([np.full(s.size, i) for i, s in enumerate(self.segments)])
        return frames, groups

    def to_records(self, tokens: Sequence[int]) -> list[dict]:
        return [
            {"m": s.m, "token_id": int(tok), "frame_start": s.frame_start, "frame_end": s.frame_end}
            for s, tok in zip(self.segments, tokens)
        ]


class SubwordInterval(NamedTuple):
    length: float
    start: float


def subword_lengths(transcript: TimedTranscript, counts: Sequence[int]) -> list[SubwordInterval]:
    if len(counts) != len(transcript.words):
        raise AlignmentError(f"{len(counts)} subword counts for {len(transcript.words)} words")
    out = []
    for word, m in zip(transcript.words, counts):
        if m < 1:
            raise AlignmentError(f"word {word.text!r} has {m} subwords")
        length = (word.end - word.start) / m
        out += [SubwordInterval(length, word.start + i * length) for i in range(m)]
    return out


def subword_boundaries(lengths: Sequence[SubwordInterval]) -> np.ndarray:
    """Boundary vector of M+1 absolute times: first start, then each subword's end."""
    if len(lengths) == 0:
        raise AlignmentError("no subwords")
    beta = [lengths[0].start]
    for iv in lengths:
        if iv.length <= 0:
            raise AlignmentError(f"non-positive subword length {iv.length}")
        if iv.start < beta[-1] - 1e-12:
            raise AlignmentError(f"subword starting at {iv.start} precedes previous boundary {beta[-1]}")
        beta.append(iv.start + iv.length)
    return np.asarray(beta)


def word_spans(transcript: TimedTranscript, counts: Sequence[int]) -> np.ndarray:
    """(M, 2) parent-word interval for every subword."""
    return np.asarray([(w.start, w.end) for w, m in zip(transcript.words, counts) for _ in range(m)], dtype=float)


def assign_frames(beta: np.ndarray, spans: np.ndarray, total_frames: int, frame_rate: float) -> AlignmentMap:
    beta = np.asarray(beta, dtype=float)
    if beta.size < 2:
        raise AlignmentError("boundary vector needs at least two entries")
    if frame_rate <= 0 or total_frames < 1:
        raise AlignmentError("need frame_rate > 0 and total_frames >= 1")
    n_sub = beta.size - 1
    spans = np.asarray(spans, dtype=float).reshape(n_sub, 2)
    centers = (np.arange(total_frames) + 0.5) / frame_rate
    lo = np.maximum(beta[:-1], spans[:, 0])
    hi = np.minimum(beta[1:], spans[:, 1])
    starts = np.searchsorted(centers, lo, side="left")
    ends = np.maximum(np.searchsorted(centers, hi, side="left"), starts)
    owner = np.full(total_frames, -1)
    for m in range(n_sub):
        owner[starts[m]:ends[m]] = m

    for m in np.flatnonzero(ends == starts):
        mid = 0.5 * (lo[m] + max(hi[m], lo[m]))
        order = np.argsort(np.abs(centers - mid), kind="stable")
        for t in order:
            holder = owner[t]
            if holder == -1:
                if _keeps_order(owner, t, m):
                    owner[t] = m
                    break
                continue
            if holder != m and np.count_nonzero(owner == holder) > 1:
                frames = np.flatnonzero(owner == holder)
                # only an edge frame can move without splitting the holder
                if t in (frames[0], frames[-1]) and _keeps_order(owner, t, m):
                    owner[t] = m
                    break

    bounds = []
    for m in range(n_sub):
        frames = np.flatnonzero(owner == m)
        if frames.size:
            bounds.append([int(frames[0]), int(frames[-1]) + 1])
        else:
            pos = int(min(starts[m], total_frames))
            bounds.append([pos, pos])
    if any(b[0] == b[1] for b in bounds):
        bounds = _repair(bounds, total_frames)
    segments = tuple(Segment(m, a, b) for m, (a, b) in enumerate(bounds))
    return AlignmentMap(segments, float(frame_rate), int(total_frames))


def _repair(bounds: list[list[int]], total_frames: int) -> list[list[int]]:
    """Give every empty segment one frame by shifting its neighbours' edges,
    keeping segment order. Needs at least one frame per subword."""
    n = len(bounds)
    if n > total_frames:
        raise AlignmentError(f"{n} subwords cannot be placed in {total_frames} frames")
    prev_end = 0
    for b in bounds:
        b[0] = max(b[0], prev_end)
        b[1] = max(b[1], b[0] + 1)
        prev_end = b[1]
    next_start = total_frames
    for b in reversed(bounds):
        b[1] = min(b[1], next_start)
        b[0] = min(b[0], b[1] - 1)
        next_start = b[0]
    return bounds


def _keeps_order(owner: np.ndarray, t: int, m: int) -> bool:
    before = owner[:t]
    after = owner[t + 1:]
    return not (np.any(before > m) or np.any((after >= 0) & (after < m)))


def align(transcript: TimedTranscript, subwords: SubwordSequence, total_frames: int, frame_rate: float) -> AlignmentMap:
    """Full SLA: even subdivision, boundary vector, frame assignment."""
    lengths = subword_lengths(transcript, subwords.per_word_counts)
    beta = subword_boundaries(lengths)
    return assign_frames(beta, word_spans(transcript, subwords.per_word_counts), total_frames, frame_rate)
