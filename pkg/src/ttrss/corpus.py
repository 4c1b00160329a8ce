"""Deterministic synthetic timed-text corpus.

Each subword of the lexicon owns a narrowband signature tone. Words are 1-3
subwords; utterances are word sequences rendered tone by tone with exact word
timings, so no forced aligner is needed. Subword strings follow the WordPiece
convention: pieces after the first carry a ``##`` continuation marker.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .signal import MixtureInstance, Waveform, mix
from .wavio import read_wav, write_wav

CONT = "##"
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
N_ENVELOPES = 4

SUBWORD_DUR = (0.08, 0.20)
GAP_DUR = (0.02, 0.08)
RAMP_SEC = 0.010
AMPLITUDE = (0.2, 0.3)
PEAK_LIMIT = 0.95
SPLITS = ("train", "val", "test")


class CorpusError(ValueError):
    pass


class TokenizationError(CorpusError):
    pass


@dataclass(frozen=True)
class Lexicon:
    subwords: tuple[str, ...]
    frequencies: tuple[float, ...]
    envelopes: tuple[int, ...]
    words: tuple[tuple[int, ...], ...]
    word_texts: tuple[str, ...]
    seed: int

    @property
    def n_subwords(self) -> int:
        return len(self.subwords)

    def word_id(self, text: str) -> int:
        try:
            return self.word_texts.index(text)
        except ValueError:
            raise CorpusError(f"unknown word {text!r}") from None

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def build_lexicon(n_subwords: int, n_words: int, sample_rate: int, seed: int) -> Lexicon:
    """Seeded lexicon: the first half of the subwords are word-initial pieces,
    the rest continuation pieces. Every subword occurs in at least one word
    when ``n_words`` allows it."""
    if n_subwords < 2:
        raise CorpusError("need at least two subwords")
    rng = np.random.default_rng([seed, 0x1E1])
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    if n_subwords > len(syllables):
        raise CorpusError(f"at most {len(syllables)} subwords supported")
    chosen = [syllables[i] for i in rng.permutation(len(syllables))[:n_subwords]]
    n_init = (n_subwords + 1) // 2
    subwords = tuple(chosen[:n_init] + [CONT + s for s in chosen[n_init:]])
    initial = list(range(n_init))
    cont = list(range(n_init, n_subwords))

    lo, hi = 0.0625 * sample_rate, 0.4375 * sample_rate
    grid = np.linspace(lo, hi, n_subwords)
    frequencies = tuple(float(f) for f in grid[rng.permutation(n_subwords)])
    envelopes = tuple(int(e) for e in rng.integers(0, N_ENVELOPES, size=n_subwords))

    max_words = n_init * (1 + len(cont) + len(cont) ** 2)
    if n_words > max_words:
        raise CorpusError(f"cannot build {n_words} distinct words from {n_subwords} subwords")
    words: list[tuple[int, ...]] = []
    seen = set()
    i = 0
    while len(words) < n_words:
        first = initial[i % n_init]
        if i < len(cont):
            rest = [cont[i]] + [int(c) for c in rng.choice(cont, size=rng.integers(0, 2))]
        else:
            rest = [int(c) for c in rng.choice(cont, size=rng.integers(0, 3))] if cont else []
        word = (first, *rest)
        i += 1
        if word in seen:
            continue
        seen.add(word)
        words.append(word)
    texts = tuple("".join(subwords[t].removeprefix(CONT) for t in w) for w in words)
    if len(set(texts)) != len(texts):
        raise CorpusError("lexicon produced colliding word spellings")
    return Lexicon(subwords, frequencies, envelopes, tuple(words), texts, seed)


def tokenize(word: str, lexicon: Lexicon) -> list[int]:
    """Greedy longest-match WordPiece tokenization."""
    initial = {s: i for i, s in enumerate(lexicon.subwords) if not s.startswith(CONT)}
    cont = {s[len(CONT):]: i for i, s in enumerate(lexicon.subwords) if s.startswith(CONT)}
    ids = []
    pos = 0
    while pos < len(word):
        table = initial if pos == 0 else cont
        for end in range(len(word), pos, -1):
            piece = word[pos:end]
            if piece in table:
                ids.append(table[piece])
                pos = end
                break
        else:
            raise TokenizationError(f"cannot tokenize word {word!r} at offset {pos}")
    if not ids:
        raise TokenizationError(f"cannot tokenize empty word {word!r}")
    return ids


class TimedWord(NamedTuple):
    text: str
    start: float
    end: float


@dataclass(frozen=True)
class TimedTranscript:
    words: tuple[TimedWord, ...]

    def __post_init__(self):
        prev_end = 0.0
        for w in self.words:
            if not (0.0 <= w.start < w.end):
                raise CorpusError(f"invalid word interval {w}")
            if w.start < prev_end:
                raise CorpusError(f"overlapping or unordered word {w}")
            prev_end = w.end

    def __len__(self) -> int:
        return len(self.words)

    def check_duration(self, duration: float) -> None:
        if self.words and self.words[-1].end > duration + 1e-9:
            raise CorpusError(f"transcript ends at {self.words[-1].end} beyond audio duration {duration}")


@dataclass(frozen=True)
class SubwordSequence:
    tokens: tuple[int, ...]
    word_index: tuple[int, ...]
    per_word_counts: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_words(cls, texts, lexicon: Lexicon) -> "SubwordSequence":
        tokens, word_index, counts = [], [], []
        for idx, text in enumerate(texts):
            ids = tokenize(text, lexicon)
            tokens += ids
            word_index += [idx] * len(ids)
            counts.append(len(ids))
        return cls(tuple(tokens), tuple(word_index), tuple(counts))

    @classmethod
    def from_transcript(cls, transcript: TimedTranscript, lexicon: Lexicon) -> "SubwordSequence":
        return cls.from_words([w.text for w in transcript.words], lexicon)


class _Piece(NamedTuple):
    subword: int
    start: int
    length: int


def plan_utterance(word_ids, lexicon: Lexicon, sample_rate: int, seed: int):
    """Sample-level layout of an utterance: subword pieces, word spans, total length."""
    if len(word_ids) == 0:
        raise CorpusError("empty word list")
    rng = np.random.default_rng([seed, 0x5E7])
    pos = int(round(rng.uniform(*GAP_DUR) * sample_rate))
    pieces: list[_Piece] = []
    spans: list[tuple[int, int]] = []
    for wid in word_ids:
        if not 0 <= wid < len(lexicon.words):
            raise CorpusError(f"invalid word id {wid}")
        start = pos
        for sub in lexicon.words[wid]:
            n = int(round(rng.uniform(*SUBWORD_DUR) * sample_rate))
            pieces.append(_Piece(sub, pos, n))
            pos += n
        spans.append((start, pos))
        pos += int(round(rng.uniform(*GAP_DUR) * sample_rate))
    amplitude = rng.uniform(*AMPLITUDE)
    phases = rng.uniform(0, 2 * np.pi, size=len(pieces))
    return pieces, spans, pos, amplitude, phases


def _envelope(kind: int, n: int) -> np.ndarray:
    x = np.linspace(0.0, 1.0, n)
    if kind == 0:
        return np.ones(n)
    if kind == 1:
        return 0.5 + 0.5 * x
    if kind == 2:
        return 1.0 - 0.5 * x
    return 0.5 + 0.5 * np.sin(np.pi * x)


def _ramp(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    r = min(ramp, n // 2)
    if r > 0:
        up = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        env[:r] = up
        env[n - r:] = up[::-1]
    return env


def synth_utterance(word_ids, lexicon: Lexicon, sample_rate: int, seed: int) -> tuple[Waveform, TimedTranscript]:
    pieces, spans, total, amplitude, phases = plan_utterance(word_ids, lexicon, sample_rate, seed)
    out = np.zeros(total)
    ramp = int(round(RAMP_SEC * sample_rate))
    for piece, phase in zip(pieces, phases):
        t = np.arange(piece.length) / sample_rate
        tone = np.sin(2 * np.pi * lexicon.frequencies[piece.subword] * t + phase)
        env = _envelope(lexicon.envelopes[piece.subword], piece.length) * _ramp(piece.length, ramp)
        out[piece.start:piece.start + piece.length] = amplitude * env * tone
    words = tuple(
        TimedWord(lexicon.word_texts[wid], s / sample_rate, e / sample_rate)
        for wid, (s, e) in zip(word_ids, spans)
    )
    return Waveform(out, sample_rate), TimedTranscript(words)


@dataclass(frozen=True)
class DatasetConfig:
    seed: int
    sample_rate: int
    n_subwords: int
    n_words: int
    n_sources: int
    n_train: int
    n_val: int
    n_test: int
    min_words: int
    max_words: int
    noisy: bool
    snr_low_db: float
    snr_high_db: float

    def __post_init__(self):
        if self.n_sources not in (2, 3):
            raise CorpusError(f"n_sources must be 2 or 3, got {self.n_sources}")
        if not 1 <= self.min_words <= self.max_words:
            raise CorpusError("need 1 <= min_words <= max_words")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise CorpusError("split sizes must be non-negative")
        if self.snr_low_db > self.snr_high_db:
            raise CorpusError("snr_low_db exceeds snr_high_db")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        missing = names - set(d)
        if unknown or missing:
            raise CorpusError(f"dataset config: unknown keys {sorted(unknown)}, missing keys {sorted(missing)}")
        return cls(**d)

    def lexicon(self) -> Lexicon:
        return build_lexicon(self.n_subwords, self.n_words, self.sample_rate, self.seed)

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


def split_of(word_ids) -> str:
    """Split membership is a hash of the word sequence, so splits never share one."""
    bucket = zlib.crc32(np.asarray(word_ids, dtype="<u2").tobytes()) % 10
    return "train" if bucket < 8 else ("val" if bucket == 8 else "test")


@dataclass
class Instance:
    id: str
    mixture: MixtureInstance
    subwords: list[SubwordSequence]
    snr_db: Optional[float]


def make_instance(config: DatasetConfig, lexicon: Lexicon, split: str, index: int) -> Instance:
    """Pure function of (config, split, index)."""
    rng = np.random.default_rng([config.seed, SPLITS.index(split), index])
    sr = config.sample_rate
    while True:
        seqs = []
        while len(seqs) < config.n_sources:
            n = int(rng.integers(config.min_words, config.max_words + 1))
            seq = [int(w) for w in rng.integers(0, len(lexicon.words), size=n)]
            if split_of(seq) == split:
                seqs.append(seq)
        rendered = [synth_utterance(seq, lexicon, sr, int(rng.integers(2**32))) for seq in seqs]
        length = min(len(w) for w, _ in rendered)
        sources, transcripts = [], []
        for wave, tr in rendered:
            kept = tuple(w for w in tr.words if w.end * sr <= length + 1e-6)
            samples = wave.samples[:length].copy()
            if len(kept) < len(tr.words):
                cut = int(round(tr.words[len(kept)].start * sr))
                samples[cut:] = 0.0
            sources.append(Waveform(samples, sr))
            transcripts.append(TimedTranscript(kept))
        # the stored (possibly truncated) sequences must hash to this split too
        if all(len(t) > 0 and split_of([lexicon.word_id(w.text) for w in t.words]) == split for t in transcripts):
            break
    noise, snr = None, None
    if config.noisy:
        noise = Waveform(rng.standard_normal(length), sr)
        snr = float(rng.uniform(config.snr_low_db, config.snr_high_db))
    inst = mix(sources, noise, snr, transcripts)
    peak = float(np.max(np.abs(inst.mixture.samples)))
    if peak > PEAK_LIMIT:
        g = PEAK_LIMIT / peak
        inst = MixtureInstance(
            Waveform(inst.mixture.samples * g, sr),
            [Waveform(s.samples * g, sr) for s in inst.sources],
            None if inst.noise is None else Waveform(inst.noise.samples * g, sr),
            inst.transcripts,
        )
    subwords = [SubwordSequence.from_transcript(t, lexicon) for t in transcripts]
    return Instance(f"{split}-{index:05d}", inst, subwords, snr)


def write_transcript(path, transcript: TimedTranscript) -> None:
    lines = [
        f'{{"text": {json.dumps(w.text)}, "start_sec": {w.start:.6f}, "end_sec": {w.end:.6f}}}\n'
        for w in transcript.words
    ]
    Path(path).write_text("".join(lines))


def read_transcript(path) -> TimedTranscript:
    words = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            words.append(TimedWord(rec["text"], float(rec["start_sec"]), float(rec["end_sec"])))
    return TimedTranscript(tuple(words))


def gen_dataset(config: DatasetConfig, out_dir) -> Path:
    """Write train/val/test splits with WAVs, transcripts and a JSONL manifest per split."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create output directory {out}: {exc}") from exc
    lexicon = config.lexicon()
    (out / "lexicon.json").write_text(json.dumps(lexicon.to_json(), indent=1) + "\n")
    (out / "dataset_config.json").write_text(json.dumps(asdict(config), indent=1, sort_keys=True) + "\n")
    for split in SPLITS:
        lines = []
        for index in range(config.split_size(split)):
            inst = make_instance(config, lexicon, split, index)
            rel = Path(split) / inst.id
            (out / rel).mkdir(parents=True, exist_ok=True)
            write_wav(out / rel / "mixture.wav", inst.mixture.mixture)
            source_paths, transcript_paths = [], []
            for k, (src, tr) in enumerate(zip(inst.mixture.sources, inst.mixture.transcripts), start=1):
                write_wav(out / rel / f"s{k}.wav", src)
                write_transcript(out / rel / f"s{k}.jsonl", tr)
                source_paths.append(str(rel / f"s{k}.wav"))
                transcript_paths.append(str(rel / f"s{k}.jsonl"))
            noise_path = None
            if inst.mixture.noise is not None:
                write_wav(out / rel / "noise.wav", inst.mixture.noise)
                noise_path = str(rel / "noise.wav")
            lines.append(json.dumps({
                "id": inst.id,
                "mixture_path": str(rel / "mixture.wav"),
                "source_paths": source_paths,
                "transcript_paths": transcript_paths,
                "noise_path": noise_path,
                "snr_db": inst.snr_db,
            }))
        (out / f"{split}.jsonl").write_text("".join(line + "\n" for line in lines))
    return out


@dataclass
class Record:
    id: str
    mixture: Waveform
    sources: list[Waveform]
    transcripts: list[TimedTranscript]
    subwords: list[SubwordSequence]
    noise: Optional[Waveform]
    snr_db: Optional[float]


def load_config(root) -> DatasetConfig:
    return DatasetConfig.from_dict(json.loads((Path(root) / "dataset_config.json").read_text()))


def load_split(root, split: str, lexicon: Optional[Lexicon] = None) -> list[Record]:
    root = Path(root)
    manifest = root / f"{split}.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"missing manifest {manifest}")
    if lexicon is None:
        lexicon = load_config(root).lexicon()
    records = []
    for line in manifest.read_text().splitlines():
        rec = json.loads(line)
        transcripts = [read_transcript(root / p) for p in rec["transcript_paths"]]
        records.append(Record(
            id=rec["id"],
            mixture=read_wav(root / rec["mixture_path"]),
            sources=[read_wav(root / p) for p in rec["source_paths"]],
            transcripts=transcripts,
            subwords=[SubwordSequence.from_transcript(t, lexicon) for t in transcripts],
            noise=read_wav(root / rec["noise_path"]) if rec["noise_path"] else None,
            snr_db=rec["snr_db"],
        ))
    return records
