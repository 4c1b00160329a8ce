import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ttrss.corpus import (CONT, CorpusError, DatasetConfig, SubwordSequence, TimedTranscript, TimedWord,
                          TokenizationError, gen_dataset, load_split, make_instance, plan_utterance, read_transcript,
                          split_of, synth_utterance, tokenize, write_transcript)
from ttrss.signal import si_sdr

from conftest import small_dataset


def test_lexicon_shape(lexicon):
    assert lexicon.n_subwords == 24
    assert len(lexicon.words) == 40 and len(set(lexicon.words)) == 40
    assert all(1 <= len(w) <= 3 for w in lexicon.words)
    for w in lexicon.words:
        assert not lexicon.subwords[w[0]].startswith(CONT)
        assert all(lexicon.subwords[t].startswith(CONT) for t in w[1:])
    assert len(set(lexicon.frequencies)) == 24
    assert {t for w in lexicon.words for t in w} == set(range(24))


def test_tokenize_round_trip(lexicon):
    for text, ids in zip(lexicon.word_texts, lexicon.words):
        assert tokenize(text, lexicon) == list(ids)
        assert "".join(lexicon.subwords[i].removeprefix(CONT) for i in ids) == text


def test_tokenize_rejects_unknown(lexicon):
    with pytest.raises(TokenizationError):
        tokenize("qqq", lexicon)


def test_synth_deterministic_and_timed(lexicon):
    ids = [0, 5, 9]
    a, tr = synth_utterance(ids, lexicon, 8000, 7)
    b, _ = synth_utterance(ids, lexicon, 8000, 7)
    assert np.array_equal(a.samples, b.samples)
    assert [w.text for w in tr.words] == [lexicon.word_texts[i] for i in ids]
    tr.check_duration(a.duration)
    inside = np.zeros(len(a), bool)
    for w in tr.words:
        inside[int(round(w.start * 8000)):int(round(w.end * 8000))] = True
    assert np.all(a.samples[~inside] == 0.0)
    assert np.max(np.abs(a.samples)) <= 0.3


def test_tone_peaks_at_signature(lexicon):
    sr = 8000
    ids = [3, 17, 22, 8]
    wave, _ = synth_utterance(ids, lexicon, sr, 11)
    pieces = plan_utterance(ids, lexicon, sr, 11)[0]
    for p in pieces:
        seg = wave.samples[p.start:p.start + p.length]
        spec = np.abs(np.fft.rfft(seg))
        freqs = np.fft.rfftfreq(len(seg), 1 / sr)
        assert abs(freqs[np.argmax(spec)] - lexicon.frequencies[p.subword]) <= sr / len(seg)


def test_transcript_invariants():
    with pytest.raises(CorpusError):
        TimedTranscript((TimedWord("a", 0.5, 0.4),))
    with pytest.raises(CorpusError):
        TimedTranscript((TimedWord("a", 0.0, 0.4), TimedWord("b", 0.3, 0.6)))
    tr = TimedTranscript((TimedWord("a", 0.0, 0.4),))
    with pytest.raises(CorpusError):
        tr.check_duration(0.3)


@given(st.lists(st.tuples(st.floats(0, 0.5), st.floats(0.01, 0.5)), min_size=1, max_size=8))
def test_transcript_file_round_trip(tmp_path_factory, gaps):
    t, words = 0.0, []
    for i, (gap, dur) in enumerate(gaps):
        words.append(TimedWord(f"w{i}", round(t + gap, 6), round(t + gap + dur, 6)))
        t = words[-1].end
    tr = TimedTranscript(tuple(words))
    path = tmp_path_factory.mktemp("tr") / "t.jsonl"
    write_transcript(path, tr)
    assert read_transcript(path) == tr


def test_instance_properties(dataset_config, lexicon):
    for i in range(5):
        inst = make_instance(dataset_config, lexicon, "train", i)
        mx = inst.mixture
        assert np.allclose(mx.mixture.samples, sum(s.samples for s in mx.sources), atol=1e-12)
        assert np.max(np.abs(mx.mixture.samples)) <= 0.95 + 1e-12
        for src, tr, sub in zip(mx.sources, mx.transcripts, inst.subwords):
            assert len(tr) >= 1
            tr.check_duration(src.duration)
            assert split_of([lexicon.word_id(w.text) for w in tr.words]) == "train"
            assert sub == SubwordSequence.from_transcript(tr, lexicon)
            tail = int(round(tr.words[-1].end * 8000))
            assert np.all(src.samples[tail:] == 0.0)


def test_noisy_snr_exact(lexicon):
    cfg = small_dataset(noisy=True, snr_low_db=0.0, snr_high_db=20.0)
    for i in range(5):
        inst = make_instance(cfg, lexicon, "val", i)
        mx = inst.mixture
        snr = 10 * np.log10(sum(s.energy() for s in mx.sources) / mx.noise.energy())
        assert abs(snr - inst.snr_db) <= 1e-6
        assert 0.0 <= inst.snr_db <= 20.0


def test_generated_dataset(dataset_dir, dataset_config, lexicon, tmp_path):
    for split in ("train", "val", "test"):
        lines = (dataset_dir / f"{split}.jsonl").read_text().splitlines()
        assert len(lines) == dataset_config.split_size(split)
        rec = json.loads(lines[0])
        assert set(rec) == {"id", "mixture_path", "source_paths", "transcript_paths", "noise_path", "snr_db"}
    records = load_split(dataset_dir, "train", lexicon)
    k = dataset_config.n_sources
    for r in records:
        assert np.max(np.abs(r.mixture.samples - sum(s.samples for s in r.sources))) <= (k + 1) / 32768
    seqs = {split: {tuple(w.text for w in t.words) for r in load_split(dataset_dir, split, lexicon)
                    for t in r.transcripts} for split in ("train", "val", "test")}
    assert not seqs["train"] & seqs["val"] and not seqs["train"] & seqs["test"] and not seqs["val"] & seqs["test"]
    again = gen_dataset(dataset_config, tmp_path / "again")
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "lexicon.json", "dataset_config.json"):
        assert (again / name).read_bytes() == (dataset_dir / name).read_bytes()
    assert (again / "train/train-00000/mixture.wav").read_bytes() == \
        (dataset_dir / "train/train-00000/mixture.wav").read_bytes()


def test_quantized_sources_close_to_float(dataset_dir, dataset_config, lexicon):
    rec = load_split(dataset_dir, "test", lexicon)[0]
    inst = make_instance(dataset_config, lexicon, "test", 0)
    for a, b in zip(rec.sources, inst.mixture.sources):
        assert si_sdr(b.samples, a.samples) > 40


def test_config_validation():
    with pytest.raises(CorpusError):
        small_dataset(n_sources=4)
    with pytest.raises(CorpusError):
        DatasetConfig.from_dict({"seed": 0})
