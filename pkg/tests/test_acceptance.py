"""Acceptance criteria, each checked at its stated tolerance.

Criteria 7 and 8 run the default configuration end to end through the CLI
(about 15 minutes on one CPU thread). Set TTRSS_ACCEPT_DIR to keep the run
directory; an existing complete run there is reused.
"""

import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from ttrss.cli import main
from ttrss.config import load_config
from ttrss.corpus import Record, make_instance
from ttrss.encoders import EmbeddingMatrix, Encoders
from ttrss.gradcheck import TOLERANCE, Models, run_stages
from ttrss.separator import Separator, make_sep_items, total_loss
from ttrss.signal import SI_SDR_CAP, pit_loss, si_sdr
from ttrss.summarizer import Summarizer, make_item, summarize, transformer_forward

from conftest import CONFIGS, run_smoke
from test_alignment import check_invariants, transcript

DEFAULT = os.path.join(CONFIGS, "default.yaml")


def oracle_si_sdr(ref, est):
    rho2 = np.dot(ref, est) ** 2 / (np.dot(ref, ref) * np.dot(est, est))
    return 10 * np.log10(rho2 / (1 - rho2))


def test_c1_pit_oracle(criterion):
    rng = np.random.default_rng(101)
    tic = time.perf_counter()
    worst, mismatches, count = 0.0, 0, 0
    for k in (2, 3):
        for _ in range(150):
            refs = list(rng.standard_normal((k, 200)))
            ests = [refs[j] * rng.uniform(0.5, 2) + rng.standard_normal(200) * rng.uniform(0.1, 2)
                    for j in rng.permutation(k)]
            res = pit_loss(refs, ests)
            scored = [(-sum(oracle_si_sdr(refs[i], ests[p[i]]) for i in range(k)), p)
                      for p in itertools.permutations(range(k))]
            best = min(scored)
            mismatches += res.permutation != best[1]
            worst = max(worst, abs(res.loss - best[0]))
            count += 1
    elapsed = time.perf_counter() - tic
    ok = mismatches == 0 and worst <= 1e-9 and elapsed < 10
    assert criterion("C1 PIT oracle equivalence", ok,
                     f"{count} instances, {mismatches} permutation mismatches, max |dloss|={worst:.1e}, {elapsed:.2f}s")


def test_c2_si_sdr_properties(criterion):
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        r, e = rng.standard_normal((2, 256))
        c = rng.uniform(0.01, 100) * rng.choice([-1, 1])
        worst = max(worst, abs(si_sdr(r, c * e) - si_sdr(r, e)))
    hand = abs(si_sdr([1.0, 0.0], [1.0, 1.0]))
    x = rng.standard_normal(256)
    caps = [si_sdr(x, x), si_sdr(x, 2.5 * x)]
    ok = worst <= 1e-9 and hand <= 1e-12 and caps == [SI_SDR_CAP, SI_SDR_CAP]
    assert criterion("C2 SI-SDR properties", ok,
                     f"scale max dev {worst:.1e}, hand case {hand:.1e} dB, exact copy -> {caps[0]} dB")


def test_c3_sla_fuzz(criterion):
    rng = np.random.default_rng(303)
    tic = time.perf_counter()
    for _ in range(1000):
        rate = float(rng.choice([20.0, 25.0, 40.0, 50.0, 100.0]))
        t, spans, counts = rng.uniform(0, 0.1), [], []
        for _ in range(rng.integers(1, 10)):
            gap = rng.uniform(0, 0.15)
            counts.append(int(rng.integers(1, 4)))
            dur = rng.uniform(0.3 * counts[-1] / rate, 0.7)
            spans.append((t + gap, t + gap + dur))
            t += gap + dur
        total = max(int(np.floor(t * rate + 1e-9)) + int(rng.integers(0, 4)), sum(counts))
        check_invariants(transcript(*spans), counts, total, rate)
    elapsed = time.perf_counter() - tic
    assert criterion("C3 SLA fuzz", elapsed < 10, f"1000 transcripts, all invariants hold, {elapsed:.2f}s")


def test_c4_gradient_suite(criterion):
    cfg = load_config(DEFAULT)
    tic = time.perf_counter()
    results = run_stages(["transformer", "ttr", "separator"], 50, 0, Models(cfg.encoder, cfg.summarizer, cfg.separator))
    elapsed = time.perf_counter() - tic
    ok = all(r.passed for r in results.values()) and elapsed < 120
    detail = ", ".join(f"{k} {r.max_rel_error:.1e}" for k, r in results.items())
    assert criterion("C4 gradient suite", ok, f"max rel. error {detail} (tol {TOLERANCE:g}, 50 coords), {elapsed:.1f}s")


@pytest.fixture(scope="module")
def default_setup():
    cfg = load_config(DEFAULT)
    lex = cfg.dataset.lexicon()
    enc = Encoders(cfg.encoder, lex, cfg.dataset.sample_rate)
    recs = []
    for i in range(20):
        inst = make_instance(cfg.dataset, lex, "val", i)
        mx = inst.mixture
        recs.append(Record(inst.id, mx.mixture, mx.sources, mx.transcripts, inst.subwords, None, None))
    return cfg, enc, recs


def test_c5_structural_invariances(criterion, default_setup):
    cfg, enc, recs = default_setup
    model = Summarizer(cfg.summarizer, cfg.encoder.d_audio, cfg.encoder.d_text)
    rng = np.random.default_rng(505)
    worst_inv, worst_eq = 0.0, 0.0
    with torch.no_grad():
        for rec in recs:
            item = make_item(rec.sources[0].samples, rec.transcripts[0], rec.subwords[0], enc)
            cols = item.S.values.clone()
            for seg in item.alignment.segments:
                idx = np.arange(seg.frame_start, seg.frame_end)
                cols[:, idx] = item.S.values[:, rng.permutation(idx)]
            a = model(item.S, item.alignment).values
            b = model(EmbeddingMatrix(cols, item.S.frame_rate), item.alignment).values
            worst_inv = max(worst_inv, float((a - b).abs().max()))
            pooled = summarize(model.store, model.sum_spec, item.S, item.alignment).columns
            perm = torch.from_numpy(rng.permutation(pooled.shape[0]))
            out = transformer_forward(model.store, model.agg_spec, pooled)
            permuted = transformer_forward(model.store, model.agg_spec, pooled[perm])
            worst_eq = max(worst_eq, float((permuted - out[perm]).abs().max()))
    ok = worst_inv <= 1e-9 and worst_eq <= 1e-9
    assert criterion("C5 structural invariances", ok,
                     f"within-segment shuffle max dev {worst_inv:.1e}, aggregator equivariance max dev {worst_eq:.1e}")


def test_c6_loss_decomposition(criterion, default_setup):
    cfg, enc, recs = default_setup
    summ = Summarizer(cfg.summarizer, cfg.encoder.d_audio, cfg.encoder.d_text)
    summ.freeze()
    sep = Separator(cfg.separator)
    rng = np.random.default_rng(606)
    worst = 0.0
    with torch.no_grad():
        for item in make_sep_items(recs, enc):
            lam = float(rng.uniform(0.05, 2.0))
            est = sep(item.mixture)
            full = total_loss(est, item.references, item.alignments, item.texts, summ, enc, lam)
            zero = total_loss(est, item.references, item.alignments, item.texts, summ, enc, 0.0)
            gap = float(full.total - zero.total) - lam * float(sum(full.ttr))
            worst = max(worst, abs(gap))
    assert criterion("C6 loss decomposition", worst <= 1e-9, f"20 instances, max deviation {worst:.1e}")


def _default_run_dir(tmp_path_factory) -> Path:
    env = os.environ.get("TTRSS_ACCEPT_DIR")
    return Path(env) if env else tmp_path_factory.mktemp("default_run")


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Full default pipeline through the CLI: data, summarizer, discrimination, separator, finetuning at 0.5."""
    out = _default_run_dir(tmp_path_factory)
    data = str(out / "data")
    summ = str(out / "summarizer" / "summarizer.ckpt")
    sep = str(out / "separator" / "separator.ckpt")
    timing_path = out / "stage_seconds.json"
    if (out / "finetune_0.5" / "finetune_summary.json").exists() and timing_path.exists():
        return out, json.loads(timing_path.read_text())
    stages = {
        "discrimination": [
            ["gen-data", "--config", DEFAULT, "--out", data],
            ["pretrain-summarizer", "--config", DEFAULT, "--data", data, "--out", str(out / "summarizer")],
            ["discriminate", "--config", DEFAULT, "--data", data, "--summarizer", summ,
             "--out", str(out / "discrimination")],
        ],
        "separation": [
            ["pretrain-separator", "--config", DEFAULT, "--data", data, "--out", str(out / "separator")],
            ["finetune", "--config", DEFAULT, "--data", data, "--summarizer", summ, "--separator", sep,
             "--lambda", "0.5", "--out", str(out / "finetune_0.5")],
        ],
    }
    seconds = {}
    for name, steps in stages.items():
        tic = time.perf_counter()
        for step in steps:
            assert main(step) == 0, step
        seconds[name] = time.perf_counter() - tic
    timing_path.write_text(json.dumps(seconds))
    return out, seconds


@pytest.mark.slow
def test_c7_discrimination(criterion, default_run):
    out, seconds = default_run
    cfg = load_config(DEFAULT)
    s = json.loads((out / "discrimination" / "discrimination_summary.json").read_text())
    n_train = 2 * cfg.dataset.n_train
    ok = (s["count"] == 200 and n_train >= 500 and s["fraction_ge"] >= 0.70 and s["mean_diff"] > 0
          and seconds["discrimination"] < 15 * 60)
    assert criterion("C7 discrimination analogue", ok,
                     f"{n_train} train utterances, {s['count']} held-out mixtures: fraction_ge={s['fraction_ge']:.3f}"
                     f" (>= 0.70), mean_diff={s['mean_diff']:.4f} (> 0), {seconds['discrimination'] / 60:.1f} min")


@pytest.mark.slow
def test_c8_training_effect(criterion, default_run):
    out, seconds = default_run
    s = json.loads((out / "finetune_0.5" / "finetune_summary.json").read_text())
    a = s["val_si_sdri_before"] > 0
    b_ttr = s["val_ttr_after"] < s["val_ttr_before"]
    b_sdr = s["val_si_sdri_after"] >= s["val_si_sdri_before"] - 0.1
    ok = a and b_ttr and b_sdr and seconds["separation"] < 30 * 60
    assert criterion("C8 training effect analogue", ok,
                     f"(a) pretrained val SI-SDRi {s['val_si_sdri_before']:.3f} dB; "
                     f"(b) val TTR {s['val_ttr_before']:.5f} -> {s['val_ttr_after']:.5f}, "
                     f"val SI-SDRi {s['val_si_sdri_before']:.3f} -> {s['val_si_sdri_after']:.3f} dB; "
                     f"{seconds['separation'] / 60:.1f} min")


COMPARED = ["data/train.jsonl", "data/val.jsonl", "data/test.jsonl",
            "summarizer/summarizer_loss_log.jsonl", "separator/separator_loss_log.jsonl",
            "finetune_0.1/finetune_loss_log.jsonl", "finetune_0.5/finetune_loss_log.jsonl",
            "finetune_1.0/finetune_loss_log.jsonl", "finetune_0.5/finetune_summary.json",
            "discrimination/discrimination_pairs.jsonl", "discrimination/discrimination_curve.jsonl",
            "discrimination/discrimination_summary.json", "scoreboard/scoreboard.json",
            "scoreboard/per_instance.jsonl", "summarizer/summarizer.ckpt", "finetune_0.5/separator.ckpt"]


def test_c9_determinism(criterion, tmp_path):
    runs = [tmp_path / "a", tmp_path / "b"]
    for r in runs:
        assert run_smoke(r) == 0
    differing = [rel for rel in COMPARED if (runs[0] / rel).read_bytes() != (runs[1] / rel).read_bytes()]
    assert criterion("C9 determinism", not differing,
                     f"{len(COMPARED) - len(differing)}/{len(COMPARED)} artifacts bit-identical across two smoke runs"
                     + (f"; differing: {differing}" if differing else ""))


def test_c10_freeze_contract(criterion, smoke_run):
    before = (smoke_run / "summarizer" / "summarizer.ckpt").read_bytes()
    labels = ["0.1", "0.5", "1.0"]
    same = [(smoke_run / f"finetune_{lam}" / "summarizer_after.ckpt").read_bytes() == before for lam in labels]
    frozen = all(json.loads((smoke_run / f"finetune_{lam}" / "finetune_summary.json").read_text())["freeze_summarizer"]
                 for lam in labels)
    assert criterion("C10 freeze contract", frozen and all(same),
                     f"summarizer checkpoint bytes unchanged after finetuning at lambda {', '.join(labels)}")
