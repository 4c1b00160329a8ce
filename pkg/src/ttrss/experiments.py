"""Evaluation protocols: summarizer discrimination (clean source vs. mixture)
and the separation scoreboard (SDRi / SI-SDRi under PIT assignment)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .corpus import Record
from .encoders import Encoders
from .separator import Separator
from .signal import pit_loss, sdr_improvement, si_sdr_improvement
from .summarizer import Summarizer, make_item, ttr_loss

SDR_NOTE = "SDRi is plain scale-dependent SDR improvement, 10*log10(|s|^2/|s-s_hat|^2); no BSS_Eval projection filter"


class ExperimentError(ValueError):
    pass


@dataclass
class DiscriminationReport:
    ids: list[str]
    d_clean: np.ndarray
    d_mix: np.ndarray

    def __post_init__(self):
        self.d_clean = np.asarray(self.d_clean, dtype=float)
        self.d_mix = np.asarray(self.d_mix, dtype=float)

    @property
    def order(self) -> np.ndarray:
        """Indices sorting the clean distances ascendingly; the mixture curve reuses them."""
        return np.argsort(self.d_clean, kind="stable")

    @property
    def fraction_ge(self) -> float:
        return float(np.mean(self.d_mix >= self.d_clean))

    @property
    def mean_diff(self) -> float:
        return float(np.mean(self.d_mix - self.d_clean))

    def curve(self) -> list[dict]:
        return [{"rank": r, "d_clean": float(self.d_clean[i]), "d_mix": float(self.d_mix[i])}
                for r, i in enumerate(self.order)]


def discrimination_eval(summarizer, encoders: Encoders, records: Sequence[Record]) -> DiscriminationReport:
    """TTR distance of source 1 vs. of the mixture, both aligned with source 1's timed text.

    ``summarizer`` maps (S, alignment) to an embedding matrix. A pair
    ``(clean_fn, mix_fn)`` of callables taking the prepared ``TTRItem``
    replaces it for constructed oracles.
    """
    if not records:
        raise ExperimentError("empty evaluation set")
    if isinstance(summarizer, tuple):
        clean_fn, mix_fn = summarizer
    else:
        clean_fn = mix_fn = lambda item: summarizer(item.S, item.alignment)
    ids, d_clean, d_mix = [], [], []
    with torch.no_grad():
        for rec in records:
            clean = make_item(rec.sources[0].samples, rec.transcripts[0], rec.subwords[0], encoders)
            mixed = make_item(rec.mixture.samples, rec.transcripts[0], rec.subwords[0], encoders)
            ids.append(rec.id)
            d_clean.append(float(ttr_loss(clean_fn(clean), clean.W)))
            d_mix.append(float(ttr_loss(mix_fn(mixed), mixed.W)))
    return DiscriminationReport(ids, d_clean, d_mix)


def write_discrimination(report: DiscriminationReport, out_dir, config_hash: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "discrimination_pairs.jsonl", "w") as f:
        for i, uid in enumerate(report.ids):
            f.write(json.dumps({"id": uid, "d_clean": float(report.d_clean[i]), "d_mix": float(report.d_mix[i])}) + "\n")
    with open(out / "discrimination_curve.jsonl", "w") as f:
        for rec in report.curve():
            f.write(json.dumps(rec) + "\n")
    summary = {
        "config_hash": config_hash,
        "count": len(report.ids),
        "fraction_ge": report.fraction_ge,
        "mean_diff": report.mean_diff,
        "mean_d_clean": float(report.d_clean.mean()),
        "mean_d_mix": float(report.d_mix.mean()),
    }
    (out / "discrimination_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


def read_discrimination(out_dir) -> DiscriminationReport:
    ids, dc, dm = [], [], []
    for line in (Path(out_dir) / "discrimination_pairs.jsonl").read_text().splitlines():
        rec = json.loads(line)
        ids.append(rec["id"])
        dc.append(rec["d_clean"])
        dm.append(rec["d_mix"])
    return DiscriminationReport(ids, dc, dm)


@dataclass
class ScoreboardRow:
    label: str
    lam: Optional[float]
    ids: list[str] = field(default_factory=list)
    sdri: list[float] = field(default_factory=list)
    si_sdri: list[float] = field(default_factory=list)

    @property
    def mean_sdri(self) -> float:
        return float(np.mean(self.sdri))

    @property
    def mean_si_sdri(self) -> float:
        return float(np.mean(self.si_sdri))


def score_instance(record: Record, estimates: Sequence[np.ndarray]) -> tuple[float, float]:
    """Mean SDRi and SI-SDRi over sources under the PIT-optimal assignment."""
    refs = [s.samples for s in record.sources]
    perm = pit_loss(refs, list(estimates)).permutation
    mix = record.mixture.samples
    sdri = [sdr_improvement(mix, refs[k], estimates[perm[k]]) for k in range(len(refs))]
    si = [si_sdr_improvement(mix, refs[k], estimates[perm[k]]) for k in range(len(refs))]
    return float(np.mean(sdri)), float(np.mean(si))


def evaluate_row(label: str, lam: Optional[float], estimator: Callable[[Record], Sequence[np.ndarray]],
                 records: Sequence[Record]) -> ScoreboardRow:
    if not records:
        raise ExperimentError("empty test set")
    row = ScoreboardRow(label, lam)
    for rec in records:
        sdri, si = score_instance(rec, estimator(rec))
        row.ids.append(rec.id)
        row.sdri.append(sdri)
        row.si_sdri.append(si)
    return row


def separator_estimator(model: Separator) -> Callable[[Record], list[np.ndarray]]:
    def run(rec: Record) -> list[np.ndarray]:
        with torch.no_grad():
            return list(model(rec.mixture).numpy())
    return run


def evaluate_separation(models: Sequence[tuple[str, Optional[float], Separator]],
                        records: Sequence[Record]) -> list[ScoreboardRow]:
    if not models:
        raise ExperimentError("no checkpoints to evaluate")
    return [evaluate_row(label, lam, separator_estimator(m), records) for label, lam, m in models]


def write_scoreboard(rows: Sequence[ScoreboardRow], out_dir, config_hash: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "per_instance.jsonl", "w") as f:
        for row in rows:
            for uid, a, b in zip(row.ids, row.sdri, row.si_sdri):
                f.write(json.dumps({"id": uid, "model": row.label, "metric": "sdri", "value": a}) + "\n")
                f.write(json.dumps({"id": uid, "model": row.label, "metric": "si_sdri", "value": b}) + "\n")
    summary = {
        "config_hash": config_hash,
        "note": SDR_NOTE,
        "rows": [{"label": r.label, "lambda": r.lam, "count": len(r.ids),
                  "mean_sdri": r.mean_sdri, "mean_si_sdri": r.mean_si_sdri} for r in rows],
    }
    (out / "scoreboard.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


def recompute_means(out_dir) -> dict[tuple[str, str], float]:
    """Means per (model, metric) recomputed from the per-instance file."""
    acc: dict[tuple[str, str], list[float]] = {}
    for line in (Path(out_dir) / "per_instance.jsonl").read_text().splitlines():
        rec = json.loads(line)
        acc.setdefault((rec["model"], rec["metric"]), []).append(rec["value"])
    return {k: float(np.mean(v)) for k, v in acc.items()}
