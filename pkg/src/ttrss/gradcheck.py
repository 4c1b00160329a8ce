"""Central finite-difference checks of reverse-mode gradients on sampled coordinates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import DatasetConfig, Record, make_instance
from .encoders import EncoderConfig, Encoders
from .separator import Separator, SeparatorConfig, make_sep_items, total_loss
from .summarizer import Summarizer, SummarizerConfig, make_item, transformer_forward, ttr_loss

TOLERANCE = 1e-4
STEP = 1e-6
ABS_FLOOR = 1e-9


@dataclass
class GradCheckResult:
    n_coords: int
    max_rel_error: float
    worst: tuple[str, int]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < ABS_FLOOR:
        return 0.0
    return abs(analytic - numeric) / scale


def check(loss_fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor], n_coords: int, seed: int,
          step: float = STEP) -> GradCheckResult:
    """Compare autograd against central differences at ``n_coords`` coordinates,
    each drawn by picking a tensor uniformly and then an entry uniformly."""
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    grads = {k: t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for k, t in tensors.items()}
    rng = np.random.default_rng(seed)
    names = list(tensors)
    worst, worst_err = ("", -1), 0.0
    with torch.no_grad():
        for _ in range(n_coords):
            name = names[rng.integers(len(names))]
            t = tensors[name]
            flat = t.view(-1)
            i = int(rng.integers(flat.numel()))
            orig = float(flat[i])
            flat[i] = orig + step
            up = float(loss_fn())
            flat[i] = orig - step
            down = float(loss_fn())
            flat[i] = orig
            err = relative_error(float(grads[name].view(-1)[i]), (up - down) / (2 * step))
            if err > worst_err or worst[1] < 0:
                worst, worst_err = (name, i), max(err, worst_err)
    return GradCheckResult(n_coords, worst_err, worst)


@dataclass(frozen=True)
class Models:
    """Model sizes for the checks; defaults are small enough for fast runs."""

    encoder: EncoderConfig = EncoderConfig(24, 32, 50.0, 0.04, 0)
    summarizer: SummarizerConfig = SummarizerConfig(32, 4, 64, 2, 2, 0)
    separator: SeparatorConfig = SeparatorConfig(2, 16, 16, 8, 2, 16, 0)


def _small_setup(seed: int, models: Models, n_sources: int = 2, seconds_min: float = 0.5):
    dc = DatasetConfig(seed=seed, sample_rate=8000, n_subwords=24, n_words=40, n_sources=n_sources, n_train=1,
                       n_val=0, n_test=0, min_words=3, max_words=4, noisy=False, snr_low_db=0.0, snr_high_db=0.0)
    lexicon = dc.lexicon()
    encoders = Encoders(models.encoder, lexicon, dc.sample_rate)
    index = 0
    while True:
        inst = make_instance(dc, lexicon, "train", index)
        if inst.mixture.mixture.duration >= seconds_min:
            break
        index += 1
    mx = inst.mixture
    return Record(inst.id, mx.mixture, mx.sources, mx.transcripts, inst.subwords, None, None), encoders


def transformer_check(n_coords: int = 50, seed: int = 0, models: Models = Models()) -> GradCheckResult:
    d_audio = models.encoder.d_audio
    model = Summarizer(models.summarizer, d_audio, models.encoder.d_text)
    x = torch.from_numpy(np.random.default_rng(seed).standard_normal((7, d_audio)))
    groups = torch.tensor([0, 0, 0, 1, 1, 2, 2])
    tensors = {k: v for k, v in model.store.items() if k.startswith("sum.")}
    return check(lambda: transformer_forward(model.store, model.sum_spec, x, groups).sum(), tensors, n_coords, seed)


def ttr_check(n_coords: int = 50, seed: int = 0, models: Models = Models()) -> GradCheckResult:
    """End-to-end TTR loss: summarizer parameters and waveform samples through the frozen audio encoder."""
    rec, encoders = _small_setup(seed, models)
    model = Summarizer(models.summarizer, models.encoder.d_audio, models.encoder.d_text)
    wave = torch.from_numpy(rec.sources[0].samples.copy()).requires_grad_(True)
    ref = make_item(rec.sources[0].samples, rec.transcripts[0], rec.subwords[0], encoders)

    def loss():
        return ttr_loss(model(encoders.audio(wave), ref.alignment), ref.W)

    tensors = dict(model.store.items())
    tensors["waveform"] = wave
    return check(loss, tensors, n_coords, seed)


def separator_check(n_coords: int = 50, seed: int = 0, models: Models = Models(), lam: float = 0.5) -> GradCheckResult:
    """Total loss (PIT + lam * TTR) w.r.t. separator parameters, summarizer frozen."""
    rec, encoders = _small_setup(seed, models, models.separator.n_sources)
    item = make_sep_items([rec], encoders)[0]
    summarizer = Summarizer(models.summarizer, models.encoder.d_audio, models.encoder.d_text)
    summarizer.freeze()
    sep = Separator(models.separator)

    def loss():
        return total_loss(sep(item.mixture), item.references, item.alignments, item.texts, summarizer, encoders,
                          lam).total

    return check(loss, dict(sep.store.items()), n_coords, seed)


STAGES: dict[str, Callable[..., GradCheckResult]] = {
    "transformer": transformer_check,
    "ttr": ttr_check,
    "separator": separator_check,
}


def run_stages(stages: Sequence[str], n_coords: int, seed: int, models: Models = Models()) -> dict[str, GradCheckResult]:
    return {s: STAGES[s](n_coords=n_coords, seed=seed, models=models) for s in stages}
