"""Mask-based separator (analysis conv -> dilated conv mask network -> synthesis
conv), PIT pretraining, and the TTR-regularized finetuning objective."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .alignment import AlignmentMap, align
from .corpus import Record
from .encoders import EmbeddingMatrix, Encoders
from .params import (DTYPE, EarlyStopping, ParamStore, PlateauHalver, read_checkpoint, save_checkpoint,
                     uniform_init)
from .signal import PitResult, pit_loss, pit_loss_torch, si_sdr_improvement
from .summarizer import OptimizerConfig, Summarizer, TTRItem, batches, ttr_loss

log = logging.getLogger(__name__)

GLN_EPS = 1e-8


class SeparatorError(ValueError):
    pass


@dataclass(frozen=True)
class SeparatorConfig:
    n_sources: int
    n_filters: int
    kernel_size: int
    stride: int
    n_blocks: int
    channels: int
    seed: int

    def __post_init__(self):
        if min(self.n_sources, self.n_filters, self.n_blocks, self.channels, self.kernel_size, self.stride) < 1:
            raise SeparatorError("separator sizes must all be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SeparatorConfig":
        names = {f.name for f in fields(cls)}
        if set(d) != names:
            raise SeparatorError(f"separator config: unknown keys {sorted(set(d) - names)}, missing {sorted(names - set(d))}")
        return cls(**d)


def _gln(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Global layer norm over (channels, time) of a (1, C, T) tensor."""
    mean = x.mean(dim=(1, 2), keepdim=True)
    var = ((x - mean) ** 2).mean(dim=(1, 2), keepdim=True)
    return (x - mean) / torch.sqrt(var + GLN_EPS) * g[None, :, None] + b[None, :, None]


class Separator:
    MODULE = "separator"

    def __init__(self, config: SeparatorConfig):
        self.config = config
        c = config
        rng = np.random.default_rng([c.seed, 0x5E9])
        s = self.store = ParamStore()
        # no biases in the analysis/synthesis banks: silence maps to silence
        s.add("enc.w", uniform_init(rng, (c.n_filters, 1, c.kernel_size), c.kernel_size))
        s.add("mask.norm.g", np.ones(c.n_filters))
        s.add("mask.norm.b", np.zeros(c.n_filters))
        s.add("mask.in.w", uniform_init(rng, (c.channels, c.n_filters, 1), c.n_filters))
        s.add("mask.in.b", uniform_init(rng, (c.channels,), c.n_filters))
        for i in range(c.n_blocks):
            s.add(f"mask.b{i}.conv.w", uniform_init(rng, (c.channels, c.channels, 3), 3 * c.channels))
            s.add(f"mask.b{i}.conv.b", uniform_init(rng, (c.channels,), 3 * c.channels))
            s.add(f"mask.b{i}.norm.g", np.ones(c.channels))
            s.add(f"mask.b{i}.norm.b", np.zeros(c.channels))
            s.add(f"mask.b{i}.pw.w", uniform_init(rng, (c.channels, c.channels, 1), c.channels))
            s.add(f"mask.b{i}.pw.b", uniform_init(rng, (c.channels,), c.channels))
        s.add("mask.head.w", uniform_init(rng, (c.n_sources * c.n_filters, c.channels, 1), c.channels))
        s.add("mask.head.b", uniform_init(rng, (c.n_sources * c.n_filters,), c.channels))
        s.add("dec.w", uniform_init(rng, (c.n_filters, 1, c.kernel_size), c.n_filters))

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return separate(self, x)

    def save(self, path, extra: Optional[dict] = None) -> None:
        save_checkpoint(path, self.store, self.MODULE, extra)

    @classmethod
    def load(cls, path, config: SeparatorConfig) -> "Separator":
        header, state = read_checkpoint(path)
        if header["module"] != cls.MODULE:
            raise SeparatorError(f"{path}: checkpoint holds module {header['module']!r}, not {cls.MODULE!r}")
        model = cls(config)
        model.store.load_state(state)
        return model


def separate(model: Separator, x) -> torch.Tensor:
    """(N,) mixture -> (K, N) source estimates."""
    c, s = model.config, model.store
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(getattr(x, "samples", x)), dtype=DTYPE)
    n = x.shape[-1]
    if n < c.kernel_size:
        raise SeparatorError(f"input of {n} samples is shorter than the kernel ({c.kernel_size})")
    n_frames = math.ceil((n - c.kernel_size) / c.stride) + 1
    padded = F.pad(x, (0, (n_frames - 1) * c.stride + c.kernel_size - n))
    feats = F.gelu(F.conv1d(padded[None, None], s["enc.w"], stride=c.stride))
    h = _gln(feats, s["mask.norm.g"], s["mask.norm.b"])
    h = F.conv1d(h, s["mask.in.w"], s["mask.in.b"])
    for i in range(c.n_blocks):
        d = 2 ** i
        y = F.conv1d(h, s[f"mask.b{i}.conv.w"], s[f"mask.b{i}.conv.b"], padding=d, dilation=d)
        y = F.gelu(_gln(y, s[f"mask.b{i}.norm.g"], s[f"mask.b{i}.norm.b"]))
        h = h + F.conv1d(y, s[f"mask.b{i}.pw.w"], s[f"mask.b{i}.pw.b"])
    masks = torch.sigmoid(F.conv1d(F.gelu(h), s["mask.head.w"], s["mask.head.b"]))
    masked = masks.view(c.n_sources, c.n_filters, -1) * feats
    out = F.conv_transpose1d(masked, s["dec.w"], stride=c.stride)
    return out[:, 0, :n]


@dataclass
class SepItem:
    id: str
    mixture: torch.Tensor
    references: torch.Tensor
    alignments: list[AlignmentMap]
    texts: list[EmbeddingMatrix]


def make_sep_items(records: Sequence[Record], encoders: Optional[Encoders] = None) -> list[SepItem]:
    """Tensors plus per-source SLA maps (from reference timings) and text embeddings."""
    items = []
    for rec in records:
        alignments, texts = [], []
        if encoders is not None:
            n_frames = encoders.audio.n_frames(len(rec.mixture))
            for tr, sub in zip(rec.transcripts, rec.subwords):
                alignments.append(align(tr, sub, n_frames, encoders.audio.frame_rate))
                texts.append(encoders.text(sub))
        items.append(SepItem(
            rec.id,
            torch.from_numpy(rec.mixture.samples.copy()),
            torch.from_numpy(np.stack([src.samples for src in rec.sources])),
            alignments,
            texts,
        ))
    return items


@dataclass
class TotalLoss:
    total: torch.Tensor
    pit: torch.Tensor
    ttr: list[torch.Tensor]
    pit_result: PitResult


def total_loss(estimates: torch.Tensor, references: torch.Tensor, alignments: Sequence[AlignmentMap],
               texts: Sequence[EmbeddingMatrix], summarizer: Summarizer, encoders: Encoders, lam: float) -> TotalLoss:
    """PIT loss plus ``lam`` times the sum of per-source TTR losses.

    Estimate ``perm[k]`` (the PIT-optimal pairing) is scored against the
    transcript of reference ``k``; SLA uses the reference word timings.
    """
    k = references.shape[0]
    if estimates.shape[0] != k or len(alignments) != k or len(texts) != k:
        raise SeparatorError(f"got {estimates.shape[0]} estimates, {len(alignments)} transcripts for {k} sources")
    pit, result = pit_loss_torch(references, estimates)
    items = [TTRItem(encoders.audio(estimates[result.permutation[i]]), alignments[i], texts[i]) for i in range(k)]
    ttr = [ttr_loss(s_bar, item.W) for s_bar, item in zip(summarizer.embed_batch(items), items)]
    return TotalLoss(pit + lam * torch.stack(ttr).sum(), pit, ttr, result)


def mean_si_sdri(item: SepItem, estimates: torch.Tensor) -> float:
    est = estimates.detach().numpy()
    refs = item.references.numpy()
    mixture = item.mixture.numpy()
    perm = pit_loss(list(refs), list(est)).permutation
    return float(np.mean([si_sdr_improvement(mixture, refs[i], est[perm[i]]) for i in range(len(refs))]))


@dataclass(frozen=True)
class FinetuneConfig:
    lam: float
    freeze_summarizer: bool
    optimizer: OptimizerConfig

    def __post_init__(self):
        if self.lam < 0:
            raise SeparatorError(f"lambda must be >= 0, got {self.lam}")


def _epoch_loop(params, train, val, opt: OptimizerConfig, seed: int, train_loss, val_metrics, snapshot, restore,
                on_epoch, name: str) -> list[dict]:
    optimizer = torch.optim.Adam(params, lr=opt.lr, betas=(opt.beta1, opt.beta2))
    scheduler = PlateauHalver(optimizer, opt.scheduler_patience) if opt.scheduler_patience > 0 else None
    stopper = EarlyStopping(opt.early_stop_patience)
    best = snapshot()
    records = []
    for epoch in range(opt.max_epochs):
        tic = time.perf_counter()
        rng = np.random.default_rng([seed, epoch])
        running = 0.0
        for idx in batches(len(train), opt.batch_size, rng):
            optimizer.zero_grad()
            batch_loss = 0.0
            # per-utterance backward in index order, gradients accumulate
            for i in idx:
                loss = train_loss(train[i]) / len(idx)
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"non-finite {name} loss at epoch {epoch}, item {train[i].id}")
                loss.backward()
                batch_loss += float(loss.detach())
            optimizer.step()
            running += batch_loss * len(idx)
        lr = optimizer.param_groups[0]["lr"]
        metrics = val_metrics(val)
        if stopper.step(epoch, metrics["loss"]):
            best = snapshot()
        if scheduler is not None:
            scheduler.step(metrics["loss"])
        wall = time.perf_counter() - tic
        for rec in ({"epoch": epoch, "split": "train", "loss": running / len(train), "lr": lr},
                    dict({"epoch": epoch, "split": "val", "lr": lr}, **metrics)):
            records.append(rec)
            if on_epoch:
                on_epoch(dict(rec, wall_seconds=wall))
        log.info("%s epoch %d train %.4f val %s", name, epoch, running / len(train), metrics)
        if stopper.should_stop:
            break
    restore(best)
    return records


def pretrain_separator(model: Separator, train: Sequence[SepItem], val: Sequence[SepItem], opt: OptimizerConfig,
                       seed: int, on_epoch: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Adam on the PIT loss with plateau halving and early stopping; the model
    ends at its best-validation parameters."""
    if not train or not val:
        raise SeparatorError("empty training or validation set")

    def train_loss(item):
        return pit_loss_torch(item.references, model(item.mixture))[0]

    def val_metrics(items):
        loss, sdri = 0.0, 0.0
        with torch.no_grad():
            for item in items:
                est = model(item.mixture)
                loss += float(pit_loss_torch(item.references, est)[0])
                sdri += mean_si_sdri(item, est)
        return {"loss": loss / len(items), "si_sdri": sdri / len(items)}

    return _epoch_loop(model.store.trainable(), train, val, opt, seed, train_loss, val_metrics,
                       model.store.state, model.store.load_state, on_epoch, "separator")


def finetune_ttr(model: Separator, summarizer: Summarizer, encoders: Encoders, train: Sequence[SepItem],
                 val: Sequence[SepItem], config: FinetuneConfig, seed: int,
                 on_epoch: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Minimize the joint PIT + lambda * TTR loss. With ``freeze_summarizer``
    only separator parameters are updated; gradients still flow through the
    frozen encoder and summarizer."""
    if not train or not val:
        raise SeparatorError("empty training or validation set")
    if any(not item.alignments for item in list(train) + list(val)):
        raise SeparatorError("finetuning items need transcripts (build them with encoders)")
    if config.freeze_summarizer:
        summarizer.freeze()
        params = model.store.trainable()
    else:
        summarizer.store.unfreeze()
        params = model.store.trainable() + summarizer.store.trainable()

    def compute(item, est):
        return total_loss(est, item.references, item.alignments, item.texts, summarizer, encoders, config.lam)

    def train_loss(item):
        return compute(item, model(item.mixture)).total

    def val_metrics(items):
        loss, ttr, sdri = 0.0, 0.0, 0.0
        with torch.no_grad():
            for item in items:
                est = model(item.mixture)
                out = compute(item, est)
                loss += float(out.total)
                ttr += float(torch.stack(out.ttr).mean())
                sdri += mean_si_sdri(item, est)
        n = len(items)
        return {"loss": loss / n, "ttr": ttr / n, "si_sdri": sdri / n}

    def snapshot():
        return model.store.state(), summarizer.store.state()

    def restore(state):
        model.store.load_state(state[0])
        summarizer.store.load_state(state[1])

    return _epoch_loop(params, train, val, config.optimizer, seed, train_loss, val_metrics, snapshot, restore,
                       on_epoch, "finetune")


def validation_ttr(model: Separator, summarizer: Summarizer, encoders: Encoders, items: Sequence[SepItem]) -> float:
    """Mean per-source TTR loss of the model's PIT-paired estimates."""
    total = 0.0
    with torch.no_grad():
        for item in items:
            out = total_loss(model(item.mixture), item.references, item.alignments, item.texts, summarizer, encoders, 0.0)
            total += float(torch.stack(out.ttr).mean())
    return total / len(items)


def validation_si_sdri(model: Separator, items: Sequence[SepItem]) -> float:
    """Mean SI-SDRi of the model's estimates under PIT pairing."""
    with torch.no_grad():
        return float(np.mean([mean_si_sdri(item, model(item.mixture)) for item in items]))
