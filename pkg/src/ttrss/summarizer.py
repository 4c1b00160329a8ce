"""Summarizer Transformer: a per-subword summarizer followed by a sentence-level
aggregator, and the timed-text regularization (TTR) loss.

Both stages are pre-norm Transformer encoders without positional encodings,
so they are equivariant to column permutations. The summarizer processes the
frames of each subword segment in isolation (block-diagonal attention) and
mean-pools them to one vector per subword.
"""

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
from .encoders import EmbeddingMatrix, Encoders
from .params import DTYPE, EarlyStopping, ParamStore, PlateauHalver, read_checkpoint, save_checkpoint, uniform_init

log = logging.getLogger(__name__)

LN_EPS = 1e-5
COS_EPS = 1e-12


class SummarizerError(ValueError):
    pass


@dataclass(frozen=True)
class TransformerSpec:
    prefix: str
    in_dim: int
    d_model: int
    n_heads: int
    d_ff: int
    n_layers: int
    out_dim: int

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise SummarizerError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def has_input_projection(self) -> bool:
        return self.in_dim != self.d_model


def init_transformer(store: ParamStore, spec: TransformerSpec, rng: np.random.Generator) -> None:
    p, d, f = spec.prefix, spec.d_model, spec.d_ff

    def linear(name, n_out, n_in):
        store.add(f"{p}.{name}.w", uniform_init(rng, (n_out, n_in), n_in))
        store.add(f"{p}.{name}.b", uniform_init(rng, (n_out,), n_in))

    def norm(name):
        store.add(f"{p}.{name}.g", np.ones(d))
        store.add(f"{p}.{name}.b", np.zeros(d))

    if spec.has_input_projection:
        linear("in", d, spec.in_dim)
    for i in range(spec.n_layers):
        norm(f"l{i}.ln1")
        for proj in "qkvo":
            linear(f"l{i}.{proj}", d, d)
        norm(f"l{i}.ln2")
        linear(f"l{i}.ff1", f, d)
        linear(f"l{i}.ff2", d, f)
    norm("lnf")
    linear("out", spec.out_dim, d)


def _linear(store, name, x):
    return F.linear(x, store[name + ".w"], store[name + ".b"])


def _norm(store, name, x):
    return F.layer_norm(x, x.shape[-1:], store[name + ".g"], store[name + ".b"], LN_EPS)


def transformer_forward(store: ParamStore, spec: TransformerSpec, x: torch.Tensor,
                        groups: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Rows of ``x`` (N, in_dim) are tokens. With ``groups``, attention is
    restricted to tokens of the same group, which equals running each group
    through the encoder on its own."""
    if x.dim() != 2 or x.shape[1] != spec.in_dim:
        raise SummarizerError(f"{spec.prefix}: expected (N, {spec.in_dim}) input, got {tuple(x.shape)}")
    p, h = spec.prefix, spec.n_heads
    n = x.shape[0]
    dh = spec.d_model // h
    if spec.has_input_projection:
        x = _linear(store, f"{p}.in", x)
    mask = None
    if groups is not None:
        mask = groups[:, None] != groups[None, :]
    for i in range(spec.n_layers):
        y = _norm(store, f"{p}.l{i}.ln1", x)
        q = _linear(store, f"{p}.l{i}.q", y).view(n, h, dh).transpose(0, 1)
        k = _linear(store, f"{p}.l{i}.k", y).view(n, h, dh).transpose(0, 1)
        v = _linear(store, f"{p}.l{i}.v", y).view(n, h, dh).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(dh)
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        att = torch.softmax(scores, dim=-1) @ v
        x = x + _linear(store, f"{p}.l{i}.o", att.transpose(0, 1).reshape(n, spec.d_model))
        y = _norm(store, f"{p}.l{i}.ln2", x)
        x = x + _linear(store, f"{p}.l{i}.ff2", F.gelu(_linear(store, f"{p}.l{i}.ff1", y)))
    return _linear(store, f"{p}.out", _norm(store, f"{p}.lnf", x))


def segment_mean(x: torch.Tensor, groups: torch.Tensor, n_groups: int) -> torch.Tensor:
    counts = torch.bincount(groups, minlength=n_groups).to(x.dtype)
    if bool((counts == 0).any()):
        raise SummarizerError("empty segment")
    sums = torch.zeros(n_groups, x.shape[1], dtype=x.dtype).index_add(0, groups, x)
    return sums / counts[:, None]


def summarize(store: ParamStore, spec: TransformerSpec, S: EmbeddingMatrix, alignment: AlignmentMap) -> EmbeddingMatrix:
    """One column per subword: the mean of the summarizer's outputs over the segment's frames."""
    if alignment.total_frames != S.count:
        raise SummarizerError(f"alignment covers {alignment.total_frames} frames but S has {S.count}")
    frames, groups = alignment.frame_groups()
    g = torch.from_numpy(groups)
    out = transformer_forward(store, spec, S.columns[torch.from_numpy(frames)], g)
    return EmbeddingMatrix(segment_mean(out, g, len(alignment)).T, None)


def aggregate(store: ParamStore, spec: TransformerSpec, S_prime: EmbeddingMatrix) -> EmbeddingMatrix:
    return EmbeddingMatrix(transformer_forward(store, spec, S_prime.columns).T, None)


def cosine_distances(S_bar: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """Per-column 1 - cos for (D, M) matrices."""
    dots = (S_bar * W).sum(0)
    return 1.0 - dots / (S_bar.norm(dim=0) * W.norm(dim=0) + COS_EPS)


def ttr_loss(S_bar, W) -> torch.Tensor:
    a = S_bar.values if isinstance(S_bar, EmbeddingMatrix) else S_bar
    b = W.values if isinstance(W, EmbeddingMatrix) else W
    if a.shape != b.shape:
        raise SummarizerError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return cosine_distances(a, b.to(a.dtype)).mean()


@dataclass(frozen=True)
class SummarizerConfig:
    d_model: int
    n_heads: int
    d_ff: int
    n_layers_sum: int
    n_layers_agg: int
    seed: int

    @classmethod
    def from_dict(cls, d: dict) -> "SummarizerConfig":
        names = {f.name for f in fields(cls)}
        if set(d) != names:
            raise SummarizerError(f"summarizer config: unknown keys {sorted(set(d) - names)}, missing {sorted(names - set(d))}")
        return cls(**d)


class Summarizer:
    """P = aggregator o summarizer, parameters in one store under ``sum.`` / ``agg.``."""

    MODULE = "summarizer"

    def __init__(self, config: SummarizerConfig, d_audio: int, d_text: int):
        self.config = config
        self.sum_spec = TransformerSpec("sum", d_audio, config.d_model, config.n_heads, config.d_ff,
                                        config.n_layers_sum, d_text)
        self.agg_spec = TransformerSpec("agg", d_text, config.d_model, config.n_heads, config.d_ff,
                                        config.n_layers_agg, d_text)
        self.store = ParamStore()
        rng = np.random.default_rng([config.seed, 0x5C])
        init_transformer(self.store, self.sum_spec, rng)
        init_transformer(self.store, self.agg_spec, rng)

    def __call__(self, S: EmbeddingMatrix, alignment: AlignmentMap) -> EmbeddingMatrix:
        return aggregate(self.store, self.agg_spec, summarize(self.store, self.sum_spec, S, alignment))

    def embed_batch(self, items: Sequence["TTRItem"]) -> list[torch.Tensor]:
        """Same result as calling the model per item, in one block-diagonal pass."""
        cols, seg_groups, utt_groups = [], [], []
        offset = 0
        for u, item in enumerate(items):
            frames, groups = item.alignment.frame_groups()
            cols.append(item.S.columns[torch.from_numpy(frames)])
            seg_groups.append(torch.from_numpy(groups + offset))
            utt_groups.append(torch.full((len(item.alignment),), u))
            offset += len(item.alignment)
        g = torch.cat(seg_groups)
        pooled = segment_mean(transformer_forward(self.store, self.sum_spec, torch.cat(cols), g), g, offset)
        out = transformer_forward(self.store, self.agg_spec, pooled, torch.cat(utt_groups))
        sizes = [len(item.alignment) for item in items]
        return [chunk.T for chunk in torch.split(out, sizes)]

    def freeze(self) -> None:
        self.store.freeze()

    def save(self, path, extra: Optional[dict] = None) -> None:
        save_checkpoint(path, self.store, self.MODULE, extra)

    @classmethod
    def load(cls, path, config: SummarizerConfig, d_audio: int, d_text: int) -> "Summarizer":
        header, state = read_checkpoint(path)
        if header["module"] != cls.MODULE:
            raise SummarizerError(f"{path}: checkpoint holds module {header['module']!r}, not {cls.MODULE!r}")
        model = cls(config, d_audio, d_text)
        model.store.load_state(state)
        return model


@dataclass
class TTRItem:
    """Precomputed inputs of one utterance: audio embeddings, SLA map, text embeddings."""

    S: EmbeddingMatrix
    alignment: AlignmentMap
    W: EmbeddingMatrix


def make_item(samples, transcript, subwords, encoders: Encoders) -> TTRItem:
    S = encoders.audio(samples)
    return TTRItem(S, align(transcript, subwords, S.count, S.frame_rate), encoders.text(subwords))


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float
    beta1: float
    beta2: float
    batch_size: int
    max_epochs: int
    early_stop_patience: int
    scheduler_patience: int  # 0 disables the plateau scheduler

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        names = {f.name for f in fields(cls)}
        if set(d) != names:
            raise SummarizerError(f"optimizer config: unknown keys {sorted(set(d) - names)}, missing {sorted(names - set(d))}")
        return cls(**d)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def mean_ttr(model: Summarizer, items: Sequence[TTRItem], batch_size: int = 16) -> float:
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(items), batch_size):
            chunk = items[i:i + batch_size]
            for s_bar, item in zip(model.embed_batch(chunk), chunk):
                total += float(ttr_loss(s_bar, item.W))
    return total / len(items)


def pretrain_summarizer(model: Summarizer, train: Sequence[TTRItem], val: Sequence[TTRItem], opt: OptimizerConfig,
                        seed: int, on_epoch: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Adam on the mean TTR loss over clean utterances; the model ends at its
    best-validation parameters. Returns the per-epoch log records."""
    if not train or not val:
        raise SummarizerError("empty training or validation set")
    optimizer = torch.optim.Adam(model.store.trainable(), lr=opt.lr, betas=(opt.beta1, opt.beta2))
    scheduler = PlateauHalver(optimizer, opt.scheduler_patience) if opt.scheduler_patience > 0 else None
    stopper = EarlyStopping(opt.early_stop_patience)
    best = model.store.state()
    records = []
    for epoch in range(opt.max_epochs):
        tic = time.perf_counter()
        rng = np.random.default_rng([seed, epoch])
        running = 0.0
        for idx in batches(len(train), opt.batch_size, rng):
            chunk = [train[i] for i in idx]
            optimizer.zero_grad()
            losses = [ttr_loss(s, item.W) for s, item in zip(model.embed_batch(chunk), chunk)]
            loss = torch.stack(losses).sum() / len(chunk)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite TTR loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            running += float(loss.detach()) * len(chunk)
        val_loss = mean_ttr(model, val)
        lr = optimizer.param_groups[0]["lr"]
        if stopper.step(epoch, val_loss):
            best = model.store.state()
        if scheduler is not None:
            scheduler.step(val_loss)
        wall = time.perf_counter() - tic
        for rec in ({"epoch": epoch, "split": "train", "loss": running / len(train), "lr": lr},
                    {"epoch": epoch, "split": "val", "loss": val_loss, "lr": lr}):
            records.append(rec)
            if on_epoch:
                on_epoch(dict(rec, wall_seconds=wall))
        log.info("summarizer epoch %d train %.5f val %.5f", epoch, running / len(train), val_loss)
        if stopper.should_stop:
            break
    model.store.load_state(best)
    return records
