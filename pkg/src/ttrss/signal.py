"""Waveforms, mixing, SI-SDR / SDR metrics and permutation invariant loss.

Two evaluation modes exist for SI-SDR. Metric mode (numpy, float64) returns
the +60 dB cap when the residual vanishes. Training mode (torch) adds a small
stabilizer to the residual energy so gradients stay finite, and applies the
same cap rule.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

SI_SDR_CAP = 60.0
RESIDUAL_FLOOR = 1e-12
TRAIN_EPS = 1e-8
MAX_PIT_SOURCES = 4


class SignalError(ValueError):
    """Invalid signal arguments (length/rate mismatch, zero reference, ...)."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise SignalError(f"waveform must be mono, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise SignalError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise SignalError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))


@dataclass
class MixtureInstance:
    mixture: Waveform
    sources: list[Waveform]
    noise: Optional[Waveform] = None
    transcripts: list = field(default_factory=list)


@dataclass
class PitResult:
    loss: float
    permutation: tuple[int, ...]
    per_pair_si_sdr: list[float]


def _as_array(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB (metric mode, capped at +60 dB).

    No mean removal is applied; the reference is rescaled by the least
    squares gain ``<estimate, reference> / ||reference||^2``.
    """
    ref = _as_array(reference)
    est = _as_array(estimate)
    if ref.shape != est.shape:
        raise SignalError(f"length mismatch: {ref.shape} vs {est.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise SignalError("reference is identically zero")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    residual = target - est
    num = float(np.dot(target, target))
    den = float(np.dot(residual, residual))
    if den <= RESIDUAL_FLOOR * num:
        return SI_SDR_CAP
    return 10.0 * np.log10(num / den)


def sdr(reference, estimate) -> float:
    """Plain (scale-dependent) SDR in dB, no projection filter; same cap rule."""
    ref = _as_array(reference)
    est = _as_array(estimate)
    if ref.shape != est.shape:
        raise SignalError(f"length mismatch: {ref.shape} vs {est.shape}")
    num = float(np.dot(ref, ref))
    if num == 0.0:
        raise SignalError("reference is identically zero")
    residual = ref - est
    den = float(np.dot(residual, residual))
    if den <= RESIDUAL_FLOOR * num:
        return SI_SDR_CAP
    return 10.0 * np.log10(num / den)


def si_sdr_improvement(mixture, reference, estimate) -> float:
    return si_sdr(reference, estimate) - si_sdr(reference, mixture)


def sdr_improvement(mixture, reference, estimate) -> float:
    return sdr(reference, estimate) - sdr(reference, mixture)


def si_sdr_torch(reference: torch.Tensor, estimate: torch.Tensor, eps: float = TRAIN_EPS) -> torch.Tensor:
    """Training-mode SI-SDR over the last axis; differentiable in ``estimate``."""
    if reference.shape != estimate.shape:
        raise SignalError(f"length mismatch: {tuple(reference.shape)} vs {tuple(estimate.shape)}")
    ref_energy = (reference * reference).sum(-1, keepdim=True)
    if bool((ref_energy == 0).any()):
        raise SignalError("reference is identically zero")
    alpha = (estimate * reference).sum(-1, keepdim=True) / ref_energy
    target = alpha * reference
    residual = target - estimate
    num = (target * target).sum(-1)
    den = (residual * residual).sum(-1)
    value = 10.0 * torch.log10(num / (den + eps))
    capped = den <= RESIDUAL_FLOOR * num
    return torch.where(capped, torch.full_like(value, SI_SDR_CAP), value)


def best_permutation(pair_loss: np.ndarray) -> tuple[tuple[int, ...], float]:
    """Exhaustive minimum over permutations of ``sum_k pair_loss[k, perm[k]]``.

    ``itertools.permutations`` yields lexicographic order and only a strictly
    smaller total replaces the incumbent, so ties resolve to the
    lexicographically smallest permutation.
    """
    k = pair_loss.shape[0]
    best_perm, best_total = None, np.inf
    for perm in itertools.permutations(range(k)):
        total = 0.0
        for i, j in enumerate(perm):
            total += pair_loss[i, j]
        if total < best_total:
            best_perm, best_total = perm, total
    return best_perm, float(best_total)


def _check_pit_sizes(n_ref: int, n_est: int) -> None:
    if n_ref != n_est:
        raise SignalError(f"got {n_ref} references but {n_est} estimates")
    if n_ref < 1:
        raise SignalError("need at least one source")
    if n_ref > MAX_PIT_SOURCES:
        raise SignalError(f"permutation search supports at most {MAX_PIT_SOURCES} sources, got {n_ref}")


def pit_loss(references: Sequence, estimates: Sequence) -> PitResult:
    """Permutation invariant negative SI-SDR (metric mode).

    ``permutation[k]`` is the estimate index paired with reference ``k``.
    """
    _check_pit_sizes(len(references), len(estimates))
    k = len(references)
    sdrs = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            sdrs[i, j] = si_sdr(references[i], estimates[j])
    perm, total = best_permutation(-sdrs)
    return PitResult(loss=total, permutation=perm, per_pair_si_sdr=[float(sdrs[i, perm[i]]) for i in range(k)])


def pit_loss_torch(references: torch.Tensor, estimates: torch.Tensor) -> tuple[torch.Tensor, PitResult]:
    """Training-mode PIT over (K, N) tensors. Returns the differentiable loss."""
    _check_pit_sizes(references.shape[0], estimates.shape[0])
    k = references.shape[0]
    sdrs = si_sdr_torch(references[:, None, :].expand(k, k, -1), estimates[None, :, :].expand(k, k, -1))
    perm, _ = best_permutation(-sdrs.detach().cpu().numpy())
    chosen = torch.stack([sdrs[i, perm[i]] for i in range(k)])
    loss = -chosen.sum()
    result = PitResult(loss=float(loss.detach()), permutation=perm, per_pair_si_sdr=chosen.detach().tolist())
    return loss, result


def _check_compatible(waves: Sequence[Waveform]) -> None:
    if not waves:
        raise SignalError("no waveforms given")
    rate, length = waves[0].sample_rate, len(waves[0])
    for w in waves[1:]:
        if w.sample_rate != rate:
            raise SignalError(f"sample rate mismatch: {w.sample_rate} vs {rate}")
        if len(w) != length:
            raise SignalError(f"length mismatch: {len(w)} vs {length}")


def mix(sources: Sequence[Waveform], noise: Optional[Waveform] = None, snr_db: Optional[float] = None,
        transcripts: Optional[list] = None) -> MixtureInstance:
    """Additive mixture. With ``snr_db`` the noise is rescaled so that total
    source energy over noise energy equals ``snr_db``."""
    sources = list(sources)
    _check_compatible(sources + ([noise] if noise is not None else []))
    if snr_db is not None and noise is None:
        raise SignalError("snr_db given without noise")
    total = np.sum([s.samples for s in sources], axis=0)
    if noise is not None:
        if snr_db is not None:
            noise_energy = noise.energy()
            if noise_energy == 0.0:
                raise SignalError("cannot rescale an all-zero noise signal")
            source_energy = sum(s.energy() for s in sources)
            gain = np.sqrt(source_energy / (noise_energy * 10.0 ** (snr_db / 10.0)))
            noise = Waveform(noise.samples * gain, noise.sample_rate)
        total = total + noise.samples
    return MixtureInstance(
        mixture=Waveform(total, sources[0].sample_rate),
        sources=sources,
        noise=noise,
        transcripts=list(transcripts or []),
    )
