"""Signal-level losses and evaluation metrics (all values in dB)."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import torch

from .core_signals import SourcesLike, _tensor, gather_sources, select_top_sources

DEFAULT_TAU = 1e-3
SISDR_SENTINEL_DB = 300.0


@dataclass
class LossConfig:
    tau: float = DEFAULT_TAU
    l_thres: Optional[float] = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def _energy(x: torch.Tensor) -> torch.Tensor:
    return x.pow(2).sum(dim=-1)


def thresholded_snr_loss(reference: torch.Tensor, estimate: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Negative SNR with a soft floor: 10log10(|y - y_hat|^2 + tau|y|^2) - 10log10(|y|^2).

    Reduces over the last axis and broadcasts over the rest.  The result is
    bounded below by ``10 log10(tau)`` (-30 dB for the default tau).
    """
    ref_energy = _energy(reference)
    if bool((ref_energy == 0).any()):
        raise ValueError("reference signal is identically zero")
    err = _energy(reference - estimate)
    return 10 * torch.log10(err + tau * ref_energy) - 10 * torch.log10(ref_energy)


def si_sdr(reference: torch.Tensor, estimate: torch.Tensor) -> torch.Tensor:
    """Scale-invariant SDR over the last axis, clipped to +-300 dB.

    Perfect (up to positive scale) reconstruction maps to +300, an estimate
    orthogonal to the reference to -300.
    """
    reference = reference.double()
    estimate = estimate.double()
    ref_energy = _energy(reference)
    est_energy = _energy(estimate)
    if bool((ref_energy == 0).any()) or bool((est_energy == 0).any()):
        raise ValueError("SI-SDR is undefined for an all-zero reference or estimate")
    alpha = (reference * estimate).sum(dim=-1) / ref_energy
    target = alpha.unsqueeze(-1) * reference
    distortion = _energy(target - estimate)
    target_energy = _energy(target)
    # relative floor so rounding noise of an exact match still reads as perfect
    perfect = distortion <= 1e-20 * est_energy
    ratio = 10 * torch.log10(target_energy / distortion)
    ratio = torch.where(perfect, torch.full_like(ratio, SISDR_SENTINEL_DB), ratio)
    return ratio.clamp(-SISDR_SENTINEL_DB, SISDR_SENTINEL_DB)


def evaluate_separation(estimates: SourcesLike, references: SourcesLike) -> torch.Tensor:
    """Best-permutation mean SI-SDR per mixture, shape [B].

    Only the K highest-power estimates are scored, K being the number of
    references.
    """
    est = _tensor(estimates).detach()
    ref = _tensor(references).detach()
    k = ref.shape[-2]
    if k > est.shape[-2]:
        raise ValueError(f"{k} references but only {est.shape[-2]} estimates")
    top = gather_sources(est, select_top_sources(est, k))
    # pairwise [B, K_ref, K_est]
    pairwise = si_sdr(ref.unsqueeze(-2), top.unsqueeze(-3))
    best = None
    for perm in itertools.permutations(range(k)):
        score = torch.stack([pairwise[..., i, j] for i, j in enumerate(perm)], dim=-1).mean(dim=-1)
        best = score if best is None else torch.maximum(best, score)
    return best


def unprocessed_sisdr(mixture: torch.Tensor, references: torch.Tensor) -> torch.Tensor:
    """Mean SI-SDR per mixture when the mixture itself is the estimate of every reference."""
    return si_sdr(references, mixture.unsqueeze(-2).expand_as(references)).mean(dim=-1)
