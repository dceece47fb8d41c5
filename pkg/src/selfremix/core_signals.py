"""Signal containers, power-based source selection and mixture consistency."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

import torch


class Role(str, enum.Enum):
    SHUFFLER = "shuffler"
    SOLVER = "solver"


@dataclass
class WaveformBatch:
    """Time-domain mixtures of shape [B, T]."""

    samples: torch.Tensor
    sample_rate_hz: int

    def __post_init__(self):
        if self.samples.ndim != 2 or min(self.samples.shape) < 1:
            raise ValueError(f"expected non-empty [B, T] samples, got {tuple(self.samples.shape)}")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if not torch.isfinite(self.samples).all():
            raise ValueError("samples contain non-finite values")

    @property
    def batch_size(self) -> int:
        return self.samples.shape[0]


@dataclass
class SourceEstimates:
    """Separated sources [B, N, T] tagged with the separator that produced them.

    Shuffler outputs are always detached: they are constants to the optimizer.
    """

    sources: torch.Tensor
    origin: Role = Role.SOLVER
    grad_attached: bool = False

    def __post_init__(self):
        self.origin = Role(self.origin)
        if self.sources.ndim != 3 or self.sources.shape[1] < 1:
            raise ValueError(f"expected [B, N, T] sources, got {tuple(self.sources.shape)}")
        if self.origin is Role.SHUFFLER:
            if self.grad_attached:
                raise ValueError("shuffler estimates cannot carry gradients")
            self.sources = self.sources.detach()

    @property
    def n_sources(self) -> int:
        return self.sources.shape[1]


@dataclass
class SelectionIndex:
    indices: torch.Tensor  # [B, N_R], long

    @property
    def n_selected(self) -> int:
        return self.indices.shape[1]


SourcesLike = Union[SourceEstimates, torch.Tensor]


def _tensor(x: SourcesLike) -> torch.Tensor:
    return x.sources if isinstance(x, SourceEstimates) else x


def source_power(estimates: SourcesLike) -> torch.Tensor:
    """Mean squared amplitude per source, shape [..., N]."""
    s = _tensor(estimates)
    return s.pow(2).mean(dim=-1)


def select_top_sources(estimates: SourcesLike, n_select: int) -> SelectionIndex:
    """Indices of the ``n_select`` most powerful sources per item, strongest first.

    Ties go to the lower channel index.
    """
    s = _tensor(estimates)
    n = s.shape[-2]
    if not 1 <= n_select <= n:
        raise ValueError(f"cannot select {n_select} of {n} sources")
    power = source_power(s.detach())
    order = torch.sort(power, dim=-1, descending=True, stable=True).indices
    return SelectionIndex(order[..., :n_select])


def gather_sources(sources: torch.Tensor, selection: SelectionIndex | torch.Tensor) -> torch.Tensor:
    idx = selection.indices if isinstance(selection, SelectionIndex) else selection
    idx = idx.unsqueeze(-1).expand(*idx.shape, sources.shape[-1])
    return torch.gather(sources, -2, idx)


def mixture_consistency(selected: SourcesLike, mixture: torch.Tensor | WaveformBatch) -> torch.Tensor:
    """Project sources so they sum to the mixture.

    The residual ``x - sum(sources)`` is split equally across the sources.
    Works on [B, N, T] sources with a [B, T] mixture (or any matching
    leading dims).
    """
    s = _tensor(selected)
    x = mixture.samples if isinstance(mixture, WaveformBatch) else mixture
    n = s.shape[-2]
    if n == 0:
        raise ValueError("mixture consistency needs at least one source")
    if x.shape != s.shape[:-2] + s.shape[-1:]:
        raise ValueError(f"mixture shape {tuple(x.shape)} does not match sources {tuple(s.shape)}")
    residual = x - s.sum(dim=-2)
    return s + residual.unsqueeze(-2) / n
