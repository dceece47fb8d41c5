"""Pseudo-mixture construction: pair remixing and in-batch channel shuffling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from .assignments import pair_remix

SeedLike = Union[int, np.random.Generator, None]

MAX_SHUFFLE_RETRIES = 10_000

# Placement of the two strongest sources of each mixture in pair remixing.
#   "literal": the strongest source of both mixtures goes to the first
#              pseudo-mixture, the second strongest of both to the second.
#   "own":     each mixture's strongest source stays in its own pseudo-mixture.
PLACEMENTS = ("literal", "own")


class InfeasibleShuffleError(ValueError):
    pass


@dataclass
class PairRemixPlan:
    """Binary routing vectors; ``pi1[n] = 1`` sends source n of mixture 1 to
    pseudo-mixture 1, ``pi2[n] = 1`` sends source n of mixture 2 to pseudo-mixture 2."""

    pi1: torch.Tensor
    pi2: torch.Tensor

    def __post_init__(self):
        n = self.pi1.shape[-1]
        if self.pi2.shape != self.pi1.shape:
            raise ValueError("pi1 and pi2 must have the same shape")
        for pi in (self.pi1, self.pi2):
            if not bool(((pi == 0) | (pi == 1)).all()) or not bool((pi.sum(-1) == n // 2).all()):
                raise ValueError(f"plan vectors must be binary with {n // 2} ones")


def _order(powers) -> np.ndarray:
    p = np.asarray(powers, dtype=np.float64)
    return np.argsort(-p, kind="stable")


def make_pair_plan(powers1, powers2, rng: SeedLike = None, placement: str = "literal") -> PairRemixPlan:
    """Plan a between-two-mixtures remix from the source powers of each mixture.

    The two strongest sources of each mixture are placed deterministically
    (see ``PLACEMENTS``); the rest are split at random so both pseudo-mixtures
    receive the same number of sources from each mixture.
    """
    if placement not in PLACEMENTS:
        raise ValueError(f"unknown placement {placement!r}")
    n = len(powers1)
    if n % 2 or n < 2:
        raise ValueError(f"pair remixing needs an even number of sources >= 2, got {n}")
    if len(powers2) != n:
        raise ValueError("both mixtures must contribute the same number of sources")
    rng = np.random.default_rng(rng)
    # forced[i] = (value for strongest source, value for second strongest)
    forced = [(1, 0), (0, 1)] if placement == "literal" else [(1, 0), (1, 0)]
    vectors = []
    for powers, (top, second) in zip((powers1, powers2), forced):
        order = _order(powers)
        pi = np.zeros(n, dtype=np.int64)
        pi[order[0]], pi[order[1]] = top, second
        rest = order[2:]
        pi[rng.permutation(rest)[: n // 2 - 1]] = 1
        vectors.append(torch.from_numpy(pi))
    return PairRemixPlan(*vectors)


def remix_pair(sources1: torch.Tensor, sources2: torch.Tensor, plan: PairRemixPlan):
    """Build two pseudo-mixtures from [N_R, T] (or batched [B, N_R, T]) sources."""
    if sources1.shape != sources2.shape or sources1.shape[-2] != plan.pi1.shape[-1]:
        raise ValueError("source shapes do not match the plan")
    pi1 = plan.pi1.to(sources1.dtype)
    pi2 = plan.pi2.to(sources1.dtype)
    return pair_remix(pi1, pi2, sources1, sources2)


@dataclass
class BatchShuffleSpec:
    """Per-channel batch permutations.

    ``perms[n, a]`` is the pseudo-mixture that receives channel ``n`` of
    mixture ``a``.
    """

    perms: torch.Tensor  # [N_R, B], long
    seed: Optional[int] = None

    def __post_init__(self):
        b = self.perms.shape[1]
        expect = torch.arange(b)
        for p in self.perms:
            if not torch.equal(torch.sort(p).values, expect):
                raise ValueError("each channel permutation must be a bijection on the batch")

    @classmethod
    def identity(cls, batch_size: int, n_channels: int) -> "BatchShuffleSpec":
        """Shuffle that recreates the original mixtures (violates no-recollision)."""
        return cls(torch.arange(batch_size).repeat(n_channels, 1))

    @property
    def batch_size(self) -> int:
        return self.perms.shape[1]

    @property
    def n_channels(self) -> int:
        return self.perms.shape[0]

    @property
    def origins(self) -> torch.Tensor:
        """``origins[n, b]``: the mixture whose channel n lands in pseudo-mixture b."""
        return torch.argsort(self.perms, dim=1)

    def has_no_recollision(self) -> bool:
        o = self.origins
        return all(bool((o[i] != o[j]).all()) for i in range(len(o)) for j in range(i))


def make_batch_shuffle(batch_size: int, n_channels: int, rng: SeedLike = None) -> BatchShuffleSpec:
    """Draw channel permutations so no pseudo-mixture reuses two sources of one mixture.

    Channel 0 keeps the identity; every other channel is drawn by rejection
    against the channels fixed so far.
    """
    if batch_size < n_channels:
        raise InfeasibleShuffleError(
            f"cannot shuffle {n_channels} channels over a batch of {batch_size} without recollision"
        )
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng)
    perms = [np.arange(batch_size)]
    tries = 0
    for _ in range(1, n_channels):
        while True:
            tries += 1
            if tries > MAX_SHUFFLE_RETRIES:
                raise InfeasibleShuffleError(f"no valid shuffle found in {MAX_SHUFFLE_RETRIES} draws")
            cand = rng.permutation(batch_size)
            if all((cand != p).all() for p in perms):
                perms.append(cand)
                break
    return BatchShuffleSpec(torch.from_numpy(np.stack(perms)), seed)


def _check(sources: torch.Tensor, spec: BatchShuffleSpec):
    if sources.ndim != 3 or sources.shape[:2] != (spec.batch_size, spec.n_channels):
        raise ValueError(f"sources {tuple(sources.shape)} do not match a {spec.batch_size}x{spec.n_channels} shuffle")


def shuffle_sources(sources: torch.Tensor, spec: BatchShuffleSpec) -> torch.Tensor:
    """Move sources into pseudo-mixture slots: ``out[b, n] = sources[origin_n(b), n]``."""
    _check(sources, spec)
    idx = spec.origins.T  # [B, N_R]
    return torch.gather(sources, 0, idx.unsqueeze(-1).expand_as(sources))


def remix_batch(sources: torch.Tensor, spec: BatchShuffleSpec) -> torch.Tensor:
    """Pseudo-mixtures [B, T] from [B, N_R, T] sources."""
    return shuffle_sources(sources, spec).sum(dim=1)


def unshuffle_sources(aligned: torch.Tensor, spec: BatchShuffleSpec) -> torch.Tensor:
    """Inverse of ``shuffle_sources``."""
    _check(aligned, spec)
    idx = spec.perms.T  # [B, N_R]
    return torch.gather(aligned, 0, idx.unsqueeze(-1).expand_as(aligned))


def unshuffle_and_remix(solver_out_aligned: torch.Tensor, spec: BatchShuffleSpec) -> torch.Tensor:
    """Return aligned solver sources to their original mixtures and sum them, [B, T]."""
    return unshuffle_sources(solver_out_aligned, spec).sum(dim=1)
