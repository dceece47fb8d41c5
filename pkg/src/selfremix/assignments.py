"""Exhaustive assignment searches used by the separation losses.

Every search runs without autograd to pick the best candidate, then the
objective is re-evaluated at that candidate with gradients attached, so the
gradient flows through the loss at the fixed optimal assignment.

All functions accept a single instance or a leading batch axis.  For batched
input ``loss`` is the batch mean and ``losses`` holds the per-item minima.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import torch

from .metrics import thresholded_snr_loss

LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

MAX_PIT_OUTPUTS = 8
MAX_MIXIT_OUTPUTS = 12
MAX_PAIR_REMIX_SOURCES = 6
MAX_ALIGN_SOURCES = 5

_CHUNK = 256


class CapabilityError(RuntimeError):
    """Instance too large for exhaustive search."""


@dataclass
class AssignmentResult:
    assignment: torch.Tensor
    loss: torch.Tensor
    candidates_evaluated: int
    losses: torch.Tensor | None = None


def _batched(*tensors: torch.Tensor, ndim: int):
    single = tensors[0].ndim == ndim
    if single:
        tensors = tuple(t.unsqueeze(0) for t in tensors)
    return single, tensors


def _argmin_chunked(n_candidates: int, cost: Callable[[slice], torch.Tensor]) -> torch.Tensor:
    """Index of the cheapest candidate per batch item; ``cost(sl)`` returns [B, len(sl)]."""
    best_val = best_idx = None
    for start in range(0, n_candidates, _CHUNK):
        sl = slice(start, min(start + _CHUNK, n_candidates))
        val, idx = cost(sl).min(dim=-1)
        idx = idx + start
        if best_val is None:
            best_val, best_idx = val, idx
        else:
            better = val < best_val
            best_val = torch.where(better, val, best_val)
            best_idx = torch.where(better, idx, best_idx)
    return best_idx


def _finish(single: bool, assignment: torch.Tensor, losses: torch.Tensor, count: int) -> AssignmentResult:
    if single:
        return AssignmentResult(assignment[0], losses[0], count, losses)
    return AssignmentResult(assignment, losses.mean(), count, losses)


def injective_maps(n_ref: int, n_est: int) -> torch.Tensor:
    """All injective maps ref -> est as a [P, n_ref] index tensor."""
    return torch.tensor(list(itertools.permutations(range(n_est), n_ref)), dtype=torch.long).reshape(-1, n_ref)


def apply_permutation(estimates: torch.Tensor, perm: torch.Tensor) -> torch.Tensor:
    """Reorder channels: ``out[..., n, :] = estimates[..., perm[..., n], :]``."""
    idx = perm.unsqueeze(-1).expand(*perm.shape, estimates.shape[-1])
    return torch.gather(estimates, -2, idx)


def pit_loss(references: torch.Tensor, estimates: torch.Tensor, loss_fn: LossFn = thresholded_snr_loss) -> AssignmentResult:
    """Permutation invariant loss: min over injective ref->estimate maps of the summed loss.

    ``assignment[n]`` is the estimate index matched to reference ``n``.
    """
    single, (ref, est) = _batched(references, estimates, ndim=2)
    n_ref, n_est = ref.shape[-2], est.shape[-2]
    if n_est > MAX_PIT_OUTPUTS:
        raise CapabilityError(f"PIT search is limited to {MAX_PIT_OUTPUTS} estimates, got {n_est}")
    if n_ref > n_est:
        raise ValueError(f"{n_ref} references but only {n_est} estimates")
    maps = injective_maps(n_ref, n_est)
    with torch.no_grad():
        pairwise = loss_fn(ref.unsqueeze(-2), est.unsqueeze(-3))  # [B, n_ref, n_est]
        rows = torch.arange(n_ref)
        costs = pairwise[:, rows, maps].sum(dim=-1)  # [B, P]
        best = costs.argmin(dim=-1)
    perm = maps[best]
    losses = loss_fn(ref, apply_permutation(est, perm)).sum(dim=-1)
    return _finish(single, perm, losses, maps.shape[0])


def mixit_matrices(n: int) -> torch.Tensor:
    """All 2 x n binary mixing matrices with unit column sums, [2**n, 2, n].

    Candidate ``c`` sends estimate ``j`` to mixture ``(c >> j) & 1``.
    """
    codes = torch.arange(2**n).unsqueeze(-1)
    bits = (codes >> torch.arange(n)) & 1
    return torch.stack([1 - bits, bits], dim=1).to(torch.get_default_dtype())


def mixit_loss(mixtures: torch.Tensor, estimates: torch.Tensor, loss_fn: LossFn = thresholded_snr_loss) -> AssignmentResult:
    """Mixture invariant loss for mixtures [2, T] and estimates of their sum [N, T]."""
    single, (x, est) = _batched(mixtures, estimates, ndim=2)
    n = est.shape[-2]
    if x.shape[-2] != 2:
        raise ValueError("MixIT expects exactly two reference mixtures")
    if n < 2:
        raise ValueError("MixIT needs at least two estimates")
    if n > MAX_MIXIT_OUTPUTS:
        raise CapabilityError(f"MixIT search is limited to {MAX_MIXIT_OUTPUTS} estimates, got {n}")
    mats = mixit_matrices(n).to(est.dtype)

    def cost(sl):
        remixed = torch.einsum("pin,bnt->bpit", mats[sl], est)
        return loss_fn(x.unsqueeze(1), remixed).sum(dim=-1)

    with torch.no_grad():
        best = _argmin_chunked(mats.shape[0], cost)
    chosen = mats[best]  # [B, 2, n]
    losses = loss_fn(x, torch.einsum("bin,bnt->bit", chosen, est)).sum(dim=-1)
    return _finish(single, chosen.round().long(), losses, mats.shape[0])


def balanced_binary_vectors(n: int) -> torch.Tensor:
    """All binary vectors of length n with exactly n/2 ones, [C(n, n/2), n]."""
    rows = []
    for ones in itertools.combinations(range(n), n // 2):
        v = [0] * n
        for i in ones:
            v[i] = 1
        rows.append(v)
    return torch.tensor(rows, dtype=torch.get_default_dtype())


def pair_remix(p1: torch.Tensor, p2: torch.Tensor, s1: torch.Tensor, s2: torch.Tensor):
    """Recombine two source sets: (p1 s1 + (1-p2) s2, (1-p1) s1 + p2 s2).

    ``p1``/``p2`` are [..., N] weights and ``s1``/``s2`` are [..., N, T].
    """
    y1 = (p1.unsqueeze(-1) * s1).sum(-2) + ((1 - p2).unsqueeze(-1) * s2).sum(-2)
    y2 = ((1 - p1).unsqueeze(-1) * s1).sum(-2) + (p2.unsqueeze(-1) * s2).sum(-2)
    return y1, y2


def remix_pair_loss(
    x1: torch.Tensor,
    x2: torch.Tensor,
    solver_out1: torch.Tensor,
    solver_out2: torch.Tensor,
    loss_fn: LossFn = thresholded_snr_loss,
) -> AssignmentResult:
    """Between-two-mixtures remix loss.

    Searches all pairs (p1, p2) of balanced binary vectors and reconstructs
    ``x1`` from ``p1 s1 + (1-p2) s2`` and ``x2`` from ``(1-p1) s1 + p2 s2``.
    ``assignment`` stacks the chosen (p1, p2) as a [2, N_R] long tensor.
    """
    single, (x1, x2, s1, s2) = _batched(x1, x2, solver_out1, solver_out2, ndim=1)
    n = s1.shape[-2]
    if n % 2:
        raise ValueError(f"pair remixing needs an even number of sources, got {n}")
    if n > MAX_PAIR_REMIX_SOURCES:
        raise CapabilityError(f"pair remix search is limited to {MAX_PAIR_REMIX_SOURCES} sources, got {n}")
    if s2.shape != s1.shape:
        raise ValueError("both solver outputs must have the same shape")
    vecs = balanced_binary_vectors(n).to(s1.dtype)
    c = vecs.shape[0]
    grid = torch.cartesian_prod(torch.arange(c), torch.arange(c)).reshape(-1, 2)
    x1b, x2b = x1.unsqueeze(1), x2.unsqueeze(1)

    with torch.no_grad():
        # partial sums per balanced vector, [B, C, T]
        part1 = torch.einsum("cn,bnt->bct", vecs, s1)
        part2 = torch.einsum("cn,bnt->bct", vecs, s2)
        total1, total2 = s1.sum(-2, keepdim=True), s2.sum(-2, keepdim=True)

        def cost(sl):
            a, b = part1[:, grid[sl, 0]], part2[:, grid[sl, 1]]
            return loss_fn(x1b, a + total2 - b) + loss_fn(x2b, total1 - a + b)

        best = _argmin_chunked(grid.shape[0], cost)
    p1, p2 = vecs[grid[best, 0]], vecs[grid[best, 1]]
    y1, y2 = pair_remix(p1, p2, s1, s2)
    losses = loss_fn(x1, y1) + loss_fn(x2, y2)
    return _finish(single, torch.stack([p1, p2], dim=-2).round().long(), losses, grid.shape[0])


def align_to_shuffler(
    shuffled_targets: torch.Tensor, solver_out: torch.Tensor, loss_fn: LossFn = thresholded_snr_loss
) -> AssignmentResult:
    """Align solver outputs to the shuffler's remixed sources, batch [B, N_R, T].

    ``assignment[b, n]`` is the solver channel matched to target ``n``; the
    minimal summed loss is the RemixIT objective.
    """
    n = solver_out.shape[-2]
    if n > MAX_ALIGN_SOURCES:
        raise CapabilityError(f"alignment search is limited to {MAX_ALIGN_SOURCES} sources, got {n}")
    if shuffled_targets.shape != solver_out.shape:
        raise ValueError("targets and solver outputs must have the same shape")
    return pit_loss(shuffled_targets, solver_out, loss_fn)
