"""Per-batch losses for every training method.

Each step takes a batch of observed mixtures [B, T] and returns a
``StepResult`` whose ``loss`` is the scalar to backpropagate (batch mean, dB).
Shuffler passes run without autograd; only RCCL differentiates through the
pseudo-mixture construction.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from ..assignments import align_to_shuffler, apply_permutation, mixit_loss, pit_loss, remix_pair_loss
from ..core_signals import Role, gather_sources, mixture_consistency, select_top_sources, source_power
from ..datagen import make_mom
from ..metrics import thresholded_snr_loss
from ..remixer import make_batch_shuffle, make_pair_plan, remix_pair, shuffle_sources, unshuffle_and_remix
from ..separator import Separator, separate
from .config import InvalidConfig, TrainConfig

log = logging.getLogger(__name__)


@dataclass
class StepResult:
    loss: torch.Tensor
    stats: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def loss_fn_for(cfg: TrainConfig):
    return functools.partial(thresholded_snr_loss, tau=cfg.tau)


def _top(sources: torch.Tensor, n: int) -> torch.Tensor:
    return gather_sources(sources, select_top_sources(sources, n))


def shuffler_sources(mixtures: torch.Tensor, shuffler: Separator, n_select: int, mc: bool, grad: bool = False):
    """Separate, keep the ``n_select`` strongest sources and optionally project onto the mixture."""
    if grad:
        est = shuffler(mixtures)
    else:
        est = separate(shuffler, mixtures, role=Role.SHUFFLER).sources
    sel = _top(est, n_select)
    return mixture_consistency(sel, mixtures) if mc else sel


def _even(mixtures: torch.Tensor, what: str) -> torch.Tensor:
    if mixtures.shape[0] % 2:
        log.warning("%s needs mixture pairs; dropping the last of %d mixtures", what, mixtures.shape[0])
        mixtures = mixtures[:-1]
    if mixtures.shape[0] == 0:
        raise ValueError(f"{what} needs at least two mixtures")
    return mixtures


def step_supervised_pit(mixtures: torch.Tensor, references: Optional[torch.Tensor], model: Separator,
                        cfg: TrainConfig) -> StepResult:
    if references is None:
        raise ValueError("supervised PIT needs reference sources")
    est = model(mixtures)
    res = pit_loss(references, est, loss_fn_for(cfg))
    return StepResult(res.loss, {"pit_loss_db": float(res.loss.detach())}, {"assignment": res.assignment})


def step_mixit(mixtures: torch.Tensor, model: Separator, cfg: TrainConfig) -> StepResult:
    """MixIT on adjacent pairs of the batch."""
    if model.n_outputs < 2 * cfg.n_sources:
        raise InvalidConfig(f"MixIT needs at least {2 * cfg.n_sources} outputs, model has {model.n_outputs}")
    mixtures = _even(mixtures, "MixIT")
    x1, x2 = mixtures[0::2], mixtures[1::2]
    est = model(make_mom(x1, x2))
    res = mixit_loss(torch.stack([x1, x2], dim=1), est, loss_fn_for(cfg))
    return StepResult(res.loss, {"mixit_loss_db": float(res.loss.detach())}, {"assignment": res.assignment, "estimates": est})


def in_batch_forward(mixtures: torch.Tensor, shuffler: Separator, solver: Separator, cfg: TrainConfig,
                     rng: np.random.Generator, shuffler_grad: bool = False) -> dict:
    """Shared in-batch pipeline: shuffle, separate, align, unshuffle.

    Returns the per-mixture RemixIT (alignment) and Self-Remixing losses plus
    the intermediate tensors.
    """
    loss_fn = loss_fn_for(cfg)
    n_r = cfg.n_remix
    teacher = shuffler_sources(mixtures, shuffler, n_r, cfg.mc_shuffler, grad=shuffler_grad)
    spec = make_batch_shuffle(mixtures.shape[0], n_r, rng)
    targets = shuffle_sources(teacher, spec)
    pseudo = targets.sum(dim=1)
    solver_out = _top(solver(pseudo), n_r)
    if cfg.solver_mc:
        solver_out = mixture_consistency(solver_out, pseudo)
    align = align_to_shuffler(targets, solver_out, loss_fn)
    aligned = apply_permutation(solver_out, align.assignment)
    recon = unshuffle_and_remix(aligned, spec)
    prop2 = loss_fn(mixtures, recon)
    return {
        "remixit_losses": align.losses,
        "self_remixing_losses": prop2,
        "permutation": align.assignment,
        "spec": spec,
        "teacher": teacher,
        "targets": targets,
        "pseudo": pseudo,
        "solver_out": solver_out,
        "reconstruction": recon,
        "candidates_per_item": align.candidates_evaluated,
    }


def _in_batch_result(fw: dict, loss: torch.Tensor) -> StepResult:
    stats = {
        "remixit_loss_db": float(fw["remixit_losses"].detach().mean()),
        "self_remixing_loss_db": float(fw["self_remixing_losses"].detach().mean()),
        "candidates_per_item": fw["candidates_per_item"],
    }
    return StepResult(loss, stats, fw)


def step_self_remixing_batch(mixtures, shuffler, solver, cfg, rng) -> StepResult:
    """Solver reconstructs the observed mixtures from in-batch pseudo-mixtures."""
    fw = in_batch_forward(mixtures, shuffler, solver, cfg, rng)
    return _in_batch_result(fw, fw["self_remixing_losses"].mean())


def step_remixit(mixtures, shuffler, solver, cfg, rng) -> StepResult:
    """Solver regresses the shuffled shuffler outputs."""
    fw = in_batch_forward(mixtures, shuffler, solver, cfg, rng)
    return _in_batch_result(fw, fw["remixit_losses"].mean())


def step_remixit_plus_self_remixing(mixtures, shuffler, solver, cfg, rng) -> StepResult:
    fw = in_batch_forward(mixtures, shuffler, solver, cfg, rng)
    return _in_batch_result(fw, fw["remixit_losses"].mean() + fw["self_remixing_losses"].mean())


def pair_forward(mixtures: torch.Tensor, shuffler: Separator, solver: Separator, cfg: TrainConfig,
                 rng: np.random.Generator, shuffler_grad: bool = False) -> dict:
    """Between-two-mixtures pipeline on adjacent pairs, with loss thresholding."""
    loss_fn = loss_fn_for(cfg)
    mixtures = _even(mixtures, "pair remixing")
    n_r = cfg.pair_sources
    sources = shuffler_sources(mixtures, shuffler, n_r, cfg.mc_shuffler, grad=shuffler_grad)
    s1, s2 = sources[0::2], sources[1::2]
    p1, p2 = source_power(s1.detach()), source_power(s2.detach())
    pseudo1, pseudo2, plans = [], [], []
    for i in range(s1.shape[0]):
        plan = make_pair_plan(p1[i].tolist(), p2[i].tolist(), rng, cfg.pair_placement)
        y1, y2 = remix_pair(s1[i], s2[i], plan)
        pseudo1.append(y1)
        pseudo2.append(y2)
        plans.append(plan)
    pseudo = torch.stack([torch.stack(pseudo1), torch.stack(pseudo2)], dim=1).reshape(-1, mixtures.shape[-1])
    out = _top(solver(pseudo), n_r)
    if bool(cfg.mc_solver):
        out = mixture_consistency(out, pseudo)
    res = remix_pair_loss(mixtures[0::2], mixtures[1::2], out[0::2], out[1::2], loss_fn)
    raw = res.losses
    if cfg.l_thres is not None:
        keep = (raw.detach() >= cfg.l_thres).to(raw.dtype)
        used = raw * keep
    else:
        keep = torch.ones_like(raw)
        used = raw
    return {
        "raw_losses": raw,
        "used_losses": used,
        "kept": keep,
        "assignment": res.assignment,
        "candidates_per_pair": res.candidates_evaluated,
        "plans": plans,
        "pseudo": pseudo,
        "solver_out": out,
        "teacher": sources,
    }


def _pair_result(fw: dict) -> StepResult:
    stats = {
        "pair_loss_db": float(fw["raw_losses"].detach().mean()),
        "kept_fraction": float(fw["kept"].mean()),
        "candidates_per_pair": fw["candidates_per_pair"],
    }
    return StepResult(fw["used_losses"].mean(), stats, fw)


def step_self_remixing_pair(mixtures, shuffler, solver, cfg, rng) -> StepResult:
    return _pair_result(pair_forward(mixtures, shuffler, solver, cfg, rng))


def step_rccl(mixtures, model, cfg, rng) -> StepResult:
    """One model builds and solves the pseudo-mixtures; gradients flow through both passes."""
    if cfg.remix_algo == "in_batch":
        if not cfg.allow_in_batch_rccl:
            raise InvalidConfig("RCCL does not support in-batch remixing")
        fw = in_batch_forward(mixtures, model, model, cfg, rng, shuffler_grad=True)
        return _in_batch_result(fw, fw["self_remixing_losses"].mean())
    return _pair_result(pair_forward(mixtures, model, model, cfg, rng, shuffler_grad=True))


def step_unsupervised(mixtures, shuffler, solver, cfg, rng) -> StepResult:
    """Dispatch on ``cfg.method`` for the remixing-based methods."""
    m = cfg.method
    if m == "rccl":
        return step_rccl(mixtures, solver, cfg, rng)
    if m == "self_remixing_pair":
        return step_self_remixing_pair(mixtures, shuffler, solver, cfg, rng)
    if m == "self_remixing_batch":
        return step_self_remixing_batch(mixtures, shuffler, solver, cfg, rng)
    if m == "remixit":
        return step_remixit(mixtures, shuffler, solver, cfg, rng)
    if m == "remixit_plus_self_remixing":
        return step_remixit_plus_self_remixing(mixtures, shuffler, solver, cfg, rng)
    raise InvalidConfig(f"{m!r} is not a remixing method")


def step_semi_supervised(ood_mixtures, ood_references, mixtures, shuffler, solver, cfg, rng) -> StepResult:
    """Supervised PIT on labelled out-of-domain data plus the unsupervised loss in-domain."""
    if ood_mixtures.shape[0] == 0 or mixtures.shape[0] == 0:
        raise ValueError("both sub-batches must be non-empty")
    sup = step_supervised_pit(ood_mixtures, ood_references, solver, cfg)
    if cfg.unsupervised_weight == 0:
        return StepResult(sup.loss, {"supervised_loss_db": float(sup.loss.detach()), "unsupervised_loss_db": 0.0})
    unsup = step_unsupervised(mixtures, shuffler, solver, cfg, rng)
    total = sup.loss + cfg.unsupervised_weight * unsup.loss
    stats = {"supervised_loss_db": float(sup.loss.detach()), "unsupervised_loss_db": float(unsup.loss.detach()), **unsup.stats}
    return StepResult(total, stats, {"supervised": sup, "unsupervised": unsup})
