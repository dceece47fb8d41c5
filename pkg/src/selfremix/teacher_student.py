"""Shuffler (teacher) weight management: EMA updates, frozen protocol, checkpoint averaging."""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field
from typing import Optional

import torch

RING_CAPACITY = 5
ALPHA_UNSUPERVISED = 0.8
ALPHA_SEMI_SUPERVISED = 0.9


class Protocol(str, enum.Enum):
    EMA_EPOCH_END = "ema_epoch_end"
    FROZEN = "frozen"


@dataclass
class TeacherStudentState:
    """Flat parameter vectors of both roles plus the best-checkpoint ring.

    ``checkpoint_ring`` holds ``(score, tiebreak, params)`` entries as a
    min-heap on score, so the worst retained checkpoint is evicted first.
    """

    theta_T: torch.Tensor
    theta_S: torch.Tensor
    alpha: float = ALPHA_UNSUPERVISED
    protocol: Protocol = Protocol.EMA_EPOCH_END
    epoch: int = 0
    capacity: int = RING_CAPACITY
    checkpoint_ring: list = field(default_factory=list)
    offered: int = 0

    def __post_init__(self):
        self.protocol = Protocol(self.protocol)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.protocol is Protocol.EMA_EPOCH_END and self.theta_T.shape != self.theta_S.shape:
            raise ValueError("EMA updates need shuffler and solver of identical architecture")

    def snapshot(self) -> "TeacherStudentState":
        return TeacherStudentState(
            self.theta_T.clone(), self.theta_S.clone(), self.alpha, self.protocol, self.epoch, self.capacity,
            [(s, i, p.clone()) for s, i, p in self.checkpoint_ring], self.offered,
        )


def init_from_pretrained(
    pretrained: torch.Tensor,
    protocol: Protocol | str = Protocol.EMA_EPOCH_END,
    alpha: float = ALPHA_UNSUPERVISED,
    solver_init: Optional[torch.Tensor] = None,
) -> TeacherStudentState:
    """Start both roles from a pre-trained shuffler.

    With EMA the solver starts as an exact copy; with a frozen shuffler the
    solver starts from ``solver_init`` (a fresh random initialization, which
    may belong to a model with a different number of outputs).
    """
    protocol = Protocol(protocol)
    theta_T = pretrained.detach().clone()
    if protocol is Protocol.EMA_EPOCH_END:
        if solver_init is not None and solver_init.shape != theta_T.shape:
            raise ValueError("EMA protocol requires the solver to share the shuffler architecture")
        theta_S = theta_T.clone()
    else:
        if solver_init is None:
            raise ValueError("frozen protocol needs a freshly initialized solver vector")
        theta_S = solver_init.detach().clone()
    return TeacherStudentState(theta_T, theta_S, alpha, protocol)


def epoch_end_update(state: TeacherStudentState) -> TeacherStudentState:
    """theta_T <- alpha theta_T + (1 - alpha) theta_S under EMA; frozen keeps theta_T."""
    if state.protocol is Protocol.EMA_EPOCH_END:
        a = state.alpha
        state.theta_T = a * state.theta_T + (1.0 - a) * state.theta_S
    state.epoch += 1
    return state


def record_checkpoint(state: TeacherStudentState, score: float, params: Optional[torch.Tensor] = None) -> bool:
    """Offer a checkpoint (default: the current solver) to the ring; returns True if kept.

    Higher scores are better.  On equal scores the earlier checkpoint stays.
    """
    vec = (state.theta_S if params is None else params).detach().clone()
    entry = (float(score), -state.offered, vec)
    state.offered += 1
    ring = state.checkpoint_ring
    if len(ring) < state.capacity:
        heapq.heappush(ring, entry)
        return True
    if entry[:2] > ring[0][:2]:
        heapq.heapreplace(ring, entry)
        return True
    return False


def average_best(state: TeacherStudentState) -> torch.Tensor:
    """Elementwise mean of the retained checkpoints."""
    if not state.checkpoint_ring:
        raise RuntimeError("no checkpoints recorded")
    return torch.stack([p for _, _, p in state.checkpoint_ring]).mean(dim=0)


def ring_scores(state: TeacherStudentState) -> list[float]:
    return sorted((s for s, _, _ in state.checkpoint_ring), reverse=True)
