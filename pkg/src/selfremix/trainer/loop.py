"""Epoch loop: gradient accumulation, LR schedule, validation, EMA and checkpoint averaging."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..core_signals import Role, mixture_consistency, source_power
from ..datagen import SeparationDataset, make_dataset, read_dataset
from ..metrics import evaluate_separation, unprocessed_sisdr
from ..separator import Separator, load_checkpoint, save_checkpoint
from ..teacher_student import (
    Protocol,
    TeacherStudentState,
    average_best,
    epoch_end_update,
    init_from_pretrained,
    record_checkpoint,
)
from .config import TEACHER_METHODS, InvalidConfig, TrainConfig, dump_config
from .schedule import WarmupDecaySchedule
from .steps import StepResult, step_mixit, step_semi_supervised, step_supervised_pit, step_unsupervised

log = logging.getLogger(__name__)

METRICS_NAME = "metrics.jsonl"
EVAL_BATCH = 16


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    initial_valid_sisdr_db: float = float("nan")
    unprocessed_valid_sisdr_db: float = float("nan")
    averaged_valid_sisdr_db: float = float("nan")
    averaged_collapse_metric: float = float("nan")
    steps: int = 0
    averaged_params: Optional[torch.Tensor] = None
    out_dir: Optional[Path] = None

    @property
    def max_collapse_metric(self) -> float:
        return max(r["collapse_metric"] for r in self.records)


@torch.no_grad()
def evaluate_model(model: Separator, ds: SeparationDataset, n_refs: Optional[int] = None, mc: bool = False,
                   batch_size: int = EVAL_BATCH) -> dict:
    """Best-permutation SI-SDR of the strongest outputs against the speech references.

    ``n_refs`` defaults to all references but the last (noise).  Also returns
    the collapse metric: mean power ratio of the strongest output to the mixture.
    """
    if ds.references is None:
        raise ValueError("evaluation needs references")
    refs_all = ds.references
    n_refs = n_refs or max(refs_all.shape[1] - 1, 1)
    scores, ratios = [], []
    for start in range(0, len(ds), batch_size):
        x = ds.mixtures[start : start + batch_size]
        refs = refs_all[start : start + batch_size, :n_refs]
        est = model(x)
        if mc:
            est = mixture_consistency(est, x)
        scores.append(evaluate_separation(est, refs))
        top = source_power(est).max(dim=-1).values
        ratios.append(top / source_power(x).clamp_min(1e-12))
    return {
        "sisdr_db": float(torch.cat(scores).mean()),
        "collapse_metric": float(torch.cat(ratios).mean()),
    }


def load_datasets(cfg: TrainConfig) -> tuple[SeparationDataset, SeparationDataset]:
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        return read_dataset(root / "train"), read_dataset(root / "valid")
    common = dict(base_seed=cfg.data_seed, n_speech=cfg.n_speech, duration_s=cfg.duration_s,
                  sample_rate_hz=cfg.sample_rate_hz, snr_range_db=cfg.snr_range_db)
    return make_dataset("train", cfg.n_train, **common), make_dataset("valid", cfg.n_valid, **common)


def load_ood_dataset(cfg: TrainConfig) -> SeparationDataset:
    return make_dataset("train", cfg.n_train, base_seed=cfg.ood_data_seed, n_speech=cfg.n_speech,
                        duration_s=cfg.duration_s, sample_rate_hz=cfg.sample_rate_hz,
                        snr_range_db=cfg.ood_snr_range_db)


class Trainer:
    """Owns the solver (and shuffler), optimizer and teacher-student state for one run."""

    def __init__(self, cfg: TrainConfig, train: SeparationDataset, valid: SeparationDataset,
                 out_dir=None, pretrained: Optional[Separator] = None, ood: Optional[SeparationDataset] = None):
        self.cfg = cfg.validate()
        if cfg.seed is None:
            raise InvalidConfig("a seed is required for training")
        self.train, self.valid, self.ood = train, valid, ood
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.order_gen = torch.Generator().manual_seed(cfg.seed)
        if pretrained is None and cfg.init_checkpoint:
            pretrained, _ = load_checkpoint(cfg.init_checkpoint)
        self._build_models(pretrained)
        if cfg.semi_supervised and (ood is None or ood.references is None):
            raise InvalidConfig("semi-supervised adaptation needs a labelled out-of-domain dataset")
        self.optimizer = torch.optim.AdamW(self.solver.parameters(), lr=0.0, weight_decay=cfg.weight_decay)
        self.schedule = WarmupDecaySchedule(cfg.peak_lr, cfg.warmup_steps, cfg.lr_decay_factor, cfg.lr_decay_every)
        self.step = 0
        self.lr = 0.0

    def _build_models(self, pretrained: Optional[Separator]):
        cfg = self.cfg
        if cfg.method in ("pit", "mixit"):
            self.solver = copy.deepcopy(pretrained) if pretrained is not None else Separator(cfg.separator_config(cfg.n_solver))
            self.shuffler = None
        elif cfg.method == "rccl":
            if pretrained is None:
                raise InvalidConfig("RCCL refines a pre-trained model; give init_checkpoint")
            self.solver, self.shuffler = copy.deepcopy(pretrained), None
        else:
            if pretrained is None:
                raise InvalidConfig(f"{cfg.method} needs a pre-trained shuffler (init_checkpoint)")
            if pretrained.n_outputs != cfg.n_shuffler:
                raise InvalidConfig(f"pre-trained model has {pretrained.n_outputs} outputs, N_T={cfg.n_shuffler}")
            self.shuffler = copy.deepcopy(pretrained)
            for p in self.shuffler.parameters():
                p.requires_grad_(False)
            if cfg.protocol == "ema_epoch_end":
                self.solver = copy.deepcopy(pretrained)
            else:
                self.solver = Separator(cfg.separator_config(cfg.n_solver))
        theta = self.solver.get_vector()
        if cfg.method in TEACHER_METHODS:
            solver_init = None if cfg.protocol == "ema_epoch_end" else theta
            self.state = init_from_pretrained(self.shuffler.get_vector(), cfg.protocol, cfg.alpha, solver_init)
        else:
            self.state = TeacherStudentState(theta.clone(), theta, cfg.alpha, Protocol.FROZEN)

    # one mini-batch
    def compute_step(self, idx: torch.Tensor) -> StepResult:
        cfg = self.cfg
        x = self.train.mixtures[idx]
        if cfg.semi_supervised:
            j = torch.randint(len(self.ood), (cfg.ood_batch_size,), generator=self.order_gen)
            return step_semi_supervised(self.ood.mixtures[j], self.ood.references[j], x, self.shuffler,
                                        self.solver, cfg, self.rng)
        if cfg.method == "pit":
            refs = None if self.train.references is None else self.train.references[idx]
            return step_supervised_pit(x, refs, self.solver, cfg)
        if cfg.method == "mixit":
            return step_mixit(x, self.solver, cfg)
        return step_unsupervised(x, self.shuffler, self.solver, cfg, self.rng)

    def _dump_and_abort(self, res: StepResult):
        msg = f"non-finite loss at step {self.step}: {res.stats}"
        if self.out_dir is not None:
            path = self.out_dir / "nan_dump.pt"
            torch.save({"step": self.step, "config": self.cfg.to_dict(), "solver": self.solver.get_vector(),
                        "shuffler": None if self.shuffler is None else self.shuffler.get_vector(),
                        "stats": res.stats}, path)
            msg += f"; state dumped to {path}"
        raise TrainingDiverged(msg)

    def _record(self, epoch: int, train_loss: Optional[float], t0: float) -> dict:
        ev = evaluate_model(self.solver, self.valid, mc=self.cfg.mc_inference)
        rec = {
            "epoch": epoch,
            "step": self.step,
            "train_loss_db": train_loss,
            "valid_sisdr_db": ev["sisdr_db"],
            "lr": self.lr,
            "collapse_metric": ev["collapse_metric"],
            "wall_time_s": round(time.time() - t0, 3),
        }
        if self.out_dir is not None:
            with open(self.out_dir / METRICS_NAME, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        log.info("epoch %d step %d loss %s valid SI-SDR %.2f dB collapse %.3f", epoch, self.step,
                 "-" if train_loss is None else f"{train_loss:.2f}", ev["sisdr_db"], ev["collapse_metric"])
        return rec

    def run(self) -> TrainReport:
        cfg = self.cfg
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / METRICS_NAME).unlink(missing_ok=True)
            dump_config(cfg, self.out_dir / "config.yaml")
        t0 = time.time()
        report = TrainReport(out_dir=self.out_dir)
        report.unprocessed_valid_sisdr_db = float(
            unprocessed_sisdr(self.valid.mixtures, self.valid.references[:, : max(self.valid.references.shape[1] - 1, 1)]).mean()
        )
        first = self._record(0, None, t0)
        report.records.append(first)
        report.initial_valid_sisdr_db = first["valid_sisdr_db"]

        n, bs = len(self.train), cfg.batch_size
        if n < bs:
            raise ValueError(f"training set of {n} mixtures is smaller than one batch of {bs}")
        done = False
        for epoch in range(1, cfg.epochs + 1):
            order = torch.randperm(n, generator=self.order_gen)
            losses = []
            self.solver.train()
            for b in range(n // bs):
                res = self.compute_step(order[b * bs : (b + 1) * bs])
                if not torch.isfinite(res.loss):
                    self._dump_and_abort(res)
                (res.loss / cfg.grad_accum_steps).backward()
                self.step += 1
                losses.append(float(res.loss.detach()))
                if self.step % cfg.grad_accum_steps == 0:
                    self.lr = self.schedule.lr(self.step)
                    for group in self.optimizer.param_groups:
                        group["lr"] = self.lr
                    self.optimizer.step()
                    self.optimizer.zero_grad(set_to_none=True)
                if cfg.max_steps is not None and self.step >= cfg.max_steps:
                    done = True
                    break
            self.schedule.epoch_end(self.step)
            self.solver.eval()
            rec = self._record(epoch, float(np.mean(losses)) if losses else None, t0)
            report.records.append(rec)
            self.state.theta_S = self.solver.get_vector()
            record_checkpoint(self.state, rec["valid_sisdr_db"])
            if self.shuffler is not None:
                epoch_end_update(self.state)
                self.shuffler.set_vector(self.state.theta_T)
            else:
                self.state.epoch += 1
            if done:
                break

        report.steps = self.step
        averaged = average_best(self.state)
        report.averaged_params = averaged
        final = copy.deepcopy(self.solver).set_vector(averaged)
        ev = evaluate_model(final, self.valid, mc=cfg.mc_inference)
        report.averaged_valid_sisdr_db = ev["sisdr_db"]
        report.averaged_collapse_metric = ev["collapse_metric"]
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / "solver_last.pt", self.solver, self.step, Role.SOLVER)
            if self.shuffler is not None:
                save_checkpoint(self.out_dir / "shuffler_last.pt", self.shuffler, self.step, Role.SHUFFLER)
            save_checkpoint(self.out_dir / "averaged.pt", final, self.step, Role.SOLVER,
                            extra={"valid_sisdr_db": ev["sisdr_db"], "method": cfg.method})
            with open(self.out_dir / "report.json", "w") as fh:
                json.dump({
                    "method": cfg.method,
                    "steps": self.step,
                    "unprocessed_valid_sisdr_db": report.unprocessed_valid_sisdr_db,
                    "initial_valid_sisdr_db": report.initial_valid_sisdr_db,
                    "averaged_valid_sisdr_db": report.averaged_valid_sisdr_db,
                    "averaged_collapse_metric": report.averaged_collapse_metric,
                }, fh, indent=2)
        return report


def run_training(cfg: TrainConfig, datasets=None, out_dir=None, pretrained: Optional[Separator] = None,
                 ood: Optional[SeparationDataset] = None) -> TrainReport:
    """Train ``cfg.method``; ``datasets`` is ``(train, valid)`` or None to build them from the config."""
    train, valid = datasets if datasets is not None else load_datasets(cfg)
    if cfg.semi_supervised and ood is None:
        ood = load_ood_dataset(cfg)
    return Trainer(cfg, train, valid, out_dir, pretrained, ood).run()

