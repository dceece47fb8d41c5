"""Training configuration: a flat dataclass loaded from a sectioned YAML file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from ..separator import SeparatorConfig

METHODS = (
    "pit",
    "mixit",
    "remixit",
    "rccl",
    "self_remixing_pair",
    "self_remixing_batch",
    "remixit_plus_self_remixing",
)
PAIR_METHODS = ("self_remixing_pair", "rccl")
IN_BATCH_METHODS = ("remixit", "self_remixing_batch", "remixit_plus_self_remixing")
TEACHER_METHODS = ("remixit", "self_remixing_pair", "self_remixing_batch", "remixit_plus_self_remixing")


class InvalidConfig(ValueError):
    pass


@dataclass
class TrainConfig:
    method: str = "mixit"
    seed: Optional[int] = None

    # data
    n_train: int = 500
    n_valid: int = 100
    duration_s: float = 2.0
    sample_rate_hz: int = 8000
    n_speech: int = 2
    data_seed: int = 0
    snr_range_db: tuple = (10.0, 20.0)
    data_dir: Optional[str] = None

    # optimisation
    batch_size: int = 8
    grad_accum_steps: int = 1
    peak_lr: float = 1e-3
    warmup_steps: int = 500
    lr_decay_factor: float = 0.98
    lr_decay_every: int = 2
    weight_decay: float = 1e-2
    epochs: int = 10
    max_steps: Optional[int] = None

    # model
    n_shuffler: int = 6  # N_T
    n_solver: int = 6  # N_S
    n_remix: int = 3  # N_R
    hidden: int = 96
    n_blocks: int = 2
    kernel_size: int = 5

    # losses
    tau: float = 1e-3
    l_thres: Optional[float] = None
    n_sources: int = 3  # K, sources per observed mixture

    # self-training
    alpha: float = 0.8
    protocol: str = "ema_epoch_end"
    init_checkpoint: Optional[str] = None
    mc_shuffler: bool = True
    mc_solver: Optional[bool] = None  # None: on for Self-Remixing with N_S > N_R, off for RemixIT
    pair_placement: str = "literal"
    remix: Optional[str] = None  # "pair" | "in_batch"; defaults per method
    allow_in_batch_rccl: bool = False  # test-only: RCCL collapses with in-batch remixing

    # semi-supervised adaptation
    semi_supervised: bool = False
    ood_batch_size: int = 4
    unsupervised_weight: float = 1.0
    ood_data_seed: int = 1
    ood_snr_range_db: tuple = (10.0, 20.0)

    # evaluation
    mc_inference: bool = False
    activation_checkpointing: bool = False  # reserved

    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.snr_range_db = tuple(self.snr_range_db)
        self.ood_snr_range_db = tuple(self.ood_snr_range_db)

    @property
    def remix_algo(self) -> Optional[str]:
        if self.remix is not None:
            return self.remix
        if self.method in PAIR_METHODS:
            return "pair"
        if self.method in IN_BATCH_METHODS:
            return "in_batch"
        return None

    @property
    def solver_mc(self) -> bool:
        if self.mc_solver is not None:
            return self.mc_solver
        return self.method in ("self_remixing_batch", "remixit_plus_self_remixing") and self.n_solver > self.n_remix

    def separator_config(self, n_outputs: int) -> SeparatorConfig:
        return SeparatorConfig(n_outputs=n_outputs, hidden=self.hidden, kernel_size=self.kernel_size, n_blocks=self.n_blocks)

    def validate(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise InvalidConfig(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.batch_size < 1 or self.grad_accum_steps < 1:
            raise InvalidConfig("batch_size and grad_accum_steps must be positive")
        if self.tau <= 0:
            raise InvalidConfig("tau must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidConfig("alpha must lie in [0, 1]")
        if self.protocol not in ("ema_epoch_end", "frozen"):
            raise InvalidConfig(f"unknown protocol {self.protocol!r}")
        if self.method == "mixit" and self.n_solver < 2 * self.n_sources:
            raise InvalidConfig(f"MixIT needs at least 2K={2 * self.n_sources} outputs, got {self.n_solver}")
        algo = self.remix_algo
        if self.method == "rccl" and algo == "in_batch" and not self.allow_in_batch_rccl:
            raise InvalidConfig("RCCL with in-batch remixing falls into the trivial solution; use pair remixing")
        if algo == "pair":
            n_r = self.pair_sources
            if n_r % 2:
                raise InvalidConfig(f"pair remixing needs an even number of sources, got {n_r}")
            if self.n_solver < n_r:
                raise InvalidConfig("solver must have at least N_R outputs")
        if algo == "in_batch":
            if self.batch_size < self.n_remix:
                raise InvalidConfig(f"in-batch remixing needs batch_size >= N_R ({self.n_remix})")
            if self.n_remix > min(self.n_shuffler, self.n_solver):
                raise InvalidConfig("N_R cannot exceed the number of separator outputs")
        if self.method in TEACHER_METHODS and self.protocol == "ema_epoch_end" and self.n_shuffler != self.n_solver:
            raise InvalidConfig("EMA shuffler updates need N_T == N_S")
        if self.pair_placement not in ("literal", "own"):
            raise InvalidConfig(f"unknown pair placement {self.pair_placement!r}")
        return self

    @property
    def pair_sources(self) -> int:
        """Pair remixing remixes every shuffler output (RCCL: every model output)."""
        return self.n_solver if self.method == "rccl" else self.n_shuffler

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["snr_range_db"] = list(self.snr_range_db)
        d["ood_snr_range_db"] = list(self.ood_snr_range_db)
        return d


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _flatten(d: dict, out: dict):
    for k, v in d.items():
        k = k.replace("-", "_")
        if isinstance(v, dict) and k not in _FIELDS:
            _flatten(v, out)
        else:
            if k in out:
                raise InvalidConfig(f"key {k!r} given twice")
            out[k] = v
    return out


def _coerce(name: str, value: Any):
    kind = str(_FIELDS[name].type)
    if isinstance(value, str):
        # CLI overrides arrive as text; YAML 1.1 also reads "1e-3" as a string
        if value.lower() in ("none", "null", "~"):
            return None
        if "float" in kind:
            return float(value)
        if "int" in kind:
            return int(value)
        if "bool" in kind:
            return yaml.safe_load(value)
        if kind == "tuple":
            value = yaml.safe_load(value)
    if kind == "tuple" and value is not None:
        return tuple(float(v) for v in value)
    if "float" in kind and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def config_from_dict(d: dict, overrides: Optional[dict] = None) -> TrainConfig:
    """Build a config from (possibly sectioned) key-values; sections are flattened."""
    flat = _flatten(d or {}, {})
    for k, v in (overrides or {}).items():
        flat[k.replace("-", "_")] = v
    unknown = sorted(set(flat) - set(_FIELDS))
    if unknown:
        raise InvalidConfig(f"unknown config keys: {unknown}")
    return TrainConfig(**{k: _coerce(k, v) for k, v in flat.items()})


def load_config(path, overrides: Optional[dict] = None) -> TrainConfig:
    with open(Path(path)) as fh:
        data = yaml.safe_load(fh) or {}
    return config_from_dict(data, overrides)


def dump_config(cfg: TrainConfig, path):
    with open(Path(path), "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
