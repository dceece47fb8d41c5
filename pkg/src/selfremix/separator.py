"""Mask-based separator: STFT front-end plus a small convolutional mask network.

Checkpoint format (version 1) is a ``torch.save`` dictionary::

    {"format": "selfremix-checkpoint", "version": 1,
     "arch": {...SeparatorConfig fields...},
     "params": 1-D float tensor (parameters_to_vector order),
     "step": int, "role": "shuffler" | "solver" | None,
     "extra": dict of plain values}

Loading checks ``format`` and the major ``version``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from .core_signals import Role, SourceEstimates

CHECKPOINT_FORMAT = "selfremix-checkpoint"
CHECKPOINT_VERSION = 1
_LOG_EPS = 1e-5


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 512
    window_length: int = 400
    hop_length: int = 160

    def __post_init__(self):
        if not 0 < self.hop_length <= self.window_length <= self.fft_size:
            raise ValueError("need 0 < hop_length <= window_length <= fft_size")

    @property
    def n_freq(self) -> int:
        return self.fft_size // 2 + 1

    def window(self, dtype=torch.float32) -> torch.Tensor:
        return torch.hann_window(self.window_length, periodic=True, dtype=dtype)


def stft_analyze(wave: torch.Tensor, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Complex spectrogram [..., F, L] of a [..., T] waveform."""
    if wave.shape[-1] < cfg.window_length:
        raise ValueError(f"input of {wave.shape[-1]} samples is shorter than the {cfg.window_length}-sample window")
    lead = wave.shape[:-1]
    spec = torch.stft(
        wave.reshape(-1, wave.shape[-1]),
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_length,
        win_length=cfg.window_length,
        window=cfg.window(wave.dtype),
        center=True,
        return_complex=True,
    )
    return spec.reshape(*lead, *spec.shape[-2:])


def stft_synthesize(spec: torch.Tensor, length: int, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    lead = spec.shape[:-2]
    wave = torch.istft(
        spec.reshape(-1, *spec.shape[-2:]),
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_length,
        win_length=cfg.window_length,
        window=cfg.window(spec.real.dtype),
        center=True,
        length=length,
    )
    return wave.reshape(*lead, length)


def apply_masks(wave: torch.Tensor, masks: torch.Tensor, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Mask the mixture magnitude (mixture phase kept) and resynthesize.

    ``wave`` is [B, T] and ``masks`` [B, N, F, L]; returns [B, N, T].
    """
    spec = stft_analyze(wave, cfg)
    return stft_synthesize(masks * spec.unsqueeze(1), wave.shape[-1], cfg)


@dataclass(frozen=True)
class SeparatorConfig:
    """Architecture descriptor stored with every checkpoint."""

    n_outputs: int = 6
    hidden: int = 96
    kernel_size: int = 5
    n_blocks: int = 2
    fft_size: int = 512
    window_length: int = 400
    hop_length: int = 160

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.fft_size, self.window_length, self.hop_length)

    def with_outputs(self, n_outputs: int) -> "SeparatorConfig":
        return SeparatorConfig(**{**asdict(self), "n_outputs": n_outputs})


class _Block(nn.Module):
    def __init__(self, channels: int, kernel_size: int, dilation: int):
        super().__init__()
        pad = dilation * (kernel_size - 1) // 2
        self.conv = nn.Conv1d(channels, channels, kernel_size, padding=pad, dilation=dilation)
        self.norm = nn.GroupNorm(1, channels)
        self.act = nn.PReLU(channels)

    def forward(self, x):
        return x + self.act(self.norm(self.conv(x)))


class Separator(nn.Module):
    """Log-magnitude in, N sigmoid masks out, waveforms back via inverse STFT."""

    def __init__(self, config: SeparatorConfig = SeparatorConfig()):
        super().__init__()
        self.config = config
        self.stft = config.stft
        f = self.stft.n_freq
        self.inp = nn.Conv1d(f, config.hidden, 1)
        self.blocks = nn.Sequential(
            *[_Block(config.hidden, config.kernel_size, 2**i) for i in range(config.n_blocks)]
        )
        self.out = nn.Conv1d(config.hidden, config.n_outputs * f, 1)

    @property
    def n_outputs(self) -> int:
        return self.config.n_outputs

    def uniform_init(self):
        """Make every mask exactly 1/N regardless of the input."""
        with torch.no_grad():
            self.out.weight.zero_()
            p = 1.0 / self.n_outputs
            # sigmoid(30) rounds to 1 in float32
            self.out.bias.fill_(30.0 if p == 1 else math.log(p / (1 - p)))
        return self

    def masks(self, spec: torch.Tensor) -> torch.Tensor:
        b, f, frames = spec.shape
        feats = torch.log(spec.abs() + _LOG_EPS)
        feats = feats - feats.mean(dim=(1, 2), keepdim=True)
        h = self.blocks(self.inp(feats))
        return torch.sigmoid(self.out(h)).reshape(b, self.n_outputs, f, frames)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        spec = stft_analyze(wave, self.stft)
        return stft_synthesize(self.masks(spec) * spec.unsqueeze(1), wave.shape[-1], self.stft)

    def get_vector(self) -> torch.Tensor:
        return parameters_to_vector(self.parameters()).detach().clone()

    def set_vector(self, vec: torch.Tensor):
        vector_to_parameters(vec.detach().to(self.out.weight.dtype), self.parameters())
        return self

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def separate(model: Separator, wave: torch.Tensor, role: Role = Role.SOLVER, grad: bool = True) -> SourceEstimates:
    """Run the separator; shuffler calls never carry gradients."""
    role = Role(role)
    grad = grad and role is Role.SOLVER
    with torch.set_grad_enabled(grad and torch.is_grad_enabled()):
        out = model(wave)
    return SourceEstimates(out if grad else out.detach(), origin=role, grad_attached=grad)


def save_checkpoint(path, model: Separator, step: int = 0, role: Optional[Role] = None, extra: Optional[dict] = None,
                    params: Optional[torch.Tensor] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": asdict(model.config),
        "params": (params if params is not None else model.get_vector()).float().cpu(),
        "step": int(step),
        "role": Role(role).value if role is not None else None,
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[Separator, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a separator checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    model = Separator(SeparatorConfig(**payload["arch"]))
    if payload["params"].numel() != model.num_parameters():
        raise ValueError("parameter count does not match the stored architecture")
    model.set_vector(payload["params"])
    return model, payload
