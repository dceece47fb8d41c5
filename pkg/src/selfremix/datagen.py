"""Synthetic speech-like mixtures with ground truth, and on-disk dataset caches.

Speech-like sources are amplitude-modulated harmonic tone complexes with a
gliding fundamental; noise is low-pass filtered Gaussian noise scaled to a
target SNR against the summed speech.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import lfilter

SPLIT_SEED_OFFSETS = {"train": 0, "valid": 1_000_000, "test": 2_000_000}
SPLIT_SEED_SPAN = 1_000_000
MANIFEST_NAME = "manifest.jsonl"

# fundamental-frequency bands (Hz) for the first and second talker
_F0_BANDS = ((90.0, 150.0), (170.0, 260.0))
_TARGET_RMS = 0.05


@dataclass
class MixtureSpec:
    n_speech: int = 2
    snr_noise_db: float = 15.0
    seed: int = 0
    duration_s: float = 2.0
    sample_rate_hz: int = 8000

    def __post_init__(self):
        if self.n_speech not in (1, 2):
            raise ValueError("n_speech must be 1 or 2")
        if self.duration_s <= 0 or self.sample_rate_hz <= 0:
            raise ValueError("duration and sample rate must be positive")

    @property
    def n_sources(self) -> int:
        return self.n_speech + 1

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate_hz))


def _syllable_envelope(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    """Random on/off segments (syllables and pauses) with raised-cosine edges."""
    env = np.zeros(n)
    t = int(rng.uniform(0, 0.2) * sr)
    while t < n:
        length = int(rng.uniform(0.12, 0.45) * sr)
        seg = np.hanning(max(length, 3)) ** 0.5 * rng.uniform(0.5, 1.0)
        env[t : t + length] = seg[: n - t]
        t += length + int(rng.uniform(0.03, 0.25) * sr)
    return env


def _speech_like(rng: np.random.Generator, n: int, sr: int, f0_band) -> np.ndarray:
    t = np.arange(n) / sr
    f0 = rng.uniform(*f0_band)
    # slow glide plus vibrato on the fundamental
    glide = rng.uniform(-0.15, 0.15) * t / t[-1]
    vib = 0.02 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
    inst_f0 = f0 * (1 + glide + vib)
    phase = 2 * np.pi * np.cumsum(inst_f0) / sr
    formant = rng.uniform(400, 1800)
    out = np.zeros(n)
    for h in range(1, int(0.45 * sr / (f0 * 1.2)) + 1):
        fh = h * f0
        weight = np.exp(-0.5 * ((fh - formant) / 900.0) ** 2) / h**0.5
        out += weight * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    return out * _syllable_envelope(rng, n, sr)


def _noise(rng: np.random.Generator, n: int) -> np.ndarray:
    pole = rng.uniform(0.5, 0.9)
    return lfilter([1.0 - pole], [1.0, -pole], rng.standard_normal(n))


def _power(x: np.ndarray) -> float:
    return float(np.mean(x.astype(np.float64) ** 2))


def generate_mixture(spec: MixtureSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(mixture [T], references [K, T])`` as float32; speech first, noise last.

    The mixture is the float32 sum of the returned references.
    """
    rng = np.random.default_rng(spec.seed)
    n, sr = spec.n_samples, spec.sample_rate_hz
    speech = []
    for i in range(spec.n_speech):
        s = _speech_like(rng, n, sr, _F0_BANDS[i])
        while _power(s) < 1e-8:
            s = _speech_like(rng, n, sr, _F0_BANDS[i])
        gain_db = rng.uniform(-2.5, 2.5)
        speech.append(s / np.sqrt(_power(s)) * 10 ** (gain_db / 20))
    noise = _noise(rng, n)
    speech_total = _power(np.sum(speech, axis=0))
    noise *= np.sqrt(speech_total / _power(noise) / 10 ** (spec.snr_noise_db / 10))
    refs = np.stack(speech + [noise])
    refs *= _TARGET_RMS / np.sqrt(_power(refs.sum(0)))
    refs = refs.astype(np.float32)
    return refs.sum(axis=0), refs


def measured_snr_db(references: np.ndarray) -> float:
    """SNR of the summed speech references against the last (noise) reference."""
    return 10 * np.log10(_power(references[:-1].sum(0)) / _power(references[-1]))


def make_mom(x1, x2):
    """Mixture of mixtures."""
    if x1.shape != x2.shape:
        raise ValueError(f"length mismatch: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    return x1 + x2


@dataclass
class SeparationDataset:
    """Mixtures [M, T] with optional references [M, K, T]."""

    mixtures: torch.Tensor
    references: Optional[torch.Tensor] = None
    sample_rate_hz: int = 8000
    records: list = field(default_factory=list)

    def __len__(self):
        return self.mixtures.shape[0]

    def subset(self, idx) -> "SeparationDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        refs = None if self.references is None else self.references[idx]
        recs = [self.records[i] for i in idx.tolist()] if self.records else []
        return SeparationDataset(self.mixtures[idx], refs, self.sample_rate_hz, recs)


def split_seed(split: str, index: int, base_seed: int = 0) -> int:
    if index >= SPLIT_SEED_SPAN:
        raise ValueError("split index exceeds the reserved seed span")
    return base_seed * 3 * SPLIT_SEED_SPAN + SPLIT_SEED_OFFSETS[split] + index


def make_dataset(
    split: str,
    n_mixtures: int,
    base_seed: int = 0,
    n_speech: int = 2,
    duration_s: float = 2.0,
    sample_rate_hz: int = 8000,
    snr_range_db: tuple[float, float] = (10.0, 20.0),
) -> SeparationDataset:
    """Generate a split; splits draw from disjoint seed ranges."""
    mixes, refs, records = [], [], []
    for i in range(n_mixtures):
        seed = split_seed(split, i, base_seed)
        snr = float(np.random.default_rng([seed, 7]).uniform(*snr_range_db))
        spec = MixtureSpec(n_speech, snr, seed, duration_s, sample_rate_hz)
        x, r = generate_mixture(spec)
        mixes.append(x)
        refs.append(r)
        records.append({"id": f"{split}-{i:06d}", "seed": seed, "K": spec.n_sources, "snr_db": snr})
    return SeparationDataset(
        torch.from_numpy(np.stack(mixes)), torch.from_numpy(np.stack(refs)), sample_rate_hz, records
    )


def write_dataset(dataset: SeparationDataset, out_dir) -> Path:
    """Write one float WAV per mixture (channel 0 mixture, then references) and a JSONL manifest."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    with open(out_dir / MANIFEST_NAME, "w") as fh:
        for i in range(len(dataset)):
            rec = dict(dataset.records[i]) if dataset.records else {"id": f"mix-{i:06d}"}
            chans = [dataset.mixtures[i]]
            if dataset.references is not None:
                chans += list(dataset.references[i])
            rel = f"audio/{rec['id']}.wav"
            wavfile.write(out_dir / rel, dataset.sample_rate_hz, torch.stack(chans).T.numpy().astype(np.float32))
            rec.update(path=rel, channels=len(chans), sample_rate_hz=dataset.sample_rate_hz)
            fh.write(json.dumps(rec) + "\n")
    return out_dir / MANIFEST_NAME


def read_dataset(path) -> SeparationDataset:
    """Load a manifest written by ``write_dataset`` (or any manifest of equal-length WAVs).

    Records with ``channels == 1`` carry no references.
    """
    path = Path(path)
    manifest = path / MANIFEST_NAME if path.is_dir() else path
    root = manifest.parent
    mixes, refs, records, rate = [], [], [], None
    with open(manifest) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            sr, data = wavfile.read(root / rec["path"])
            if rate is not None and sr != rate:
                raise ValueError(f"{rec['path']}: sample rate {sr} differs from {rate}")
            rate = sr
            data = np.asarray(data, dtype=np.float32).reshape(data.shape[0], -1).T
            mixes.append(data[0])
            if data.shape[0] > 1:
                refs.append(data[1:])
            records.append(rec)
    if refs and len(refs) != len(mixes):
        raise ValueError("either all or none of the manifest records must carry references")
    return SeparationDataset(
        torch.from_numpy(np.stack(mixes)),
        torch.from_numpy(np.stack(refs)) if refs else None,
        rate or 8000,
        records,
    )


def dataset_summary(ds: SeparationDataset) -> dict:
    return {"n": len(ds), "samples": ds.mixtures.shape[-1], "sample_rate_hz": ds.sample_rate_hz,
            "has_references": ds.references is not None}

