import math

import pytest
import torch

from selfremix.core_signals import Role
from selfremix.metrics import si_sdr
from selfremix.separator import (
    Separator,
    SeparatorConfig,
    StftConfig,
    apply_masks,
    load_checkpoint,
    save_checkpoint,
    separate,
    stft_analyze,
    stft_synthesize,
)

SMALL = SeparatorConfig(n_outputs=3, hidden=8, kernel_size=3, n_blocks=1)
MICRO = SeparatorConfig(n_outputs=2, hidden=4, kernel_size=3, n_blocks=1, fft_size=16, window_length=16, hop_length=8)


def _tone(freq, n=8000, sr=8000, phase=0.0, dtype=torch.float32):
    t = torch.arange(n, dtype=torch.float64) / sr
    return torch.sin(2 * math.pi * freq * t + phase).to(dtype)


def test_stft_of_zeros_is_zero():
    assert torch.count_nonzero(stft_analyze(torch.zeros(2, 4000))) == 0


def test_stft_tone_energy_concentrated():
    spec = stft_analyze(_tone(1000.0)[None])[0]
    energy = spec.abs() ** 2
    k = round(1000 * 512 / 8000)
    assert float(energy[k - 1 : k + 2].sum() / energy.sum()) >= 0.9


def test_stft_round_trip(rng):
    x = torch.from_numpy(rng.standard_normal((3, 8000))).float()
    y = stft_synthesize(stft_analyze(x), 8000)
    assert float((y - x).norm() / x.norm()) < 1e-4


def test_stft_short_input_rejected():
    with pytest.raises(ValueError):
        stft_analyze(torch.zeros(1, 100))
    with pytest.raises(ValueError):
        StftConfig(512, 400, 500)


def test_uniform_masks_split_mixture_evenly(rng):
    x = torch.from_numpy(rng.standard_normal((2, 4000))).float()
    model = Separator(SMALL).uniform_init()
    out = model(x)
    assert out.shape == (2, 3, 4000)
    assert torch.allclose(out, x[:, None].expand_as(out) / 3, atol=1e-4)
    single = Separator(SMALL.with_outputs(1)).uniform_init()
    assert torch.allclose(single(x)[:, 0], x, atol=1e-4)


def test_oracle_binary_masks_separate_tones():
    a, b = _tone(500.0), 0.7 * _tone(2100.0, phase=0.4)
    x = (a + b)[None]
    sa, sb = stft_analyze(a[None])[0], stft_analyze(b[None])[0]
    ma = (sa.abs() >= sb.abs()).float()
    est = apply_masks(x, torch.stack([ma, 1 - ma])[None])[0]
    assert float(si_sdr(a, est[0])) >= 30
    assert float(si_sdr(b, est[1])) >= 30


def test_masks_bounded(rng):
    model = Separator(SMALL)
    x = torch.from_numpy(rng.standard_normal((2, 4000))).float()
    with torch.no_grad():
        m = model.masks(stft_analyze(x))
    assert float(m.min()) >= 0 and float(m.max()) <= 1


def test_batch_equivariance(rng):
    torch.manual_seed(0)
    model = Separator(SMALL)
    x = torch.from_numpy(rng.standard_normal((4, 4000))).float()
    perm = [2, 0, 3, 1]
    assert torch.allclose(model(x[perm]), model(x)[perm], atol=1e-6)


def test_gradients_match_finite_differences(rng):
    torch.manual_seed(1)
    model = Separator(MICRO).double()
    x = torch.from_numpy(rng.standard_normal((1, 64))).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda w: model(w), (x,), eps=1e-6, atol=1e-5, rtol=1e-4)

    x = x.detach()
    w = model.out.weight
    (model(x) ** 2).sum().backward()
    analytic = w.grad.flatten()[:5].clone()
    for i in range(5):
        with torch.no_grad():
            w.view(-1)[i] += 1e-6
            up = float((model(x) ** 2).sum())
            w.view(-1)[i] -= 2e-6
            down = float((model(x) ** 2).sum())
            w.view(-1)[i] += 1e-6
        assert (up - down) / 2e-6 == pytest.approx(float(analytic[i]), rel=1e-4, abs=1e-9)


def test_separate_roles(rng):
    model = Separator(SMALL)
    x = torch.from_numpy(rng.standard_normal((1, 4000))).float()
    sh = separate(model, x, role=Role.SHUFFLER)
    assert not sh.sources.requires_grad and sh.origin is Role.SHUFFLER
    so = separate(model, x, role=Role.SOLVER)
    assert so.sources.requires_grad and so.grad_attached


def test_vector_round_trip():
    torch.manual_seed(2)
    a, b = Separator(SMALL), Separator(SMALL)
    b.set_vector(a.get_vector())
    assert torch.equal(a.get_vector(), b.get_vector())
    assert a.get_vector().numel() == a.num_parameters()


def test_checkpoint_round_trip(tmp_path, rng):
    torch.manual_seed(3)
    model = Separator(SMALL)
    path = save_checkpoint(tmp_path / "m.pt", model, step=17, role=Role.SOLVER, extra={"note": "x"})
    loaded, payload = load_checkpoint(path)
    x = torch.from_numpy(rng.standard_normal((1, 4000))).float()
    assert torch.equal(loaded(x), model(x))
    assert payload["step"] == 17 and payload["role"] == "solver" and payload["extra"] == {"note": "x"}
    assert loaded.config == SMALL


def test_checkpoint_rejects_foreign_files(tmp_path):
    torch.save({"format": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.pt")


def test_zero_input_gives_zero_outputs():
    torch.manual_seed(4)
    out = separate(Separator(SMALL), torch.zeros(2, 4000)).sources
    assert torch.count_nonzero(out) == 0


def test_masked_magnitudes_never_exceed_mixture(rng):
    model = Separator(SMALL)
    x = torch.from_numpy(rng.standard_normal((1, 4000))).float()
    with torch.no_grad():
        spec = stft_analyze(x)
        masked = (model.masks(spec) * spec.unsqueeze(1)).abs()
    assert bool((masked <= spec.abs().unsqueeze(1) + 1e-7).all())
