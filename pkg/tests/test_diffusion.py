import math

import numpy as np
import pytest
import torch
from scipy.integrate import quad
from torch import nn

from latentspeech.conformer import ConformerConfig
from latentspeech.diffusion import (
    DurationCodecConfig,
    NoiseSchedule,
    ScoreModel,
    ScoreModelConfig,
    Stack,
    alpha_bar,
    dequantize_durations,
    dsm_loss,
    fit_codec,
    ode_integrate,
    perturb,
    quantize_durations,
    sample_batch,
    sample_em,
    sample_ode,
    score_estimate,
    speaker_embed,
    synthesize,
    true_transition_score,
)
from latentspeech.autoencoder import VAEConfig, VAEModel

from conftest import GaussianScore, directional_fd

SCHED = NoiseSchedule()


def t_for_alpha_bar(target, s=SCHED):
    # solve beta_min t + (beta_max - beta_min) t^2 / 2 = -log(target)
    a, b, c = 0.5 * (s.beta_max - s.beta_min), s.beta_min, math.log(target)
    return (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)


def tiny_score_model(speaker_dim=0, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    cc = ConformerConfig(layers=1, heads=2, head_dim=4, kernel=3)
    cfg = ScoreModelConfig(latent_dim=2, vocab_size=4, time_dim=8, phoneme_encoder=cc, estimator=cc,
                           speaker_dim=speaker_dim, speaker_encoder=cc)
    return ScoreModel(cfg, SCHED).to(dtype).eval()


# --- duration codec ------------------------------------------------------------------

def test_dequantize_examples():
    cfg = DurationCodecConfig(1.0, 0.0)
    assert float(dequantize_durations(1, 0.5, cfg)) == pytest.approx(math.log(1.5))
    assert float(dequantize_durations(1, 0.0, cfg)) == pytest.approx(math.log(2))
    l = dequantize_durations(torch.arange(1, 50), torch.full((49,), 0.3), cfg)
    assert torch.all(torch.diff(l) > 0)


def test_quantize_examples():
    cfg = DurationCodecConfig(1.0, 0.0)
    assert quantize_durations(np.array([math.log(1.5)]), cfg).tolist() == [1]
    assert quantize_durations(np.array([-50.0, -1e6]), cfg).tolist() == [1, 1]


@pytest.mark.parametrize("c0,c1", [(1.0, 0.0), (1.0, -1.2), (0.5, 0.7)])
def test_round_trip_all_durations(c0, c1, rng):
    cfg = DurationCodecConfig(c0, c1)
    d = np.repeat(np.arange(1, 101), 100)
    u = rng.uniform(0, 1, size=d.size)
    assert np.array_equal(quantize_durations(dequantize_durations(d, u, cfg), cfg), d)


def test_fit_codec_centres_log_durations():
    durs = [np.array([1, 2, 3]), np.array([5, 4])]
    cfg = fit_codec(durs)
    l = dequantize_durations(np.concatenate(durs), 0.5, cfg)
    assert float(l.mean()) == pytest.approx(0.0, abs=1e-12)


# --- schedule and transition kernel -------------------------------------------------

def test_alpha_bar_endpoints():
    assert float(alpha_bar(0.0, SCHED)) == 1.0
    assert float(alpha_bar(1.0, SCHED)) == pytest.approx(math.exp(-10.05), rel=1e-12)
    assert float(alpha_bar(1.0, SCHED)) == pytest.approx(4.32e-5, rel=1e-2)
    with pytest.raises(ValueError):
        alpha_bar(1.5, SCHED)
    with pytest.raises(ValueError):
        alpha_bar(torch.tensor([-0.1]), SCHED)


def test_alpha_bar_matches_quadrature(rng):
    for t in rng.uniform(0, 1, size=100):
        integral, _ = quad(SCHED.beta, 0.0, t, epsabs=1e-13, epsrel=1e-13)
        assert abs(float(alpha_bar(t, SCHED)) - math.exp(-integral)) < 1e-10


def test_perturb_examples():
    x0 = torch.randn(3, 4, dtype=torch.float64)
    assert torch.allclose(perturb(x0, 0.0, torch.randn(3, 4, dtype=torch.float64), SCHED), x0)
    t = t_for_alpha_bar(0.25)
    assert torch.allclose(perturb(x0, t, torch.zeros(3, 4, dtype=torch.float64), SCHED), 0.5 * x0)


@pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
def test_perturb_variance_monte_carlo(t):
    g = torch.Generator().manual_seed(0)
    n = 100_000
    x0 = torch.full((n, 1), 0.7, dtype=torch.float64)
    xt = perturb(x0, t, torch.randn(n, 1, generator=g, dtype=torch.float64), SCHED)
    var = 1 - float(alpha_bar(t, SCHED))
    se = var * math.sqrt(2 / (n - 1))
    assert abs(float(xt.var()) - var) < 3 * se


def test_true_score_examples():
    x0 = torch.randn(2, 3, dtype=torch.float64)
    t = 0.4
    xt = math.sqrt(float(alpha_bar(t, SCHED))) * x0
    assert torch.allclose(true_transition_score(xt, x0, t, SCHED), torch.zeros_like(x0))
    t = t_for_alpha_bar(0.75)
    s = true_transition_score(torch.ones(1, 1, dtype=torch.float64), torch.zeros(1, 1, dtype=torch.float64), t, SCHED)
    assert float(s) == pytest.approx(-4.0, rel=1e-9)
    with pytest.raises(ValueError, match="degenerate transition"):
        true_transition_score(xt, x0, 0.0, SCHED)


def test_true_score_is_gradient_of_log_density(rng):
    t = 0.35
    ab = float(alpha_bar(t, SCHED))
    x0 = rng.normal(size=(2, 3))
    xt = rng.normal(size=(2, 3))

    def logp(x):
        return -0.5 * np.sum((x - math.sqrt(ab) * x0) ** 2) / (1 - ab)

    h = 1e-5
    num = np.zeros_like(xt)
    for idx in np.ndindex(xt.shape):
        e = np.zeros_like(xt)
        e[idx] = h
        num[idx] = (logp(xt + e) - logp(xt - e)) / (2 * h)
    got = true_transition_score(torch.tensor(xt), torch.tensor(x0), t, SCHED).numpy()
    assert np.linalg.norm(got - num) / np.linalg.norm(num) < 1e-6


# --- denoising score matching ----------------------------------------------------------

class TrueScoreStub(nn.Module):
    def __init__(self, x0):
        super().__init__()
        self.x0 = x0
        self.p = nn.Parameter(torch.zeros(()))

    def forward(self, x_t, t, w, pad_mask=None, spk=None):
        return true_transition_score(x_t, self.x0, t, SCHED)


class ZeroStub(nn.Module):
    def forward(self, x_t, t, w, pad_mask=None, spk=None):
        return torch.zeros_like(x_t)


def test_dsm_zero_at_true_score():
    x0 = torch.randn(1, 3, 3, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    loss = dsm_loss(TrueScoreStub(x0), [(x0[0], [0, 1, 2])], SCHED, g)
    assert float(loss) == pytest.approx(0.0, abs=1e-18)


def test_dsm_zero_model_expectation():
    M, C, B = 3, 4, 4000
    g = torch.Generator().manual_seed(0)
    batch = [(torch.randn(M, C, dtype=torch.float64), [0, 1, 2]) for _ in range(B)]
    loss = float(dsm_loss(ZeroStub(), batch, SCHED, g))
    # per item lambda * |score|^2 = |eps|^2, a chi-square with M*C degrees of freedom
    se = math.sqrt(2 * M * C / B)
    assert abs(loss - M * C) < 3 * se


def test_dsm_gradient_matches_finite_differences():
    model = tiny_score_model()
    g = torch.Generator().manual_seed(2)
    batch = [(torch.randn(2, 3, generator=g, dtype=torch.float64), [1, 3])]
    t = torch.tensor([0.37], dtype=torch.float64)
    eps = torch.randn(1, 2, 3, generator=g, dtype=torch.float64)
    f = lambda: dsm_loss(model, batch, SCHED, t=t, eps=eps)
    params = list(model.parameters())
    grads = torch.autograd.grad(f(), params)
    for _ in range(3):
        v = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
        analytic = sum(float((gr * vi).sum()) for gr, vi in zip(grads, v))
        numeric = directional_fd(f, params, v)
        assert abs(analytic - numeric) / abs(numeric) < 1e-3


# --- score network --------------------------------------------------------------------

def test_score_estimate_contract(rng):
    model = tiny_score_model()
    for M in (1, 3, 6):
        x = torch.randn(M, 3, dtype=torch.float64)
        w = rng.integers(0, 4, size=M)
        out = score_estimate(model, x, 0.3, w)
        assert out.shape == (M, 3)
        assert torch.equal(out, score_estimate(model, x, 0.3, w))
    x = torch.randn(3, 3, dtype=torch.float64)
    assert not torch.allclose(score_estimate(model, x, 0.3, [0, 1, 2]), score_estimate(model, x, 0.3, [3, 1, 2]))
    with pytest.raises(ValueError):
        score_estimate(model, x, 0.3, [0, 1])


def test_speaker_embedding():
    model = tiny_score_model(speaker_dim=5)
    row = torch.randn(1, 3, dtype=torch.float64)
    expect = model.speaker_proj(model.speaker_encoder(row[None])[0, 0])
    assert torch.allclose(speaker_embed(model, row), expect)
    for M in (1, 4, 9):
        assert speaker_embed(model, torch.randn(M, 3, dtype=torch.float64)).shape == (5,)
    lin = nn.Linear(3, model.cfg.speaker_encoder.d_model).double()

    class Pointwise(nn.Module):
        def forward(self, x, pad_mask=None):
            return lin(x)

    model.speaker_encoder = Pointwise()
    x = torch.randn(6, 3, dtype=torch.float64)
    assert torch.allclose(speaker_embed(model, x), speaker_embed(model, x[torch.randperm(6)]))


# --- samplers with analytic scores ----------------------------------------------------

def test_em_standard_normal_oracle():
    model = GaussianScore(0.0, 1.0, state_dim=2)
    g = torch.Generator().manual_seed(0)
    x = sample_em(model, [0], 100, SCHED, g, num_samples=10_000).double()
    assert abs(float(x.mean())) < 0.03
    assert abs(float(x.var()) - 1) < 0.05


def test_em_degenerate_data_oracle():
    model = GaussianScore(1.5, 0.0, state_dim=2)
    g = torch.Generator().manual_seed(0)
    x = sample_em(model, [0, 1], 100, SCHED, g, num_samples=2000)
    assert abs(float(x.mean()) - 1.5) < 0.01
    assert float(x.std()) < 0.05


def test_em_seeded_determinism():
    model = GaussianScore(0.3, 0.5)
    a = sample_em(model, [0, 1], 20, SCHED, torch.Generator().manual_seed(4))
    b = sample_em(model, [0, 1], 20, SCHED, torch.Generator().manual_seed(4))
    assert torch.equal(a, b)


def test_ode_gaussian_pushforward():
    model = GaussianScore(0.5, 0.8, state_dim=1)
    x = sample_ode(model, [0], 200, SCHED, torch.Generator().manual_seed(0), num_samples=10_000).double()
    assert abs(float(x.mean()) - 0.5) < 0.03
    assert abs(float(x.var()) - 0.64) < 0.05 * 0.64


def test_ode_round_trip():
    model = GaussianScore(0.2, 0.6, state_dim=3)
    fn = lambda x, t: model(x, t, None)
    x0 = torch.randn(1, 4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    x1 = ode_integrate(fn, x0, 500, SCHED, 1e-3, 1.0)
    back = ode_integrate(fn, x1, 500, SCHED, 1.0, 1e-3)
    assert float(((back - x0) ** 2).mean().sqrt()) < 1e-2


def test_zero_steps_rejected():
    model = GaussianScore()
    with pytest.raises(ValueError):
        sample_ode(model, [0], 0, SCHED)
    with pytest.raises(ValueError):
        sample_em(model, [0], 0, SCHED)


def test_quantize_rejects_non_finite_and_clamps():
    from latentspeech.diffusion import MAX_DURATION
    from latentspeech.errors import NumericalError

    with pytest.raises(NumericalError):
        quantize_durations(np.array([0.1, np.nan]), DurationCodecConfig())
    assert quantize_durations(np.array([1e6]), DurationCodecConfig()).tolist() == [MAX_DURATION]


def test_batched_sampler_matches_single_chains():
    model = GaussianScore(0.0, 1.0, state_dim=2)
    out = sample_batch(model, [[0, 1, 2], [1]], 10, SCHED, torch.Generator().manual_seed(0))
    assert [tuple(x.shape) for x in out] == [(3, 2), (1, 2)]


# --- synthesis --------------------------------------------------------------------------

def test_synthesize_frame_count_is_duration_sum():
    torch.manual_seed(0)
    cc = ConformerConfig(layers=1, heads=2, head_dim=4, kernel=3)
    vae = VAEModel(6, VAEConfig(latent_dim=2, encoder=cc, decoder=cc)).eval()
    score = GaussianScore(0.0, 1.0, state_dim=3).float()
    stack = Stack(vae=vae, score=score, codec=DurationCodecConfig(1.0, -1.0))
    for seed in range(5):
        mel, a, x0 = synthesize(stack, [0, 2, 1, 3], steps=10, seed=seed)
        assert mel.num_frames == int(a.durations.sum()) == a.num_frames
        assert len(a) == 4 and x0.shape == (4, 3)
