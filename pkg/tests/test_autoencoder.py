import math

import numpy as np
import pytest
import torch
from torch import nn

from latentspeech.autoencoder import (
    PosteriorParams,
    VAEConfig,
    VAEModel,
    elbo_loss,
    elbo_loss_batch,
    gather_rows,
    kl_to_standard_normal,
    laplace_nll,
    sample_posterior,
    train_vae,
    upsample,
)
from latentspeech.conformer import ConformerConfig
from latentspeech.data import SynthCorpusConfig, gen_corpus
from latentspeech.training import OptimConfig
from latentspeech.types import Alignment, InvalidAlignment

from conftest import directional_fd


def tiny_vae(latent=3, n_mels=5, b=0.05, dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    cc = ConformerConfig(layers=1, heads=2, head_dim=4, kernel=3)
    cfg = VAEConfig(latent_dim=latent, laplace_b=b, encoder=cc, decoder=cc)
    return VAEModel(n_mels, cfg).to(dtype).eval()


class Pointwise(nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, x, pad_mask=None):
        return self.fn(x)


def test_gather_picks_spike_rows():
    e = torch.arange(12.0).reshape(4, 3)
    assert torch.equal(gather_rows(e, [1, 3]), e[[0, 2]])


def test_encode_with_identity_stub():
    model = tiny_vae(latent=2, n_mels=4)
    model.encoder = Pointwise(lambda x: x)
    model.posterior = nn.Identity()
    y = torch.randn(5, 4, dtype=torch.float64)
    post = model.encode(y, Alignment([1, 3]))
    assert torch.equal(post.mu, y[[0, 2], :2])
    assert torch.equal(post.log_sigma, y[[0, 2], 2:])


def test_encode_shapes_independent_of_frames():
    model = tiny_vae()
    for N in (4, 9, 15):
        post = model.encode(torch.randn(N, 5, dtype=torch.float64), Alignment([2, 4]))
        assert post.mu.shape == post.log_sigma.shape == (2, 3)


def test_encode_alignment_beyond_frames():
    with pytest.raises(InvalidAlignment, match="alignment exceeds frames"):
        tiny_vae().encode(torch.randn(3, 5, dtype=torch.float64), Alignment([2, 4]))


def test_pointwise_encoder_ignores_ungathered_frames():
    model = tiny_vae()
    lin = nn.Linear(5, model.cfg.encoder.d_model).double()
    model.encoder = Pointwise(lin)
    y = torch.randn(8, 5, dtype=torch.float64)
    a = Alignment([2, 5, 8])
    y2 = y.clone()
    others = [0, 2, 3, 5, 6]
    y2[others] = y[others[::-1]]
    assert torch.equal(model.encode(y, a).mu, model.encode(y2, a).mu)


def test_sample_posterior_examples():
    mu = torch.randn(3, 2)
    p = PosteriorParams(mu, torch.randn(3, 2))
    assert torch.equal(sample_posterior(p, torch.zeros(3, 2)), mu)
    noise = torch.randn(3, 2)
    assert torch.allclose(sample_posterior(PosteriorParams(mu, torch.zeros(3, 2)), noise), mu + noise)


def test_sample_posterior_monte_carlo():
    g = torch.Generator().manual_seed(0)
    mu = torch.tensor([[0.3, -1.2]], dtype=torch.float64)
    log_sigma = torch.tensor([[math.log(0.5), math.log(2.0)]], dtype=torch.float64)
    n = 100_000
    z = sample_posterior(PosteriorParams(mu, log_sigma), torch.randn(n, 1, 2, generator=g, dtype=torch.float64))[:, 0]
    sigma = log_sigma.exp()[0]
    se_mean = sigma / math.sqrt(n)
    assert torch.all((z.mean(0) - mu[0]).abs() < 3 * se_mean)
    se_std = sigma / math.sqrt(2 * (n - 1))
    assert torch.all((z.std(0) - sigma).abs() < 3 * se_std)


def test_kl_examples(rng):
    assert float(kl_to_standard_normal(PosteriorParams(torch.zeros(2, 3), torch.zeros(2, 3)))) == 0.0
    one = PosteriorParams(torch.ones(1, 1), torch.zeros(1, 1))
    assert float(kl_to_standard_normal(one)) == pytest.approx(0.5)
    for _ in range(1000):
        p = PosteriorParams(torch.tensor(rng.normal(size=(2, 2)) * 3), torch.tensor(rng.normal(size=(2, 2)) * 2))
        assert float(kl_to_standard_normal(p)) >= 0


def test_kl_matches_closed_form_gaussian():
    mu, sigma = 0.7, 1.8
    expect = math.log(1 / sigma) + (sigma ** 2 + mu ** 2) / 2 - 0.5
    got = kl_to_standard_normal(PosteriorParams(torch.tensor([[mu]]), torch.tensor([[math.log(sigma)]])))
    assert float(got) == pytest.approx(expect, rel=1e-6)


def test_upsample_examples():
    z = torch.tensor([[1.0, 2.0]])
    out = upsample(z, Alignment([2]), 3)
    assert torch.equal(out, torch.tensor([[0.0, 0.0], [1.0, 2.0], [0.0, 0.0]]))
    z = torch.randn(3, 4)
    a = Alignment([2, 3, 7])
    up = upsample(z, a, 9)
    assert torch.equal(gather_rows(up, a), z)
    assert int((up.abs().sum(1) > 0).sum()) <= 3
    with pytest.raises(ValueError):
        upsample(torch.randn(2, 4), a, 9)
    with pytest.raises(InvalidAlignment):
        upsample(z, a, 6)


def test_decode_shape_and_determinism(rng):
    model = tiny_vae()
    for _ in range(5):
        M = int(rng.integers(1, 5))
        a = Alignment.from_durations(rng.integers(1, 4, size=M))
        N = a.num_frames + int(rng.integers(0, 3))
        z = torch.randn(M, 3, dtype=torch.float64)
        y1 = model.decode(z, a, N)
        assert y1.shape == (N, 5)
        assert torch.equal(y1, model.decode(z, a, N))


def test_laplace_examples():
    y = torch.randn(4, 3)
    assert float(laplace_nll(y, y, 0.5)) == pytest.approx(0.0, abs=1e-12)
    assert float(laplace_nll(torch.ones(1, 1), torch.zeros(1, 1), 1.0)) == pytest.approx(math.log(2) + 1)
    with pytest.raises(ValueError):
        laplace_nll(y, y, 0.0)
    base = torch.zeros(1, 3)
    vals = [float(laplace_nll(base, torch.tensor([[0.0, d, 0.0]]), 0.3)) for d in (0.0, 0.1, 0.5, 2.0)]
    assert vals == sorted(vals) and len(set(vals)) == 4


def test_perfect_decoder_leaves_only_kl():
    model = tiny_vae(b=0.5)
    y = torch.randn(6, 5, dtype=torch.float64)
    a = Alignment([2, 6])
    model.decode = lambda z0, a, n, refine=True: y
    noise = torch.randn(2, 3, dtype=torch.float64)
    loss = elbo_loss(model, y, a, noise)
    kl = kl_to_standard_normal(model.encode(y, a))
    assert float(loss.detach()) == pytest.approx(float(kl.detach()), rel=1e-12)


def test_batched_elbo_matches_single():
    model = tiny_vae()
    ys = [torch.randn(n, 5, dtype=torch.float64) for n in (5, 8)]
    spikes = [np.array([2, 5]), np.array([1, 4, 8])]
    g1 = torch.Generator().manual_seed(3)
    batch, _ = elbo_loss_batch(model, torch.nn.utils.rnn.pad_sequence(ys, batch_first=True), [5, 8], spikes, g1)
    g2 = torch.Generator().manual_seed(3)
    noise = torch.randn(2, 3, 3, generator=g2, dtype=torch.float64)
    for b in range(2):
        single = elbo_loss(model, ys[b], Alignment(spikes[b]), noise[b, :len(spikes[b])])
        assert float(batch[b].detach()) == pytest.approx(float(single.detach()), rel=1e-9)


def test_elbo_gradient_matches_finite_differences():
    # b is large so the |y - y_hat| kinks stay far from the evaluation point
    model = tiny_vae(b=0.5)
    g = torch.Generator().manual_seed(1)
    y = torch.randn(5, 5, generator=g, dtype=torch.float64) + 3.0
    a = Alignment([2, 5])
    noise = torch.randn(2, 3, generator=g, dtype=torch.float64)
    params = list(model.parameters())
    loss = elbo_loss(model, y, a, noise)
    grads = torch.autograd.grad(loss, params)
    for k in range(3):
        v = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
        analytic = sum(float((gr * vi).sum()) for gr, vi in zip(grads, v))
        numeric = directional_fd(lambda: elbo_loss(model, y, a, noise), params, v)
        assert abs(analytic - numeric) / abs(numeric) < 1e-3


def test_elbo_decreases_on_single_item():
    corpus = gen_corpus(SynthCorpusConfig(num_utterances=1, seed=3))
    cc = ConformerConfig(layers=1, heads=2, head_dim=8, kernel=5)
    cfg = VAEConfig(encoder=cc, decoder=cc, optim=OptimConfig(lr=2e-3, steps=60, batch_size=1))
    hist = []
    train_vae(corpus, [corpus[0].true_alignment], cfg, hist)
    first = np.mean([h["elbo"] for h in hist[:5]])
    last = np.mean([h["elbo"] for h in hist[-5:]])
    assert last < first
