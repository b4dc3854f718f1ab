"""Phoneme-rate variational autoencoder.

The encoder runs over all N frames and keeps only the rows at the alignment spikes,
so the latent has one row per phoneme. The decoder scatters latent rows back onto
their spike frames (zeros elsewhere) and decodes a full spectrogram. The likelihood
is a factorized Laplace density with fixed scale ``laplace_b``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .conformer import Conformer, ConformerConfig, lengths_to_pad_mask, pad_stack
from .training import OptimConfig, batch_indices, check_finite, clip_and_step, make_optimizer
from .types import Alignment, InvalidAlignment, mel_values

log = logging.getLogger(__name__)


@dataclass
class PosteriorParams:
    mu: Tensor
    log_sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise ValueError("mu and log_sigma shapes differ")

    @property
    def sigma(self) -> Tensor:
        return self.log_sigma.exp()


@dataclass
class VAEConfig:
    latent_dim: int = 8
    laplace_b: float = 0.05
    encoder: ConformerConfig = field(default_factory=lambda: ConformerConfig(layers=2, heads=2, head_dim=16, kernel=13))
    decoder: ConformerConfig = field(default_factory=lambda: ConformerConfig(layers=2, heads=2, head_dim=16, kernel=13))
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=2e-3, steps=1500, batch_size=16))


def _spikes(a) -> np.ndarray:
    return np.asarray(getattr(a, "spikes", a), dtype=np.int64)


def gather_rows(e: Tensor, a) -> Tensor:
    """Rows of e at 1-based spike frames."""
    idx = torch.as_tensor(_spikes(a) - 1, device=e.device)
    return e.index_select(-2, idx)


def upsample(z0: Tensor, a, n_frames: int) -> Tensor:
    """Scatter z0 rows onto their spike frames; every other frame is zero."""
    spikes = _spikes(a)
    if z0.shape[-2] != spikes.size:
        raise ValueError(f"latent has {z0.shape[-2]} rows but alignment has {spikes.size} spikes")
    if spikes[-1] > n_frames:
        raise InvalidAlignment("alignment exceeds frames")
    out = z0.new_zeros(*z0.shape[:-2], n_frames, z0.shape[-1])
    out[..., spikes - 1, :] = z0
    return out


def sample_posterior(p: PosteriorParams, noise: Tensor) -> Tensor:
    return p.mu + p.log_sigma.exp() * noise


def kl_to_standard_normal(p: PosteriorParams) -> Tensor:
    return 0.5 * (p.mu ** 2 + torch.exp(2 * p.log_sigma) - 1 - 2 * p.log_sigma).sum()


def laplace_nll(y, y_hat, b: float) -> Tensor:
    if b <= 0:
        raise ValueError("Laplace scale b must be positive")
    y = torch.as_tensor(y)
    y_hat = torch.as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError("shape mismatch")
    return (math.log(2 * b) + (y - y_hat).abs() / b).sum()


class VAEModel(nn.Module):
    def __init__(self, n_mels: int, cfg: VAEConfig):
        super().__init__()
        self.cfg = cfg
        self.n_mels = n_mels
        self.latent_dim = cfg.latent_dim
        self.laplace_b = cfg.laplace_b
        self.encoder = Conformer(n_mels, cfg.encoder)
        self.posterior = nn.Linear(cfg.encoder.d_model, 2 * cfg.latent_dim)
        self.decoder = Conformer(cfg.latent_dim, cfg.decoder)
        self.mel_proj = nn.Linear(cfg.decoder.d_model, n_mels)
        # attached for the adversarial phase (see adversarial.RefinerStack)
        self.refiner: Optional[nn.Module] = None

    def _dtype(self):
        return next(self.parameters()).dtype

    # batched paths -------------------------------------------------------
    def encode_batch(self, mel: Tensor, lengths: Sequence[int], spikes: List[np.ndarray]):
        e = self.encoder(mel, lengths_to_pad_mask(lengths, mel.shape[1]))
        m_max = max(len(s) for s in spikes)
        idx = torch.zeros(len(spikes), m_max, dtype=torch.long)
        for b, s in enumerate(spikes):
            idx[b, :len(s)] = torch.as_tensor(s - 1)
        e_tilde = e.gather(1, idx[..., None].expand(-1, -1, e.shape[-1]))
        mu, log_sigma = self.posterior(e_tilde).chunk(2, dim=-1)
        return mu, log_sigma

    def decode_batch(self, z0: Tensor, lengths: Sequence[int], spikes: List[np.ndarray]):
        """Returns (y_tilde, y_hat, h); y_hat includes the refiner residual when attached."""
        B, t_max = z0.shape[0], max(int(n) for n in lengths)
        z_up = z0.new_zeros(B, t_max, z0.shape[-1])
        for b, s in enumerate(spikes):
            z_up[b, torch.as_tensor(s - 1)] = z0[b, :len(s)]
        h = self.decoder(z_up, lengths_to_pad_mask(lengths, t_max))
        y_tilde = self.mel_proj(h)
        y_hat = y_tilde if self.refiner is None else self.refiner(h, y_tilde)
        return y_tilde, y_hat, h

    # single-utterance operations ----------------------------------------
    def encode(self, y, a) -> PosteriorParams:
        y = torch.as_tensor(mel_values(y), dtype=self._dtype())
        spikes = _spikes(a)
        if spikes[-1] > y.shape[0]:
            raise InvalidAlignment("alignment exceeds frames")
        e = self.encoder(y[None])[0]
        mu, log_sigma = self.posterior(gather_rows(e, spikes)).chunk(2, dim=-1)
        return PosteriorParams(mu, log_sigma)

    def decode(self, z0: Tensor, a, n_frames: int, refine: bool = True) -> Tensor:
        z_up = upsample(z0, a, n_frames)
        h = self.decoder(z_up[None])[0]
        y_tilde = self.mel_proj(h)
        if refine and self.refiner is not None:
            return self.refiner(h[None], y_tilde[None])[0]
        return y_tilde


def elbo_loss(model: VAEModel, y, a, noise: Tensor) -> Tensor:
    """Negative ELBO for one utterance: KL(q || N(0, I)) + Laplace NLL of the reconstruction."""
    y = torch.as_tensor(mel_values(y), dtype=model._dtype())
    post = model.encode(y, a)
    z0 = sample_posterior(post, noise)
    y_hat = model.decode(z0, a, y.shape[0])
    return kl_to_standard_normal(post) + laplace_nll(y, y_hat, model.laplace_b)


def elbo_loss_batch(model: VAEModel, mel: Tensor, lengths, spikes, generator=None, use_refiner=True):
    """Per-utterance negative ELBO (B,), plus the reconstruction used."""
    mu, log_sigma = model.encode_batch(mel, lengths, spikes)
    noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    z0 = mu + log_sigma.exp() * noise
    y_tilde, y_hat, _ = model.decode_batch(z0, lengths, spikes)
    recon = y_hat if use_refiner else y_tilde
    m_mask = lengths_to_pad_mask([len(s) for s in spikes], mu.shape[1])
    t_mask = lengths_to_pad_mask(lengths, mel.shape[1])
    kl_cells = 0.5 * (mu ** 2 + torch.exp(2 * log_sigma) - 1 - 2 * log_sigma)
    kl = kl_cells.masked_fill(m_mask[..., None], 0.0).sum(dim=(1, 2))
    nll_cells = math.log(2 * model.laplace_b) + (mel - recon).abs() / model.laplace_b
    nll = nll_cells.masked_fill(t_mask[..., None], 0.0).sum(dim=(1, 2))
    return kl + nll, recon


def align_corpus(aligner, corpus) -> List[Alignment]:
    return [aligner.align(it.mel.values, it.phonemes) for it in corpus]


def train_vae(corpus, alignments: List[Alignment], config: VAEConfig, history: Optional[list] = None,
              model: Optional[VAEModel] = None) -> VAEModel:
    oc = config.optim
    torch.manual_seed(oc.seed)
    rng = np.random.default_rng(oc.seed)
    gen = torch.Generator().manual_seed(oc.seed)
    if model is None:
        model = VAEModel(corpus[0].mel.num_bins, config)
    opt = make_optimizer(model.parameters(), oc)
    mels = [torch.as_tensor(it.mel.values, dtype=torch.float32) for it in corpus]
    spikes = [al.spikes for al in alignments]
    model.train()
    for step, idx in zip(range(oc.steps), batch_indices(rng, len(mels), oc.batch_size)):
        lengths = [mels[i].shape[0] for i in idx]
        loss_b, _ = elbo_loss_batch(model, pad_stack([mels[i] for i in idx]), lengths, [spikes[i] for i in idx], gen)
        loss = loss_b.mean()
        value = check_finite(loss, "vae", step)
        opt.zero_grad()
        loss.backward()
        clip_and_step(opt, list(model.parameters()), oc.grad_clip)
        if history is not None:
            history.append({"step": step, "elbo": value})
        if step % 100 == 0:
            log.info("vae step %d neg-elbo %.2f", step, value)
    model.eval()
    return model


@torch.no_grad()
def reconstruct(model: VAEModel, y, a, refine: bool = True) -> np.ndarray:
    """Decode the posterior mean back to a spectrogram."""
    model.eval()
    post = model.encode(y, a)
    n = np.asarray(mel_values(y)).shape[0]
    return model.decode(post.mu, a, n, refine=refine).numpy()
