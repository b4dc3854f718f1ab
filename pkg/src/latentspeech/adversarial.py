"""Adversarial refinement of the spectrogram decoder.

After ELBO training the decoder gains a freshly initialized residual branch: a stack of
spectral-normalized 2D convolutions over the decoder's hidden features followed by a
zero-initialized linear projection, so refinement starts as the identity. A spectral-norm
discriminator scores spectrograms with least-squares GAN losses plus feature matching.
"""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn.utils.parametrizations import spectral_norm

from .autoencoder import VAEModel, elbo_loss_batch
from .conformer import pad_stack
from .training import OptimConfig, batch_indices, check_finite, clip_and_step

log = logging.getLogger(__name__)

LEAK = 0.2
# power iterations run once at construction so the first normalized kernels are accurate
SN_WARMUP = 200
SN_REFRESH = 200


@dataclass
class AdvWeights:
    w_D: float = 1.0
    w_G: float = 1.0
    w_feat: float = 2.0
    w_vae: float = 1.0

    def __post_init__(self):
        vals = (self.w_D, self.w_G, self.w_feat, self.w_vae)
        if any(v < 0 for v in vals) or not any(vals):
            raise ValueError("adversarial weights must be nonnegative and not all zero")


@dataclass
class GANConfig:
    weights: AdvWeights = field(default_factory=AdvWeights)
    refiner_layers: int = 4
    refiner_channels: int = 32
    disc_channels: Tuple[int, ...] = (16, 32, 64, 1)
    train_encoder: bool = False
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=2e-4, steps=200, batch_size=8))


def sn_conv(cin: int, cout: int, kernel: int = 3, stride: int = 1) -> nn.Module:
    conv = spectral_norm(nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2), n_power_iterations=1)
    refresh_spectral_norms(conv, SN_WARMUP)
    return conv


def refresh_spectral_norms(module: nn.Module, iters: int) -> None:
    """Advance the power iteration of every spectral-normalized conv by ``iters`` steps.

    Run after each optimizer step: one iteration per forward lags behind kernels whose
    top singular direction moves quickly (Adam's early sign-like updates do this).
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d) and hasattr(m, "parametrizations"):
                was = m.training
                m.train()
                for _ in range(iters):
                    m.weight  # each train-mode access advances the power iteration one step
                m.train(was)


class RefinerStack(nn.Module):
    """Residual branch: (B, T, D_dec) hidden features -> (B, T, D_mel) residual added to y_tilde."""

    def __init__(self, d_dec: int, n_mels: int, layers: int = 4, channels: int = 32):
        super().__init__()
        chans = [1] + [channels] * (layers - 1) + [1]
        self.convs = nn.ModuleList(sn_conv(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.proj = nn.Linear(d_dec, n_mels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def residual(self, h: Tensor) -> Tensor:
        x = h.unsqueeze(1)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = nn.functional.leaky_relu(x, LEAK)
        return self.proj(x.squeeze(1))

    def forward(self, h: Tensor, y_tilde: Tensor) -> Tensor:
        return y_tilde + self.residual(h)


def refine(vae: VAEModel, h: Tensor, y_tilde: Tensor) -> Tensor:
    if vae.refiner is None:
        return y_tilde
    return vae.refiner(h, y_tilde)


class Discriminator(nn.Module):
    """Strided spectral-norm conv stack over (T, D_mel) treated as a one-channel image.

    ``forward`` returns the final 2D score map and the list of every layer's output.
    """

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 1)):
        super().__init__()
        if len(channels) < 2:
            raise ValueError("discriminator needs at least two layers")
        chans = [1] + list(channels)
        self.convs = nn.ModuleList(sn_conv(a, b, stride=2) for a, b in zip(chans[:-1], chans[1:]))

    def forward(self, y: Tensor) -> Tuple[Tensor, List[Tensor]]:
        x = y.unsqueeze(-3)  # (B, 1, T, D)
        feats = []
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = nn.functional.leaky_relu(x, LEAK)
            feats.append(x)
        return x.squeeze(-3), feats


def _batched(y: Tensor) -> Tensor:
    return y if y.dim() == 3 else y.unsqueeze(0)


@contextlib.contextmanager
def frozen(module):
    """Temporarily stop gradients into a module's parameters.

    The module also runs in eval mode, so spectral-norm power iterations do not advance
    and repeated calls inside the block see the same normalized weights.
    """
    if not isinstance(module, nn.Module):
        yield module
        return
    params = [p for p in module.parameters() if p.requires_grad]
    was = module.training
    module.eval()
    for p in params:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p in params:
            p.requires_grad_(True)
        module.train(was)


def lsgan_d_loss(D, y_real: Tensor, y_fake: Tensor) -> Tensor:
    real, _ = D(_batched(y_real))
    fake, _ = D(_batched(y_fake))
    per_item = ((real - 1) ** 2).flatten(1).sum(1) + (fake ** 2).flatten(1).sum(1)
    return per_item.mean()


def lsgan_g_loss(D, y_fake: Tensor) -> Tensor:
    with frozen(D):
        fake, _ = D(_batched(y_fake))
    return ((fake - 1) ** 2).flatten(1).sum(1).mean()


def feature_matching_loss(D, y_real: Tensor, y_fake: Tensor) -> Tensor:
    with frozen(D):
        _, f_real = D(_batched(y_real))
        _, f_fake = D(_batched(y_fake))
    terms = [(a - b).abs().flatten(1).sum(1) / a[0].numel() for a, b in zip(f_real, f_fake)]
    return (sum(terms) / len(terms)).mean()


def spectral_norms(module: nn.Module) -> List[float]:
    """Exact largest singular value of every spectral-normalized kernel, as currently used."""
    out = []
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d) and hasattr(m, "parametrizations"):
                was = m.training
                m.eval()
                w = m.weight
                m.train(was)
                out.append(float(torch.linalg.matrix_norm(w.reshape(w.shape[0], -1), ord=2)))
    return out


@dataclass
class AdvModels:
    vae: VAEModel
    disc: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    generator: torch.Generator
    grad_clip: float = 1.0


def attach_refiner(vae: VAEModel, cfg: GANConfig) -> VAEModel:
    vae.refiner = RefinerStack(vae.cfg.decoder.d_model, vae.n_mels, cfg.refiner_layers, cfg.refiner_channels)
    return vae


def setup_adversarial(vae: VAEModel, cfg: GANConfig, seed: int = 0) -> AdvModels:
    torch.manual_seed(seed)
    if vae.refiner is None:
        attach_refiner(vae, cfg)
    disc = Discriminator(cfg.disc_channels)
    if not cfg.train_encoder:
        for p in list(vae.encoder.parameters()) + list(vae.posterior.parameters()):
            p.requires_grad_(False)
    g_params = [p for p in vae.parameters() if p.requires_grad]
    return AdvModels(
        vae=vae,
        disc=disc,
        opt_g=torch.optim.Adam(g_params, lr=cfg.optim.lr, betas=(0.5, 0.9)),
        opt_d=torch.optim.Adam(disc.parameters(), lr=cfg.optim.lr, betas=(0.5, 0.9)),
        generator=torch.Generator().manual_seed(seed),
        grad_clip=cfg.optim.grad_clip,
    )


def adv_train_step(models: AdvModels, batch, weights: AdvWeights) -> dict:
    """One discriminator update on L_D, then one generator update on the weighted sum.

    ``batch`` is a list of (mel tensor (N, D_mel), spike array) pairs.
    """
    vae, disc = models.vae, models.disc
    vae.train()
    disc.train()
    mels = [m for m, _ in batch]
    spikes = [s for _, s in batch]
    lengths = [m.shape[0] for m in mels]
    neg_elbo, y_hat = elbo_loss_batch(vae, pad_stack(mels), lengths, spikes, models.generator)
    fakes = [y_hat[b, :n] for b, n in enumerate(lengths)]

    # discriminator step
    l_d = sum(lsgan_d_loss(disc, r, f.detach()) for r, f in zip(mels, fakes)) / len(mels)
    check_finite(l_d, "gan/discriminator", 0)
    models.opt_d.zero_grad()
    (weights.w_D * l_d).backward()
    clip_and_step(models.opt_d, list(disc.parameters()), models.grad_clip)
    refresh_spectral_norms(disc, SN_REFRESH)

    # generator step
    l_g = sum(lsgan_g_loss(disc, f) for f in fakes) / len(fakes)
    l_feat = sum(feature_matching_loss(disc, r, f) for r, f in zip(mels, fakes)) / len(fakes)
    l_vae = neg_elbo.mean()
    total = weights.w_G * l_g + weights.w_feat * l_feat + weights.w_vae * l_vae
    check_finite(total, "gan/generator", 0)
    models.opt_g.zero_grad()
    total.backward()
    clip_and_step(models.opt_g, [p for p in vae.parameters() if p.requires_grad], models.grad_clip)
    refresh_spectral_norms(vae.refiner, SN_REFRESH)

    with torch.no_grad():
        real_acc = np.mean([float((disc(r[None])[0] > 0.5).float().mean()) for r in mels])
        fake_acc = np.mean([float((disc(f[None].detach())[0] < 0.5).float().mean()) for f in fakes])
    return {
        "L_D": float(l_d.detach()),
        "L_G": float(l_g.detach()),
        "L_feat": float(l_feat.detach()),
        "ELBO": float(l_vae.detach()),
        "d_accuracy": float(0.5 * (real_acc + fake_acc)),
        "residual_norm": float(vae.refiner.proj.weight.detach().norm()),
    }


def train_gan(vae: VAEModel, corpus, alignments, cfg: GANConfig, history: Optional[list] = None) -> Tuple[VAEModel, Discriminator]:
    oc = cfg.optim
    rng = np.random.default_rng(oc.seed)
    models = setup_adversarial(vae, cfg, oc.seed)
    mels = [torch.as_tensor(it.mel.values, dtype=torch.float32) for it in corpus]
    spikes = [a.spikes for a in alignments]
    for step, idx in zip(range(oc.steps), batch_indices(rng, len(mels), oc.batch_size)):
        metrics = adv_train_step(models, [(mels[i], spikes[i]) for i in idx], cfg.weights)
        metrics["step"] = step
        if history is not None:
            history.append(metrics)
        if step % 50 == 0:
            log.info("gan step %d %s", step, {k: round(v, 4) for k, v in metrics.items()})
    for p in vae.parameters():
        p.requires_grad_(True)
    vae.eval()
    models.disc.eval()
    return vae, models.disc
