"""Joint duration/latent diffusion over phoneme-rate states.

A state row is ``[l, z]`` where ``l = log(d - u + c0) + c1`` is the dequantized
log-duration of the phoneme and ``z`` its VAE latent. The forward process is the
variance-preserving SDE with a linear beta schedule; the score network is trained by
denoising score matching with weight ``1 - alpha_bar(t)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .conformer import Conformer, ConformerConfig, lengths_to_pad_mask, pad_stack, sinusoidal_embedding
from .errors import NumericalError
from .training import OptimConfig, batch_indices, check_finite, clip_and_step, make_optimizer
from .types import Alignment, MelSpectrogram

log = logging.getLogger(__name__)

T_EPS = 1e-3
# sampled durations are clamped to this many frames
MAX_DURATION = 1000

ScoreFn = Callable[[Tensor, Tensor], Tensor]


# --- duration codec -----------------------------------------------------------

@dataclass
class DurationCodecConfig:
    c0: float = 1.0
    c1: float = 0.0

    def __post_init__(self):
        if self.c0 <= 0:
            raise ValueError("c0 must be positive")


def dequantize_durations(d, u, cfg: DurationCodecConfig):
    d = torch.as_tensor(d, dtype=torch.float64) if not isinstance(d, Tensor) else d
    u = torch.as_tensor(u, dtype=d.dtype) if not isinstance(u, Tensor) else u
    return torch.log(d - u + cfg.c0) + cfg.c1


def quantize_durations(l, cfg: DurationCodecConfig) -> np.ndarray:
    l = np.asarray(l.detach().cpu() if isinstance(l, Tensor) else l, dtype=np.float64)
    if not np.all(np.isfinite(l)):
        raise NumericalError("non-finite log-duration sample")
    d_tilde = np.exp(np.minimum(l - cfg.c1, math.log(MAX_DURATION + cfg.c0))) - cfg.c0
    # d_tilde lies in (d - 1, d] for values produced by dequantize_durations
    d = np.ceil(d_tilde - 1e-10)
    return np.clip(d, 1, MAX_DURATION).astype(np.int64)


def fit_codec(durations: Sequence[np.ndarray], c0: float = 1.0) -> DurationCodecConfig:
    """Pick c1 so that log-durations (dequantized at the bin midpoint) have zero mean."""
    d = np.concatenate([np.asarray(x, dtype=np.float64) for x in durations])
    return DurationCodecConfig(c0=c0, c1=float(-np.mean(np.log(d - 0.5 + c0))))


# --- VP-SDE ---------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if not 0 < self.beta_min <= self.beta_max:
            raise ValueError("need 0 < beta_min <= beta_max")

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def integral(self, t):
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t ** 2


def _check_t(t):
    tv = t.detach() if isinstance(t, Tensor) else np.asarray(t)
    if (tv < 0).any() or (tv > 1).any():
        raise ValueError("t must lie in [0, 1]")


def alpha_bar(t, schedule: NoiseSchedule):
    _check_t(t)
    if isinstance(t, Tensor):
        return torch.exp(-schedule.integral(t))
    return np.exp(-schedule.integral(np.asarray(t, dtype=np.float64)))


def _bcast(v: Tensor, x: Tensor) -> Tensor:
    v = torch.as_tensor(v, dtype=x.dtype)
    return v.reshape(v.shape + (1,) * (x.dim() - v.dim()))


def perturb(x0: Tensor, t, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    ab = _bcast(alpha_bar(torch.as_tensor(t, dtype=x0.dtype), schedule), x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def true_transition_score(x_t: Tensor, x0: Tensor, t, schedule: NoiseSchedule) -> Tensor:
    t = torch.as_tensor(t, dtype=x_t.dtype)
    if (t <= 0).any():
        raise ValueError("degenerate transition at t = 0")
    ab = _bcast(alpha_bar(t, schedule), x_t)
    return -(x_t - ab.sqrt() * x0) / (1 - ab)


# --- score network ----------------------------------------------------------------

@dataclass
class ScoreModelConfig:
    latent_dim: int = 8
    vocab_size: int = 6
    time_dim: int = 64
    phoneme_encoder: ConformerConfig = field(default_factory=lambda: ConformerConfig(layers=2, heads=2, head_dim=32, kernel=7))
    estimator: ConformerConfig = field(default_factory=lambda: ConformerConfig(layers=4, heads=4, head_dim=32, kernel=7))
    speaker_dim: int = 0
    speaker_encoder: ConformerConfig = field(default_factory=lambda: ConformerConfig(layers=2, heads=2, head_dim=16, kernel=7))


class ScoreModel(nn.Module):
    """Phoneme-conditioned score estimator s(x_t, t, w).

    The network predicts the injected noise; the score is that prediction divided by
    -sqrt(1 - alpha_bar(t)).
    """

    def __init__(self, cfg: ScoreModelConfig, schedule: Optional[NoiseSchedule] = None):
        super().__init__()
        self.cfg = cfg
        self.schedule = schedule or NoiseSchedule()
        self.state_dim = cfg.latent_dim + 1
        d_p = cfg.phoneme_encoder.d_model
        self.embed = nn.Embedding(cfg.vocab_size, d_p)
        self.phoneme_encoder = Conformer(d_p, cfg.phoneme_encoder)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim)
        )
        self.estimator = Conformer(self.state_dim + d_p + cfg.speaker_dim, cfg.estimator, cond_dim=cfg.time_dim)
        self.out = nn.Linear(cfg.estimator.d_model, self.state_dim)
        if cfg.speaker_dim:
            self.speaker_encoder = Conformer(self.state_dim, cfg.speaker_encoder)
            self.speaker_proj = nn.Linear(cfg.speaker_encoder.d_model, cfg.speaker_dim)
        else:
            self.speaker_encoder = None

    @property
    def has_speaker(self) -> bool:
        return self.speaker_encoder is not None

    def speaker_embed(self, x0_ref: Tensor, pad_mask: Optional[Tensor] = None) -> Tensor:
        """(B, M, C) reference states -> (B, speaker_dim) mean-pooled embedding."""
        h = self.speaker_encoder(x0_ref, pad_mask)
        if pad_mask is None:
            pooled = h.mean(dim=1)
        else:
            keep = (~pad_mask).to(h.dtype)[..., None]
            pooled = (h * keep).sum(1) / keep.sum(1)
        return self.speaker_proj(pooled)

    def forward(self, x_t: Tensor, t: Tensor, w: Tensor, pad_mask: Optional[Tensor] = None,
                spk: Optional[Tensor] = None) -> Tensor:
        if x_t.shape[:2] != w.shape[:2]:
            raise ValueError("phoneme count does not match state rows")
        t = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1).expand(x_t.shape[0])
        h_w = self.phoneme_encoder(self.embed(w), pad_mask)
        feats = [x_t, h_w]
        if self.has_speaker:
            if spk is None:
                raise ValueError("model expects a speaker embedding")
            feats.append(spk[:, None, :].expand(-1, x_t.shape[1], -1))
        cond = self.time_mlp(sinusoidal_embedding(t * 1000.0, self.cfg.time_dim))
        eps_hat = self.out(self.estimator(torch.cat(feats, dim=-1), pad_mask, cond))
        sigma = (1 - _bcast(alpha_bar(t, self.schedule), x_t)).sqrt()
        return -eps_hat / sigma


def _ids(w) -> np.ndarray:
    return np.asarray(getattr(w, "ids", w), dtype=np.int64).reshape(-1)


def score_estimate(model, x_t: Tensor, t, w, spk_embedding: Optional[Tensor] = None) -> Tensor:
    """Single-utterance score, shape (M, D_latent + 1)."""
    ids = _ids(w)
    if x_t.shape[0] != ids.size:
        raise ValueError("phoneme count does not match state rows")
    spk = None if spk_embedding is None else spk_embedding.reshape(1, -1)
    wt = torch.as_tensor(ids)[None]
    return model(x_t[None], torch.as_tensor(t, dtype=x_t.dtype).reshape(1), wt, None, spk)[0]


def speaker_embed(model: ScoreModel, x0_ref: Tensor) -> Tensor:
    if x0_ref.shape[0] < 1:
        raise ValueError("reference must have at least one row")
    return model.speaker_embed(x0_ref[None])[0]


# --- training ---------------------------------------------------------------------

def dsm_loss(model, batch, schedule: NoiseSchedule, generator: Optional[torch.Generator] = None,
             t_eps: float = T_EPS, t: Optional[Tensor] = None, eps: Optional[Tensor] = None) -> Tensor:
    """lambda_t-weighted denoising score matching, averaged over the batch.

    ``batch`` is a list of (x0 (M, C), phoneme ids[, speaker reference states]).
    ``t`` and ``eps`` may be supplied to make the loss a deterministic function.
    """
    x0s = [torch.as_tensor(b[0]) for b in batch]
    dtype = x0s[0].dtype
    lengths = [x.shape[0] for x in x0s]
    x0 = pad_stack(x0s)
    w = pad_stack([torch.as_tensor(_ids(b[1])) for b in batch]).long()
    mask = lengths_to_pad_mask(lengths, x0.shape[1])
    B = x0.shape[0]
    if t is None:
        t = t_eps + (1 - t_eps) * torch.rand(B, generator=generator, dtype=dtype)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=dtype)
    x_t = perturb(x0, t, eps, schedule)
    spk = None
    if getattr(model, "has_speaker", False):
        refs = [torch.as_tensor(b[2] if len(b) > 2 and b[2] is not None else b[0]) for b in batch]
        r_len = [r.shape[0] for r in refs]
        spk = model.speaker_embed(pad_stack(refs), lengths_to_pad_mask(r_len))
    s = model(x_t, t, w, mask, spk)
    target = true_transition_score(x_t, x0, t, schedule)
    lam = 1 - _bcast(alpha_bar(t, schedule), x0)
    cell = (lam * (s - target) ** 2).masked_fill(mask[..., None], 0.0)
    return cell.sum(dim=(1, 2)).mean()


@dataclass
class DiffusionConfig:
    model: ScoreModelConfig = field(default_factory=ScoreModelConfig)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    c0: float = 1.0
    fit_c1: bool = True
    t_eps: float = T_EPS
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-3, steps=4000, batch_size=32))


def encode_corpus(vae, corpus, alignments):
    """Frozen-VAE posterior parameters (mu, sigma) per utterance."""
    out = []
    with torch.no_grad():
        vae.eval()
        for it, a in zip(corpus, alignments):
            p = vae.encode(it.mel.values, a)
            out.append((p.mu.float(), p.sigma.float()))
    return out


def train_diffusion(posteriors, alignments, phonemes, cfg: DiffusionConfig, codec: DurationCodecConfig,
                    history: Optional[list] = None, speakers: Optional[Sequence[int]] = None) -> ScoreModel:
    oc = cfg.optim
    torch.manual_seed(oc.seed)
    rng = np.random.default_rng(oc.seed)
    gen = torch.Generator().manual_seed(oc.seed)
    model = ScoreModel(cfg.model, cfg.schedule)
    opt = make_optimizer(model.parameters(), oc)
    durs = [torch.as_tensor(a.durations, dtype=torch.float32) for a in alignments]
    model.train()
    for step, idx in zip(range(oc.steps), batch_indices(rng, len(posteriors), oc.batch_size)):
        batch = []
        for i in idx:
            mu, sigma = posteriors[i]
            z0 = mu + sigma * torch.randn(mu.shape, generator=gen)
            u = torch.rand(durs[i].shape, generator=gen)
            l = dequantize_durations(durs[i], u, codec).float()
            batch.append((torch.cat([l[:, None], z0], dim=1), phonemes[i]))
        loss = dsm_loss(model, batch, cfg.schedule, gen, cfg.t_eps)
        value = check_finite(loss, "diffusion", step)
        opt.zero_grad()
        loss.backward()
        clip_and_step(opt, list(model.parameters()), oc.grad_clip)
        if history is not None:
            history.append({"step": step, "dsm": value})
        if step % 200 == 0:
            log.info("diffusion step %d dsm %.4f", step, value)
    model.eval()
    return model


# --- samplers -----------------------------------------------------------------------

def em_integrate(score_fn: ScoreFn, x1: Tensor, steps: int, schedule: NoiseSchedule,
                 generator: Optional[torch.Generator] = None, t_eps: float = T_EPS) -> Tensor:
    """Euler-Maruyama on the reverse-time SDE from t = 1 down to t_eps on a uniform grid.

    The last step adds no noise, so the returned state is the mean of the final transition.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = x1
    dt = (1.0 - t_eps) / steps
    for i in range(steps):
        t = 1.0 - i * dt
        beta = schedule.beta(t)
        tt = torch.full((x.shape[0],), t, dtype=x.dtype)
        drift = 0.5 * beta * x + beta * score_fn(x, tt)
        x = x + drift * dt
        if i < steps - 1:
            x = x + math.sqrt(beta * dt) * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return x


def ode_integrate(score_fn: ScoreFn, x: Tensor, steps: int, schedule: NoiseSchedule,
                  t_start: float = 1.0, t_end: float = T_EPS) -> Tensor:
    """Euler steps of the probability-flow ODE dx/dt = -beta/2 (x + score), either direction."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h = (t_end - t_start) / steps
    for i in range(steps):
        t = t_start + i * h
        beta = schedule.beta(t)
        tt = torch.full((x.shape[0],), t, dtype=x.dtype)
        x = x + h * (-0.5 * beta * (x + score_fn(x, tt)))
    return x


def model_score_fn(model, w, spk: Optional[Tensor] = None) -> ScoreFn:
    """Wrap a score model for a batch of chains that all share one phoneme sequence."""
    ids = torch.as_tensor(_ids(w))[None]

    def fn(x: Tensor, t: Tensor) -> Tensor:
        B = x.shape[0]
        s = None if spk is None else spk.reshape(1, -1).expand(B, -1)
        return model(x, t, ids.expand(B, -1), None, s)

    return fn


def batch_score_fn(model, ws: Sequence, spk: Optional[Tensor] = None):
    """Score function over padded chains with different phoneme sequences. Returns (fn, pad_mask)."""
    ids = pad_stack([torch.as_tensor(_ids(w)) for w in ws]).long()
    mask = lengths_to_pad_mask([len(_ids(w)) for w in ws], ids.shape[1])

    def fn(x: Tensor, t: Tensor) -> Tensor:
        s = model(x, t, ids, mask, spk)
        return s.masked_fill(mask[..., None], 0.0)

    return fn, mask


@torch.no_grad()
def sample_batch(model, ws: Sequence, steps: int, schedule: NoiseSchedule, generator: Optional[torch.Generator] = None,
                 sampler: str = "em", spk: Optional[Tensor] = None, t_eps: float = T_EPS) -> List[Tensor]:
    """One chain per phoneme sequence, integrated together; returns unpadded (M_i, C) states."""
    fn, mask = batch_score_fn(model, ws, spk)
    x1 = _initial((len(ws), mask.shape[1], model.state_dim), generator)
    x1 = x1.masked_fill(mask[..., None], 0.0)
    if sampler == "em":
        x = em_integrate(fn, x1, steps, schedule, generator, t_eps)
    elif sampler == "ode":
        x = ode_integrate(fn, x1, steps, schedule, 1.0, t_eps)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    return [x[b, :len(_ids(w))] for b, w in enumerate(ws)]


def _initial(shape, generator, dtype=torch.float32) -> Tensor:
    return torch.randn(shape, generator=generator, dtype=dtype)


@torch.no_grad()
def sample_em(model, w, steps: int, schedule: NoiseSchedule, generator: Optional[torch.Generator] = None,
              spk: Optional[Tensor] = None, num_samples: int = 1, t_eps: float = T_EPS) -> Tensor:
    """Returns (num_samples, M, D_latent + 1) joint states."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ids = _ids(w)
    x1 = _initial((num_samples, ids.size, model.state_dim), generator)
    return em_integrate(model_score_fn(model, ids, spk), x1, steps, schedule, generator, t_eps)


@torch.no_grad()
def sample_ode(model, w, steps: int, schedule: NoiseSchedule, generator: Optional[torch.Generator] = None,
               spk: Optional[Tensor] = None, num_samples: int = 1, x1: Optional[Tensor] = None,
               t_eps: float = T_EPS) -> Tensor:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ids = _ids(w)
    if x1 is None:
        x1 = _initial((num_samples, ids.size, model.state_dim), generator)
    return ode_integrate(model_score_fn(model, ids, spk), x1, steps, schedule, 1.0, t_eps)


# --- synthesis --------------------------------------------------------------------------

@dataclass
class Stack:
    """Everything needed at inference time."""

    vae: nn.Module
    score: ScoreModel
    codec: DurationCodecConfig
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    aligner: Optional[nn.Module] = None
    t_eps: float = T_EPS


def split_state(x0: Tensor):
    return x0[..., 0], x0[..., 1:]


@torch.no_grad()
def decode_state(stack: Stack, x0: Tensor):
    """(M, C) joint state -> (spectrogram, alignment)."""
    l, z0 = split_state(x0)
    d = quantize_durations(l, stack.codec)
    a = Alignment.from_durations(d)
    y = stack.vae.decode(z0.to(next(stack.vae.parameters()).dtype), a, a.num_frames)
    return MelSpectrogram(y.numpy()), a


@torch.no_grad()
def synthesize(stack: Stack, w, steps: int = 100, sampler: str = "em", seed: int = 0,
               spk: Optional[Tensor] = None):
    """Sample a joint state for ``w`` and decode it. Returns (mel, alignment, x0)."""
    gen = torch.Generator().manual_seed(seed)
    if sampler == "em":
        x0 = sample_em(stack.score, w, steps, stack.schedule, gen, spk, t_eps=stack.t_eps)[0]
    elif sampler == "ode":
        x0 = sample_ode(stack.score, w, steps, stack.schedule, gen, spk, t_eps=stack.t_eps)[0]
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    mel, a = decode_state(stack, x0)
    return mel, a, x0
