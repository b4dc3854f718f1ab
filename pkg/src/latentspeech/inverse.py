"""Posterior-guided sampling for editing and prompt-based voice adaptation.

The guidance term is ``-xi(t) * grad ||(select(pi(x_t)) - o) / sigma_tilde||^2`` where
``pi`` is the one-step denoised estimate built from the score, ``select`` keeps the rows
outside the edited span, and the observation ``o`` is the posterior mean ``[l; mu]`` of
those rows with scale ``sigma_tilde = [1; sigma]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import Tensor

from .diffusion import (
    DurationCodecConfig,
    NoiseSchedule,
    ScoreFn,
    Stack,
    T_EPS,
    alpha_bar,
    decode_state,
    batch_score_fn,
    dequantize_durations,
    em_integrate,
    model_score_fn,
    ode_integrate,
    _bcast,
    _ids,
)
from .types import Alignment, MelSpectrogram, mel_values


@dataclass
class EditSpec:
    """Segmentation [A; B; C] of the source phonemes and the sequence that replaces B."""

    m_a: int
    m_b: int
    m_c: int
    replacement: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.replacement = np.asarray(self.replacement, dtype=np.int64).reshape(-1)
        if min(self.m_a, self.m_b, self.m_c) < 0:
            raise ValueError("segment lengths must be nonnegative")

    @property
    def total(self) -> int:
        return self.m_a + self.m_b + self.m_c

    @property
    def kept(self) -> int:
        return self.m_a + self.m_c

    def edited(self) -> "EditSpec":
        """The same segmentation on the edited sequence, where B has the replacement's length."""
        n = self.replacement.size
        return EditSpec(self.m_a, n, self.m_c, self.replacement)

    def apply(self, w) -> np.ndarray:
        ids = _ids(w)
        if ids.size != self.total:
            raise ValueError(f"edit spec covers {self.total} phonemes but the sequence has {ids.size}")
        return np.concatenate([ids[:self.m_a], self.replacement, ids[self.m_a + self.m_b:]])


@dataclass
class Observation:
    o: Tensor
    sigma_tilde: Tensor

    def __post_init__(self):
        if self.o.shape != self.sigma_tilde.shape:
            raise ValueError("observation and scale shapes differ")
        if self.sigma_tilde.numel() and (self.sigma_tilde <= 0).any():
            raise ValueError("sigma_tilde must be positive")


@dataclass
class GuidanceConfig:
    """Guidance weight over diffusion time.

    ``scaled``: xi0 / (1 - alpha_bar(t) + delta), optionally capped at ``xi_max``.
    ``constant``: xi0.

    ``stability`` bounds the weight inside the samplers: per item and step the guidance
    displacement is at most ``stability`` times the Polyak step obj / |grad obj|^2, the step
    that zeroes the linearised objective. Near t = 1 the denoised estimate amplifies x by
    about 1 / sqrt(alpha_bar), and an unbounded explicit step diverges. None disables it.
    """

    mode: str = "scaled"
    xi0: float = 1.0
    delta: float = 1e-4
    xi_max: Optional[float] = None
    stability: Optional[float] = 1.0
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    def xi(self, t) -> float:
        if self.mode == "constant":
            v = self.xi0
        elif self.mode == "scaled":
            v = self.xi0 / (1.0 - float(alpha_bar(float(t), self.schedule)) + self.delta)
        else:
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if self.xi_max is not None:
            v = min(v, self.xi_max)
        return v


def denoise(score: Tensor, x_t: Tensor, t, schedule: NoiseSchedule) -> Tensor:
    t = torch.as_tensor(t, dtype=x_t.dtype)
    if (t <= 0).any():
        raise ValueError("denoised estimate undefined at t = 0")
    ab = _bcast(alpha_bar(t, schedule), x_t)
    return (x_t + (1 - ab) * score) / ab.sqrt()


def denoised_estimate(model, x_t: Tensor, t, w, schedule: NoiseSchedule) -> Tensor:
    """One-step estimate of E[x0 | x_t, w] from the model score, for a single (M, C) state."""
    fn = model_score_fn(model, w)
    tt = torch.as_tensor(t, dtype=x_t.dtype).reshape(1)
    return denoise(fn(x_t[None], tt), x_t[None], tt, schedule)[0]


def masked_select(u: Tensor, spec: EditSpec) -> Tensor:
    """Keep rows of segments A and C (works along the second-to-last axis)."""
    if u.shape[-2] != spec.total:
        raise ValueError(f"expected {spec.total} rows, got {u.shape[-2]}")
    return torch.cat([u[..., :spec.m_a, :], u[..., spec.m_a + spec.m_b:, :]], dim=-2)


def unmask(kept: Tensor, middle: Tensor, spec: EditSpec) -> Tensor:
    """Inverse of masked_select given the dropped B rows."""
    return torch.cat([kept[..., :spec.m_a, :], middle, kept[..., spec.m_a:, :]], dim=-2)


def _objective(pi: Tensor, obs: Observation, spec: EditSpec) -> Tensor:
    r = (masked_select(pi, spec) - obs.o) / obs.sigma_tilde
    return (r ** 2).flatten(-2).sum(-1)


def guided_score(score_fn: ScoreFn, x: Tensor, t: Tensor, obs: Observation, spec: EditSpec,
                 xi: float, schedule: NoiseSchedule):
    """(score, guidance) for a batch of states; guidance is -xi * grad of the objective."""
    if obs.o.shape[-2] == 0 or xi == 0:
        with torch.no_grad():
            s = score_fn(x, t)
        return s, torch.zeros_like(x)
    with torch.enable_grad():
        xg = x.detach().requires_grad_(True)
        s = score_fn(xg, t)
        pi = denoise(s, xg, t, schedule)
        obj = _objective(pi, obs, spec).sum()
        (grad,) = torch.autograd.grad(obj, xg)
    return s.detach(), -xi * grad


def guidance_gradient(model, x_t: Tensor, t, w, obs: Observation, spec_on_edited: EditSpec,
                      cfg: GuidanceConfig) -> Tensor:
    """Guidance term for a single (M, C) edited state."""
    if masked_select(x_t, spec_on_edited).shape != obs.o.shape:
        raise ValueError("observation shape does not match the edited layout")
    tt = torch.as_tensor(t, dtype=x_t.dtype).reshape(1)
    _, g = guided_score(model_score_fn(model, w), x_t[None], tt, obs, spec_on_edited, cfg.xi(float(t)), cfg.schedule)
    return g[0]


@dataclass
class SamplerOptions:
    steps: int = 300
    sampler: str = "em"
    seed: int = 0
    num_samples: int = 1
    t_eps: float = T_EPS


class _Layout:
    """Observation and scale scattered onto a padded edited layout, plus a row mask.

    Summing masked squared residuals over this layout equals the masked-select
    objective for each item.
    """

    def __init__(self, jobs, m_max: int, dim: int, dtype):
        B = len(jobs)
        self.o = torch.zeros(B, m_max, dim, dtype=dtype)
        self.sigma = torch.ones(B, m_max, dim, dtype=dtype)
        self.keep = torch.zeros(B, m_max, 1, dtype=dtype)
        for b, (_, obs, spec) in enumerate(jobs):
            rows = list(range(spec.m_a)) + list(range(spec.m_a + spec.m_b, spec.total))
            if rows:
                self.o[b, rows] = obs.o.to(dtype)
                self.sigma[b, rows] = obs.sigma_tilde.to(dtype)
                self.keep[b, rows] = 1.0

    def guided(self, score_fn: ScoreFn, x: Tensor, t: Tensor, xi: float, schedule: NoiseSchedule,
               max_step: Optional[float] = None) -> Tensor:
        """Guided score. ``max_step`` (in units of the Polyak step) bounds xi times the
        score-to-state factor of the sampler step, item by item."""
        if xi == 0 or not bool(self.keep.any()):
            with torch.no_grad():
                return score_fn(x, t)
        with torch.enable_grad():
            xg = x.detach().requires_grad_(True)
            s = score_fn(xg, t)
            pi = denoise(s, xg, t, schedule)
            obj = (self.keep * ((pi - self.o) / self.sigma) ** 2).flatten(1).sum(1)
            (grad,) = torch.autograd.grad(obj.sum(), xg)
        w = torch.full_like(obj, xi)
        if max_step is not None:
            g2 = (grad.detach() ** 2).flatten(1).sum(1)
            w = torch.minimum(w, max_step * obj.detach() / g2.clamp_min(1e-30))
        return s.detach() - w.reshape(-1, *([1] * (x.dim() - 1))) * grad


def guided_sample_batch(model, jobs, opts: "SamplerOptions", cfg: GuidanceConfig,
                        spk: Optional[Tensor] = None) -> list:
    """Guided sampling of several independent edit problems in one padded batch.

    ``jobs`` holds (edited phoneme ids, Observation, EditSpec on the edited layout).
    Returns the unpadded (M_bar, C) state of each job.
    """
    ws = []
    for w_bar, obs, spec in jobs:
        ids = _ids(w_bar)
        if ids.size != spec.total:
            raise ValueError("edited phoneme sequence does not match the edit layout")
        if obs.o.shape != (spec.kept, model.state_dim):
            raise ValueError("observation shape does not match the edited layout")
        ws.append(ids)
    gen = torch.Generator().manual_seed(opts.seed)
    base, mask = batch_score_fn(model, ws, spk)
    dtype = jobs[0][1].o.dtype
    layout = _Layout(jobs, mask.shape[1], model.state_dim, dtype)
    schedule = cfg.schedule

    dt = (1.0 - opts.t_eps) / opts.steps
    # score-to-state factor of one step: beta dt for EM, beta dt / 2 for the ODE
    factor = 1.0 if opts.sampler == "em" else 0.5

    def fn(x: Tensor, t: Tensor) -> Tensor:
        tf = float(t[0])
        max_step = None
        if cfg.stability is not None:
            max_step = cfg.stability / (factor * float(schedule.beta(tf)) * dt)
        return layout.guided(base, x, t, cfg.xi(tf), schedule, max_step)

    x1 = torch.randn((len(jobs), mask.shape[1], model.state_dim), generator=gen, dtype=dtype)
    x1 = x1.masked_fill(mask[..., None], 0.0)
    if opts.sampler == "em":
        x = em_integrate(fn, x1, opts.steps, schedule, gen, opts.t_eps)
    elif opts.sampler == "ode":
        x = ode_integrate(fn, x1, opts.steps, schedule, 1.0, opts.t_eps)
    else:
        raise ValueError(f"unknown sampler {opts.sampler!r}")
    x = x.detach()
    return [x[b, :len(w)] for b, w in enumerate(ws)]


def guided_sample(model, w_bar, obs: Observation, spec: EditSpec, opts: "SamplerOptions",
                  cfg: GuidanceConfig, spk: Optional[Tensor] = None) -> Tensor:
    """Sample edited joint states (num_samples, M_bar, C) under the guided score."""
    jobs = [(w_bar, obs, spec)] * opts.num_samples
    return torch.stack(guided_sample_batch(model, jobs, opts, cfg, spk))


# --- editing workflows ---------------------------------------------------------------

class EditResult(NamedTuple):
    mel: MelSpectrogram
    alignment: Alignment
    x0: Tensor
    observation: Observation
    edited_spec: EditSpec
    source_alignment: Alignment


@dataclass
class EditOptions:
    sampler: SamplerOptions = field(default_factory=SamplerOptions)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    # dequantization offset used to turn observed durations into the l channel
    duration_offset: float = 0.5


@torch.no_grad()
def build_observation(stack: Stack, y, w, spec: EditSpec, opts: EditOptions,
                      alignment: Optional[Alignment] = None):
    """Align, encode and mask the source utterance. Returns (observation, alignment)."""
    values = np.asarray(mel_values(y))
    ids = _ids(w)
    if ids.size != spec.total:
        raise ValueError(f"edit spec covers {spec.total} phonemes but the sequence has {ids.size}")
    a = alignment if alignment is not None else stack.aligner.align(values, ids)
    post = stack.vae.encode(values, a)
    l = dequantize_durations(torch.as_tensor(a.durations, dtype=torch.float64),
                             torch.full((len(a),), opts.duration_offset, dtype=torch.float64), stack.codec)
    mu_tilde = torch.cat([l[:, None].to(post.mu.dtype), post.mu], dim=1)
    sigma_tilde = torch.cat([torch.ones_like(l[:, None]).to(post.mu.dtype), post.sigma], dim=1)
    return Observation(masked_select(mu_tilde, spec), masked_select(sigma_tilde, spec)), a


def edit_detailed(stack: Stack, y, w, spec: EditSpec, opts: Optional[EditOptions] = None,
                  alignment: Optional[Alignment] = None) -> EditResult:
    opts = opts or EditOptions()
    obs, a_src = build_observation(stack, y, w, spec, opts, alignment)
    w_bar = spec.apply(w)
    spec_bar = spec.edited()
    x0 = guided_sample(stack.score, w_bar, obs, spec_bar, opts.sampler, opts.guidance)[0]
    mel, a = decode_state(stack, x0)
    return EditResult(mel, a, x0, obs, spec_bar, a_src)


def edit_many(stack: Stack, problems, opts: Optional[EditOptions] = None) -> list:
    """Run several edits in one batched guided sampling pass.

    ``problems`` holds (y, w, spec) or (y, w, spec, alignment) tuples.
    """
    opts = opts or EditOptions()
    prepared = []
    for prob in problems:
        y, w, spec = prob[:3]
        obs, a_src = build_observation(stack, y, w, spec, opts, prob[3] if len(prob) > 3 else None)
        prepared.append((spec.apply(w), obs, spec.edited(), a_src))
    states = guided_sample_batch(stack.score, [p[:3] for p in prepared], opts.sampler, opts.guidance)
    out = []
    for (w_bar, obs, spec_bar, a_src), x0 in zip(prepared, states):
        mel, a = decode_state(stack, x0)
        out.append(EditResult(mel, a, x0, obs, spec_bar, a_src))
    return out


def edit(stack: Stack, y, w, spec: EditSpec, opts: Optional[EditOptions] = None):
    """Replace / insert / delete a phoneme span. Returns (spectrogram, alignment)."""
    res = edit_detailed(stack, y, w, spec, opts)
    return res.mel, res.alignment


def zero_shot_detailed(stack: Stack, ref_y, ref_w, new_w, opts: Optional[EditOptions] = None,
                       alignment: Optional[Alignment] = None):
    new_ids = np.asarray(getattr(new_w, "ids", new_w), dtype=np.int64).reshape(-1)
    if new_ids.size == 0:
        raise ValueError("nothing to generate")
    ref_ids = _ids(ref_w)
    spec = EditSpec(ref_ids.size, 0, 0, new_ids)
    res = edit_detailed(stack, ref_y, ref_ids, spec, opts, alignment)
    start = int(res.alignment.spikes[ref_ids.size - 1])
    new_mel = MelSpectrogram(res.mel.values[start:], res.mel.frame_hop_s)
    return new_mel, res


def zero_shot(stack: Stack, ref_y, ref_w, new_w, opts: Optional[EditOptions] = None) -> MelSpectrogram:
    """Prompt-based adaptation: the reference is a fixed prefix and ``new_w`` is inserted after it.

    Only the frames of the generated continuation are returned.
    """
    return zero_shot_detailed(stack, ref_y, ref_w, new_w, opts)[0]


def speech_continuation(stack: Stack, ref_y, ref_w, new_w, opts: Optional[EditOptions] = None) -> MelSpectrogram:
    return zero_shot(stack, ref_y, ref_w, new_w, opts)
