"""Minimal-CTC phoneme recognizer: one spike per phoneme.

State topology for phonemes w_1..w_M (2M+1 states)::

    blank_0, w_1, blank_1, w_2, ..., w_M, blank_M

Blanks self-loop, labels do not. Transitions are blank_{i-1} -> w_i -> blank_i and
w_i -> w_{i+1}. Paths start in {blank_0, w_1} and end in {w_M, blank_M}, so every
valid path emits each label on exactly one frame. Class 0 is blank, phoneme p is
class p + 1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .conformer import Conformer, ConformerConfig, lengths_to_pad_mask, pad_stack
from .errors import NumericalError
from .training import OptimConfig, batch_indices, check_finite, clip_and_step, make_optimizer
from .types import Alignment, mel_values, spikes_to_durations

log = logging.getLogger(__name__)

# finite stand-in for log(0); keeps autograd free of inf - inf
NEG = -1e30


def durations(a: Sequence[int]) -> np.ndarray:
    return spikes_to_durations(a)


def _state_labels(targets: List[Tensor], s_max: int) -> Tensor:
    labels = torch.zeros(len(targets), s_max, dtype=torch.long)
    for b, w in enumerate(targets):
        labels[b, 1:2 * len(w):2] = torch.as_tensor(w, dtype=torch.long) + 1
    return labels


def minimal_ctc_loss_batch(log_probs: Tensor, targets: List, frame_lengths: Optional[Sequence[int]] = None) -> Tensor:
    """Per-utterance negative log-likelihood, shape (B,).

    log_probs: (B, T, V+1) frame log-posteriors (blank at index 0).
    targets: list of phoneme-id sequences (0-based ids).
    """
    B, T, _ = log_probs.shape
    lengths = [T] * B if frame_lengths is None else [int(n) for n in frame_lengths]
    m_lens = [len(w) for w in targets]
    for n, m in zip(lengths, m_lens):
        if n < m:
            raise ValueError("sequence too long for frames")
    s_max = 2 * max(m_lens) + 1
    labels = _state_labels(targets, s_max).to(log_probs.device)
    emit = log_probs.gather(2, labels[:, None, :].expand(B, T, s_max))

    s_idx = torch.arange(s_max, device=log_probs.device)
    is_blank = (s_idx % 2 == 0)[None]
    can_skip = ((s_idx % 2 == 1) & (s_idx >= 3))[None]
    neg = torch.full((B, 1), NEG, dtype=log_probs.dtype, device=log_probs.device)

    alpha = torch.full((B, s_max), NEG, dtype=log_probs.dtype, device=log_probs.device)
    alpha = torch.cat([emit[:, 0, :2], alpha[:, 2:]], dim=1)
    t_len = torch.as_tensor(lengths, device=log_probs.device)
    for t in range(1, T):
        stay = torch.where(is_blank, alpha, torch.full_like(alpha, NEG))
        shift1 = torch.cat([neg, alpha[:, :-1]], dim=1)
        shift2 = torch.cat([neg, neg, alpha[:, :-2]], dim=1)
        shift2 = torch.where(can_skip, shift2, torch.full_like(alpha, NEG))
        new = torch.logsumexp(torch.stack([stay, shift1, shift2]), dim=0) + emit[:, t]
        alpha = torch.where((t < t_len)[:, None], new, alpha)

    ends = torch.as_tensor([2 * m for m in m_lens], device=log_probs.device)
    last_blank = alpha.gather(1, ends[:, None])[:, 0]
    last_label = alpha.gather(1, (ends - 1)[:, None])[:, 0]
    return -torch.logaddexp(last_blank, last_label)


def minimal_ctc_loss(log_probs, w) -> Tensor:
    """-log sum over one-spike-per-phoneme paths of the path probability."""
    lp = torch.as_tensor(log_probs)
    ids = np.asarray(getattr(w, "ids", w), dtype=np.int64)
    if lp.shape[0] < len(ids):
        raise ValueError("sequence too long for frames")
    return minimal_ctc_loss_batch(lp[None], [ids])[0]


def forced_align(log_probs, w) -> Alignment:
    """Viterbi best path over the minimal topology; ties go to the earlier spike."""
    lp = np.asarray(log_probs.detach().cpu() if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    ids = np.asarray(getattr(w, "ids", w), dtype=np.int64)
    N, M = lp.shape[0], ids.size
    if N < M:
        raise ValueError("sequence too long for frames")
    S = 2 * M + 1
    cls = np.zeros(S, dtype=np.int64)
    cls[1::2] = ids + 1
    emit = lp[:, cls]
    delta = np.full((N, S), -np.inf)
    back = np.zeros((N, S), dtype=np.int64)
    delta[0, :2] = emit[0, :2]
    for t in range(1, N):
        prev = delta[t - 1]
        for s in range(S):
            if s % 2 == 0:
                # blank: stay (spike already placed) beats arriving from its label on ties
                best, arg = prev[s], s
                if s >= 1 and prev[s - 1] > best:
                    best, arg = prev[s - 1], s - 1
            else:
                best, arg = (prev[s - 1], s - 1) if s >= 1 else (-np.inf, s)
                if s >= 3 and prev[s - 2] > best:
                    best, arg = prev[s - 2], s - 2
            delta[t, s] = best + emit[t, s]
            back[t, s] = arg
    s = S - 1 if delta[N - 1, S - 1] >= delta[N - 1, S - 2] else S - 2
    spikes = []
    for t in range(N - 1, -1, -1):
        if s % 2 == 1:
            spikes.append(t + 1)
        s = back[t, s]
    return Alignment(np.asarray(spikes[::-1], dtype=np.int64))


@dataclass
class AlignerConfig:
    conformer: ConformerConfig = field(default_factory=lambda: ConformerConfig(layers=2, heads=2, head_dim=16, kernel=3, context="future"))
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=2e-3, steps=600, batch_size=16))


class AlignerModel(nn.Module):
    def __init__(self, n_mels: int, vocab_size: int, cfg: ConformerConfig):
        super().__init__()
        self.vocab_size = vocab_size
        self.encoder = Conformer(n_mels, cfg)
        self.proj = nn.Linear(cfg.d_model, vocab_size + 1)

    def forward(self, mel: Tensor, pad_mask: Optional[Tensor] = None) -> Tensor:
        return torch.log_softmax(self.proj(self.encoder(mel, pad_mask)), dim=-1)

    @torch.no_grad()
    def log_probs(self, mel) -> Tensor:
        was = self.training
        self.eval()
        p = next(self.parameters())
        out = self(torch.as_tensor(np.asarray(mel_values(mel)), dtype=p.dtype)[None])[0]
        self.train(was)
        return out

    def align(self, mel, w) -> Alignment:
        return forced_align(self.log_probs(mel), w)


def train_aligner(corpus, config: AlignerConfig, history: Optional[list] = None) -> AlignerModel:
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    oc = config.optim
    torch.manual_seed(oc.seed)
    rng = np.random.default_rng(oc.seed)
    first = corpus[0]
    model = AlignerModel(first.mel.num_bins, corpus.config.vocab_size, config.conformer)
    opt = make_optimizer(model.parameters(), oc)
    mels = [torch.as_tensor(it.mel.values, dtype=torch.float32) for it in corpus]
    targets = [it.phonemes.ids for it in corpus]
    model.train()
    for step, idx in zip(range(oc.steps), batch_indices(rng, len(mels), oc.batch_size)):
        lengths = [mels[i].shape[0] for i in idx]
        x = pad_stack([mels[i] for i in idx])
        lp = model(x, lengths_to_pad_mask(lengths))
        loss = minimal_ctc_loss_batch(lp, [targets[i] for i in idx], lengths).mean()
        value = check_finite(loss, "aligner", step)
        opt.zero_grad()
        loss.backward()
        clip_and_step(opt, list(model.parameters()), oc.grad_clip)
        if history is not None:
            history.append({"step": step, "ctc": value})
        if step % 100 == 0:
            log.info("aligner step %d ctc %.4f", step, value)
    model.eval()
    return model
