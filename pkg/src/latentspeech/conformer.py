"""Conformer blocks shared by every sequence model in the package."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor, nn


@dataclass
class ConformerConfig:
    layers: int = 2
    heads: int = 2
    head_dim: int = 16
    kernel: int = 7
    dropout: float = 0.1
    ff_mult: int = 2
    # "future": every frame sees only itself and later frames (attention and convolution)
    context: str = "full"

    @property
    def d_model(self) -> int:
        return self.heads * self.head_dim


def sinusoidal_embedding(pos: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal features of a (possibly fractional) position tensor, shape (*pos.shape, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=pos.dtype, device=pos.device) / max(half, 1))
    ang = pos[..., None] * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(d),
            nn.Linear(d, d * mult),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(d * mult, d),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    def __init__(self, d: int, kernel: int, dropout: float, future_only: bool = False):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.pointwise_in = nn.Conv1d(d, 2 * d, 1)
        self.pad = (0, kernel - 1) if future_only else (kernel // 2, (kernel - 1) // 2)
        self.depthwise = nn.Conv1d(d, d, kernel, groups=d)
        self.post_norm = nn.LayerNorm(d)
        self.pointwise_out = nn.Conv1d(d, d, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, pad_mask: Optional[Tensor]) -> Tensor:
        h = self.norm(x)
        if pad_mask is not None:
            h = h.masked_fill(pad_mask[..., None], 0.0)
        h = nn.functional.glu(self.pointwise_in(h.transpose(1, 2)), dim=1)
        if pad_mask is not None:
            h = h.masked_fill(pad_mask[:, None, :], 0.0)
        h = self.depthwise(nn.functional.pad(h, self.pad)).transpose(1, 2)
        h = nn.functional.silu(self.post_norm(h)).transpose(1, 2)
        return self.dropout(self.pointwise_out(h).transpose(1, 2))


class ConformerBlock(nn.Module):
    """Macaron FFN / self-attention / convolution / FFN block.

    With ``cond_dim`` set, a per-block affine modulation (scale, shift) computed from a
    conditioning vector is applied to the block input.
    """

    def __init__(self, cfg: ConformerConfig, cond_dim: int = 0):
        super().__init__()
        d = cfg.d_model
        self.ff1 = FeedForward(d, cfg.ff_mult, cfg.dropout)
        self.attn_norm = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, cfg.heads, dropout=cfg.dropout, batch_first=True)
        self.attn_drop = nn.Dropout(cfg.dropout)
        self.future_only = cfg.context == "future"
        self.conv = ConvModule(d, cfg.kernel, cfg.dropout, self.future_only)
        self.ff2 = FeedForward(d, cfg.ff_mult, cfg.dropout)
        self.out_norm = nn.LayerNorm(d)
        self.film = nn.Linear(cond_dim, 2 * d) if cond_dim else None
        if self.film is not None:
            nn.init.zeros_(self.film.weight)
            nn.init.zeros_(self.film.bias)

    def forward(self, x: Tensor, pad_mask: Optional[Tensor] = None, cond: Optional[Tensor] = None) -> Tensor:
        if self.film is not None and cond is not None:
            scale, shift = self.film(cond).unsqueeze(1).chunk(2, dim=-1)
            x = x * (1 + scale) + shift
        x = x + 0.5 * self.ff1(x)
        h = self.attn_norm(x)
        attn_mask = None
        if self.future_only:
            T = h.shape[1]
            attn_mask = torch.ones(T, T, dtype=torch.bool, device=h.device).tril(-1)
        h, _ = self.attn(h, h, h, key_padding_mask=pad_mask, attn_mask=attn_mask, need_weights=False)
        x = x + self.attn_drop(h)
        x = x + self.conv(x, pad_mask)
        x = x + 0.5 * self.ff2(x)
        x = self.out_norm(x)
        if pad_mask is not None:
            x = x.masked_fill(pad_mask[..., None], 0.0)
        return x


class Conformer(nn.Module):
    """Input projection, sinusoidal positions, then a stack of conformer blocks.

    Inputs are (B, T, in_dim) with an optional boolean ``pad_mask`` (True = padding).
    """

    def __init__(self, in_dim: int, cfg: ConformerConfig, cond_dim: int = 0):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(in_dim, cfg.d_model)
        self.blocks = nn.ModuleList(ConformerBlock(cfg, cond_dim) for _ in range(cfg.layers))

    @property
    def d_model(self) -> int:
        return self.cfg.d_model

    def forward(self, x: Tensor, pad_mask: Optional[Tensor] = None, cond: Optional[Tensor] = None) -> Tensor:
        h = self.in_proj(x)
        pos = torch.arange(h.shape[1], dtype=h.dtype, device=h.device)
        h = h + sinusoidal_embedding(pos, h.shape[-1])[None]
        for blk in self.blocks:
            h = blk(h, pad_mask, cond)
        return h


def lengths_to_pad_mask(lengths, max_len: Optional[int] = None) -> Tensor:
    lengths = torch.as_tensor(lengths)
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len)[None, :] >= lengths[:, None]


def pad_stack(seqs, value: float = 0.0) -> Tensor:
    """Right-pad a list of (T_i, ...) tensors into (B, T_max, ...)."""
    return nn.utils.rnn.pad_sequence(list(seqs), batch_first=True, padding_value=value)
