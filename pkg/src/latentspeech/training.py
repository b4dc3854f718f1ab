"""Small helpers shared by the training loops."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, List

import numpy as np
import torch

from .errors import NumericalError


@dataclass
class OptimConfig:
    lr: float = 2e-4
    steps: int = 1000
    batch_size: int = 16
    grad_clip: float = 1.0
    seed: int = 0


def make_optimizer(params, cfg: OptimConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=cfg.lr)


def batch_indices(rng: np.random.Generator, n: int, batch_size: int) -> Iterator[np.ndarray]:
    """Endless stream of shuffled mini-batches over range(n)."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield perm[i:i + batch_size]


def check_finite(value, stage: str, step: int) -> float:
    v = float(value.detach()) if hasattr(value, "detach") else float(value)
    if not math.isfinite(v):
        raise NumericalError(f"{stage}: loss became {v} at step {step}")
    return v


def clip_and_step(opt: torch.optim.Optimizer, params: List[torch.nn.Parameter], clip: float) -> None:
    if clip and clip > 0:
        torch.nn.utils.clip_grad_norm_(params, clip)
    opt.step()
