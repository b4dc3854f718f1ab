"""Core domain types shared across the pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class InvalidAlignment(ValueError):
    pass


@dataclass
class MelSpectrogram:
    """N x D_mel natural-log Mel energies."""

    values: np.ndarray
    frame_hop_s: float = 0.0125

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"mel must be a non-empty N x D_mel matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("mel contains non-finite values")
        self.values = v

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_bins(self) -> int:
        return self.values.shape[1]


@dataclass
class PhonemeSequence:
    ids: np.ndarray
    vocab_size: int | None = None

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if ids.size < 1:
            raise ValueError("phoneme sequence must be non-empty")
        if ids.min() < 0 or (self.vocab_size is not None and ids.max() >= self.vocab_size):
            raise ValueError("phoneme id outside vocabulary")
        self.ids = ids

    def __len__(self) -> int:
        return int(self.ids.size)


def spikes_to_durations(a: Sequence[int]) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64).reshape(-1)
    if a.size == 0:
        raise InvalidAlignment("invalid alignment: empty spike sequence")
    d = np.diff(a, prepend=0)
    if np.any(d < 1):
        raise InvalidAlignment("invalid alignment: spikes must be strictly increasing and >= 1")
    return d


@dataclass
class Alignment:
    """Spike positions (1-based frame indices) and the durations they imply."""

    spikes: np.ndarray
    durations: np.ndarray = field(init=False)

    def __post_init__(self):
        self.spikes = np.asarray(self.spikes, dtype=np.int64).reshape(-1)
        self.durations = spikes_to_durations(self.spikes)

    @classmethod
    def from_durations(cls, d: Sequence[int]) -> "Alignment":
        d = np.asarray(d, dtype=np.int64).reshape(-1)
        if d.size == 0 or np.any(d < 1):
            raise InvalidAlignment("invalid alignment: durations must be >= 1")
        return cls(np.cumsum(d))

    def __len__(self) -> int:
        return int(self.spikes.size)

    @property
    def num_frames(self) -> int:
        return int(self.spikes[-1])

    def check_frames(self, n_frames: int) -> None:
        if self.spikes[-1] > n_frames:
            raise InvalidAlignment("alignment exceeds frames")


def mel_values(y):
    """Raw frame matrix of a MelSpectrogram, or the argument itself (array or tensor)."""
    return y.values if isinstance(y, MelSpectrogram) else y
