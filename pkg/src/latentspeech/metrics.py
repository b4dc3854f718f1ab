"""Proxy quality measures computed against the synthetic corpus ground truth."""
from __future__ import annotations

from typing import Iterable, List, Sequence

import numpy as np

from .types import Alignment


def alignment_accuracy(predicted: Iterable[Alignment], truth: Iterable[Alignment], tol: int = 1) -> float:
    hits = total = 0
    for p, t in zip(predicted, truth):
        diff = np.abs(p.spikes - t.spikes)
        hits += int((diff <= tol).sum())
        total += diff.size
    return hits / max(total, 1)


def segments(a: Alignment):
    """(start, stop) frame slices of each phoneme segment, 0-based half-open."""
    stops = a.spikes
    starts = np.concatenate([[0], stops[:-1]])
    return list(zip(starts.tolist(), stops.tolist()))


def segment_means(mel: np.ndarray, a: Alignment) -> np.ndarray:
    return np.stack([mel[s:e].mean(axis=0) for s, e in segments(a)])


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    y = np.asarray(y, dtype=np.float64) - np.mean(y)
    den = np.sqrt((x * x).sum() * (y * y).sum())
    return float((x * y).sum() / den) if den > 0 else 0.0


def template_correlations(mel: np.ndarray, a: Alignment, ids: Sequence[int], templates: np.ndarray) -> List[float]:
    """Correlation of every decoded phoneme segment (mean frame) with its template row."""
    means = segment_means(mel, a)
    return [pearson(m, templates[p]) for m, p in zip(means, ids)]


def warp_to_reference(mel: np.ndarray, a: Alignment, a_ref: Alignment) -> np.ndarray:
    """Resample each phoneme segment of ``mel`` onto the segment lengths of ``a_ref``.

    Frame k of a reference segment of length L maps to frame floor(k * L_src / L)
    of the matching source segment.
    """
    if len(a) != len(a_ref):
        raise ValueError("alignments cover different phoneme counts")
    out = []
    for (s, e), (rs, re_) in zip(segments(a), segments(a_ref)):
        n_src, n_ref = e - s, re_ - rs
        idx = s + (np.arange(n_ref) * n_src) // n_ref
        out.append(mel[idx])
    return np.concatenate(out, axis=0)


def duration_stats(alignments: Iterable[Alignment], phonemes: Iterable[Sequence[int]], vocab_size: int) -> dict:
    sums = np.zeros(vocab_size)
    counts = np.zeros(vocab_size)
    for a, ids in zip(alignments, phonemes):
        np.add.at(sums, np.asarray(ids), a.durations)
        np.add.at(counts, np.asarray(ids), 1)
    with np.errstate(invalid="ignore"):
        means = sums / counts
    return {"mean": means.tolist(), "count": counts.astype(int).tolist()}


def template_set_scores(mel: np.ndarray, a: Alignment, ids: Sequence[int], template_sets: np.ndarray,
                        rows: slice = slice(None)) -> np.ndarray:
    """Mean segment correlation against each speaker's templates, over the chosen phoneme rows."""
    ids = np.asarray(ids)
    return np.array([np.mean(template_correlations(mel, a, ids, t)[rows]) for t in template_sets])
