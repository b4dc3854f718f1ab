"""Synthetic phoneme-conditioned spectrogram corpus and a small log-Mel featurizer.

Every phoneme id owns a Gaussian bump over Mel-bin index; an utterance holds each
phoneme's template for a sampled number of frames. Ground-truth spikes sit on the
last frame of each segment, so durations derived from them equal the segment lengths.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import tensorio
from .types import Alignment, MelSpectrogram, PhonemeSequence

LOG_FLOOR = 1e-5


@dataclass
class SynthCorpusConfig:
    vocab_size: int = 6
    num_utterances: int = 500
    frames_per_phoneme_range: Tuple[int, int] = (1, 5)
    phonemes_per_utterance_range: Tuple[int, int] = (4, 10)
    D_mel: int = 16
    noise_std: float = 0.05
    seed: int = 0
    num_speakers: int = 1
    floor: float = -4.0
    amplitude: float = 4.0
    frame_hop_s: float = 0.0125

    def __post_init__(self):
        self.frames_per_phoneme_range = tuple(int(v) for v in self.frames_per_phoneme_range)
        self.phonemes_per_utterance_range = tuple(int(v) for v in self.phonemes_per_utterance_range)

    def validate(self) -> None:
        lo, hi = self.frames_per_phoneme_range
        mlo, mhi = self.phonemes_per_utterance_range
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.num_utterances < 1:
            raise ValueError("num_utterances must be >= 1")
        if lo < 1 or hi < lo:
            raise ValueError("frames_per_phoneme_range must satisfy 1 <= min <= max")
        if mlo < 1 or mhi < mlo:
            raise ValueError("phonemes_per_utterance_range must satisfy 1 <= min <= max")
        if self.D_mel < 1:
            raise ValueError("D_mel must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.num_speakers < 1:
            raise ValueError("num_speakers must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthCorpusConfig":
        return cls(**d)


@dataclass
class CorpusItem:
    mel: MelSpectrogram
    phonemes: PhonemeSequence
    true_alignment: Alignment
    speaker: int = 0
    uid: str = ""

    def __post_init__(self):
        if self.true_alignment.num_frames > self.mel.num_frames:
            raise ValueError("true alignment exceeds frame count")


@dataclass
class Corpus:
    items: List[CorpusItem]
    templates: np.ndarray  # speakers x vocab x D_mel
    config: SynthCorpusConfig = field(default_factory=SynthCorpusConfig)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def value_range(self) -> float:
        lo = min(float(it.mel.values.min()) for it in self.items)
        hi = max(float(it.mel.values.max()) for it in self.items)
        return hi - lo

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.templates, dtype="<f8").tobytes())
        for it in self.items:
            h.update(np.ascontiguousarray(it.mel.values, dtype="<f4").tobytes())
            h.update(np.ascontiguousarray(it.phonemes.ids, dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(it.true_alignment.spikes, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


def speaker_slot(speaker: int, phoneme: int, vocab_size: int) -> int:
    # extra speakers reuse the bump shapes under a rotated phoneme assignment
    return (phoneme + speaker * (vocab_size // 2)) % vocab_size


def template_table(cfg: SynthCorpusConfig) -> np.ndarray:
    V, D = cfg.vocab_size, cfg.D_mel
    bins = np.arange(D) + 0.5
    width = D / (2.0 * V)
    table = np.empty((cfg.num_speakers, V, D))
    for s in range(cfg.num_speakers):
        for p in range(V):
            center = (speaker_slot(s, p, V) + 0.5) / V * D
            table[s, p] = cfg.floor + cfg.amplitude * np.exp(-0.5 * ((bins - center) / width) ** 2)
    return table


def _sample_phonemes(rng: np.random.Generator, M: int, V: int) -> np.ndarray:
    # no immediate repeats: two adjacent identical segments have no visible boundary
    ids = np.empty(M, dtype=np.int64)
    ids[0] = rng.integers(V)
    for i in range(1, M):
        step = rng.integers(1, V)
        ids[i] = (ids[i - 1] + step) % V
    return ids


def gen_corpus(config: SynthCorpusConfig) -> Corpus:
    config.validate()
    rng = np.random.default_rng(config.seed)
    table = template_table(config)
    lo, hi = config.frames_per_phoneme_range
    mlo, mhi = config.phonemes_per_utterance_range
    items = []
    for n in range(config.num_utterances):
        spk = int(rng.integers(config.num_speakers))
        M = int(rng.integers(mlo, mhi + 1))
        ids = _sample_phonemes(rng, M, config.vocab_size)
        d = rng.integers(lo, hi + 1, size=M)
        frames = np.repeat(table[spk, ids], d, axis=0)
        if config.noise_std > 0:
            frames = frames + config.noise_std * rng.standard_normal(frames.shape)
        items.append(
            CorpusItem(
                mel=MelSpectrogram(frames.astype(np.float32), config.frame_hop_s),
                phonemes=PhonemeSequence(ids, config.vocab_size),
                true_alignment=Alignment.from_durations(d),
                speaker=spk,
                uid=f"utt{n:05d}",
            )
        )
    return Corpus(items, table, config)


def save_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for it in corpus.items:
        fname = f"{it.uid}.mel.bin"
        tensorio.save_tensor(out / fname, it.mel.values.astype(np.float32))
        entries.append(
            {
                "id": it.uid,
                "mel": fname,
                "num_frames": it.mel.num_frames,
                "phonemes": it.phonemes.ids.tolist(),
                "spikes": it.true_alignment.spikes.tolist(),
                "speaker": it.speaker,
            }
        )
    manifest = {
        "format": "latentspeech-corpus/1",
        "config": asdict(corpus.config),
        "fingerprint": corpus.fingerprint(),
        "items": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    templates = {
        "vocab_size": corpus.config.vocab_size,
        "D_mel": corpus.config.D_mel,
        "num_speakers": int(corpus.templates.shape[0]),
        "templates": corpus.templates.tolist(),
    }
    (out / "templates.json").write_text(json.dumps(templates))
    return out


def load_corpus(corpus_dir) -> Corpus:
    src = Path(corpus_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    cfg = SynthCorpusConfig.from_dict(manifest["config"])
    templates = np.asarray(json.loads((src / "templates.json").read_text())["templates"])
    items = []
    for e in manifest["items"]:
        mel = tensorio.load_tensor(src / e["mel"])
        items.append(
            CorpusItem(
                mel=MelSpectrogram(mel, cfg.frame_hop_s),
                phonemes=PhonemeSequence(e["phonemes"], cfg.vocab_size),
                true_alignment=Alignment(e["spikes"]),
                speaker=int(e.get("speaker", 0)),
                uid=e["id"],
            )
        )
    return Corpus(items, templates, cfg)


# --- log-Mel featurizer -------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(sample_rate: int, n_mels: int, fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    """n_mels + 2 frequencies (Hz): lower edge, centers, upper edge of the triangles."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    edges = mel_band_edges(sample_rate, n_mels)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_featurize(samples, sample_rate: int, n_mels: int = 80, hop: int = 256, win: int = 1024) -> MelSpectrogram:
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("empty signal")
    if sample_rate <= 0 or hop <= 0 or win <= 0 or n_mels < 1:
        raise ValueError("sample_rate, hop, win must be positive and n_mels >= 1")
    pad = win // 2
    mode = "reflect" if x.size > pad else "constant"
    padded = np.pad(x, (pad, pad), mode=mode)
    n_frames = x.size // hop + 1
    need = (n_frames - 1) * hop + win
    if padded.size < need:
        padded = np.pad(padded, (0, need - padded.size))
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * np.hanning(win + 1)[:-1]
    mag = np.abs(np.fft.rfft(frames, n=win, axis=1))
    mel = mag @ mel_filterbank(sample_rate, win, n_mels).T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)), hop / sample_rate)
