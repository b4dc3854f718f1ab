import itertools
import math

import numpy as np
import pytest
import torch

from latentspeech.aligner import (
    AlignerConfig,
    AlignerModel,
    forced_align,
    minimal_ctc_loss,
    minimal_ctc_loss_batch,
    train_aligner,
)
from latentspeech.conformer import ConformerConfig
from latentspeech.data import SynthCorpusConfig, gen_corpus
from latentspeech.errors import NumericalError
from latentspeech.metrics import alignment_accuracy
from latentspeech.training import OptimConfig, check_finite

from conftest import fd_grad, rel_err


def brute_paths(N, M):
    """Every valid path is a choice of M distinct spike frames; all other frames are blank."""
    return list(itertools.combinations(range(N), M))


def brute_loss(lp, w):
    """-log sum over spike placements of prod p(label at spike) * prod p(blank elsewhere)."""
    N = lp.shape[0]
    total = []
    for frames in brute_paths(N, len(w)):
        s = sum(lp[t, 0] for t in range(N) if t not in frames)
        s += sum(lp[t, p + 1] for t, p in zip(frames, w))
        total.append(s)
    return -float(np.logaddexp.reduce(total))


def brute_best(lp, w):
    N = lp.shape[0]
    best, arg = -np.inf, None
    for frames in brute_paths(N, len(w)):
        s = sum(lp[t, 0] for t in range(N) if t not in frames) + sum(lp[t, p + 1] for t, p in zip(frames, w))
        if s > best:
            best, arg = s, frames
    return [f + 1 for f in arg]


def random_log_probs(rng, N, V):
    x = rng.standard_normal((N, V + 1)) * 2
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def test_two_frame_uniform_example():
    lp = np.log(np.full((2, 2), 0.5))
    assert brute_loss(lp, [0]) == pytest.approx(math.log(2))
    assert float(minimal_ctc_loss(torch.tensor(lp), [0])) == pytest.approx(-math.log(0.5), rel=1e-12)


def test_single_path_when_n_equals_m(rng):
    lp = random_log_probs(rng, 4, 3)
    w = [2, 0, 1, 0]
    expect = -sum(lp[i, p + 1] for i, p in enumerate(w))
    assert float(minimal_ctc_loss(torch.tensor(lp), w)) == pytest.approx(expect, rel=1e-12)
    assert forced_align(lp, w).spikes.tolist() == [1, 2, 3, 4]


def test_path_count_is_binomial():
    # with all log-probs 0 every valid path scores 1, so the loss is -log(#paths)
    for N in range(1, 9):
        for M in range(1, min(N, 4) + 1):
            lp = torch.zeros(N, 4, dtype=torch.float64)
            count = math.exp(-float(minimal_ctc_loss(lp, [0] * M)))
            assert round(count) == math.comb(N, M) == len(brute_paths(N, M))


def test_loss_matches_brute_force(rng):
    for N in range(1, 9):
        for M in range(1, min(N, 4) + 1):
            lp = random_log_probs(rng, N, 3)
            w = rng.integers(0, 3, size=M).tolist()
            got = float(minimal_ctc_loss(torch.tensor(lp), w))
            assert abs(got - brute_loss(lp, w)) / abs(brute_loss(lp, w)) < 1e-6


def test_viterbi_matches_exhaustive(rng):
    for N in range(1, 9):
        for M in range(1, min(N, 4) + 1):
            lp = random_log_probs(rng, N, 3)
            w = rng.integers(0, 3, size=M).tolist()
            assert forced_align(lp, w).spikes.tolist() == brute_best(lp, w)


def test_peaked_single_label(rng):
    N, k = 7, 5
    lp = np.log(np.full((N, 3), 1 / 3))
    lp[k - 1] = np.log([0.05, 0.9, 0.05])
    assert forced_align(lp, [0]).spikes.tolist() == [k]


def test_too_short_rejected():
    lp = torch.zeros(2, 3)
    with pytest.raises(ValueError, match="sequence too long for frames"):
        minimal_ctc_loss(lp, [0, 1, 0])
    with pytest.raises(ValueError):
        forced_align(lp, [0, 1, 0])


def test_batch_matches_single(rng):
    lps = [random_log_probs(rng, n, 3) for n in (5, 8, 3)]
    ws = [[0, 1], [2, 2, 1], [1]]
    T = 8
    padded = np.zeros((3, T, 4))
    for b, lp in enumerate(lps):
        padded[b, :lp.shape[0]] = lp
    batch = minimal_ctc_loss_batch(torch.tensor(padded), ws, [5, 8, 3])
    for b in range(3):
        assert float(batch[b]) == pytest.approx(float(minimal_ctc_loss(torch.tensor(lps[b]), ws[b])), rel=1e-12)


def test_gradient_matches_finite_differences(rng):
    logits = torch.tensor(rng.standard_normal((5, 4)), dtype=torch.float64, requires_grad=True)
    w = [1, 2]
    f = lambda x: minimal_ctc_loss(torch.log_softmax(x, -1), w)
    (g,) = torch.autograd.grad(f(logits), logits)
    num = fd_grad(lambda x: f(x).detach(), logits.detach().clone())
    assert rel_err(g.numpy(), num.numpy()) < 1e-3


def test_check_finite_raises():
    with pytest.raises(NumericalError):
        check_finite(torch.tensor(float("nan")), "aligner", 3)


def test_nan_loss_aborts_training(monkeypatch):
    corpus = gen_corpus(SynthCorpusConfig(num_utterances=2))
    monkeypatch.setattr(AlignerModel, "forward", lambda self, mel, pad_mask=None: mel.new_full(
        mel.shape[:2] + (self.vocab_size + 1,), float("nan")) + 0 * self.proj.weight.sum())
    with pytest.raises(NumericalError, match="aligner"):
        train_aligner(corpus, AlignerConfig(optim=OptimConfig(steps=3)))


def tiny_cfg(steps, seed=0, dropout=0.1):
    return AlignerConfig(
        conformer=ConformerConfig(layers=1, heads=2, head_dim=8, kernel=3, dropout=dropout, context="future"),
        optim=OptimConfig(lr=2e-3, steps=steps, batch_size=8, seed=seed),
    )


def test_overfit_single_item_loss_decreases():
    corpus = gen_corpus(SynthCorpusConfig(num_utterances=1, noise_std=0.0, seed=4))
    hist = []
    train_aligner(corpus, tiny_cfg(50, dropout=0.0), hist)
    evals = [h["ctc"] for h in hist[::5]]
    assert len(evals) == 10
    assert all(b < a for a, b in zip(evals, evals[1:]))


def test_seeded_training_is_bit_identical():
    corpus = gen_corpus(SynthCorpusConfig(num_utterances=10))
    a = train_aligner(corpus, tiny_cfg(15))
    b = train_aligner(corpus, tiny_cfg(15))
    for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(pa, pb)


@pytest.mark.slow
def test_noise_free_corpus_alignment_accuracy():
    corpus = gen_corpus(SynthCorpusConfig(num_utterances=200, noise_std=0.0, seed=5))
    model = train_aligner(corpus, tiny_cfg(300))
    pred = [model.align(it.mel.values, it.phonemes) for it in corpus]
    assert alignment_accuracy(pred, [it.true_alignment for it in corpus]) >= 0.95
