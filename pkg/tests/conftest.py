import math

import numpy as np
import pytest
import torch
from torch import nn

from latentspeech.conformer import ConformerConfig
from latentspeech.diffusion import NoiseSchedule, alpha_bar
from latentspeech.pipeline import RunConfig

torch.set_num_threads(1)

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


class GaussianScore(nn.Module):
    """Exact score of the VP-SDE marginals for x0 ~ N(m, s^2 I), ignoring the phonemes."""

    def __init__(self, m=0.0, s=1.0, state_dim=3, schedule=None):
        super().__init__()
        self.m, self.s = m, s
        self.state_dim = state_dim
        self.schedule = schedule or NoiseSchedule()
        self.dummy = nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, x, t, w, pad_mask=None, spk=None):
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1, 1, 1)
        ab = alpha_bar(t, self.schedule)
        var = ab * self.s ** 2 + 1 - ab
        return -(x - ab.sqrt() * self.m) / var


def fd_grad(f, x, h=1e-6):
    """Central finite-difference gradient of scalar f at float64 tensor x."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def directional_fd(loss_fn, params, direction, h=1e-6):
    """(f(p + h v) - f(p - h v)) / 2h over a list of parameter tensors."""
    with torch.no_grad():
        for p, v in zip(params, direction):
            p.add_(h * v)
        fp = float(loss_fn())
        for p, v in zip(params, direction):
            p.sub_(2 * h * v)
        fm = float(loss_fn())
        for p, v in zip(params, direction):
            p.add_(h * v)
    return (fp - fm) / (2 * h)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def tiny_run(steps=3, utterances=12, seed=0) -> RunConfig:
    """A run configuration that trains every stage in a few seconds."""
    run = RunConfig(seed=seed)
    run.data.num_utterances = utterances
    cc = ConformerConfig(layers=1, heads=2, head_dim=4, kernel=3)
    run.aligner.conformer = ConformerConfig(layers=1, heads=2, head_dim=4, kernel=3, context="future")
    run.vae.latent_dim = run.diffusion.model.latent_dim = 2
    run.vae.encoder = run.vae.decoder = cc
    run.diffusion.model.time_dim = 8
    run.diffusion.model.phoneme_encoder = run.diffusion.model.estimator = cc
    run.gan.refiner_layers, run.gan.refiner_channels, run.gan.disc_channels = 2, 4, (4, 1)
    for stage in (run.aligner, run.vae, run.gan, run.diffusion):
        stage.optim.steps, stage.optim.batch_size = steps, 4
    run.eval.num_synth, run.eval.synth_steps, run.eval.num_edits, run.eval.edit_steps = 4, 5, 2, 5
    return run


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
