"""Run configuration, checkpoints, the stage DAG, evaluation and feature export.

A run lives under one root directory with a subdirectory per stage:

    root/data/        corpus manifest + per-utterance tensors
    root/aligner/     checkpoint.json, weights.bin, metrics.csv
    root/vae/         ...
    root/gan/         ... (vae weights with refiner, plus discriminator.bin)
    root/diffusion/   ...

Each checkpoint records its stage, config snapshot, config hash, seed, corpus
fingerprint, tensor shapes and the parent checkpoints it was built from.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import tensorio
from .adversarial import Discriminator, GANConfig, attach_refiner, train_gan
from .aligner import AlignerConfig, AlignerModel, train_aligner
from .autoencoder import VAEConfig, VAEModel, align_corpus, reconstruct, train_vae
from .data import Corpus, SynthCorpusConfig, gen_corpus, load_corpus, save_corpus
from .diffusion import (DiffusionConfig, DurationCodecConfig, ScoreModel, Stack, decode_state, encode_corpus,
                        fit_codec, sample_batch, train_diffusion)
from .errors import ConfigError, MissingPrerequisite
from .inverse import EditOptions, EditSpec, GuidanceConfig, SamplerOptions, edit_many
from .metrics import alignment_accuracy, duration_stats, template_correlations, template_set_scores, warp_to_reference
from .types import Alignment

log = logging.getLogger(__name__)

STAGES = ("data", "aligner", "vae", "gan", "diffusion")
ROOT_ENV = "LATENTSPEECH_HOME"
CKPT_FORMAT = "latentspeech-ckpt/1"


def default_root() -> Path:
    return Path(os.environ.get(ROOT_ENV, "runs/default"))


# --- configuration ----------------------------------------------------------------------

@dataclass
class EvalConfig:
    num_synth: int = 200
    synth_steps: int = 100
    num_edits: int = 20
    edit_steps: int = 300
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0


@dataclass
class RunConfig:
    data: SynthCorpusConfig = field(default_factory=SynthCorpusConfig)
    aligner: AlignerConfig = field(default_factory=AlignerConfig)
    vae: VAEConfig = field(default_factory=VAEConfig)
    gan: GANConfig = field(default_factory=GANConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    # one seed for every stage; it overrides the per-stage optimizer seeds
    seed: int = 0
    # optional existing corpus directory used instead of root/data
    corpus_dir: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return from_dict(cls, d)

    def stage_config(self, stage: str):
        cfg = copy.deepcopy(getattr(self, stage))
        if hasattr(cfg, "optim"):
            cfg.optim.seed = self.seed
        if stage == "data":
            cfg.seed = self.seed
        return cfg

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e


def from_dict(cls, d):
    """Build a (nested) dataclass from plain JSON data, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ConfigError(f"expected an object for {cls.__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        kwargs[k] = _coerce(hints[k], v)
    try:
        obj = cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e
    return obj


def _coerce(tp, v):
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, v)
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if v is None else _coerce(args[0], v)
    if origin is tuple and isinstance(v, list):
        return tuple(v)
    return v


# --- checkpoints --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    stage: str
    path: Path
    meta: dict

    @property
    def fingerprint(self) -> str:
        return self.meta["corpus_fingerprint"]

    @property
    def corpus_dir(self) -> Path:
        return Path(self.meta["corpus_dir"])

    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.meta["run_config"])


def _state_arrays(module: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def weights_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def _load_state(module: torch.nn.Module, path: Path, meta_shapes: dict) -> None:
    arrays = tensorio.load_archive(path)
    expected = {k: list(v.shape) for k, v in module.state_dict().items()}
    got = {k: list(v.shape) for k, v in arrays.items()}
    if expected != got or {k: list(v) for k, v in meta_shapes.items()} != got:
        raise ValueError(f"tensor shapes in {path} do not match the model")
    module.load_state_dict({k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()})


def read_checkpoint(path) -> Checkpoint:
    p = Path(path)
    meta_file = p / "checkpoint.json"
    if not meta_file.exists():
        raise FileNotFoundError(f"no checkpoint at {p}")
    meta = json.loads(meta_file.read_text())
    if meta.get("format") != CKPT_FORMAT:
        raise ValueError(f"{p} is not a checkpoint of this package")
    return Checkpoint(meta["stage"], p, meta)


def _write_metrics(path: Path, rows: List[dict]) -> None:
    """Append per-step rows with a wall-clock timestamp; earlier rows are never rewritten."""
    if not rows:
        return
    keys = ["time"] + sorted({k for r in rows for k in r})
    new = not path.exists()
    now = time.time()
    with path.open("a", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        if new:
            wr.writeheader()
        for r in rows:
            wr.writerow({"time": f"{now:.3f}", **r})


def read_metrics(path) -> List[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def _write_checkpoint(out: Path, stage: str, run: RunConfig, corpus: Corpus, corpus_dir: Path,
                      modules: Dict[str, torch.nn.Module], parents: Dict[str, str], extra: Optional[dict] = None) -> Checkpoint:
    out.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for fname, module in modules.items():
        arrays = _state_arrays(module)
        tensorio.save_archive(out / fname, arrays)
        shapes[fname] = {k: list(v.shape) for k, v in arrays.items()}
    meta = {
        "format": CKPT_FORMAT,
        "stage": stage,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config_hash": run.config_hash(),
        "seed": run.seed,
        "run_config": run.to_dict(),
        "stage_config": asdict(run.stage_config(stage)),
        "corpus_fingerprint": corpus.fingerprint(),
        "corpus_dir": str(corpus_dir.resolve()),
        "parents": parents,
        "tensors": shapes,
        "extra": extra or {},
    }
    (out / "checkpoint.json").write_text(json.dumps(meta, indent=1))
    return Checkpoint(stage, out, meta)


def _require(path: Optional[Path], stage: str) -> Checkpoint:
    if path is None or not (Path(path) / "checkpoint.json").exists():
        raise MissingPrerequisite(f"requires stage: {stage}")
    ck = read_checkpoint(path)
    return ck


def _check_lineage(child_corpus: Corpus, parent: Checkpoint) -> None:
    if child_corpus.fingerprint() != parent.fingerprint:
        raise ValueError(f"corpus fingerprint mismatch with {parent.stage} checkpoint at {parent.path}")


# --- model loading --------------------------------------------------------------------------

def load_aligner(path) -> AlignerModel:
    ck = read_checkpoint(path)
    if ck.stage != "aligner":
        raise ValueError(f"{path} holds a {ck.stage} checkpoint, not an aligner")
    cfg = ck.run_config().stage_config("aligner")
    ex = ck.meta["extra"]
    model = AlignerModel(ex["n_mels"], ex["vocab_size"], cfg.conformer)
    _load_state(model, ck.path / "weights.bin", ck.meta["tensors"]["weights.bin"])
    return model.eval()


def load_vae(path) -> VAEModel:
    """VAE from a vae checkpoint, or VAE plus refiner from a gan checkpoint."""
    ck = read_checkpoint(path)
    if ck.stage not in ("vae", "gan"):
        raise ValueError(f"{path} holds a {ck.stage} checkpoint, not an autoencoder")
    run = ck.run_config()
    model = VAEModel(ck.meta["extra"]["n_mels"], run.stage_config("vae"))
    if ck.stage == "gan":
        attach_refiner(model, run.stage_config("gan"))
    _load_state(model, ck.path / "weights.bin", ck.meta["tensors"]["weights.bin"])
    return model.eval()


def load_discriminator(path) -> Discriminator:
    ck = read_checkpoint(path)
    if ck.stage != "gan":
        raise ValueError(f"{path} holds a {ck.stage} checkpoint, not a gan")
    disc = Discriminator(ck.run_config().stage_config("gan").disc_channels)
    _load_state(disc, ck.path / "discriminator.bin", ck.meta["tensors"]["discriminator.bin"])
    return disc.eval()


def load_stack(diffusion_path) -> Stack:
    ck = read_checkpoint(diffusion_path)
    if ck.stage != "diffusion":
        raise ValueError(f"{diffusion_path} holds a {ck.stage} checkpoint, not a diffusion model")
    run = ck.run_config()
    cfg = run.stage_config("diffusion")
    score = ScoreModel(cfg.model, cfg.schedule)
    _load_state(score, ck.path / "weights.bin", ck.meta["tensors"]["weights.bin"])
    vae_path = Path(ck.meta["parents"]["autoencoder"])
    vae = load_vae(vae_path)
    if weights_hash(vae) != ck.meta["extra"]["vae_weights_hash"]:
        raise ValueError("autoencoder checkpoint changed after the diffusion stage was trained")
    aligner = load_aligner(ck.meta["parents"]["aligner"])
    codec = DurationCodecConfig(**ck.meta["extra"]["codec"])
    return Stack(vae=vae, score=score.eval(), codec=codec, schedule=cfg.schedule, aligner=aligner, t_eps=cfg.t_eps)


# --- stages -------------------------------------------------------------------------------------

@dataclass
class StagePaths:
    """Where each stage reads and writes. Defaults follow the root/<stage> layout."""

    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def of(self, stage: str) -> Path:
        return self.root / stage


def _locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    return FileLock(str(out / ".lock"), timeout=0)


def _corpus_for(run: RunConfig, paths: StagePaths):
    d = Path(run.corpus_dir) if run.corpus_dir else paths.of("data")
    if not (d / "manifest.json").exists():
        raise MissingPrerequisite("requires stage: data")
    return load_corpus(d), d


def run_stage(stage: str, run: RunConfig, root=None, out=None, parents: Optional[Dict[str, Path]] = None) -> Checkpoint:
    """Train one stage and write its checkpoint.

    ``parents`` overrides where prerequisites are read from (keys: "aligner",
    "autoencoder"); ``out`` overrides where this stage writes.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    paths = StagePaths(root if root is not None else default_root())
    out = Path(out) if out is not None else paths.of(stage)
    parents = dict(parents or {})
    lock = _locked(out)
    try:
        lock.acquire()
    except Timeout as e:
        raise RuntimeError(f"checkpoint directory {out} is locked by another writer") from e
    try:
        torch.manual_seed(run.seed)
        return _STAGE_FNS[stage](run, paths, out, parents)
    finally:
        lock.release()


def _stage_data(run: RunConfig, paths: StagePaths, out: Path, parents) -> Checkpoint:
    cfg = run.stage_config("data")
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    corpus = gen_corpus(cfg)
    save_corpus(corpus, out)
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["config_hash"] = run.config_hash()
    manifest["seed"] = run.seed
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return Checkpoint("data", out, {"corpus_fingerprint": corpus.fingerprint(), "corpus_dir": str(out.resolve())})


def _stage_aligner(run, paths, out, parents) -> Checkpoint:
    if run.corpus_dir is None and "data" in parents:
        run = dataclasses.replace(run, corpus_dir=str(parents["data"]))
    corpus, cdir = _corpus_for(run, paths)
    hist: list = []
    model = train_aligner(corpus, run.stage_config("aligner"), hist)
    acc = alignment_accuracy(align_corpus(model, corpus), [it.true_alignment for it in corpus])
    _write_metrics(out / "metrics.csv", hist)
    extra = {"n_mels": corpus.config.D_mel, "vocab_size": corpus.config.vocab_size, "alignment_accuracy": acc}
    return _write_checkpoint(out, "aligner", run, corpus, cdir, {"weights.bin": model}, {}, extra)


def _aligner_parent(ck_path: Path):
    ck = _require(ck_path, "aligner")
    if ck.stage != "aligner":
        raise MissingPrerequisite("requires stage: aligner")
    return ck


def _stage_vae(run, paths, out, parents) -> Checkpoint:
    al_ck = _aligner_parent(parents.get("aligner", paths.of("aligner")))
    corpus = load_corpus(al_ck.corpus_dir)
    _check_lineage(corpus, al_ck)
    aligner = load_aligner(al_ck.path)
    alignments = align_corpus(aligner, corpus)
    hist: list = []
    vae = train_vae(corpus, alignments, run.stage_config("vae"), hist)
    mae = _reconstruction_error(vae, corpus, alignments)
    _write_metrics(out / "metrics.csv", hist)
    extra = {"n_mels": corpus.config.D_mel, "reconstruction_mae": mae}
    return _write_checkpoint(out, "vae", run, corpus, al_ck.corpus_dir, {"weights.bin": vae},
                             {"aligner": str(al_ck.path.resolve())}, extra)


def _stage_gan(run, paths, out, parents) -> Checkpoint:
    vae_ck = _require(parents.get("autoencoder", paths.of("vae")), "vae")
    if vae_ck.stage != "vae":
        raise MissingPrerequisite("requires stage: vae")
    al_path = Path(vae_ck.meta["parents"]["aligner"])
    corpus = load_corpus(vae_ck.corpus_dir)
    _check_lineage(corpus, vae_ck)
    vae = load_vae(vae_ck.path)
    alignments = align_corpus(load_aligner(al_path), corpus)
    hist: list = []
    vae, disc = train_gan(vae, corpus, alignments, run.stage_config("gan"), hist)
    _write_metrics(out / "metrics.csv", hist)
    extra = {"n_mels": corpus.config.D_mel, "reconstruction_mae": _reconstruction_error(vae, corpus, alignments)}
    return _write_checkpoint(out, "gan", run, corpus, vae_ck.corpus_dir,
                             {"weights.bin": vae, "discriminator.bin": disc},
                             {"aligner": str(al_path.resolve()), "vae": str(vae_ck.path.resolve())}, extra)


def _stage_diffusion(run, paths, out, parents) -> Checkpoint:
    # the refined autoencoder is used when a gan checkpoint exists
    if "autoencoder" in parents:
        ae_path = Path(parents["autoencoder"])
    elif (paths.of("gan") / "checkpoint.json").exists():
        ae_path = paths.of("gan")
    else:
        ae_path = paths.of("vae")
    ae_ck = _require(ae_path, "vae")
    if ae_ck.stage not in ("vae", "gan"):
        raise MissingPrerequisite("requires stage: vae")
    al_path = Path(ae_ck.meta["parents"]["aligner"])
    corpus = load_corpus(ae_ck.corpus_dir)
    _check_lineage(corpus, ae_ck)
    vae = load_vae(ae_ck.path)
    for p in vae.parameters():
        p.requires_grad_(False)
    before = weights_hash(vae)
    alignments = align_corpus(load_aligner(al_path), corpus)
    cfg = run.stage_config("diffusion")
    durs = [a.durations for a in alignments]
    codec = fit_codec(durs, cfg.c0) if cfg.fit_c1 else DurationCodecConfig(c0=cfg.c0)
    posteriors = encode_corpus(vae, corpus, alignments)
    hist: list = []
    score = train_diffusion(posteriors, alignments, [it.phonemes.ids for it in corpus], cfg, codec, hist)
    after = weights_hash(vae)
    if before != after:
        raise AssertionError("autoencoder weights changed during diffusion training")
    _write_metrics(out / "metrics.csv", hist)
    extra = {"codec": asdict(codec), "vae_weights_hash": after, "final_dsm": hist[-1]["dsm"] if hist else None}
    return _write_checkpoint(out, "diffusion", run, corpus, ae_ck.corpus_dir, {"weights.bin": score},
                             {"aligner": str(al_path.resolve()), "autoencoder": str(ae_ck.path.resolve())}, extra)


_STAGE_FNS = {
    "data": _stage_data,
    "aligner": _stage_aligner,
    "vae": _stage_vae,
    "gan": _stage_gan,
    "diffusion": _stage_diffusion,
}


def run_pipeline(run: RunConfig, root, stages=STAGES) -> Dict[str, Checkpoint]:
    out = {}
    for s in stages:
        t0 = time.time()
        out[s] = run_stage(s, run, root)
        log.info("stage %s finished in %.1fs", s, time.time() - t0)
    return out


# --- evaluation -------------------------------------------------------------------------------

def _reconstruction_error(vae, corpus, alignments) -> float:
    errs = []
    for it, a in zip(corpus, alignments):
        errs.append(np.abs(reconstruct(vae, it.mel.values, a) - it.mel.values).mean())
    return float(np.mean(errs))


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["config_hash", "seed", "corpus_fingerprint", "created", "alignment", "reconstruction",
                 "durations", "template_correlation", "edit_fidelity", "adversarial"],
    "properties": {
        "config_hash": {"type": "string"},
        "seed": {"type": "integer"},
        "corpus_fingerprint": {"type": "string"},
        "created": {"type": "string"},
        "alignment": {
            "type": "object",
            "required": ["accuracy_within_1", "exact", "num_phonemes"],
            "properties": {
                "accuracy_within_1": {"type": "number", "minimum": 0, "maximum": 1},
                "exact": {"type": "number", "minimum": 0, "maximum": 1},
                "num_phonemes": {"type": "integer", "minimum": 0},
            },
        },
        "reconstruction": {
            "type": "object",
            "required": ["mean_abs_error", "value_range", "relative"],
            "properties": {
                "mean_abs_error": {"type": "number", "minimum": 0},
                "value_range": {"type": "number", "minimum": 0},
                "relative": {"type": "number", "minimum": 0},
            },
        },
        "durations": {
            "type": "object",
            "required": ["corpus_mean", "synth_mean", "max_abs_diff", "num_samples"],
            "properties": {
                "corpus_mean": {"type": "array", "items": {"type": ["number", "null"]}},
                "synth_mean": {"type": "array", "items": {"type": ["number", "null"]}},
                "max_abs_diff": {"type": ["number", "null"]},
                "num_samples": {"type": "integer"},
            },
        },
        "template_correlation": {
            "type": "object",
            "required": ["median", "fraction_above_0.8", "num_segments"],
            "properties": {
                "median": {"type": "number"},
                "fraction_above_0.8": {"type": "number"},
                "num_segments": {"type": "integer"},
            },
        },
        "edit_fidelity": {
            "type": "object",
            "required": ["mean_abs_vs_reconstruction", "relative", "median_residual_over_sigma", "num_edits"],
            "properties": {
                "mean_abs_vs_reconstruction": {"type": "number", "minimum": 0},
                "relative": {"type": "number", "minimum": 0},
                "median_residual_over_sigma": {"type": "number", "minimum": 0},
                "num_edits": {"type": "integer"},
            },
        },
        "adversarial": {
            "type": "object",
            "required": ["refiner_present", "mean_abs_residual"],
            "properties": {
                "refiner_present": {"type": "boolean"},
                "mean_abs_residual": {"type": "number", "minimum": 0},
            },
        },
    },
}


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)


def _nan_to_none(xs):
    return [None if not np.isfinite(v) else float(v) for v in xs]


def identity_edit_problems(corpus: Corpus, n: int) -> list:
    """Pick n utterances and an identity replacement of their middle phoneme."""
    probs = []
    for i, it in enumerate(corpus.items[:n]):
        ids = it.phonemes.ids
        M = ids.size
        mid = M // 2
        probs.append((i, EditSpec(mid, 1, M - mid - 1, ids[mid:mid + 1])))
    return probs


def evaluate_edits(stack: Stack, corpus: Corpus, alignments, cfg: EvalConfig) -> dict:
    """Identity edits: replace each chosen middle phoneme by itself.

    The edit's spectrogram is warped onto the source alignment and compared with the
    VAE reconstruction. Guidance residuals are measured on the kept latent rows.
    """
    probs = identity_edit_problems(corpus, cfg.num_edits)
    opts = EditOptions(sampler=SamplerOptions(steps=cfg.edit_steps, seed=cfg.seed), guidance=cfg.guidance)
    problems = [(corpus[i].mel.values, corpus[i].phonemes.ids, spec, alignments[i]) for i, spec in probs]
    results = edit_many(stack, problems, opts)
    maes, ratios = [], []
    for (i, spec), res in zip(probs, results):
        it = corpus[i]
        a_src = res.source_alignment
        # frames after the last spike belong to no phoneme and are never generated
        recon = reconstruct(stack.vae, it.mel.values, a_src)[:a_src.num_frames]
        warped = warp_to_reference(res.mel.values, res.alignment, a_src)
        maes.append(float(np.abs(warped - recon).mean()))
        kept_rows = torch.cat([res.x0[:spec.m_a], res.x0[spec.m_a + spec.m_b:]])
        # the duration channel is compared through its latent rows only
        resid = (kept_rows - res.observation.o).abs() / res.observation.sigma_tilde
        ratios.append(resid[:, 1:].flatten())
    rng = corpus.value_range()
    mae = float(np.mean(maes))
    return {
        "mean_abs_vs_reconstruction": mae,
        "relative": mae / rng,
        "median_residual_over_sigma": float(torch.cat(ratios).median()),
        "num_edits": len(results),
    }


def evaluate_zero_shot(stack: Stack, corpus: Corpus, alignments, num_trials: int = 50, new_len: int = 4,
                       cfg: Optional[EvalConfig] = None) -> dict:
    """Prompt-based generation: does the continuation use the prompt speaker's templates?

    Each trial takes an utterance as prompt and appends ``new_len`` random phonemes. The
    generated segments are scored against every speaker's templates and the best-scoring
    set counts as the prediction.
    """
    cfg = cfg or EvalConfig()
    if corpus.templates.shape[0] < 2:
        raise ValueError("zero-shot discrimination needs a corpus with at least two speakers")
    rng = np.random.default_rng(cfg.seed)
    V = corpus.config.vocab_size
    problems, prompts = [], []
    for k in range(num_trials):
        i = k % len(corpus)
        it = corpus[i]
        new = rng.integers(V, size=new_len)
        M = it.phonemes.ids.size
        problems.append((it.mel.values, it.phonemes.ids, EditSpec(M, 0, 0, new), alignments[i]))
        prompts.append((it.speaker, M, np.concatenate([it.phonemes.ids, new])))
    opts = EditOptions(sampler=SamplerOptions(steps=cfg.edit_steps, seed=cfg.seed), guidance=cfg.guidance)
    hits = []
    for res, (spk, M, ids) in zip(edit_many(stack, problems, opts), prompts):
        scores = template_set_scores(res.mel.values, res.alignment, ids, corpus.templates, slice(M, None))
        hits.append(int(np.argmax(scores)) == spk)
    return {"match_rate": float(np.mean(hits)), "num_trials": len(hits)}


def evaluate(diffusion_path, corpus: Optional[Corpus] = None, cfg: Optional[EvalConfig] = None,
             out_file=None) -> dict:
    """Proxy metrics for a trained stack against the corpus ground truth."""
    ck = read_checkpoint(diffusion_path)
    run = ck.run_config()
    cfg = cfg or run.eval
    stack = load_stack(diffusion_path)
    corpus = corpus if corpus is not None else load_corpus(ck.corpus_dir)
    truth = [it.true_alignment for it in corpus]
    alignments = align_corpus(stack.aligner, corpus)
    V = corpus.config.vocab_size

    # alignment
    acc1 = alignment_accuracy(alignments, truth, tol=1)
    acc0 = alignment_accuracy(alignments, truth, tol=0)

    # reconstruction
    mae = _reconstruction_error(stack.vae, corpus, alignments)
    vrange = corpus.value_range()

    # synthesis: durations and templates
    ws = [corpus.items[i % len(corpus)].phonemes.ids for i in range(cfg.num_synth)]
    spks = [corpus.items[i % len(corpus)].speaker for i in range(cfg.num_synth)]
    gen = torch.Generator().manual_seed(cfg.seed)
    states = sample_batch(stack.score, ws, cfg.synth_steps, stack.schedule, gen, t_eps=stack.t_eps)
    synth_al, corrs = [], []
    for w, spk, x0 in zip(ws, spks, states):
        mel, a = decode_state(stack, x0)
        synth_al.append(a)
        corrs.extend(template_correlations(mel.values, a, w, corpus.templates[spk]))
    corpus_d = duration_stats(truth, [it.phonemes.ids for it in corpus], V)["mean"]
    synth_d = duration_stats(synth_al, ws, V)["mean"]
    diffs = np.abs(np.asarray(corpus_d) - np.asarray(synth_d))
    corrs = np.asarray(corrs)

    # adversarial residual magnitude on the corpus
    resid = 0.0
    if stack.vae.refiner is not None:
        vals = []
        for it, a in zip(corpus.items[:50], alignments[:50]):
            vals.append(np.abs(reconstruct(stack.vae, it.mel.values, a, refine=True)
                               - reconstruct(stack.vae, it.mel.values, a, refine=False)).mean())
        resid = float(np.mean(vals))

    report = {
        "config_hash": ck.meta["config_hash"],
        "seed": ck.meta["seed"],
        "corpus_fingerprint": corpus.fingerprint(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "alignment": {"accuracy_within_1": acc1, "exact": acc0, "num_phonemes": int(sum(len(a) for a in truth))},
        "reconstruction": {"mean_abs_error": mae, "value_range": vrange, "relative": mae / vrange},
        "durations": {
            "corpus_mean": _nan_to_none(corpus_d),
            "synth_mean": _nan_to_none(synth_d),
            "max_abs_diff": float(np.nanmax(diffs)) if np.isfinite(diffs).any() else None,
            "num_samples": len(ws),
        },
        "template_correlation": {
            "median": float(np.median(corrs)),
            "fraction_above_0.8": float((corrs > 0.8).mean()),
            "num_segments": int(corrs.size),
        },
        "edit_fidelity": evaluate_edits(stack, corpus, alignments, cfg),
        "adversarial": {"refiner_present": stack.vae.refiner is not None, "mean_abs_residual": resid},
    }
    validate_report(report)
    if out_file is not None:
        Path(out_file).write_text(json.dumps(report, indent=1))
    return report


# --- export -----------------------------------------------------------------------------------

def export_features(mel_bin, out_prefix) -> Dict[str, Path]:
    """Internal tensor file -> ``<prefix>.npy`` (same dtype and shape) and ``<prefix>.png`` heatmap.

    The PNG has one row per frame and one column per Mel bin, min-max scaled to 8 bits;
    a constant spectrogram renders as a uniform mid-grey image.
    """
    from PIL import Image

    arr = tensorio.load_tensor(mel_bin)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D spectrogram, got shape {arr.shape}")
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    npy = prefix.with_suffix(".npy")
    png = prefix.with_suffix(".png")
    np.save(npy, arr, allow_pickle=False)
    Image.fromarray(heatmap(arr), mode="L").save(png)
    return {"npy": npy, "png": png}


def heatmap(arr: np.ndarray) -> np.ndarray:
    x = np.asarray(arr, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return np.full(x.shape, 128, dtype=np.uint8)
    return np.round((x - lo) / (hi - lo) * 255).astype(np.uint8)


def import_features(npy_path, out_bin) -> Path:
    """Portable NPY -> internal tensor file."""
    arr = np.load(npy_path, allow_pickle=False)
    tensorio.save_tensor(out_bin, arr)
    return Path(out_bin)
