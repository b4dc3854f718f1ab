"""Command line front end.

Exit codes: 0 ok, 2 configuration or input error, 3 missing prerequisite, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import pipeline, tensorio
from .errors import ConfigError, MissingPrerequisite, NumericalError
from .types import MelSpectrogram

log = logging.getLogger("latentspeech")


def parse_ids(text: str) -> np.ndarray:
    """'0 3 2', '0,3,2' or names 'p0 p3 p2' -> int array. An empty string gives an empty array.

    Synthetic phoneme k is named p<k>.
    """
    parts = text.replace(",", " ").split()
    try:
        return np.asarray([int(p[1:] if p[:1].lower() == "p" else p) for p in parts], dtype=np.int64)
    except ValueError as e:
        raise ConfigError(f"phonemes must be ids or p<id> names: {text!r}") from e


def parse_span(text: str):
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError as e:
        raise ConfigError(f"span must look like a:b, got {text!r}") from e
    if a < 0 or b < a:
        raise ConfigError(f"invalid span {text!r}")
    return a, b


def _run_config(args) -> pipeline.RunConfig:
    run = pipeline.RunConfig.load(args.config) if args.config else pipeline.RunConfig()
    if args.seed is not None:
        run.seed = args.seed
    if getattr(args, "corpus", None):
        run.corpus_dir = args.corpus
    return run


def _root(args) -> Path:
    return Path(args.root) if args.root else pipeline.default_root()


def _write_mel(path, values: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tensorio.save_tensor(path, np.asarray(values, dtype=np.float32))


def _read_mel(path) -> MelSpectrogram:
    return MelSpectrogram(tensorio.load_tensor(path))


def _stack_path(args) -> Path:
    return Path(args.ckpt) if args.ckpt else _root(args) / "diffusion"


def _load_stack(args):
    path = _stack_path(args)
    if not (path / "checkpoint.json").exists():
        raise MissingPrerequisite("requires stage: diffusion")
    return pipeline.load_stack(path), pipeline.read_checkpoint(path)


def _sidecar(out, ck, args, **extra) -> None:
    """Provenance next to every generated tensor: config hash and seed."""
    meta = {"config_hash": ck.meta["config_hash"], "seed": args.seed_used, "checkpoint": str(ck.path), **extra}
    Path(str(out) + ".json").write_text(json.dumps(meta, indent=1))


def _edit_options(args, ck):
    from .inverse import EditOptions, SamplerOptions

    ev = ck.run_config().eval
    return EditOptions(sampler=SamplerOptions(steps=args.steps, sampler=args.sampler, seed=args.seed_used),
                       guidance=ev.guidance)


# --- verbs --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    run = _run_config(args)
    ck = pipeline.run_stage("data", run, _root(args), out=args.out)
    print(f"corpus written to {ck.path} (fingerprint {ck.fingerprint})")
    return 0


def _train(stage: str, parent_key: Optional[str] = None):
    def cmd(args) -> int:
        run = _run_config(args)
        parents = {}
        if parent_key and getattr(args, "parent", None):
            parents[parent_key] = Path(args.parent)
        ck = pipeline.run_stage(stage, run, _root(args), out=args.out, parents=parents)
        print(f"{stage} checkpoint written to {ck.path}")
        return 0

    return cmd


def cmd_synthesize(args) -> int:
    from .diffusion import synthesize

    stack, ck = _load_stack(args)
    args.seed_used = args.seed or 0
    mel, a, _ = synthesize(stack, parse_ids(args.phonemes), args.steps, args.sampler, args.seed_used)
    _write_mel(args.out, mel.values)
    _sidecar(args.out, ck, args, spikes=a.spikes.tolist())
    print(f"wrote {mel.num_frames} frames to {args.out}")
    return 0


def cmd_edit(args) -> int:
    from .inverse import EditSpec, edit

    stack, ck = _load_stack(args)
    args.seed_used = args.seed or 0
    y = _read_mel(args.mel)
    w = parse_ids(args.phonemes)
    lo, hi = parse_span(args.span)
    if hi > w.size:
        raise ConfigError(f"span {args.span} exceeds the {w.size} source phonemes")
    spec = EditSpec(lo, hi - lo, w.size - hi, parse_ids(args.replacement))
    mel, a = edit(stack, y, w, spec, _edit_options(args, ck))
    _write_mel(args.out, mel.values)
    _sidecar(args.out, ck, args, spikes=a.spikes.tolist(), span=[lo, hi])
    print(f"wrote {mel.num_frames} frames to {args.out}")
    return 0


def cmd_clone(args) -> int:
    from .inverse import zero_shot

    stack, ck = _load_stack(args)
    args.seed_used = args.seed or 0
    mel = zero_shot(stack, _read_mel(args.ref_mel), parse_ids(args.ref_phonemes), parse_ids(args.text_phonemes),
                    _edit_options(args, ck))
    _write_mel(args.out, mel.values)
    _sidecar(args.out, ck, args)
    print(f"wrote {mel.num_frames} frames to {args.out}")
    return 0


def cmd_align(args) -> int:
    from .data import load_corpus

    path = Path(args.ckpt) if args.ckpt else _root(args) / "aligner"
    if not (path / "checkpoint.json").exists():
        raise MissingPrerequisite("requires stage: aligner")
    model = pipeline.load_aligner(path)
    corpus = load_corpus(args.corpus or _root(args) / "data")
    with torch.no_grad():
        out = {it.uid: model.align(it.mel, it.phonemes).spikes.tolist() for it in corpus}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(out, indent=1))
    print(f"aligned {len(out)} utterances into {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    path = _stack_path(args)
    if not (path / "checkpoint.json").exists():
        raise MissingPrerequisite("requires stage: diffusion")
    cfg = pipeline.read_checkpoint(path).run_config().eval
    if args.num_synth is not None:
        cfg.num_synth = args.num_synth
    if args.num_edits is not None:
        cfg.num_edits = args.num_edits
    corpus = None
    if args.corpus:
        from .data import load_corpus

        corpus = load_corpus(args.corpus)
    report = pipeline.evaluate(path, corpus, cfg, out_file=args.out)
    print(json.dumps(report, indent=1))
    return 0


def cmd_export(args) -> int:
    out = pipeline.export_features(args.mel, args.out)
    print(f"wrote {out['npy']} and {out['png']}")
    return 0


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentspeech", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config=True):
        sp.add_argument("--root", help=f"checkpoint root (default ${pipeline.ROOT_ENV} or runs/default)")
        sp.add_argument("--seed", type=int, default=None)
        if config:
            sp.add_argument("--config", help="run configuration JSON")

    sp = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(sp)
    sp.add_argument("--out", help="corpus directory (default <root>/data)")
    sp.set_defaults(fn=cmd_gen_data)

    train = [
        ("train-aligner", "aligner", "data", "--corpus", "corpus directory"),
        ("train-vae", "vae", "aligner", "--aligner-ckpt", "aligner checkpoint directory"),
        ("train-gan", "gan", "autoencoder", "--vae-ckpt", "vae checkpoint directory"),
        ("train-diffusion", "diffusion", "autoencoder", "--vae-ckpt", "vae or gan checkpoint directory"),
    ]
    for verb, stage, key, flag, help_ in train:
        sp = sub.add_parser(verb, help=f"train the {stage} stage")
        common(sp)
        if flag == "--corpus":
            sp.add_argument("--corpus", help=help_)
        else:
            sp.add_argument(flag, dest="parent", help=help_)
        sp.add_argument("--out", help=f"checkpoint directory (default <root>/{stage})")
        sp.set_defaults(fn=_train(stage, key if flag != "--corpus" else None))

    def gen_opts(sp, steps):
        common(sp, config=False)
        sp.add_argument("--ckpt", help="diffusion checkpoint directory (default <root>/diffusion)")
        sp.add_argument("--steps", type=int, default=steps)
        sp.add_argument("--sampler", choices=["em", "ode"], default="em")
        sp.add_argument("--out", required=True, help="output spectrogram tensor file")

    sp = sub.add_parser("synthesize", help="generate a spectrogram for a phoneme sequence")
    gen_opts(sp, 100)
    sp.add_argument("--phonemes", required=True, help="phoneme ids or names, e.g. '0 3 2 5' or 'p0 p3 p2 p5'")
    sp.set_defaults(fn=cmd_synthesize)

    sp = sub.add_parser("edit", help="replace, insert or delete a phoneme span")
    gen_opts(sp, 300)
    sp.add_argument("--mel", required=True, help="source spectrogram tensor file")
    sp.add_argument("--phonemes", required=True, help="source phoneme ids")
    sp.add_argument("--span", required=True, help="a:b, 0-based half-open range of source phonemes to replace")
    sp.add_argument("--replacement", default="", help="replacement phoneme ids (empty deletes the span)")
    sp.set_defaults(fn=cmd_edit)

    sp = sub.add_parser("clone", help="continue a reference utterance with new phonemes")
    gen_opts(sp, 300)
    sp.add_argument("--ref-mel", required=True)
    sp.add_argument("--ref-phonemes", required=True)
    sp.add_argument("--text-phonemes", required=True, help="phonemes to generate in the reference voice")
    sp.set_defaults(fn=cmd_clone)

    sp = sub.add_parser("align", help="write per-utterance spike positions from a trained aligner")
    common(sp, config=False)
    sp.add_argument("--ckpt", help="aligner checkpoint directory (default <root>/aligner)")
    sp.add_argument("--corpus", help="corpus directory (default <root>/data)")
    sp.add_argument("--out", required=True, help="alignments JSON path")
    sp.set_defaults(fn=cmd_align)

    sp = sub.add_parser("evaluate", help="write the JSON metrics report")
    common(sp, config=False)
    sp.add_argument("--ckpt", help="diffusion checkpoint directory (default <root>/diffusion)")
    sp.add_argument("--corpus", help="evaluate on this corpus instead of the training corpus")
    sp.add_argument("--num-synth", type=int, default=None)
    sp.add_argument("--num-edits", type=int, default=None)
    sp.add_argument("--out", help="report path")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("export", help="convert a spectrogram tensor to .npy and a .png heatmap")
    sp.add_argument("--mel", required=True)
    sp.add_argument("--out", required=True, help="output prefix")
    sp.set_defaults(fn=cmd_export)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except MissingPrerequisite as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return 4
    except (ConfigError, tensorio.CorruptTensorFile, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
