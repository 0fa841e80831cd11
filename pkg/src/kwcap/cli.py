"""Command-line entry points: train, caption, eval, extract-keywords, synth.

Settings come from built-in defaults, then a flat JSON ``--config`` file
(keys are flag names with underscores), then explicit flags. Exit codes:
0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .config import ModelConfig, TrainConfig
from .data_io import FormatError, IncompatibleCheckpoint, load_manifest
from .decoding import DEFAULT_BEAM, DEFAULT_MAX_LEN, caption_clip
from .keywords import (
    CorpusError,
    build_keyword_vocab,
    compute_priors,
    content_lemmas,
    default_lexicon,
    extract_keywords,
    load_lexicon,
    save_keyword_file,
)
from .metrics import EmptyCorpusError, evaluate
from .numerics import NonFiniteError
from .pipeline import build_bundle, eval_clips, fit, frames_of, training_captions
from .training import TrainingDiverged, load_bundle, save_bundle, write_text

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("kwcap")


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    manifest: str | None = None
    embeddings: str | None = None
    random_embeddings: bool = False
    lexicon: str | None = None
    checkpoint: str | None = None
    out: str = "."
    min_count: int = 5
    beam: int = DEFAULT_BEAM
    max_len: int = DEFAULT_MAX_LEN

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("model", "train")}
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), **d}


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"extra"}
_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"model", "train"}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the config file and non-None command-line flags."""
    merged: dict[str, Any] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        merged.update(json.loads(path.read_text(encoding="utf-8")))
    merged.update({k: v for k, v in vars(args).items() if v is not None and k not in ("config", "command", "func")})
    unknown = set(merged) - _MODEL_KEYS - _TRAIN_KEYS - _RUN_KEYS - _COMMAND_KEYS
    if unknown:
        raise InputError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    model = ModelConfig(**{k: v for k, v in merged.items() if k in _MODEL_KEYS})
    train = TrainConfig(**{k: v for k, v in merged.items() if k in _TRAIN_KEYS})
    run = RunConfig(model, train, **{k: v for k, v in merged.items() if k in _RUN_KEYS})
    return run


def _lexicon(run: RunConfig):
    if run.lexicon is None:
        return default_lexicon()
    if not Path(run.lexicon).is_file():
        raise InputError(f"lexicon not found: {run.lexicon}")
    return load_lexicon(run.lexicon)


def _manifest(run: RunConfig):
    if run.manifest is None:
        raise InputError("--manifest is required")
    if not Path(run.manifest).is_file():
        raise InputError(f"manifest not found: {run.manifest}")
    return load_manifest(run.manifest)


def _checkpoint(run: RunConfig):
    if run.checkpoint is None:
        raise InputError("--checkpoint is required")
    if not Path(run.checkpoint).is_file():
        raise InputError(f"checkpoint not found: {run.checkpoint}")
    return load_bundle(run.checkpoint)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    run = resolve_config(args)
    if run.embeddings is None and not run.random_embeddings:
        raise InputError("--embeddings is required unless --random-embeddings is given")
    if run.embeddings is not None and not Path(run.embeddings).is_file():
        raise InputError(f"embeddings file not found: {run.embeddings}")
    manifest = _manifest(run)
    lexicon = _lexicon(run)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "run_config.json", json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
    bundle = build_bundle(
        manifest, lexicon, run.model, run.train.seed, run.min_count,
        None if run.random_embeddings else run.embeddings,
    )  # fmt: skip
    save_keyword_file(out / "keywords.json", bundle.keyword_vocab, bundle.priors)
    result = fit(bundle, manifest, lexicon, run.train)
    write_text(out / "loss.csv", result.history_csv())
    write_text(out / "val_loss.csv", result.val_csv())
    save_bundle(out / "checkpoint.ckpt", bundle)
    log.info("best epoch %d, validation L_cap %.6f", result.best_epoch, result.best_val_loss)
    return EXIT_OK


def cmd_caption(args) -> int:
    run = resolve_config(args)
    bundle = _checkpoint(run)
    if not Path(args.features).is_file():
        raise InputError(f"feature file not found: {args.features}")
    frames = frames_of(args.features, bundle.model.config.d_x)
    override = None
    if args.keywords:
        override = []
        for lemma in (s.strip() for s in args.keywords.split(",")):
            if lemma not in bundle.keyword_vocab.index:
                raise InputError(f"unknown keyword {lemma!r} (not in the keyword vocabulary)")
            override.append(bundle.keyword_vocab.index[lemma])
    result = caption_clip(
        bundle.model, bundle.vocab, bundle.keyword_vocab, frames, run.beam, run.max_len, override
    )
    if args.dump_dir:
        result.dump(args.dump_dir)
    print(json.dumps(result.to_dict(), indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    run = resolve_config(args)
    bundle = _checkpoint(run)
    manifest = _manifest(run)
    clips = eval_clips(manifest, args.split, bundle.model.config.d_x)
    if not clips:
        raise InputError(f"split {args.split!r} is empty")
    label = args.label or ("oracle-keywords" if args.oracle_keywords else "estimated-keywords")
    report = evaluate(
        bundle.model, bundle.vocab, bundle.keyword_vocab, _lexicon(run), clips,
        run.beam, run.max_len, args.oracle_keywords, args.oracle_copy, label,
    )  # fmt: skip
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = args.report_name or f"eval_{args.split}"
    write_text(out / f"{stem}.json", report.to_json())
    write_text(out / f"{stem}.csv", report.to_csv())
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_extract_keywords(args) -> int:
    run = resolve_config(args)
    lexicon = _lexicon(run)
    if args.corpus is None:
        lemmas = content_lemmas(args.caption or "", lexicon)
        if lemmas:
            print(" ".join(lemmas))
        return EXIT_OK
    path = Path(args.corpus)
    if not path.is_file():
        raise InputError(f"corpus not found: {path}")
    if path.suffix == ".json":
        captions = training_captions(load_manifest(path, check_files=False))
    else:
        captions = [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    distinct = {l for text in captions for l in content_lemmas(text, lexicon) if l != "be"}
    vocab = build_keyword_vocab(captions, lexicon, min(run.model.keyword_vocab_size, len(distinct)))
    priors = compute_priors([extract_keywords(t, vocab, lexicon) for t in captions], len(vocab))
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    save_keyword_file(out / "keywords.json", vocab, priors)
    print(" ".join(vocab.lemmas))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data_io import generate_synthetic_dataset

    seed = args.seed if args.seed is not None else 0
    m = generate_synthetic_dataset(args.out or ".", seed, args.n_clips, args.n_event_types, args.d_x_synth, args.n_val)
    print(f"wrote {len(m.clips)} clips to {m.root}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

_COMMAND_KEYS = {
    "features", "keywords", "dump_dir", "split", "oracle_keywords", "oracle_copy", "label",
    "report_name", "caption", "corpus", "n_clips", "n_event_types", "d_x_synth", "n_val", "seed",
    "verbose",
}  # fmt: skip


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat JSON file of flag values")
    p.add_argument("--seed", type=int, help="seed for every random choice")
    p.add_argument("--out", help="output directory")
    p.add_argument("--lexicon", help="TSV lexicon (surface, pos, lemma)")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("-v", "--verbose", action="store_true", default=None)
    return p


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    for name, typ in [
        ("d_w", int), ("d_f", int), ("num_layers", int), ("num_heads", int), ("ffn_dim", int),
        ("num_keywords", int), ("keyword_vocab_size", int), ("keyword_hidden", int),
        ("dropout_input", float), ("dropout_layer", float), ("max_caption_len", int),
        ("init_std", float),
    ]:  # fmt: skip
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    t = p.add_argument_group("training")
    for name, typ in [
        ("epochs", int), ("batch_size", int), ("warmup_steps", int), ("max_steps", int),
        ("alpha", float), ("beta1", float), ("beta2", float), ("adam_eps", float),
        ("grad_clip", float), ("label_smoothing", float), ("keyword_source", str),
    ]:  # fmt: skip
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="kwcap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train and keep the best validation model")
    p.add_argument("--embeddings", help="word-vector text file")
    p.add_argument("--random-embeddings", dest="random_embeddings", action="store_true", default=None)
    p.add_argument("--min-count", dest="min_count", type=int)
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", parents=[common], help="caption one feature file")
    p.add_argument("features", help="AFSQ feature file")
    p.add_argument("--keywords", help="comma-separated keyword lemmas replacing the estimated ones")
    p.add_argument("--dump-dir", dest="dump_dir", help="write posterior and attention CSVs here")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", parents=[common], help="score a manifest split")
    p.add_argument("--split", default="test")
    p.add_argument("--oracle-keywords", dest="oracle_keywords", action="store_true", default=False)
    p.add_argument("--oracle-copy", dest="oracle_copy", action="store_true", default=False)
    p.add_argument("--label")
    p.add_argument("--report-name", dest="report_name")
    p.add_argument("--keyword-vocab-size", dest="keyword_vocab_size", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract-keywords", parents=[common], help="keyword lemmas of a caption or corpus")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--caption")
    src.add_argument("--corpus", help="manifest JSON or text file with one caption per line")
    p.add_argument("--keyword-vocab-size", dest="keyword_vocab_size", type=int)
    p.set_defaults(func=cmd_extract_keywords)

    p = sub.add_parser("synth", parents=[common], help="write a seeded synthetic dataset")
    p.add_argument("--n-clips", dest="n_clips", type=int, default=10)
    p.add_argument("--n-event-types", dest="n_event_types", type=int, default=5)
    p.add_argument("--d-x", dest="d_x_synth", type=int, default=16)
    p.add_argument("--n-val", dest="n_val", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"kwcap: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        InputError, FileNotFoundError, FormatError, IncompatibleCheckpoint, CorpusError,
        EmptyCorpusError, ValueError, json.JSONDecodeError,
    ) as exc:  # fmt: skip
        print(f"kwcap: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
