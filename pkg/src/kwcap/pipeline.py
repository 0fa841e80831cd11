"""Glue between a dataset manifest and a trainable model bundle."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig
from .data_io import (
    DatasetManifest,
    EmbeddingTable,
    build_vocab,
    load_embeddings,
    load_features,
    random_embeddings,
)
from .keywords import TagLexicon, build_keyword_vocab, compute_priors
from .model import CaptionModel
from .training import Bundle, Example, TrainResult, load_params, prepare_examples, train


def training_captions(manifest: DatasetManifest) -> list[str]:
    return [text for clip in manifest.split("train") for text in clip.captions]


def feature_dim(manifest: DatasetManifest) -> int:
    clips = manifest.split("train") or manifest.clips
    if not clips:
        raise ValueError("manifest has no clips")
    return load_features(manifest.feature_path(clips[0])).frames.shape[1]


def build_bundle(
    manifest: DatasetManifest,
    lexicon: TagLexicon,
    model_cfg: ModelConfig,
    seed: int,
    min_count: int = 5,
    embeddings: str | Path | None = None,
) -> Bundle:
    """Vocabularies, priors, embeddings and a freshly initialised model.

    ``vocab_size`` and ``d_x`` in ``model_cfg`` are replaced by the values the
    corpus implies; without an ``embeddings`` path a seeded random table is used.
    """
    captions = training_captions(manifest)
    if not captions:
        raise ValueError("manifest has no training captions")
    vocab = build_vocab(captions, min_count)
    kw_vocab = build_keyword_vocab(captions, lexicon, model_cfg.keyword_vocab_size)
    if embeddings is None:
        table: EmbeddingTable = random_embeddings(vocab.tokens + kw_vocab.lemmas, model_cfg.d_w, seed)
    else:
        table = load_embeddings(embeddings, model_cfg.d_w)
    cfg = replace(model_cfg, vocab_size=len(vocab), d_x=feature_dim(manifest))
    model = CaptionModel.initialize(cfg, table.matrix(vocab.tokens), table.matrix(kw_vocab.lemmas), seed)
    bundle = Bundle(model, vocab, kw_vocab, compute_priors([[0]], cfg.keyword_vocab_size))
    train_set = examples_for(bundle, manifest, "train", lexicon)
    bundle.priors = compute_priors([ex.keywords for ex in train_set], cfg.keyword_vocab_size)
    return bundle


def examples_for(bundle: Bundle, manifest: DatasetManifest, split: str, lexicon: TagLexicon) -> list[Example]:
    return prepare_examples(
        manifest, split, bundle.vocab, bundle.keyword_vocab, lexicon, bundle.model.config.d_x
    )


def fit(bundle: Bundle, manifest: DatasetManifest, lexicon: TagLexicon, cfg: TrainConfig) -> TrainResult:
    """Train in place and leave the best-validation parameters loaded."""
    result = train(
        bundle.model,
        examples_for(bundle, manifest, "train", lexicon),
        examples_for(bundle, manifest, "validation", lexicon),
        bundle.priors,
        cfg,
    )
    load_params(bundle.model, result.best_params)
    bundle.optimizer = result.optimizer
    bundle.meta = {"train_config": cfg.to_dict(), "best_epoch": result.best_epoch}
    return result


def eval_clips(manifest: DatasetManifest, split: str, d_x: int | None = None):
    """``(clip_id, frames, captions)`` triples for the metrics module."""
    return [
        (clip.id, load_features(manifest.feature_path(clip), d_x).frames, clip.captions)
        for clip in manifest.split(split)
    ]


def frames_of(path, d_x: int | None = None) -> np.ndarray:
    return load_features(path, d_x).frames
