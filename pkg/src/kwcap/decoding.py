"""Greedy and beam-search caption generation.

The search routines work on any ``step_fn(prefix) -> log_probs`` callable so
they can be checked against brute-force enumeration on toy scorers; the
model-facing wrappers build that callable from a trained model.

Hypotheses are ranked for the final answer by length-normalised log
probability (sum over generated tokens, EOS included, divided by their count).
Pruning inside the beam uses the raw sum.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data_io import BOS, EOS, PAD, Vocabulary, detokenize
from .keywords import KeywordVocabulary
from .model import CaptionModel, assemble_memory

StepFn = Callable[[Sequence[int]], np.ndarray]

DEFAULT_BEAM = 4
DEFAULT_MAX_LEN = 30


@dataclass
class Hypothesis:
    tokens: list[int]  # BOS first
    log_prob: float = 0.0
    finished: bool = False

    @property
    def score(self) -> float:
        return self.log_prob / max(1, len(self.tokens) - 1)


def greedy_search(step_fn: StepFn, bos: int, eos: int, max_len: int) -> Hypothesis:
    hyp = Hypothesis([bos])
    for _ in range(max_len):
        lp = step_fn(hyp.tokens)
        w = int(np.argmax(lp))
        hyp = Hypothesis(hyp.tokens + [w], hyp.log_prob + float(lp[w]), w == eos)
        if hyp.finished:
            break
    return hyp


def beam_search_fn(step_fn: StepFn, bos: int, eos: int, beam_width: int, max_len: int) -> Hypothesis:
    """Keep the ``beam_width`` best expansions per step; finished ones leave the beam.

    Pruning ranks by summed log-probability; the returned hypothesis is the
    one with the best per-token score.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    live = [Hypothesis([bos])]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        cands = []
        for hi, h in enumerate(live):
            lp = step_fn(h.tokens)
            for w in np.flatnonzero(np.isfinite(lp)):
                cands.append((h.log_prob + float(lp[w]), hi, int(w)))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        nxt = []
        for s, hi, w in cands[:beam_width]:
            h = Hypothesis(live[hi].tokens + [w], s, w == eos)
            (finished if h.finished else nxt).append(h)
        live = nxt
        if not live:
            break
    # hypotheses still open at max_len compete as truncated captions
    return max(finished + live, key=lambda h: h.score)  # max keeps the first of equal scores


def strip_special(tokens: Sequence[int]) -> list[int]:
    return [t for t in tokens if t not in (PAD, BOS, EOS)]


@dataclass
class PreparedClip:
    """Encoder-side results for one clip, reused across decoding steps."""

    memory: nx.Tensor
    frame_posteriors: np.ndarray  # C x T
    z: np.ndarray
    keywords: list[int]


def prepare_clip(model: CaptionModel, frames: np.ndarray, keyword_override=None) -> PreparedClip:
    with nx.no_grad():
        nu, frame_post, z = model.encode_clip(frames)
        keywords = model.choose_keywords(z.data, keyword_override)
        memory = assemble_memory(nu, model.keyword_memory(keywords))
    return PreparedClip(memory, frame_post.data, z.data, keywords)


def model_step_fn(model: CaptionModel, clip: PreparedClip) -> StepFn:
    def step(prefix: Sequence[int]) -> np.ndarray:
        with nx.no_grad():
            logits = model.decode(clip.memory, list(prefix)).data[-1]
        z = logits - logits.max()
        lp = z - np.log(np.exp(z).sum())
        lp[[PAD, BOS]] = -np.inf
        return lp

    return step


def _max_len(model: CaptionModel, max_len: int) -> int:
    return min(max_len, model.config.max_caption_len)


def greedy_decode(model, frames, max_len: int = DEFAULT_MAX_LEN, keyword_override=None) -> list[int]:
    clip = prepare_clip(model, frames, keyword_override)
    hyp = greedy_search(model_step_fn(model, clip), BOS, EOS, _max_len(model, max_len))
    return strip_special(hyp.tokens)


def beam_search(
    model, frames, beam_width: int = DEFAULT_BEAM, max_len: int = DEFAULT_MAX_LEN, keyword_override=None
) -> list[int]:
    clip = prepare_clip(model, frames, keyword_override)
    hyp = beam_search_fn(model_step_fn(model, clip), BOS, EOS, beam_width, _max_len(model, max_len))
    return strip_special(hyp.tokens)


@dataclass
class CaptionResult:
    caption: str
    tokens: list[int]
    keywords: list[str]
    keyword_ids: list[int]
    z: np.ndarray
    frame_posteriors: np.ndarray  # C x T
    attention: list[list[np.ndarray]] = field(repr=False)  # [layer][head] -> n x (T+K)
    score: float = 0.0

    def to_dict(self) -> dict:
        return {
            "caption": self.caption,
            "keywords": self.keywords,
            "keyword_ids": self.keyword_ids,
            "z": [float(x) for x in self.z],
            "score": self.score,
        }

    def dump(self, out_dir: str | os.PathLike) -> None:
        """JSON bundle plus CSV matrices: posteriors (C x T) and one file per attention head."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "caption.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        _write_matrix(out / "posteriors.csv", self.frame_posteriors)
        for layer, heads in enumerate(self.attention):
            for head, mat in enumerate(heads):
                _write_matrix(out / f"attention_layer{layer}_head{head}.csv", mat)


def _write_matrix(path: Path, mat: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(mat):
            writer.writerow([repr(float(x)) for x in row])


def caption_clip(
    model: CaptionModel,
    vocab: Vocabulary,
    keyword_vocab: KeywordVocabulary,
    frames: np.ndarray,
    beam_width: int = DEFAULT_BEAM,
    max_len: int = DEFAULT_MAX_LEN,
    keyword_override=None,
) -> CaptionResult:
    clip = prepare_clip(model, frames, keyword_override)
    step = model_step_fn(model, clip)
    limit = _max_len(model, max_len)
    if beam_width == 1:
        hyp = greedy_search(step, BOS, EOS, limit)
    else:
        hyp = beam_search_fn(step, BOS, EOS, beam_width, limit)
    # queries that produced each returned token
    prefix = hyp.tokens if hyp.finished else hyp.tokens[:-1]
    prefix = prefix[: model.config.max_caption_len]
    record: list[np.ndarray] = []
    with nx.no_grad():
        model.decode(clip.memory, prefix, record=record)
    tokens = strip_special(hyp.tokens)
    return CaptionResult(
        caption=detokenize(vocab.decode(tokens)),
        tokens=tokens,
        keywords=[keyword_vocab.lemmas[i] for i in clip.keywords],
        keyword_ids=list(clip.keywords),
        z=clip.z,
        frame_posteriors=clip.frame_posteriors,
        attention=[[w[h] for h in range(w.shape[0])] for w in record],
        score=hyp.score,
    )
