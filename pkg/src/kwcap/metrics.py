"""Corpus caption metrics (BLEU-1..4, ROUGE-L, CIDEr-D) and keyword accuracy.

Hypotheses are token lists; references are, per clip, a list of token
lists. Scores are fractions here; :class:`EvalReport` scales them by 100.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data_io import detokenize, is_punctuation, tokenize
from .decoding import DEFAULT_BEAM, DEFAULT_MAX_LEN, caption_clip
from .keywords import KeywordVocabulary, TagLexicon, extract_keywords

Tokens = Sequence[str]

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_MAX_N = 4

# column order of the report tables
REPORT_COLUMNS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "CIDEr", "ROUGE-L", "KeywordAcc")
ABSENT_METRICS = ("METEOR", "SPICE", "SPIDEr")


class EmptyCorpusError(ValueError):
    pass


def _check(hyps, refs):
    if not hyps:
        raise EmptyCorpusError("no hypotheses to score")
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} reference sets")
    for i, r in enumerate(refs):
        if not r:
            raise ValueError(f"clip {i} has no references")


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyps: Sequence[Tokens], refs: Sequence[Sequence[Tokens]], n: int = 4) -> float:
    """Corpus BLEU-n with clipped counts and closest-reference brevity penalty."""
    _check(hyps, refs)
    if not 1 <= n <= 4:
        raise ValueError("BLEU order must lie in 1..4")
    matched = [0] * n
    total = [0] * n
    hyp_len = ref_len = 0
    for hyp, clip_refs in zip(hyps, refs):
        hyp_len += len(hyp)
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in clip_refs)[1]
        for k in range(1, n + 1):
            counts = ngrams(hyp, k)
            max_ref: Counter = Counter()
            for r in clip_refs:
                max_ref |= ngrams(r, k)
            matched[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[k - 1] += max(0, len(hyp) - k + 1)
    if hyp_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(hyp: Tokens, ref: Tokens, beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(hyps: Sequence[Tokens], refs: Sequence[Sequence[Tokens]], beta: float = ROUGE_BETA) -> float:
    """Mean over clips of the best LCS F-measure against any reference."""
    _check(hyps, refs)
    return float(np.mean([max(rouge_l_sentence(h, r, beta) for r in rs) for h, rs in zip(hyps, refs)]))


def cider_d_per_clip(
    hyps: Sequence[Tokens], refs: Sequence[Sequence[Tokens]], sigma: float = CIDER_SIGMA
) -> list[float]:
    _check(hyps, refs)
    n_clips = len(refs)
    log_n = math.log(float(n_clips))
    df: list[Counter] = []
    for k in range(1, CIDER_MAX_N + 1):
        counts: Counter = Counter()
        for clip_refs in refs:
            counts.update(set().union(*(ngrams(r, k).keys() for r in clip_refs)))
        df.append(counts)

    def vectorise(tokens: Tokens):
        vecs, norms = [], []
        for k in range(1, CIDER_MAX_N + 1):
            vec = {g: tf * (log_n - math.log(max(1.0, df[k - 1][g]))) for g, tf in ngrams(tokens, k).items()}
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms

    scores = []
    for hyp, clip_refs in zip(hyps, refs):
        hv, hn = vectorise(hyp)
        total = 0.0
        for ref in clip_refs:
            rv, rn = vectorise(ref)
            delta = len(hyp) - len(ref)
            penalty = math.exp(-(delta**2) / (2 * sigma**2))
            for k in range(CIDER_MAX_N):
                if hn[k] == 0 or rn[k] == 0:
                    continue
                dot = sum(min(v, rv[k][g]) * rv[k][g] for g, v in hv[k].items() if g in rv[k])
                total += penalty * dot / (hn[k] * rn[k])
        scores.append(10.0 * total / (CIDER_MAX_N * len(clip_refs)))
    return scores


def cider_d(hyps: Sequence[Tokens], refs: Sequence[Sequence[Tokens]], sigma: float = CIDER_SIGMA) -> float:
    """CIDEr-D: clipped TF-IDF n-gram cosine (n=1..4) with a Gaussian length penalty, x10."""
    return float(np.mean(cider_d_per_clip(hyps, refs, sigma)))


def keyword_accuracy(estimated: Sequence[Sequence[int]], ground_truth: Sequence[Sequence[int]]) -> float:
    """Share of estimated keywords that occur in the clip's ground-truth set."""
    if len(estimated) != len(ground_truth):
        raise ValueError("estimated and ground-truth keyword lists differ in length")
    hits = sum(len(set(e) & set(g)) for e, g in zip(estimated, ground_truth))
    count = sum(len(set(e)) for e in estimated)
    if count == 0:
        raise ZeroDivisionError("no estimated keywords to score")
    return hits / count


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    scores: dict[str, float]  # REPORT_COLUMNS, x100
    clips: list[dict] = field(default_factory=list)
    label: str = ""

    def to_json(self) -> str:
        doc = {
            "label": self.label,
            "scores": {k: self.scores[k] for k in REPORT_COLUMNS},
            "absent": list(ABSENT_METRICS),
            "clips": self.clips,
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", *REPORT_COLUMNS])
        writer.writerow([self.label, *(f"{self.scores[k]:.4f}" for k in REPORT_COLUMNS)])
        return buf.getvalue()


def score_corpus(
    hyps: Sequence[Tokens],
    refs: Sequence[Sequence[Tokens]],
    estimated: Sequence[Sequence[int]] | None = None,
    ground_truth: Sequence[Sequence[int]] | None = None,
) -> dict[str, float]:
    scores = {f"BLEU-{n}": 100.0 * bleu(hyps, refs, n) for n in range(1, 5)}
    scores["CIDEr"] = 100.0 * cider_d(hyps, refs)
    scores["ROUGE-L"] = 100.0 * rouge_l(hyps, refs)
    if estimated is not None and ground_truth is not None:
        scores["KeywordAcc"] = 100.0 * keyword_accuracy(estimated, ground_truth)
    else:
        scores["KeywordAcc"] = float("nan")
    return scores


def metric_tokens(text: str) -> list[str]:
    """Tokens used for scoring: the caption tokenizer minus punctuation."""
    return [t for t in tokenize(text) if not is_punctuation(t)]


def evaluate(
    model,
    vocab,
    keyword_vocab: KeywordVocabulary,
    lexicon: TagLexicon,
    clips: Sequence[tuple[str, np.ndarray, Sequence[str]]],
    beam_width: int = DEFAULT_BEAM,
    max_len: int = DEFAULT_MAX_LEN,
    oracle_keywords: bool = False,
    oracle_copy: bool = False,
    label: str = "",
) -> EvalReport:
    """Caption every ``(clip_id, frames, reference_texts)`` and score the corpus.

    ``oracle_keywords`` feeds each clip's ground-truth keywords to the decoder
    instead of the estimated ones; ``oracle_copy`` replaces each hypothesis by
    the clip's first reference (a plumbing check).
    """
    if not clips:
        raise EmptyCorpusError("evaluation set is empty")
    hyps, refs, est, gts, detail = [], [], [], [], []
    for clip_id, frames, texts in clips:
        gt = sorted(set().union(*(extract_keywords(t, keyword_vocab, lexicon) for t in texts)))
        result = caption_clip(
            model, vocab, keyword_vocab, frames, beam_width, max_len, gt if oracle_keywords else None
        )
        text = texts[0] if oracle_copy else result.caption
        hyps.append(metric_tokens(text))
        refs.append([metric_tokens(t) for t in texts])
        est.append(result.keyword_ids)
        gts.append(gt)
        detail.append(
            {
                "id": clip_id,
                "caption": detokenize(hyps[-1]),
                "keywords": result.keywords,
                "ground_truth_keywords": [keyword_vocab.lemmas[i] for i in gt],
            }
        )
    return EvalReport(score_corpus(hyps, refs, est, gts), detail, label)
