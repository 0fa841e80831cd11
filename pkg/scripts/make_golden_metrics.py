"""Regenerate tests/data/golden_metrics.json from tests/data/golden_corpus.json.

Deliberately shares no code with kwcap.metrics:
  BLEU     -- nltk.translate.bleu_score.corpus_bleu, no smoothing
  ROUGE-L  -- LCS by enumerating every subsequence of the hypothesis
  CIDEr-D  -- a direct port of the coco-caption CiderScorer arithmetic

Usage: python scripts/make_golden_metrics.py
"""

import itertools
import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np
from nltk.translate.bleu_score import corpus_bleu

HERE = Path(__file__).resolve().parent.parent / "tests" / "data"


def toks(s):
    return s.lower().split()


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(tok in it for tok in sub)


def brute_lcs(hyp, ref):
    for k in range(len(hyp), 0, -1):
        for idx in itertools.combinations(range(len(hyp)), k):
            if is_subsequence([hyp[i] for i in idx], ref):
                return k
    return 0


def brute_rouge(hyps, refs, beta=1.2):
    per = []
    for h, rs in zip(hyps, refs):
        best = 0.0
        for r in rs:
            lcs = brute_lcs(h, r)
            if lcs:
                p, rec = lcs / len(h), lcs / len(r)
                best = max(best, (1 + beta**2) * p * rec / (rec + beta**2 * p))
        per.append(best)
    return sum(per) / len(per)


def coco_cider_d(hyps, refs, n=4, sigma=6.0):
    def cook(words):
        counts = defaultdict(int)
        for k in range(1, n + 1):
            for i in range(len(words) - k + 1):
                counts[tuple(words[i : i + k])] += 1
        return counts

    crefs = [[cook(r) for r in rs] for rs in refs]
    ctest = [cook(h) for h in hyps]
    doc_freq = defaultdict(float)
    for rs in crefs:
        for g in set(g for r in rs for g in r):
            doc_freq[g] += 1
    ref_len = np.log(float(len(crefs)))

    def counts2vec(cnts):
        vec = [defaultdict(float) for _ in range(n)]
        norm = [0.0] * n
        length = 0
        for g, tf in cnts.items():
            df = np.log(max(1.0, doc_freq[g]))
            k = len(g) - 1
            vec[k][g] = float(tf) * (ref_len - df)
            norm[k] += vec[k][g] ** 2
            if k == 1:
                length += tf
        return vec, [np.sqrt(x) for x in norm], length

    scores = []
    for test, rs in zip(ctest, crefs):
        vec, norm, length = counts2vec(test)
        score = np.zeros(n)
        for r in rs:
            vr, nr, lr = counts2vec(r)
            delta = float(length - lr)
            val = np.zeros(n)
            for k in range(n):
                for g in vec[k]:
                    val[k] += min(vec[k][g], vr[k][g]) * vr[k][g]
                if norm[k] != 0 and nr[k] != 0:
                    val[k] /= norm[k] * nr[k]
                val[k] *= math.e ** (-(delta**2) / (2 * sigma**2))
            score += val
        scores.append(10.0 * np.mean(score) / len(rs))
    return float(np.mean(scores))


def main():
    corpus = json.loads((HERE / "golden_corpus.json").read_text())["clips"]
    hyps = [toks(c["hypothesis"]) for c in corpus]
    refs = [[toks(r) for r in c["references"]] for c in corpus]
    golden = {}
    for k in range(1, 5):
        golden[f"BLEU-{k}"] = corpus_bleu(refs, hyps, weights=tuple([1.0 / k] * k))
    golden["ROUGE-L"] = brute_rouge(hyps, refs)
    golden["CIDEr-D"] = coco_cider_d(hyps, refs)
    golden["CIDEr-D-doubled"] = coco_cider_d(hyps * 2, refs * 2)
    (HERE / "golden_metrics.json").write_text(json.dumps(golden, indent=2) + "\n")
    print(json.dumps(golden, indent=2))


if __name__ == "__main__":
    main()
