"""Memorise a 10-clip synthetic corpus and show what the model says afterwards.

Usage: python scripts/overfit_demo.py [--steps 500] [--seed 0] [--out DIR]

Prints the loss every 50 steps, then each training clip's reference, its
greedy caption and its estimated keywords.
"""

import argparse
import tempfile
import time

from kwcap.config import ModelConfig, TrainConfig
from kwcap.data_io import generate_synthetic_dataset
from kwcap.decoding import greedy_decode, prepare_clip
from kwcap.keywords import default_lexicon
from kwcap.metrics import keyword_accuracy
from kwcap.pipeline import build_bundle, examples_for, fit

MODEL = ModelConfig(
    d_x=16, d_f=32, ffn_dim=128, num_keywords=3, keyword_vocab_size=8,
    dropout_input=0.0, dropout_layer=0.0,
)  # fmt: skip


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--warmup", type=int, default=800)
    ap.add_argument("--out", default=None, help="dataset directory (default: a temp dir)")
    args = ap.parse_args()

    out = args.out or tempfile.mkdtemp(prefix="kwcap-synth-")
    manifest = generate_synthetic_dataset(out, seed=args.seed, n_clips=10, n_event_types=5)
    lexicon = default_lexicon()
    bundle = build_bundle(manifest, lexicon, MODEL, seed=args.seed, min_count=0)
    cfg = TrainConfig(epochs=10**6, max_steps=args.steps, batch_size=100, warmup_steps=args.warmup, seed=args.seed)

    t0 = time.time()
    result = fit(bundle, manifest, lexicon, cfg)
    for rec in result.history[::50] + result.history[-1:]:
        print(f"step {rec.step:4d}  lr {rec.lr:.2e}  L_cap {rec.l_cap:.4f}  L_key {rec.l_key:.4f}")
    print(f"trained in {time.time() - t0:.1f}s, best epoch {result.best_epoch}")

    examples = examples_for(bundle, manifest, "train", lexicon)
    exact, est = 0, []
    for ex in examples:
        got = greedy_decode(bundle.model, ex.frames)
        kws = prepare_clip(bundle.model, ex.frames).keywords
        est.append(kws)
        exact += got == ex.caption
        print(f"{ex.clip_id}: {' '.join(bundle.vocab.decode(got))!r}  keywords={[bundle.keyword_vocab.lemmas[k] for k in kws]}")
    acc = keyword_accuracy(est, [ex.keywords for ex in examples])
    print(f"exact captions {exact}/{len(examples)}, keyword accuracy {acc:.3f}")


if __name__ == "__main__":
    main()
