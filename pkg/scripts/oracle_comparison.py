"""Train with estimated keywords and with ground-truth keywords, then compare.

Usage: python scripts/oracle_comparison.py [--steps 500] [--seed 0] [--n-val 5]

Builds a synthetic corpus with a held-out validation split, trains one model
per keyword source and scores both on the validation clips, with and without
ground-truth keyword overrides at test time.
"""

import argparse
import tempfile
from dataclasses import replace

from kwcap.config import ModelConfig, TrainConfig
from kwcap.data_io import generate_synthetic_dataset
from kwcap.keywords import default_lexicon
from kwcap.metrics import REPORT_COLUMNS, evaluate
from kwcap.pipeline import build_bundle, eval_clips, fit

MODEL = ModelConfig(
    d_x=16, d_f=32, ffn_dim=128, num_keywords=3, keyword_vocab_size=8,
    dropout_input=0.0, dropout_layer=0.0,
)  # fmt: skip


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-clips", type=int, default=20)
    ap.add_argument("--n-val", type=int, default=5)
    args = ap.parse_args()

    out = tempfile.mkdtemp(prefix="kwcap-oracle-")
    manifest = generate_synthetic_dataset(out, seed=args.seed, n_clips=args.n_clips, n_event_types=5, n_val=args.n_val)
    lexicon = default_lexicon()
    base = TrainConfig(epochs=10**6, max_steps=args.steps, batch_size=100, warmup_steps=800, seed=args.seed)

    print("model,test keywords," + ",".join(REPORT_COLUMNS))
    for source in ("estimated", "ground_truth"):
        bundle = build_bundle(manifest, lexicon, MODEL, seed=args.seed, min_count=0)
        fit(bundle, manifest, lexicon, replace(base, keyword_source=source))
        clips = eval_clips(manifest, "validation", bundle.model.config.d_x)
        for oracle in (False, True):
            report = evaluate(bundle.model, bundle.vocab, bundle.keyword_vocab, lexicon, clips, oracle_keywords=oracle)
            row = ",".join(f"{report.scores[k]:.2f}" for k in REPORT_COLUMNS)
            print(f"{source},{'ground truth' if oracle else 'estimated'},{row}")


if __name__ == "__main__":
    main()
