import time

import numpy as np
import pytest

from kwcap.config import ModelConfig, TrainConfig
from kwcap.data_io import generate_synthetic_dataset
from kwcap.keywords import default_lexicon
from kwcap.model import CaptionModel
from kwcap.pipeline import build_bundle, examples_for, fit

# settings for the desk-scale synthetic runs
SYNTH_MODEL = ModelConfig(
    d_x=16, d_w=300, d_f=32, ffn_dim=128, num_keywords=3, keyword_vocab_size=8,
    dropout_input=0.0, dropout_layer=0.0, max_caption_len=32,
)  # fmt: skip
SYNTH_TRAIN = TrainConfig(epochs=10_000, max_steps=500, batch_size=100, warmup_steps=800, seed=0)

_ACCEPTANCE_LINES: list[str] = []


def mini_config(**kw) -> ModelConfig:
    base = dict(
        d_x=5, d_w=6, d_f=8, vocab_size=10, num_layers=3, num_heads=4, ffn_dim=16,
        num_keywords=2, keyword_vocab_size=4, dropout_input=0.5, dropout_layer=0.3,
        max_caption_len=8, init_std=0.3,
    )  # fmt: skip
    base.update(kw)
    return ModelConfig(**base)


def mini_model(seed: int = 0, **kw) -> CaptionModel:
    cfg = mini_config(**kw)
    rng = np.random.default_rng([seed, 99])
    return CaptionModel.initialize(
        cfg,
        rng.standard_normal((cfg.vocab_size, cfg.d_w)),
        rng.standard_normal((cfg.keyword_vocab_size, cfg.d_w)),
        seed=seed,
    )


@pytest.fixture
def lexicon():
    return default_lexicon()


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    manifest = generate_synthetic_dataset(out, seed=0, n_clips=10, n_event_types=5)
    return out, manifest


@pytest.fixture(scope="session")
def trained_synth(synth_dir):
    """The 500-step overfit run shared by several tests."""
    _, manifest = synth_dir
    lex = default_lexicon()
    bundle = build_bundle(manifest, lex, SYNTH_MODEL, seed=0, min_count=0)
    untrained = build_bundle(manifest, lex, SYNTH_MODEL, seed=0, min_count=0)
    start = time.process_time()
    result = fit(bundle, manifest, lex, SYNTH_TRAIN)
    seconds = time.process_time() - start
    examples = examples_for(bundle, manifest, "train", lex)
    return bundle, untrained, result, examples, seconds


@pytest.fixture
def acceptance():
    def record(number: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE_LINES.append(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
