import itertools
import json

import numpy as np
import pytest
from conftest import mini_model

from kwcap import numerics as nx
from kwcap.data_io import BOS, EOS, Vocabulary
from kwcap.decoding import (
    Hypothesis,
    beam_search,
    beam_search_fn,
    caption_clip,
    greedy_decode,
    greedy_search,
)
from kwcap.keywords import KeywordVocabulary

TOY_V = 4
TOY_BOS, TOY_EOS = 0, 1


def toy_model(seed: int):
    """Frozen log-probability table keyed by prefix, filled lazily from a seeded stream."""
    rng = np.random.default_rng(seed)
    table: dict[tuple, np.ndarray] = {}

    def step(prefix):
        key = tuple(prefix)
        if key not in table:
            z = 2.0 * rng.standard_normal(TOY_V)
            table[key] = z - np.log(np.exp(z).sum())
        return table[key].copy()

    return step


def exhaustive(step, max_len: int) -> Hypothesis:
    """Score every EOS-terminated sequence and every open sequence of full length."""
    best = None
    for n in range(1, max_len + 1):
        for seq in itertools.product(range(TOY_V), repeat=n):
            if TOY_EOS in seq[:-1]:
                continue
            if seq[-1] != TOY_EOS and n < max_len:
                continue
            tokens = [TOY_BOS]
            lp = 0.0
            for w in seq:
                lp += float(step(tokens)[w])
                tokens = tokens + [w]
            h = Hypothesis(tokens, lp, seq[-1] == TOY_EOS)
            if best is None or h.score > best.score:
                best = h
    return best


@pytest.mark.parametrize("seed", range(50))
def test_wide_beam_matches_exhaustive(seed):
    step = toy_model(seed)
    oracle = exhaustive(step, 3)
    for width in (64, 100):
        got = beam_search_fn(step, TOY_BOS, TOY_EOS, width, 3)
        assert got.tokens == oracle.tokens
        assert got.score == pytest.approx(oracle.score, abs=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_beam_one_is_greedy(seed):
    step = toy_model(seed)
    assert beam_search_fn(step, TOY_BOS, TOY_EOS, 1, 3).tokens == greedy_search(step, TOY_BOS, TOY_EOS, 3).tokens


@pytest.mark.parametrize("seed", range(50))
def test_wider_beam_never_scores_lower(seed):
    step = toy_model(seed)
    oracle = exhaustive(step, 3).score
    scores = [beam_search_fn(step, TOY_BOS, TOY_EOS, b, 3).score for b in range(1, 65)]
    assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:]))
    assert max(scores) <= oracle + 1e-12


def test_beam_width_must_be_positive():
    with pytest.raises(ValueError):
        beam_search_fn(toy_model(0), TOY_BOS, TOY_EOS, 0, 3)


def test_first_step_eos_gives_empty_caption():
    m = mini_model(0)
    bias = np.zeros(10)
    bias[EOS] = 100.0
    m.params["out_proj.b"] = nx.parameter(bias)
    frames = np.zeros((3, 5))
    assert greedy_decode(m, frames) == []
    assert beam_search(m, frames, beam_width=3) == []


@pytest.mark.parametrize("seed", range(5))
def test_greedy_equals_beam_one_on_model(seed):
    m = mini_model(seed)
    frames = np.random.default_rng(seed).standard_normal((4, 5))
    g = greedy_decode(m, frames, max_len=8)
    assert g == beam_search(m, frames, beam_width=1, max_len=8)
    assert g == greedy_decode(m, frames, max_len=8)
    assert all(t not in (0, 1, 2) for t in g)


def _vocabs():
    return (
        Vocabulary(["<pad>", "<bos>", "<eos>", "<unk>"] + [f"w{i}" for i in range(6)]),
        KeywordVocabulary(["dog", "bark", "rain", "car"]),
    )


def test_caption_clip_bundle(tmp_path):
    m = mini_model(1)
    vocab, kv = _vocabs()
    res = caption_clip(m, vocab, kv, np.random.default_rng(0).standard_normal((3, 5)), beam_width=3, max_len=6)
    assert len(res.keywords) == 2 and len(set(res.keyword_ids)) == 2
    assert len(res.attention) == 3 and all(len(heads) == 4 for heads in res.attention)
    for heads in res.attention:
        for mat in heads:
            assert mat.shape[1] == 3 + 2
            assert np.allclose(mat.sum(axis=1), 1.0, atol=1e-6)
    assert res.frame_posteriors.shape == (4, 3)
    res.dump(tmp_path)
    doc = json.loads((tmp_path / "caption.json").read_text())
    assert doc["keywords"] == res.keywords
    assert (tmp_path / "attention_layer2_head3.csv").exists()
    assert len((tmp_path / "posteriors.csv").read_text().splitlines()) == 4


def test_caption_clip_override_echoes_keywords():
    m = mini_model(2)
    vocab, kv = _vocabs()
    res = caption_clip(m, vocab, kv, np.zeros((2, 5)), beam_width=2, keyword_override=[3, 0])
    assert res.keywords == ["car", "dog"]


def test_bos_never_generated():
    m = mini_model(3)
    bias = np.zeros(10)
    bias[BOS] = 50.0
    m.params["out_proj.b"] = nx.parameter(bias)
    assert BOS not in greedy_decode(m, np.zeros((2, 5)), max_len=5)
