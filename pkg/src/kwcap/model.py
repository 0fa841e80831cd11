"""Keyword-conditioned Transformer captioner.

Layout convention: sequences are row-major, one row per frame or token, so
the encoder output is ``T x d_f`` and decoder logits are ``n x V``. The
framewise keyword posteriors are returned ``C x T``.

Parameter groups (by name prefix):

* encoder: ``audio_proj.*``, ``encoder.*``
* decoder: ``word_proj.*``, ``decoder.*``, ``out_proj.*``
* keyword branch: ``keyword_branch.*``

The keyword branch only sees the encoder output; its top-k choice is made
on plain arrays, so nothing downstream of the choice can reach it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .data_io import BOS
from .numerics import DimensionError, ParameterError, Tensor

GROUP_PREFIXES = {
    "encoder": ("audio_proj.", "encoder."),
    "decoder": ("word_proj.", "decoder.", "out_proj."),
    "keyword_branch": ("keyword_branch.",),
}


class LengthError(ValueError):
    pass


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoidal table, ``n x d``: sin on even columns, cos on odd ones."""
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_f, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "audio_proj.w": (cfg.d_x, d),
        "audio_proj.b": (d,),
        "word_proj.w": (cfg.d_w, d),
        "word_proj.b": (d,),
    }

    def attn(prefix):
        for part in "qkvo":
            shapes[f"{prefix}.{part}.w"] = (d, d)
            shapes[f"{prefix}.{part}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.ffn1.w"] = (d, f)
        shapes[f"{prefix}.ffn1.b"] = (f,)
        shapes[f"{prefix}.ffn2.w"] = (f, d)
        shapes[f"{prefix}.ffn2.b"] = (d,)

    def norm(name):
        shapes[f"{name}.g"] = (d,)
        shapes[f"{name}.b"] = (d,)

    for layer in range(cfg.num_layers):
        p = f"encoder.{layer}"
        attn(f"{p}.self_attn")
        norm(f"{p}.ln1")
        ffn(p)
        norm(f"{p}.ln2")
    for layer in range(cfg.num_layers):
        p = f"decoder.{layer}"
        attn(f"{p}.self_attn")
        norm(f"{p}.ln1")
        attn(f"{p}.cross_attn")
        norm(f"{p}.ln2")
        ffn(p)
        norm(f"{p}.ln3")
    shapes["keyword_branch.hidden.w"] = (d, cfg.kw_hidden)
    shapes["keyword_branch.hidden.b"] = (cfg.kw_hidden,)
    shapes["keyword_branch.out.w"] = (cfg.kw_hidden, cfg.keyword_vocab_size)
    shapes["keyword_branch.out.b"] = (cfg.keyword_vocab_size,)
    shapes["out_proj.w"] = (d, cfg.vocab_size)
    shapes["out_proj.b"] = (cfg.vocab_size,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Affine weights and biases ~ N(0, init_std); layer-norm gains 1, shifts 0."""
    params = {}
    for name, shape in _param_shapes(cfg).items():
        if ".ln" in name:
            value = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        else:
            value = rng.normal(0.0, cfg.init_std, size=shape)
        params[name] = nx.parameter(value, name)
    return params


def group_of(name: str) -> str:
    for group, prefixes in GROUP_PREFIXES.items():
        if name.startswith(prefixes):
            return group
    raise KeyError(name)


def select_top_k(z: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` largest entries, best first; ties go to the lower index."""
    z = np.asarray(z)
    if k > z.shape[0]:
        raise ParameterError(f"cannot select {k} keywords from {z.shape[0]}")
    return [int(i) for i in np.argsort(-z, kind="stable")[:k]]


def resolve_keywords(override: Sequence[int], z: np.ndarray, k: int) -> list[int]:
    """Fit an override list to exactly ``k`` ids.

    Duplicates are dropped, extra ids are cut in list order, and a short list
    is padded with the best-scoring remaining keywords by ``z``.
    """
    c = len(z)
    chosen: list[int] = []
    for i in override:
        i = int(i)
        if not 0 <= i < c:
            raise ParameterError(f"keyword id {i} outside vocabulary of size {c}")
        if i not in chosen:
            chosen.append(i)
    chosen = chosen[:k]
    for i in select_top_k(z, c):
        if len(chosen) == k:
            break
        if i not in chosen:
            chosen.append(i)
    return chosen


def assemble_memory(nu: Tensor, keyword_vectors: Tensor) -> Tensor:
    """Stack encoder frames and keyword embeddings into one ``(T+K) x d_f`` memory."""
    if keyword_vectors.shape[0] == 0:
        return nu
    if nu.shape[1] != keyword_vectors.shape[1]:
        raise DimensionError(f"memory widths differ: {nu.shape} vs {keyword_vectors.shape}")
    return nx.concat([nu, keyword_vectors], axis=0)


def aggregate_max(frame_posteriors: Tensor) -> Tensor:
    """Clip-level posterior per keyword: the max over time of a ``C x T`` matrix."""
    return nx.max_along(frame_posteriors, axis=1)


@dataclass
class ForwardOutput:
    logits: Tensor  # n x V
    frame_posteriors: Tensor  # C x T
    z: Tensor  # C
    keywords: list[int]
    memory: Tensor
    cross_attention: list[np.ndarray] | None = field(default=None, repr=False)


class CaptionModel:
    def __init__(
        self,
        config: ModelConfig,
        params: dict[str, Tensor],
        word_vectors: np.ndarray,
        keyword_vectors: np.ndarray,
    ):
        expected = _param_shapes(config)
        if list(params) != list(expected):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: shape {params[name].shape}, expected {shape}")
        if word_vectors.shape != (config.vocab_size, config.d_w):
            raise DimensionError(f"word vectors {word_vectors.shape} vs ({config.vocab_size}, {config.d_w})")
        if keyword_vectors.shape != (config.keyword_vocab_size, config.d_w):
            raise DimensionError(
                f"keyword vectors {keyword_vectors.shape} vs ({config.keyword_vocab_size}, {config.d_w})"
            )
        self.config = config
        self.params = params
        self.word_vectors = np.asarray(word_vectors, dtype=np.float64)
        self.keyword_vectors = np.asarray(keyword_vectors, dtype=np.float64)
        self._pe = positional_encoding(max(config.max_caption_len, 64), config.d_f)

    @classmethod
    def initialize(cls, config, word_vectors, keyword_vectors, seed: int = 0) -> "CaptionModel":
        return cls(config, init_params(config, np.random.default_rng(seed)), word_vectors, keyword_vectors)

    def group(self, name: str) -> list[Tensor]:
        return [t for n, t in self.params.items() if group_of(n) == name]

    # -- building blocks ---------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return x @ self.params[name + ".w"] + self.params[name + ".b"]

    def _norm(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        return nx.layer_norm(x, p[name + ".g"], p[name + ".b"], self.config.ln_eps)

    def _positions(self, n: int) -> np.ndarray:
        if n > self._pe.shape[0]:
            self._pe = positional_encoding(2 * n, self.config.d_f)
        return self._pe[:n]

    def _attention(self, prefix, query, memory, mask=None, record=None) -> Tensor:
        h = self.config.num_heads
        d = self.config.d_f
        dh = d // h

        def heads(x: Tensor) -> Tensor:
            return nx.transpose(nx.reshape(x, (x.shape[0], h, dh)), (1, 0, 2))

        q = heads(self._linear(query, prefix + ".q"))
        k = heads(self._linear(memory, prefix + ".k"))
        v = heads(self._linear(memory, prefix + ".v"))
        scores = (q @ nx.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
        weights = nx.softmax(scores, axis=-1, mask=mask)
        if record is not None:
            record.append(weights.data.copy())
        ctx = nx.transpose(weights @ v, (1, 0, 2))
        return self._linear(nx.reshape(ctx, (query.shape[0], d)), prefix + ".o")

    def _feed_forward(self, x: Tensor, prefix: str, training, rng) -> Tensor:
        hidden = nx.relu(self._linear(x, prefix + ".ffn1"))
        return nx.dropout(self._linear(hidden, prefix + ".ffn2"), self.config.dropout_layer, training, rng)

    # -- pipeline stages ----------------------------------------------------

    def embed_audio(self, frames: np.ndarray, training: bool = False, rng=None) -> Tensor:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise DimensionError(f"audio features must be T x d_x with T >= 1, got {frames.shape}")
        if frames.shape[1] != self.config.d_x:
            raise DimensionError(f"audio feature dimension {frames.shape[1]}, expected {self.config.d_x}")
        x = self._linear(nx.constant(frames), "audio_proj") + self._positions(frames.shape[0])
        return nx.dropout(x, self.config.dropout_input, training, rng)

    def embed_words(
        self, vectors: np.ndarray, positional: bool, training: bool = False, rng=None
    ) -> Tensor:
        """Project ``n x d_w`` word vectors to ``n x d_f``.

        Caption tokens get positional encoding and input dropout; keywords get
        neither, so their order cannot matter downstream.
        """
        n = vectors.shape[0]
        if n == 0:
            return nx.constant(np.zeros((0, self.config.d_f)))
        x = self._linear(nx.constant(vectors), "word_proj")
        if positional:
            x = x + self._positions(n)
            x = nx.dropout(x, self.config.dropout_input, training, rng)
        return x

    def encode(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        p_drop = self.config.dropout_layer
        for layer in range(self.config.num_layers):
            pre = f"encoder.{layer}"
            a = nx.dropout(self._attention(pre + ".self_attn", x, x), p_drop, training, rng)
            x = self._norm(x + a, pre + ".ln1")
            x = self._norm(x + self._feed_forward(x, pre, training, rng), pre + ".ln2")
        return x

    def keyword_posteriors(self, nu: Tensor) -> Tensor:
        hidden = nx.relu(self._linear(nu, "keyword_branch.hidden"))
        return nx.transpose(nx.sigmoid(self._linear(hidden, "keyword_branch.out")))

    def keyword_memory(self, keyword_ids: Sequence[int]) -> Tensor:
        return self.embed_words(self.keyword_vectors[list(keyword_ids)], positional=False)

    def decode(
        self,
        memory: Tensor,
        prefix: Sequence[int],
        training: bool = False,
        rng=None,
        record: list | None = None,
    ) -> Tensor:
        """Logits ``n x V`` for every prefix position under causal masking.

        ``record`` (a list) collects each layer's cross-attention weights,
        shaped ``heads x n x memory_len``.
        """
        n = len(prefix)
        if n == 0 or prefix[0] != BOS:
            raise ValueError("decoder prefix must start with BOS")
        if n > self.config.max_caption_len:
            raise LengthError(f"prefix length {n} exceeds max_caption_len {self.config.max_caption_len}")
        p_drop = self.config.dropout_layer
        causal = np.tril(np.ones((n, n), dtype=bool))
        x = self.embed_words(self.word_vectors[list(prefix)], positional=True, training=training, rng=rng)
        for layer in range(self.config.num_layers):
            pre = f"decoder.{layer}"
            a = nx.dropout(self._attention(pre + ".self_attn", x, x, causal), p_drop, training, rng)
            x = self._norm(x + a, pre + ".ln1")
            a = self._attention(pre + ".cross_attn", x, memory, record=record)
            x = self._norm(x + nx.dropout(a, p_drop, training, rng), pre + ".ln2")
            x = self._norm(x + self._feed_forward(x, pre, training, rng), pre + ".ln3")
        return self._linear(x, "out_proj")

    def encode_clip(self, frames: np.ndarray, training: bool = False, rng=None):
        """Encoder output, framewise posteriors (C x T) and their time-max."""
        nu = self.encode(self.embed_audio(frames, training, rng), training, rng)
        frame_post = self.keyword_posteriors(nu)
        return nu, frame_post, aggregate_max(frame_post)

    def choose_keywords(self, z: np.ndarray, keyword_override: Sequence[int] | None = None) -> list[int]:
        k = self.config.num_keywords
        if keyword_override is None:
            return select_top_k(z, k)
        return resolve_keywords(keyword_override, z, k)

    def forward(
        self,
        frames: np.ndarray,
        prefix: Sequence[int],
        keyword_override: Sequence[int] | None = None,
        training: bool = False,
        rng=None,
        record_attention: bool = False,
    ) -> ForwardOutput:
        nu, frame_post, z = self.encode_clip(frames, training, rng)
        keywords = self.choose_keywords(z.data, keyword_override)
        memory = assemble_memory(nu, self.keyword_memory(keywords))
        record: list | None = [] if record_attention else None
        logits = self.decode(memory, prefix, training, rng, record)
        return ForwardOutput(logits, frame_post, z, keywords, memory, record)
