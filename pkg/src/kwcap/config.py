"""Configuration records for the model and the training loop."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields


@dataclass(frozen=True)
class ModelConfig:
    d_x: int = 128  # audio feature dimension
    d_w: int = 300  # word embedding dimension
    d_f: int = 100  # hidden dimension
    vocab_size: int = 2145
    num_layers: int = 3
    num_heads: int = 4
    ffn_dim: int = 400
    num_keywords: int = 5  # K
    keyword_vocab_size: int = 50  # C
    keyword_hidden: int | None = None  # defaults to d_f
    dropout_input: float = 0.5
    dropout_layer: float = 0.3
    max_caption_len: int = 32  # longest decoder prefix, BOS included
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_f % self.num_heads:
            raise ValueError(f"d_f={self.d_f} is not divisible by num_heads={self.num_heads}")
        if self.num_keywords < 1:
            raise ValueError("num_keywords must be at least 1")
        if self.keyword_vocab_size < self.num_keywords:
            raise ValueError(
                f"keyword_vocab_size={self.keyword_vocab_size} < num_keywords={self.num_keywords}"
            )
        for name in ("dropout_input", "dropout_layer"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {p}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover the four reserved tokens")
        if self.max_caption_len < 1:
            raise ValueError("max_caption_len must be positive")

    @property
    def kw_hidden(self) -> int:
        return self.keyword_hidden or self.d_f

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def diff(self, other: "ModelConfig") -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name) != getattr(other, f.name)]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 100
    warmup_steps: int = 4000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    alpha: float = 1.0  # weight of the keyword loss
    max_steps: int | None = None
    keyword_source: str = "estimated"  # or "ground_truth" (teacher keywords)
    grad_clip: float | None = None
    label_smoothing: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.keyword_source not in ("estimated", "ground_truth"):
            raise ValueError(f"unknown keyword_source {self.keyword_source!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})
