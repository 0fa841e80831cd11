"""Joint caption/keyword training with Adam and the warmup-then-decay schedule."""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import ModelConfig, TrainConfig
from .data_io import (
    BOS,
    EOS,
    PAD,
    DatasetManifest,
    IncompatibleCheckpoint,
    Vocabulary,
    _atomic_write,
    load_checkpoint,
    load_features,
    save_checkpoint,
    tokenize,
)
from .keywords import KeywordPriors, KeywordVocabulary, TagLexicon, extract_keywords
from .model import CaptionModel
from .numerics import DimensionError, NonFiniteError, Tensor

log = logging.getLogger(__name__)

KEYWORD_CLAMP = 1e-7


class DegenerateBatchError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    def __init__(self, step: int, components: dict[str, float], reason: str = ""):
        detail = ", ".join(f"{k}={v!r}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step} ({detail}) {reason}".strip())
        self.step = step
        self.components = components


# ---------------------------------------------------------------------------
# losses


def caption_loss(logits: Tensor, targets: Sequence[int], label_smoothing: float = 0.0) -> Tensor:
    """Mean token cross-entropy over non-PAD target positions."""
    targets = np.asarray(targets, dtype=np.int64)
    keep = targets != PAD
    if not keep.any():
        raise DegenerateBatchError("every target position is PAD")
    per_token = nx.cross_entropy_from_logits(logits, np.where(keep, targets, 0))
    if label_smoothing:
        uniform = -nx.mean(nx.log_softmax(logits, axis=-1), axis=-1)
        per_token = per_token * (1.0 - label_smoothing) + uniform * label_smoothing
    return nx.sum(per_token * keep.astype(np.float64)) * (1.0 / keep.sum())


def keyword_loss(z: Tensor, keyword_ids: Sequence[int], priors: KeywordPriors) -> Tensor:
    """Prior-weighted binary cross-entropy over the C clip-level posteriors."""
    c = z.shape[0]
    target = np.zeros(c)
    target[list(keyword_ids)] = 1.0
    zc = nx.clip(z, KEYWORD_CLAMP, 1.0 - KEYWORD_CLAMP)
    pos = nx.log(zc) * (priors.lam * target)
    neg = nx.log(1.0 - zc) * (priors.gam * (1.0 - target))
    return nx.sum(pos + neg) * (-1.0 / c)


# ---------------------------------------------------------------------------
# optimisation


def noam_lr(step: int, d_f: int, warmup: int) -> float:
    if step < 1:
        raise ValueError("learning-rate schedule is defined for step >= 1")
    return d_f**-0.5 * min(step**-0.5, step * warmup**-1.5)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls(
            {n: np.zeros_like(t.data) for n, t in params.items()},
            {n: np.zeros_like(t.data) for n, t in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> dict[str, Tensor]:
    """One bias-corrected Adam update; returns fresh parameter tensors."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out[name] = nx.parameter(p.data - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps), name)
    return out


# ---------------------------------------------------------------------------
# data


@dataclass
class Example:
    clip_id: str
    frames: np.ndarray
    caption: list[int]  # word ids, no BOS/EOS
    keywords: list[int]  # ground-truth keyword ids


def prepare_examples(
    manifest: DatasetManifest,
    split: str,
    vocab: Vocabulary,
    keyword_vocab: KeywordVocabulary,
    lexicon: TagLexicon,
    d_x: int | None = None,
) -> list[Example]:
    """One example per (clip, reference caption) pair of ``split``."""
    examples = []
    for clip in manifest.split(split):
        frames = load_features(manifest.feature_path(clip), d_x).frames
        for text in clip.captions:
            examples.append(
                Example(
                    clip.id,
                    frames,
                    vocab.encode(tokenize(text)),
                    extract_keywords(text, keyword_vocab, lexicon),
                )
            )
    return examples


def teacher_forcing(caption: Sequence[int], max_prefix: int) -> tuple[list[int], list[int]]:
    """Decoder input (BOS + caption) and targets (caption + EOS), cut to ``max_prefix``."""
    body = list(caption)[: max_prefix - 1]
    return [BOS, *body], [*body, EOS]


def example_losses(
    model: CaptionModel,
    ex: Example,
    priors: KeywordPriors,
    training: bool,
    rng=None,
    teacher_keywords: bool = False,
    label_smoothing: float = 0.0,
) -> tuple[Tensor, Tensor]:
    prefix, targets = teacher_forcing(ex.caption, model.config.max_caption_len)
    override = ex.keywords if teacher_keywords else None
    out = model.forward(ex.frames, prefix, override, training=training, rng=rng)
    return caption_loss(out.logits, targets, label_smoothing), keyword_loss(out.z, ex.keywords, priors)


def mean_caption_loss(
    model: CaptionModel,
    examples: Sequence[Example],
    priors: KeywordPriors,
    teacher_keywords: bool = False,
) -> float:
    with nx.no_grad():
        losses = [
            example_losses(model, ex, priors, False, teacher_keywords=teacher_keywords)[0].item()
            for ex in examples
        ]
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# loop


@dataclass
class StepRecord:
    step: int
    lr: float
    l_cap: float
    l_key: float
    total: float


@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    best_epoch: int
    best_val_loss: float
    history: list[StepRecord] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)  # (epoch, loss)
    optimizer: OptimizerState | None = None

    def history_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,lr,L_cap,L_key,total\n")
        for r in self.history:
            buf.write(f"{r.step},{r.lr!r},{r.l_cap!r},{r.l_key!r},{r.total!r}\n")
        return buf.getvalue()

    def val_csv(self) -> str:
        return "epoch,val_L_cap\n" + "".join(f"{e},{v!r}\n" for e, v in self.val_history)


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale


def train(
    model: CaptionModel,
    train_set: Sequence[Example],
    val_set: Sequence[Example],
    priors: KeywordPriors,
    cfg: TrainConfig,
) -> TrainResult:
    """Minimise L_cap + alpha * L_key; keep the parameters with the lowest validation L_cap.

    With an empty ``val_set`` the training examples stand in for validation.
    ``model.params`` holds the final (not best) parameters on return.
    """
    if not train_set:
        raise ValueError("empty training set")
    val_set = val_set or train_set
    order_rng = np.random.default_rng([cfg.seed, 0])
    drop_rng = np.random.default_rng([cfg.seed, 1])
    teacher = cfg.keyword_source == "ground_truth"
    names = list(model.params)
    state = OptimizerState.zeros(model.params)
    result = TrainResult({}, -1, float("inf"), optimizer=state)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(len(train_set))
        for start in range(0, len(perm), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            step += 1
            batch = [train_set[i] for i in perm[start : start + cfg.batch_size]]
            try:
                caps, keys = zip(
                    *(
                        example_losses(model, ex, priors, True, drop_rng, teacher, cfg.label_smoothing)
                        for ex in batch
                    )
                )
                l_cap = nx.mean(nx.concat([nx.reshape(c, (1,)) for c in caps]))
                l_key = nx.mean(nx.concat([nx.reshape(k, (1,)) for k in keys]))
                total = l_cap + l_key * cfg.alpha
            except NonFiniteError as exc:
                raise TrainingDiverged(step, {}, str(exc)) from exc
            parts = {"L_cap": l_cap.item(), "L_key": l_key.item(), "total": total.item()}
            if not all(np.isfinite(v) for v in parts.values()):
                raise TrainingDiverged(step, parts)
            grads = dict(zip(names, nx.backward(total, [model.params[n] for n in names])))
            if cfg.grad_clip is not None:
                _clip_gradients(grads, cfg.grad_clip)
            lr = noam_lr(step, model.config.d_f, cfg.warmup_steps)
            model.params = adam_step(model.params, grads, state, lr, cfg)
            result.history.append(StepRecord(step, lr, parts["L_cap"], parts["L_key"], parts["total"]))
        val = mean_caption_loss(model, val_set, priors, teacher)
        result.val_history.append((epoch, val))
        log.debug("epoch %d step %d val L_cap %.5f", epoch, step, val)
        if val < result.best_val_loss:
            result.best_val_loss = val
            result.best_epoch = epoch
            result.best_params = {n: t.data.copy() for n, t in model.params.items()}
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return result


def load_params(model: CaptionModel, arrays: dict[str, np.ndarray]) -> None:
    model.params = {n: nx.parameter(arrays[n].copy(), n) for n in model.params}


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Bundle:
    model: CaptionModel
    vocab: Vocabulary
    keyword_vocab: KeywordVocabulary
    priors: KeywordPriors
    optimizer: OptimizerState | None = None
    meta: dict = field(default_factory=dict)


def save_bundle(path: str | os.PathLike, bundle: Bundle) -> None:
    model = bundle.model
    header = {
        "model_config": model.config.to_dict(),
        "vocab": bundle.vocab.tokens,
        "min_count": bundle.vocab.min_count,
        "keyword_lemmas": bundle.keyword_vocab.lemmas,
        "keyword_prior": [float(x) for x in bundle.priors.p],
        "optimizer_step": bundle.optimizer.step if bundle.optimizer else None,
        "extra": bundle.meta,
    }
    arrays = {f"param/{n}": t.data for n, t in model.params.items()}
    arrays["const/word_vectors"] = model.word_vectors
    arrays["const/keyword_vectors"] = model.keyword_vectors
    if bundle.optimizer is not None:
        for n in model.params:
            arrays[f"adam_m/{n}"] = bundle.optimizer.m[n]
            arrays[f"adam_v/{n}"] = bundle.optimizer.v[n]
    save_checkpoint(path, header, arrays)


def load_bundle(path: str | os.PathLike, expected: ModelConfig | None = None) -> Bundle:
    header, arrays = load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    if expected is not None and cfg != expected:
        fields = expected.diff(cfg)
        raise IncompatibleCheckpoint(
            f"{path}: configuration differs in {', '.join(fields)}: "
            + ", ".join(f"{f}={getattr(cfg, f)!r} (expected {getattr(expected, f)!r})" for f in fields)
        )
    params = {k[len("param/") :]: nx.parameter(v, k[len("param/") :]) for k, v in arrays.items() if k.startswith("param/")}
    model = CaptionModel(cfg, params, arrays["const/word_vectors"], arrays["const/keyword_vectors"])
    opt = None
    if header.get("optimizer_step") is not None:
        opt = OptimizerState(
            {n: arrays[f"adam_m/{n}"] for n in params},
            {n: arrays[f"adam_v/{n}"] for n in params},
            header["optimizer_step"],
        )
    return Bundle(
        model,
        Vocabulary(header["vocab"], header.get("min_count", 5)),
        KeywordVocabulary(header["keyword_lemmas"]),
        KeywordPriors.from_probabilities(header["keyword_prior"]),
        opt,
        header.get("extra", {}),
    )


def write_text(path: str | os.PathLike, text: str) -> None:
    _atomic_write(Path(path), text.encode("utf-8"))
