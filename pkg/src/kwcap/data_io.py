"""File formats and dataset assembly.

Feature files use the AFSQ layout: ``b"AFSQ"``, a version byte (1), frame
count T and dimension D as little-endian uint32, then T*D little-endian
float32 values, row-major by frame.

Checkpoints are a single blob: ``b"KWCK"``, a version byte, a uint32 header
length, a UTF-8 JSON header (sorted keys) describing every array, then the
raw little-endian array payloads in header order.
"""

from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

AFSQ_MAGIC = b"AFSQ"
AFSQ_VERSION = 1
CKPT_MAGIC = b"KWCK"
CKPT_VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None, line: int | None = None):
        where = ""
        if offset is not None:
            where = f" (byte offset {offset})"
        elif line is not None:
            where = f" (line {line})"
        super().__init__(message + where)
        self.offset = offset
        self.line = line


class IncompatibleCheckpoint(ValueError):
    pass


# ---------------------------------------------------------------------------
# text

_TOKEN = re.compile(r"'[^\W_]+|[^\W_]+(?:-[^\W_]+)*|[^\w\s]|_")


def tokenize(text: str) -> list[str]:
    """Lowercase, split off punctuation and apostrophe clitics."""
    return _TOKEN.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def is_punctuation(token: str) -> bool:
    return not any(ch.isalnum() for ch in token)


@dataclass
class Vocabulary:
    tokens: list[str]
    min_count: int = 5
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def build_vocab(captions: Iterable[str], min_count: int = 5) -> Vocabulary:
    """Reserved tokens, then tokens seen more than ``min_count`` times.

    Ordered by descending count, ties broken lexicographically.
    """
    counts = Counter(tok for text in captions for tok in tokenize(text))
    kept = sorted((t for t, c in counts.items() if c > min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + [t for t in kept if t not in RESERVED], min_count)


# ---------------------------------------------------------------------------
# audio features


@dataclass
class AudioFeatureSequence:
    frames: np.ndarray  # T x D_x
    clip_id: str = ""

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def write_features(path: str | os.PathLike, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"features must be a non-empty T x D matrix, got {frames.shape}")
    header = AFSQ_MAGIC + struct.pack("<BII", AFSQ_VERSION, *frames.shape)
    _atomic_write(path, header + frames.astype("<f4").tobytes(order="C"))


def load_features(path: str | os.PathLike, expected_dim: int | None = None) -> AudioFeatureSequence:
    blob = Path(path).read_bytes()
    if blob[:4] != AFSQ_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}", offset=0)
    if len(blob) < 13:
        raise FormatError(f"{path}: truncated header", offset=len(blob))
    version, t, d = struct.unpack_from("<BII", blob, 4)
    if version != AFSQ_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if t < 1 or d < 1:
        raise FormatError(f"{path}: empty feature matrix {t}x{d}", offset=5)
    need = 13 + 4 * t * d
    if len(blob) < need:
        raise FormatError(
            f"{path}: truncated payload, header declares {t}x{d} floats", offset=len(blob)
        )
    if len(blob) > need:
        raise FormatError(f"{path}: trailing bytes after payload", offset=need)
    frames = np.frombuffer(blob, dtype="<f4", count=t * d, offset=13).reshape(t, d)
    bad = np.flatnonzero(~np.isfinite(frames))
    if bad.size:
        raise FormatError(f"{path}: non-finite feature value", offset=13 + 4 * int(bad[0]))
    if expected_dim is not None and d != expected_dim:
        raise FormatError(f"{path}: feature dimension {d}, expected {expected_dim}", offset=9)
    return AudioFeatureSequence(frames.astype(np.float64), Path(path).stem)


# ---------------------------------------------------------------------------
# word embeddings


@dataclass
class EmbeddingTable:
    vectors: dict[str, np.ndarray]
    dim: int
    unk: np.ndarray

    def lookup(self, word: str) -> np.ndarray:
        return self.vectors.get(word, self.unk)

    def matrix(self, words: Sequence[str]) -> np.ndarray:
        if not words:
            return np.zeros((0, self.dim))
        return np.stack([self.lookup(w) for w in words])


def load_embeddings(path: str | os.PathLike, dim: int) -> EmbeddingTable:
    """Read a word-vector text file; an optional ``count dim`` header is skipped."""
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            parts = [p for p in parts if p]
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) != dim + 1:
                raise FormatError(
                    f"{path}: expected a word and {dim} values, got {len(parts) - 1}", line=lineno
                )
            try:
                vec = np.array([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}: {exc}", line=lineno) from None
            if not np.isfinite(vec).all():
                raise FormatError(f"{path}: non-finite value", line=lineno)
            vectors[parts[0]] = vec
    if not vectors:
        raise FormatError(f"{path}: no vectors found", line=0)
    unk = np.mean(np.stack(list(vectors.values())), axis=0)
    return EmbeddingTable(vectors, dim, unk)


def random_embeddings(words: Iterable[str], dim: int, seed: int) -> EmbeddingTable:
    """Seeded stand-in for pretrained vectors; one unit-scale vector per word."""
    rng = np.random.default_rng(seed)
    words = sorted(set(words))
    vectors = {w: rng.standard_normal(dim) for w in words}
    unk = rng.standard_normal(dim)
    return EmbeddingTable(vectors, dim, unk)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ClipRecord:
    id: str
    features: str
    captions: list[str]
    split: str = "train"


@dataclass
class DatasetManifest:
    clips: list[ClipRecord]
    root: Path = Path(".")

    def split(self, name: str) -> list[ClipRecord]:
        return [c for c in self.clips if c.split == name]

    def feature_path(self, clip: ClipRecord) -> Path:
        return self.root / clip.features

    def to_json(self) -> str:
        clips = [
            {"id": c.id, "features": c.features, "captions": c.captions, "split": c.split}
            for c in self.clips
        ]
        return json.dumps({"clips": clips}, indent=2, sort_keys=True) + "\n"


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    clips = []
    for i, rec in enumerate(doc.get("clips", [])):
        try:
            clip = ClipRecord(rec["id"], rec["features"], list(rec["captions"]), rec.get("split", "train"))
        except KeyError as exc:
            raise FormatError(f"{path}: clip {i} lacks field {exc}") from None
        if not clip.captions:
            raise FormatError(f"{path}: clip {clip.id} has no captions")
        clips.append(clip)
    manifest = DatasetManifest(clips, path.parent)
    if check_files:
        for clip in clips:
            if not manifest.feature_path(clip).is_file():
                raise FileNotFoundError(manifest.feature_path(clip))
    return manifest


# ---------------------------------------------------------------------------
# synthetic data

EVENT_WORDS = (
    "dog", "bird", "car", "rain", "bell", "engine", "siren", "door",
    "wind", "water", "train", "drum",
)  # fmt: skip

TEMPLATES = {
    1: "a {0} sound is heard",
    2: "a {0} sound is heard followed by a {1}",
    3: "a {0} sound is heard followed by a {1} and a {2}",
}


def synthetic_caption(events: Sequence[str]) -> str:
    return TEMPLATES[len(events)].format(*events)


def generate_synthetic_dataset(
    out_dir: str | os.PathLike,
    seed: int,
    n_clips: int,
    n_event_types: int,
    d_x: int = 16,
    n_val: int = 0,
    noise: float = 0.1,
) -> DatasetManifest:
    """Write a seeded toy corpus: AFSQ clips plus ``manifest.json``.

    Each clip holds 1-3 distinct events laid out in time order, each a
    constant prototype vector plus Gaussian noise over a random span, inside
    a T in [8, 20] sequence of low-level background noise. The single caption
    names the events in order, so it is recoverable from the features.
    The first ``n_clips`` records are ``train``; ``n_val`` more are ``validation``.
    """
    if not 1 <= n_event_types <= len(EVENT_WORDS):
        raise ValueError(f"n_event_types must lie in [1, {len(EVENT_WORDS)}]")
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    events = EVENT_WORDS[:n_event_types]
    prototypes = rng.standard_normal((n_event_types, d_x))
    clips = []
    for i in range(n_clips + n_val):
        t = int(rng.integers(8, 21))
        k = int(rng.integers(1, min(3, n_event_types) + 1))
        chosen = rng.choice(n_event_types, size=k, replace=False)
        frames = noise * rng.standard_normal((t, d_x))
        # split [0, t) into k consecutive spans of at least 2 frames each
        cuts = np.sort(rng.choice(np.arange(2, t - 1), size=k - 1, replace=False)) if k > 1 else []
        bounds = [0, *[int(c) for c in cuts], t]
        for j, ev in enumerate(chosen):
            lo, hi = bounds[j], bounds[j + 1]
            start = int(rng.integers(lo, max(lo + 1, hi - 1)))
            stop = int(rng.integers(start + 1, hi + 1))
            frames[start:stop] = prototypes[ev] + noise * rng.standard_normal((stop - start, d_x))
        clip_id = f"clip{i:04d}"
        rel = f"features/{clip_id}.afsq"
        write_features(out / rel, frames)
        caption = synthetic_caption([events[e] for e in chosen])
        clips.append(ClipRecord(clip_id, rel, [caption], "train" if i < n_clips else "validation"))
    manifest = DatasetManifest(clips, out)
    _atomic_write(out / "manifest.json", manifest.to_json().encode("utf-8"))
    return manifest


# ---------------------------------------------------------------------------
# checkpoints


def _atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | os.PathLike, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``header`` (JSON-serialisable) and named arrays as one blob."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    doc = json.dumps({"meta": header, "arrays": entries}, sort_keys=True).encode("utf-8")
    blob = CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(doc)) + doc + b"".join(chunks)
    _atomic_write(path, blob)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint", offset=0)
    version, hlen = struct.unpack_from("<BI", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    doc = json.loads(blob[9 : 9 + hlen].decode("utf-8"))
    base = 9 + hlen
    arrays = {}
    for e in doc["arrays"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + count * dtype.itemsize > len(blob):
            raise FormatError(f"{path}: truncated array {e['name']}", offset=len(blob))
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dtype.newbyteorder("="))
    return doc["meta"], arrays
