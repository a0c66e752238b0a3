"""Corpus data model: example/embedding/score records and their on-disk formats.

Text shards are UTF-8 JSON lines with keys ``id``, ``text`` and optional
``token_count``.  Embedding shards are a little-endian binary format
(magic ``EMB1``) so that vectors round-trip bit-exactly.  Score files are
JSON lines with keys ``id``, ``scorer_id``, ``score`` and optional
``percentile``; floats are serialized with full round-trip precision.

All readers stream in deterministic shard-then-offset order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.stats import rankdata

EMBEDDING_MAGIC = b"EMB1"


class CorpusError(Exception):
    """Base class for corpus ingestion and persistence failures."""


class ShardFormatError(CorpusError):
    """A shard file exists but its contents cannot be parsed."""


class DuplicateIdError(CorpusError):
    """The same record id appears more than once in a manifest."""


@dataclass(frozen=True)
class ExampleRecord:
    """One corpus item: stable id, plain text, optional token count."""

    id: str
    text: str
    token_count: int | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("record id must be a non-empty string")
        if self.token_count is not None and self.token_count < 0:
            raise ValueError(f"token_count must be >= 0, got {self.token_count}")

    @property
    def scorable(self) -> bool:
        """True when the text is non-empty after whitespace trimming."""
        return bool(self.text.strip())


@dataclass(frozen=True)
class EmbeddingRecord:
    """Fixed-dimension real vector keyed by example id."""

    id: str
    vector: np.ndarray

    def __post_init__(self):
        if not self.id:
            raise ValueError("record id must be a non-empty string")
        vec = np.asarray(self.vector, dtype=np.float32)
        if vec.ndim != 1:
            raise ValueError(f"vector must be 1-D, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"vector for id {self.id!r} has non-finite components")
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class ScoreRecord:
    """(id, scorer, raw score) triple; higher raw_score always means keep.

    ``percentile``, when present, is the average-rank percentile of
    ``raw_score`` within its score file, in [0, 100].
    """

    id: str
    scorer_id: str
    raw_score: float
    percentile: float | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("record id must be a non-empty string")
        if not self.scorer_id:
            raise ValueError("scorer_id must be a non-empty string")
        if not math.isfinite(self.raw_score):
            raise ValueError(f"raw_score for id {self.id!r} must be finite")
        if self.percentile is not None and not 0.0 <= self.percentile <= 100.0:
            raise ValueError(f"percentile must be in [0, 100], got {self.percentile}")


@dataclass
class CorpusManifest:
    """Shard listing plus corpus-level bookkeeping.

    Shard paths are stored relative to ``root`` (the directory holding the
    manifest file).  ``normalize_embeddings`` selects whether density
    scoring consumes raw or length-normalized vectors; raw is the default.
    """

    root: Path
    text_shards: list[str] = field(default_factory=list)
    embedding_shards: list[str] = field(default_factory=list)
    record_count: int = 0
    embedding_dim: int | None = None
    total_tokens: int | None = None
    normalize_embeddings: bool = False

    def text_paths(self) -> list[Path]:
        return [self.root / s for s in self.text_shards]

    def embedding_paths(self) -> list[Path]:
        return [self.root / s for s in self.embedding_shards]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        payload = {
            "text_shards": list(self.text_shards),
            "embedding_shards": list(self.embedding_shards),
            "record_count": self.record_count,
            "embedding_dim": self.embedding_dim,
            "total_tokens": self.total_tokens,
            "normalize_embeddings": self.normalize_embeddings,
        }
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ShardFormatError(f"{path}: invalid manifest JSON: {exc}") from exc
        return cls(
            root=path.parent,
            text_shards=list(payload.get("text_shards", [])),
            embedding_shards=list(payload.get("embedding_shards", [])),
            record_count=int(payload["record_count"]),
            embedding_dim=payload.get("embedding_dim"),
            total_tokens=payload.get("total_tokens"),
            normalize_embeddings=bool(payload.get("normalize_embeddings", False)),
        )


# ---------------------------------------------------------------------------
# Text shards
# ---------------------------------------------------------------------------

def write_examples(records: Iterable[ExampleRecord], path: str | Path) -> int:
    """Write one JSON object per line; returns the number of records."""
    path = Path(path)
    n = 0
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            obj = {"id": rec.id, "text": rec.text}
            if rec.token_count is not None:
                obj["token_count"] = rec.token_count
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
            n += 1
    return n


def _parse_example_line(line: str, where: str) -> ExampleRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ShardFormatError(f"{where}: invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ShardFormatError(f"{where}: expected an object, got {type(obj).__name__}")
    if "id" not in obj or "text" not in obj:
        raise ShardFormatError(f"{where}: missing required key 'id' or 'text'")
    rid, text = obj["id"], obj["text"]
    if not isinstance(rid, str) or not rid:
        raise ShardFormatError(f"{where}: 'id' must be a non-empty string")
    if not isinstance(text, str):
        raise ShardFormatError(f"{where}: 'text' must be a string")
    token_count = obj.get("token_count")
    if token_count is not None and (not isinstance(token_count, int) or token_count < 0):
        raise ShardFormatError(f"{where}: 'token_count' must be a non-negative integer")
    return ExampleRecord(id=rid, text=text, token_count=token_count)


def load_examples(manifest: CorpusManifest) -> Iterator[ExampleRecord]:
    """Stream ExampleRecords in shard-then-offset order.

    Raises on missing shards, malformed lines (reported with shard path and
    line number) and duplicate ids.  The total yielded count is checked
    against the manifest.
    """
    seen: set[str] = set()
    total = 0
    for path in manifest.text_paths():
        if not path.exists():
            raise FileNotFoundError(f"text shard not found: {path}")
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip("\n")
                if not line:
                    continue
                rec = _parse_example_line(line, f"{path}:{lineno}")
                if rec.id in seen:
                    raise DuplicateIdError(f"{path}:{lineno}: duplicate id {rec.id!r}")
                seen.add(rec.id)
                total += 1
                yield rec
    if manifest.record_count and total != manifest.record_count:
        raise CorpusError(
            f"manifest declares {manifest.record_count} records, shards hold {total}"
        )


# ---------------------------------------------------------------------------
# Embedding shards
# ---------------------------------------------------------------------------

def write_embeddings(records: Sequence[EmbeddingRecord], path: str | Path) -> int:
    """Write an embedding shard; all vectors must share one dimension."""
    path = Path(path)
    if records:
        dim = int(records[0].vector.shape[0])
    else:
        dim = 0
    with path.open("wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<IQ", dim, len(records)))
        for rec in records:
            if rec.vector.shape[0] != dim:
                raise ValueError(
                    f"vector for id {rec.id!r} has dimension {rec.vector.shape[0]}, "
                    f"shard dimension is {dim}"
                )
            id_bytes = rec.id.encode("utf-8")
            fh.write(struct.pack("<I", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(rec.vector.astype("<f4", copy=False).tobytes())
    return len(records)


def _read_exact(fh, n: int, where: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ShardFormatError(f"{where}: truncated (wanted {n} bytes, got {len(buf)})")
    return buf


def load_embeddings(manifest: CorpusManifest) -> Iterator[EmbeddingRecord]:
    """Stream EmbeddingRecords in stored order, validating dimensions.

    The shard header dimension must match the manifest dimension; every
    component must be finite.
    """
    for path in manifest.embedding_paths():
        if not path.exists():
            raise FileNotFoundError(f"embedding shard not found: {path}")
        with path.open("rb") as fh:
            magic = _read_exact(fh, 4, str(path))
            if magic != EMBEDDING_MAGIC:
                raise ShardFormatError(f"{path}: bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
            dim, count = struct.unpack("<IQ", _read_exact(fh, 12, str(path)))
            if manifest.embedding_dim is not None and dim != manifest.embedding_dim:
                raise ShardFormatError(
                    f"{path}: shard dimension {dim} does not match manifest "
                    f"dimension {manifest.embedding_dim}"
                )
            for i in range(count):
                where = f"{path}:record {i}"
                (id_len,) = struct.unpack("<I", _read_exact(fh, 4, where))
                rid = _read_exact(fh, id_len, where).decode("utf-8")
                raw = _read_exact(fh, 4 * dim, where)
                vec = np.frombuffer(raw, dtype="<f4").astype(np.float32)
                if not np.all(np.isfinite(vec)):
                    raise ShardFormatError(f"{where}: non-finite component in vector")
                yield EmbeddingRecord(id=rid, vector=vec)
            trailing = fh.read(1)
            if trailing:
                raise ShardFormatError(f"{path}: trailing data after {count} records")


def build_manifest(
    root: str | Path,
    text_shards: Sequence[str] = (),
    embedding_shards: Sequence[str] = (),
    normalize_embeddings: bool = False,
) -> CorpusManifest:
    """Scan shards under ``root`` and assemble a consistent manifest."""
    root = Path(root)
    manifest = CorpusManifest(
        root=root,
        text_shards=list(text_shards),
        embedding_shards=list(embedding_shards),
        normalize_embeddings=normalize_embeddings,
    )
    count = 0
    tokens = 0
    have_tokens = bool(text_shards)
    for rec in load_examples(manifest):
        count += 1
        if rec.token_count is None:
            have_tokens = False
        elif have_tokens:
            tokens += rec.token_count
    dim = None
    emb_count = 0
    for rec in load_embeddings(manifest):
        emb_count += 1
        d = int(rec.vector.shape[0])
        if dim is None:
            dim = d
        elif dim != d:
            raise ShardFormatError(f"embedding dimension varies across shards: {dim} vs {d}")
    if not text_shards:
        count = emb_count
    manifest.record_count = count
    manifest.embedding_dim = dim
    manifest.total_tokens = tokens if have_tokens else None
    return manifest


# ---------------------------------------------------------------------------
# Score files
# ---------------------------------------------------------------------------

def write_scores(records: Sequence[ScoreRecord], path: str | Path) -> None:
    """Write a score file; all records must carry the same scorer_id."""
    path = Path(path)
    scorer_ids = {r.scorer_id for r in records}
    if len(scorer_ids) > 1:
        raise ValueError(f"mixed scorer_id in one score file: {sorted(scorer_ids)}")
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(format_score_line(rec) + "\n")


def format_score_line(rec: ScoreRecord) -> str:
    obj = {"id": rec.id, "scorer_id": rec.scorer_id, "score": rec.raw_score}
    if rec.percentile is not None:
        obj["percentile"] = rec.percentile
    return json.dumps(obj, ensure_ascii=False)


def read_scores(path: str | Path) -> list[ScoreRecord]:
    """Read a score file back; floats recover their exact bit patterns."""
    path = Path(path)
    records: list[ScoreRecord] = []
    scorer_id = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ShardFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                rec = ScoreRecord(
                    id=obj["id"],
                    scorer_id=obj["scorer_id"],
                    raw_score=float(obj["score"]),
                    percentile=obj.get("percentile"),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ShardFormatError(f"{path}:{lineno}: bad score record: {exc}") from exc
            if scorer_id is None:
                scorer_id = rec.scorer_id
            elif rec.scorer_id != scorer_id:
                raise ShardFormatError(
                    f"{path}:{lineno}: mixed scorer_id {rec.scorer_id!r} vs {scorer_id!r}"
                )
            records.append(rec)
    return records


def compute_percentiles(scores: Sequence[ScoreRecord]) -> list[ScoreRecord]:
    """Attach average-rank percentiles: 100 * mean_rank / N, ties averaged.

    Output order matches input order.  Percentiles are monotone in
    raw_score and invariant under strictly increasing score transforms.
    """
    if not scores:
        raise ValueError("cannot compute percentiles of an empty score list")
    scorer_ids = {r.scorer_id for r in scores}
    if len(scorer_ids) > 1:
        raise ValueError(f"mixed scorer_id in percentile input: {sorted(scorer_ids)}")
    values = np.array([r.raw_score for r in scores], dtype=np.float64)
    ranks = rankdata(values, method="average")
    pct = 100.0 * ranks / len(values)
    return [
        ScoreRecord(id=r.id, scorer_id=r.scorer_id, raw_score=r.raw_score, percentile=float(p))
        for r, p in zip(scores, pct)
    ]
