"""R x B counter-matrix density estimator built on LSH collision kernels.

One linear pass inserts every vector (each row's hashed bucket counter is
incremented), a second linear pass scores queries by averaging the counters
their hashes land in.  Dividing the raw score by the insert count N gives a
consistent estimate of the mean kernel value between the query and the
inserted data, with error shrinking like O(sqrt(log R / R)).

Sketches with identical specs (including the seed) are mergeable by
counter addition, so shards can be built in parallel and combined.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .lsh import (
    COSINE_SIGNED_PROJECTION,
    EUCLIDEAN_PSTABLE,
    HashFamily,
    HashFamilySpec,
    kernel_values,
)

SKETCH_MAGIC = b"KDE1"
SKETCH_VERSION = 1
_UINT32_MAX = (1 << 32) - 1
_KIND_CODES = {EUCLIDEAN_PSTABLE: 0, COSINE_SIGNED_PROJECTION: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

# Batch size for hashing during add/score; bounds transient memory at
# roughly chunk * rows * 8 bytes without affecting results.
DEFAULT_CHUNK = 8192


class SketchFormatError(Exception):
    """A sketch file is corrupt, truncated, or from an unknown version."""


class KdeSketch:
    """Counter sketch over a hash family; counts has shape (rows, buckets).

    Counters are 32-bit with checked headroom: inserts and merges fail
    loudly rather than wrap.  After any sequence of adds and merges every
    row of counts sums to the insert count N.
    """

    def __init__(self, spec: HashFamilySpec, _counts: np.ndarray | None = None, _n: int = 0):
        self.spec = spec
        self.family = HashFamily(spec)
        if _counts is None:
            try:
                _counts = np.zeros((spec.rows, spec.buckets), dtype=np.uint32)
            except MemoryError as exc:
                raise MemoryError(
                    f"cannot allocate {spec.rows} x {spec.buckets} sketch "
                    f"({4 * spec.rows * spec.buckets} bytes)"
                ) from exc
        self.counts = _counts
        self.n = _n

    @property
    def payload_bytes(self) -> int:
        """Size of the counter payload: rows * buckets * 4."""
        return self.counts.nbytes

    def _check_headroom(self, extra: int) -> None:
        # Every counter is bounded by N, so guarding N guards them all.
        if self.n + extra > _UINT32_MAX:
            raise OverflowError(
                f"sketch counters would overflow: {self.n} + {extra} > {_UINT32_MAX}"
            )

    def add(self, x: np.ndarray) -> None:
        """Insert one vector: one counter per row is incremented."""
        self.add_batch(np.asarray(x, dtype=np.float64)[None, :])

    def add_batch(self, x: np.ndarray, chunk: int = DEFAULT_CHUNK) -> None:
        """Insert a batch of vectors, shape (n, d)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.dim:
            raise ValueError(f"expected (n, {self.spec.dim}) batch, got shape {x.shape}")
        self._check_headroom(x.shape[0])
        buckets = self.spec.buckets
        for lo in range(0, x.shape[0], chunk):
            part = self.family.bucket_matrix(x[lo : lo + chunk])
            for r in range(self.spec.rows):
                self.counts[r] += np.bincount(part[:, r], minlength=buckets).astype(np.uint32)
        self.n += x.shape[0]

    def score(self, y: np.ndarray) -> float:
        """Raw count-scale score: (1/R) sum_r counts[r, h_r(y)]."""
        return float(self.score_batch(np.asarray(y, dtype=np.float64)[None, :])[0])

    def score_batch(
        self, y: np.ndarray, normalized: bool = False, chunk: int = DEFAULT_CHUNK
    ) -> np.ndarray:
        """Score a batch of queries; ``normalized`` divides by N to estimate
        the mean kernel value (always in [0, 1])."""
        if self.n < 1:
            raise ValueError("cannot score against an empty sketch (N = 0)")
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[None, :]
        if y.ndim != 2 or y.shape[1] != self.spec.dim:
            raise ValueError(f"expected (n, {self.spec.dim}) queries, got shape {y.shape}")
        rows = np.arange(self.spec.rows)
        out = np.empty(y.shape[0], dtype=np.float64)
        for lo in range(0, y.shape[0], chunk):
            part = self.family.bucket_matrix(y[lo : lo + chunk])
            hits = self.counts[rows[None, :], part]
            out[lo : lo + part.shape[0]] = hits.sum(axis=1, dtype=np.float64) / self.spec.rows
        if normalized:
            out /= self.n
        return out

    def normalized_score(self, y: np.ndarray) -> float:
        """Kernel-mean estimate: raw score divided by N."""
        return self.score(y) / self.n

    def merge(self, other: "KdeSketch") -> "KdeSketch":
        """Combine two sketches built with the exact same spec (incl. seed)."""
        if self.spec != other.spec:
            raise ValueError("cannot merge sketches with different hash family specs")
        self._check_headroom(other.n)
        merged = KdeSketch(self.spec, _counts=self.counts + other.counts, _n=self.n + other.n)
        return merged

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Lossless binary round-trip, little-endian throughout."""
        spec = self.spec
        header = struct.pack(
            "<4sHBIIIdQQ",
            SKETCH_MAGIC,
            SKETCH_VERSION,
            _KIND_CODES[spec.kind],
            spec.dim,
            spec.rows,
            spec.buckets,
            spec.bandwidth if spec.bandwidth is not None else float("nan"),
            spec.seed,
            self.n,
        )
        with Path(path).open("wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.counts, dtype="<u4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "KdeSketch":
        path = Path(path)
        header_size = struct.calcsize("<4sHBIIIdQQ")
        with path.open("rb") as fh:
            header = fh.read(header_size)
            if len(header) != header_size:
                raise SketchFormatError(f"{path}: truncated header")
            magic, version, kind_code, dim, rows, buckets, bandwidth, seed, n = struct.unpack(
                "<4sHBIIIdQQ", header
            )
            if magic != SKETCH_MAGIC:
                raise SketchFormatError(f"{path}: bad magic {magic!r}, expected {SKETCH_MAGIC!r}")
            if version != SKETCH_VERSION:
                raise SketchFormatError(
                    f"{path}: unsupported sketch version {version}, expected {SKETCH_VERSION}"
                )
            if kind_code not in _KIND_NAMES:
                raise SketchFormatError(f"{path}: unknown family kind code {kind_code}")
            kind = _KIND_NAMES[kind_code]
            spec = HashFamilySpec(
                kind=kind,
                dim=dim,
                rows=rows,
                buckets=buckets,
                bandwidth=None if kind != EUCLIDEAN_PSTABLE else bandwidth,
                seed=seed,
            )
            payload = fh.read(4 * rows * buckets)
            if len(payload) != 4 * rows * buckets:
                raise SketchFormatError(f"{path}: truncated counter payload")
            counts = np.frombuffer(payload, dtype="<u4").reshape(rows, buckets).copy()
        sketch = cls(spec, _counts=counts, _n=int(n))
        row_sums = counts.sum(axis=1, dtype=np.int64)
        if not np.all(row_sums == int(n)):
            raise SketchFormatError(f"{path}: row sums disagree with recorded insert count {n}")
        return sketch


def sketch_new(spec: HashFamilySpec) -> KdeSketch:
    """Fresh all-zero sketch for the given family spec."""
    return KdeSketch(spec)


def build_sketch_from(vectors: Iterable[np.ndarray], spec: HashFamilySpec) -> KdeSketch:
    """Convenience: build a sketch from an iterable or array of vectors."""
    sketch = KdeSketch(spec)
    if isinstance(vectors, np.ndarray):
        sketch.add_batch(vectors)
    else:
        batch = [np.asarray(v, dtype=np.float64) for v in vectors]
        if batch:
            sketch.add_batch(np.stack(batch))
    return sketch


def brute_force_kernel_mean(data: np.ndarray, y: np.ndarray, spec: HashFamilySpec) -> float:
    """Exact (1/N) sum_i k(x_i, y) over the analytic collision kernel.

    This is the quantity the normalized sketch score approximates; it is
    the independent oracle used by the accuracy tests.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ValueError("data must be a non-empty (n, d) array")
    return float(np.mean(kernel_values(spec, data, np.asarray(y, dtype=np.float64))))
