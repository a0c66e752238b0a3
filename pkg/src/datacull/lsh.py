"""Seeded locality-sensitive hash families with closed-form collision kernels.

Two families are provided:

* ``euclidean-pstable``: bucket = floor((w . x + b) / bandwidth) mod B with
  w ~ N(0, I) and b ~ U[0, bandwidth).  The single-row collision probability
  (before the modulo) has the standard closed form in c = ||x - y|| / bandwidth:

      p(c) = 1 - 2 Phi(-1/c) - (2c / sqrt(2 pi)) (1 - exp(-1/(2 c^2)))

* ``cosine-signed-projection``: a pattern of independent projection signs,
  reduced mod B.  Per-bit collision probability is 1 - theta/pi, so a row of
  m bits collides with probability (1 - theta/pi)^m.

Row randomness comes from the counter-based Philox generator keyed by
(seed, row), so rows are reproducible and mutually independent, and
identical specs always produce identical hash functions.

The modulo-B range reduction inflates collision odds by roughly 1/B; the
closed forms here are the pre-modulo kernels, which is what the sketch
estimator targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import ndtr

EUCLIDEAN_PSTABLE = "euclidean-pstable"
COSINE_SIGNED_PROJECTION = "cosine-signed-projection"
_KINDS = (EUCLIDEAN_PSTABLE, COSINE_SIGNED_PROJECTION)

_UINT64_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class HashFamilySpec:
    """Parameters that fully determine a hash family.

    bandwidth is the kernel scale (euclidean kind only, in units of
    embedding distance); rows and buckets are the sketch geometry R and B.
    """

    kind: str
    dim: int
    rows: int
    buckets: int
    bandwidth: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown hash family kind {self.kind!r}; expected one of {_KINDS}")
        if self.dim < 1:
            raise ValueError(f"dimension must be >= 1, got {self.dim}")
        if self.rows < 1:
            raise ValueError(f"rows must be >= 1, got {self.rows}")
        if self.buckets < 2:
            raise ValueError(f"bucket range must be >= 2, got {self.buckets}")
        if self.kind == EUCLIDEAN_PSTABLE:
            if self.bandwidth is None or not math.isfinite(self.bandwidth) or self.bandwidth <= 0:
                raise ValueError(f"euclidean family needs bandwidth > 0, got {self.bandwidth}")
        elif self.bandwidth is not None:
            raise ValueError("bandwidth only applies to the euclidean-pstable kind")
        object.__setattr__(self, "seed", int(self.seed) & _UINT64_MASK)


def _row_generator(seed: int, row: int) -> np.random.Generator:
    # Counter-based: key (seed, row) makes rows independent and replayable.
    return np.random.Generator(np.random.Philox(key=[seed & _UINT64_MASK, row]))


def _sign_bits(buckets: int) -> int:
    """Number of projection sign bits per row for the cosine family."""
    return max(1, math.ceil(math.log2(buckets)))


class HashFamily:
    """Immutable bank of R seeded hash rows over d-dimensional vectors.

    Safe for unrestricted shared use across threads once constructed.
    """

    def __init__(self, spec: HashFamilySpec):
        self.spec = spec
        if spec.kind == EUCLIDEAN_PSTABLE:
            proj = np.empty((spec.rows, spec.dim), dtype=np.float64)
            offsets = np.empty(spec.rows, dtype=np.float64)
            for r in range(spec.rows):
                g = _row_generator(spec.seed, r)
                proj[r] = g.standard_normal(spec.dim)
                offsets[r] = g.uniform(0.0, spec.bandwidth)
            self.projections = proj
            self.offsets = offsets
            self._flat_proj = proj
        else:
            bits = _sign_bits(spec.buckets)
            proj = np.empty((spec.rows, bits, spec.dim), dtype=np.float64)
            for r in range(spec.rows):
                g = _row_generator(spec.seed, r)
                proj[r] = g.standard_normal((bits, spec.dim))
            self.projections = proj
            self.offsets = None
            self._flat_proj = proj.reshape(spec.rows * bits, spec.dim)
            self._bit_weights = (1 << np.arange(bits, dtype=np.int64))

    def _check_matrix(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.spec.dim:
            raise ValueError(f"expected vectors of dimension {self.spec.dim}, got shape {x.shape}")
        return x

    def bucket_matrix(self, x: np.ndarray) -> np.ndarray:
        """Hash a batch: (n, d) vectors -> (n, R) buckets in [0, B)."""
        spec = self.spec
        x = self._check_matrix(x)
        if spec.kind == EUCLIDEAN_PSTABLE:
            proj = x @ self._flat_proj.T            # (n, R)
            idx = np.floor((proj + self.offsets) / spec.bandwidth).astype(np.int64)
        else:
            bits = self.projections.shape[1]
            proj = x @ self._flat_proj.T            # (n, R*bits)
            signs = proj > 0.0
            patterns = signs.reshape(x.shape[0], spec.rows, bits) @ self._bit_weights
            idx = patterns.astype(np.int64)
        return np.mod(idx, spec.buckets)

    def raw_index(self, row: int, x: np.ndarray) -> int:
        """Pre-modulo index of one row (euclidean kind): floor((w.x + b)/bandwidth)."""
        if self.spec.kind != EUCLIDEAN_PSTABLE:
            raise ValueError("raw_index is defined for the euclidean-pstable kind only")
        self._check_row(row)
        x = self._check_matrix(x)[0]
        return int(np.floor((self.projections[row] @ x + self.offsets[row]) / self.spec.bandwidth))

    def _check_row(self, row: int) -> None:
        if not 0 <= row < self.spec.rows:
            raise ValueError(f"row {row} out of range [0, {self.spec.rows})")

    def hash_row(self, row: int, x: np.ndarray) -> int:
        """Bucket of vector x under hash row ``row``; pure function."""
        self._check_row(row)
        return int(self.bucket_matrix(x)[0, row])


def family_new(spec: HashFamilySpec) -> HashFamily:
    """Build the deterministic hash family described by ``spec``."""
    return HashFamily(spec)


def _pstable_collision(c):
    """Closed-form single-row collision probability at scaled distance c."""
    c = np.asarray(c, dtype=np.float64)
    out = np.ones_like(c)
    nz = c > 0
    cn = c[nz]
    out[nz] = (
        1.0
        - 2.0 * ndtr(-1.0 / cn)
        - (2.0 * cn / math.sqrt(2.0 * math.pi)) * (1.0 - np.exp(-1.0 / (2.0 * cn * cn)))
    )
    return out


def collision_probability(spec: HashFamilySpec, x: np.ndarray, y: np.ndarray) -> float:
    """Analytic probability that one hash row sends x and y to the same
    pre-modulo index.  Symmetric, equal to 1 at x == y, and monotone
    nonincreasing in distance (euclidean) or angle (cosine)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != (spec.dim,) or y.shape != (spec.dim,):
        raise ValueError(
            f"expected two vectors of dimension {spec.dim}, got {x.shape} and {y.shape}"
        )
    if spec.kind == EUCLIDEAN_PSTABLE:
        c = float(np.linalg.norm(x - y)) / spec.bandwidth
        return float(_pstable_collision(c))
    if np.array_equal(x, y):
        return 1.0
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cosine collision probability is undefined for zero vectors")
    cos = float(np.clip(x @ y / (nx * ny), -1.0, 1.0))
    theta = math.acos(cos)
    return (1.0 - theta / math.pi) ** _sign_bits(spec.buckets)


def kernel_values(spec: HashFamilySpec, data: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorized collision probabilities between each row of data and y."""
    data = np.asarray(data, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != spec.dim or y.shape != (spec.dim,):
        raise ValueError(f"expected (n, {spec.dim}) data and ({spec.dim},) query")
    if spec.kind == EUCLIDEAN_PSTABLE:
        dists = np.linalg.norm(data - y, axis=1)
        return _pstable_collision(dists / spec.bandwidth)
    norms = np.linalg.norm(data, axis=1) * np.linalg.norm(y)
    if np.any(norms == 0.0):
        raise ValueError("cosine collision probability is undefined for zero vectors")
    cos = np.clip(data @ y / norms, -1.0, 1.0)
    theta = np.arccos(cos)
    out = (1.0 - theta / math.pi) ** _sign_bits(spec.buckets)
    out[np.all(data == y, axis=1)] = 1.0
    return out


def median_pairwise_distance(
    vectors: np.ndarray, sample_size: int = 1000, seed: int = 0
) -> float:
    """Median heuristic bandwidth: median pairwise euclidean distance of a
    seeded subsample of at most ``sample_size`` vectors."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 2:
        raise ValueError("need at least two vectors to estimate a bandwidth")
    if vectors.shape[0] > sample_size:
        rng = np.random.default_rng(seed)
        idx = rng.choice(vectors.shape[0], size=sample_size, replace=False)
        vectors = vectors[np.sort(idx)]
    med = float(np.median(pdist(vectors)))
    if med <= 0.0:
        raise ValueError("median pairwise distance is zero; data has no spread")
    return med
