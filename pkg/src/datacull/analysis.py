"""Comparison instruments: rank correlation, histograms, over-scaling,
and iso-compute epoch planning.

kendall_tau is the tie-corrected tau-b, computed in O(N log N) with
merge-sort inversion counting; a quadratic pair-counting oracle lives in
the test suite and must agree exactly.  over_scaling normalizes a model's
improvement from sampling against the gap to the next-larger model:
100 * (sampled - full) / (reference - full), averaged over metrics.
epoch_plan fixes a total token budget so smaller samples repeat for more
epochs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ScoreRecord


# ---------------------------------------------------------------------------
# Kendall tau-b
# ---------------------------------------------------------------------------

def _sorted_with_inversions(a: np.ndarray) -> tuple[np.ndarray, int]:
    """Merge sort that counts strict inversions (pairs i<j with a[i] > a[j])."""
    n = len(a)
    if n <= 1:
        return a, 0
    mid = n // 2
    left, c_left = _sorted_with_inversions(a[:mid])
    right, c_right = _sorted_with_inversions(a[mid:])
    pos_r = np.searchsorted(left, right, side="right")
    cross = int((len(left) - pos_r).sum())
    merged = np.empty(n, dtype=a.dtype)
    pos_l = np.searchsorted(right, left, side="left") + np.arange(len(left))
    merged[pos_l] = left
    merged[pos_r + np.arange(len(right))] = right
    return merged, c_left + c_right + cross


def _tie_term(sorted_vals: np.ndarray) -> int:
    """Sum of t*(t-1)/2 over runs of equal values in a sorted array."""
    if len(sorted_vals) < 2:
        return 0
    change = np.nonzero(np.diff(sorted_vals) != 0)[0]
    bounds = np.concatenate([[-1], change, [len(sorted_vals) - 1]])
    runs = np.diff(bounds)
    return int((runs * (runs - 1) // 2).sum())


def _joint_tie_term(xs: np.ndarray, ys: np.ndarray) -> int:
    if len(xs) < 2:
        return 0
    change = np.nonzero((np.diff(xs) != 0) | (np.diff(ys) != 0))[0]
    bounds = np.concatenate([[-1], change, [len(xs) - 1]])
    runs = np.diff(bounds)
    return int((runs * (runs - 1) // 2).sum())


def kendall_tau(x: Sequence[float], y: Sequence[float]) -> float:
    """Tie-corrected rank correlation (tau-b) between two aligned score
    vectors, in [-1, 1].

    Raises when either input is degenerate (all values tied), where tau
    is undefined.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"inputs must be equal-length 1-D vectors, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 2:
        raise ValueError("need at least two observations")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("scores must be finite")

    perm = np.lexsort((y, x))
    xs, ys = x[perm], y[perm]

    n0 = n * (n - 1) // 2
    n1 = _tie_term(xs)
    n2 = _tie_term(np.sort(y))
    n3 = _joint_tie_term(xs, ys)
    if n1 == n0 or n2 == n0:
        raise ValueError("tau is undefined when one input is entirely tied")

    # Sorted by (x, y), strict inversions in y are exactly the discordant
    # pairs; pairs tied in x contribute none because y ascends within runs.
    _, dis = _sorted_with_inversions(ys)
    con_minus_dis = n0 - n1 - n2 + n3 - 2 * dis
    denom = math.sqrt(float(n0 - n1) * float(n0 - n2))
    return con_minus_dis / denom


def kendall_tau_scores(a: Sequence[ScoreRecord], b: Sequence[ScoreRecord]) -> float:
    """Tau-b between two score tables over the same id set."""
    map_a = {r.id: r.raw_score for r in a}
    map_b = {r.id: r.raw_score for r in b}
    if set(map_a) != set(map_b):
        only_a = len(set(map_a) - set(map_b))
        only_b = len(set(map_b) - set(map_a))
        raise ValueError(
            f"score tables cover different ids ({only_a} only in first, {only_b} only in second)"
        )
    ids = sorted(map_a)
    return kendall_tau([map_a[i] for i in ids], [map_b[i] for i in ids])


@dataclass
class CorrelationMatrix:
    scorer_ids: list[str]
    matrix: np.ndarray
    n_common: int
    dropped: list[int]


def correlation_matrix(score_sets: Sequence[Sequence[ScoreRecord]]) -> CorrelationMatrix:
    """Pairwise tau-b over the inner join of the inputs' id sets.

    Symmetric with unit diagonal; ``dropped`` reports per input how many
    of its records fell outside the common id universe.
    """
    if len(score_sets) < 2:
        raise ValueError("need at least two score sets")
    maps = [{r.id: r.raw_score for r in s} for s in score_sets]
    common: set[str] = set(maps[0])
    for m in maps[1:]:
        common &= set(m)
    if not common:
        raise ValueError("score sets have no ids in common")
    ids = sorted(common)
    arrays = [np.array([m[i] for i in ids], dtype=np.float64) for m in maps]
    dropped = [len(m) - len(ids) for m in maps]
    scorer_ids = [s[0].scorer_id if s else "?" for s in score_sets]

    k = len(score_sets)
    matrix = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            matrix[i, j] = matrix[j, i] = kendall_tau(arrays[i], arrays[j])
    return CorrelationMatrix(
        scorer_ids=scorer_ids, matrix=matrix, n_common=len(ids), dropped=dropped
    )


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------

@dataclass
class Histogram:
    edges: np.ndarray   # bins + 1 edges
    counts: np.ndarray  # bins counts, summing to N


def score_histogram(scores, bins: int) -> Histogram:
    """Equal-width histogram over [min, max]; the last bin is right-closed."""
    if bins < 1:
        raise ValueError(f"bin count must be >= 1, got {bins}")
    values = _score_values(scores)
    if len(values) < 1:
        raise ValueError("cannot histogram an empty score list")
    if not np.all(np.isfinite(values)):
        raise ValueError("scores must be finite")
    counts, edges = np.histogram(values, bins=bins)
    return Histogram(edges=edges, counts=counts)


def _score_values(scores) -> np.ndarray:
    seq = list(scores)
    if seq and isinstance(seq[0], ScoreRecord):
        return np.array([r.raw_score for r in seq], dtype=np.float64)
    return np.asarray(seq, dtype=np.float64)


# ---------------------------------------------------------------------------
# Over-scaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricTriple:
    """One metric measured on (sampled-data model, full-data model,
    next-larger full-data model)."""

    metric: str
    sampled: float
    full: float
    reference: float
    higher_is_better: bool = True

    def __post_init__(self):
        for name in ("sampled", "full", "reference"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{self.metric}: {name} must be finite")


def over_scaling(triples: Sequence[MetricTriple]) -> float:
    """Mean over metrics of 100 * (sampled - full) / (reference - full).

    Lower-is-better metrics are negated before the ratio.  Triples whose
    reference equals the full-data value carry no signal and are skipped
    with a warning; an empty usable set is an error.
    """
    values = []
    for t in triples:
        if t.reference == t.full:
            warnings.warn(
                f"skipping metric {t.metric!r}: reference equals full-data value",
                stacklevel=2,
            )
            continue
        sampled, full, reference = t.sampled, t.full, t.reference
        if not t.higher_is_better:
            sampled, full, reference = -sampled, -full, -reference
        values.append(100.0 * (sampled - full) / (reference - full))
    if not values:
        raise ValueError("no usable metric triples (all have reference == full)")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Iso-compute epoch planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochPlan:
    """Token accounting for training on a downsampled corpus at a fixed
    total budget: smaller samples repeat for more epochs."""

    dataset_tokens: float
    sampling_ratio: float
    budget_tokens: float
    sampled_tokens: float
    epochs: float


def epoch_plan(dataset_tokens: float, ratio: float, budget_tokens: float) -> EpochPlan:
    if dataset_tokens <= 0 or budget_tokens <= 0:
        raise ValueError("token counts must be positive")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"sampling ratio must be in (0, 1], got {ratio}")
    sampled = ratio * dataset_tokens
    return EpochPlan(
        dataset_tokens=dataset_tokens,
        sampling_ratio=ratio,
        budget_tokens=budget_tokens,
        sampled_tokens=sampled,
        epochs=budget_tokens / sampled,
    )


# ---------------------------------------------------------------------------
# Report emission: flat tabular text, one row per entry
# ---------------------------------------------------------------------------

def write_matrix_report(result: CorrelationMatrix, path: str | Path) -> None:
    lines = ["scorer_id\t" + "\t".join(result.scorer_ids)]
    for sid, row in zip(result.scorer_ids, result.matrix):
        lines.append(sid + "\t" + "\t".join(f"{v:.6f}" for v in row))
    lines.append(f"# common_ids\t{result.n_common}")
    lines.append("# dropped\t" + "\t".join(str(d) for d in result.dropped))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_histogram_report(hist: Histogram, path: str | Path) -> None:
    lines = ["bin_lo\tbin_hi\tcount"]
    for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
        lines.append(f"{lo!r}\t{hi!r}\t{c}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_over_scaling_report(value: float, n_metrics: int, path: str | Path) -> None:
    Path(path).write_text(
        f"over_scaling_pct\t{value:.4f}\nmetrics_used\t{n_metrics}\n", encoding="utf-8"
    )


def write_epoch_plan_report(plan: EpochPlan, path: str | Path) -> None:
    lines = [
        f"dataset_tokens\t{plan.dataset_tokens:.6g}",
        f"sampling_ratio\t{plan.sampling_ratio}",
        f"budget_tokens\t{plan.budget_tokens:.6g}",
        f"sampled_tokens\t{plan.sampled_tokens:.6g}",
        f"epochs\t{plan.epochs:.2f}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
