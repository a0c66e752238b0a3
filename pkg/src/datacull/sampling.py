"""Selection policies over score tables: top/bottom-k, weighted, uniform.

Weighted sampling without replacement uses the exponential-key
order-statistic scheme: each id draws key = u ** (1/w) with u uniform in
(0, 1), and the k largest keys win.  The first-draw inclusion probability
is w_i / sum(w), so inverse-propensity selection (w = 1/score) picks
low-density items preferentially and uniformizes the selected
distribution over the data's support.

u is derived from a stable hash of (seed, id), so keys are independent of
input order, reproducible across runs, and computable in parallel.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .corpus import ScoreRecord

TOP_K = "top_k"
BOTTOM_K = "bottom_k"
INVERSE_PROPENSITY = "inverse_propensity"
PROPENSITY = "propensity"
UNIFORM_RANDOM = "uniform_random"
_KINDS = (TOP_K, BOTTOM_K, INVERSE_PROPENSITY, PROPENSITY, UNIFORM_RANDOM)
_STOCHASTIC = (INVERSE_PROPENSITY, PROPENSITY, UNIFORM_RANDOM)


@dataclass(frozen=True)
class SelectionPolicy:
    kind: str
    k: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {_KINDS}")
        if self.k < 1:
            raise ValueError(f"selection size k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class WeightSummary:
    min: float
    max: float
    sum: float


@dataclass
class SelectionResult:
    """Selected ids (unique, length k) plus the policy that produced them."""

    ids: list[str]
    policy: SelectionPolicy
    n_input: int
    weights: WeightSummary | None = None


def _check_k(k: int, n: int) -> None:
    if k < 1:
        raise ValueError(f"selection size k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"selection size k={k} exceeds population size {n}")


def _check_scores(scores: Sequence[ScoreRecord]) -> None:
    for rec in scores:
        if math.isnan(rec.raw_score):
            raise ValueError(f"NaN score for id {rec.id!r}")


def select_top_k(scores: Sequence[ScoreRecord], k: int) -> SelectionResult:
    """The k ids with highest raw_score; ties broken by ascending id."""
    _check_scores(scores)
    _check_k(k, len(scores))
    ranked = sorted(scores, key=lambda r: (-r.raw_score, r.id))
    return SelectionResult(
        ids=[r.id for r in ranked[:k]],
        policy=SelectionPolicy(kind=TOP_K, k=k),
        n_input=len(scores),
    )


def select_bottom_k(scores: Sequence[ScoreRecord], k: int) -> SelectionResult:
    """The k ids with lowest raw_score; ties broken by ascending id."""
    _check_scores(scores)
    _check_k(k, len(scores))
    ranked = sorted(scores, key=lambda r: (r.raw_score, r.id))
    return SelectionResult(
        ids=[r.id for r in ranked[:k]],
        policy=SelectionPolicy(kind=BOTTOM_K, k=k),
        n_input=len(scores),
    )


def _uniform_unit(seed: int, item_id: str) -> float:
    """Stable u in (0, 1) as a pure function of (seed, id)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(seed).encode("utf-8"))
    h.update(b"\x00")
    h.update(item_id.encode("utf-8"))
    value = int.from_bytes(h.digest(), "little")
    return (value + 0.5) / 2.0**64


def _select_by_log_keys(ids: Sequence[str], log_keys: Sequence[float], k: int) -> list[str]:
    order = sorted(range(len(ids)), key=lambda i: (-log_keys[i], ids[i]))
    return [ids[i] for i in order[:k]]


def select_ips(
    scores: Sequence[ScoreRecord],
    k: int,
    direction: str = "inverse",
    seed: int = 0,
) -> SelectionResult:
    """Weighted sampling without replacement, weights 1/score or score.

    direction="inverse" implements diversity selection (requires strictly
    positive scores); direction="direct" selects proportional to the score
    itself.  Deterministic given (scores, k, direction, seed).
    """
    if direction not in ("inverse", "direct"):
        raise ValueError(f"direction must be 'inverse' or 'direct', got {direction!r}")
    _check_scores(scores)
    _check_k(k, len(scores))
    weights = []
    for rec in scores:
        if direction == "inverse":
            if rec.raw_score <= 0:
                raise ValueError(
                    f"inverse-propensity selection needs scores > 0; id {rec.id!r} "
                    f"has score {rec.raw_score}"
                )
            weights.append(1.0 / rec.raw_score)
        else:
            if rec.raw_score < 0:
                raise ValueError(
                    f"propensity selection needs scores >= 0; id {rec.id!r} "
                    f"has score {rec.raw_score}"
                )
            weights.append(rec.raw_score)

    ids = [r.id for r in scores]
    log_keys = []
    for rec, w in zip(scores, weights):
        u = _uniform_unit(seed, rec.id)
        # log(u) / w is monotone in u ** (1/w); weight 0 gives -inf.
        log_keys.append(math.log(u) / w if w > 0 else -math.inf)

    kind = INVERSE_PROPENSITY if direction == "inverse" else PROPENSITY
    return SelectionResult(
        ids=_select_by_log_keys(ids, log_keys, k),
        policy=SelectionPolicy(kind=kind, k=k, seed=seed),
        n_input=len(scores),
        weights=WeightSummary(min=min(weights), max=max(weights), sum=sum(weights)),
    )


def select_uniform(ids: Sequence[str], k: int, seed: int = 0) -> SelectionResult:
    """Seeded uniform k-subset via the same key scheme with unit weights."""
    _check_k(k, len(ids))
    log_keys = [math.log(_uniform_unit(seed, i)) for i in ids]
    return SelectionResult(
        ids=_select_by_log_keys(list(ids), log_keys, k),
        policy=SelectionPolicy(kind=UNIFORM_RANDOM, k=k, seed=seed),
        n_input=len(ids),
        weights=WeightSummary(min=1.0, max=1.0, sum=float(len(ids))),
    )


def apply_policy(scores: Sequence[ScoreRecord], policy: SelectionPolicy) -> SelectionResult:
    """Dispatch a SelectionPolicy over a score table."""
    if policy.kind == TOP_K:
        return select_top_k(scores, policy.k)
    if policy.kind == BOTTOM_K:
        return select_bottom_k(scores, policy.k)
    if policy.kind == INVERSE_PROPENSITY:
        return select_ips(scores, policy.k, direction="inverse", seed=policy.seed)
    if policy.kind == PROPENSITY:
        return select_ips(scores, policy.k, direction="direct", seed=policy.seed)
    return select_uniform([r.id for r in scores], policy.k, seed=policy.seed)


# ---------------------------------------------------------------------------
# Selection files: one id per line plus a metadata sidecar
# ---------------------------------------------------------------------------

def write_selection(result: SelectionResult, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rid in result.ids:
            fh.write(rid + "\n")
    meta = {
        "policy": result.policy.kind,
        "k": result.policy.k,
        "seed": result.policy.seed,
        "n_input": result.n_input,
        "n_selected": len(result.ids),
    }
    if result.weights is not None:
        meta["weights"] = {
            "min": result.weights.min,
            "max": result.weights.max,
            "sum": result.weights.sum,
        }
    sidecar = path.with_suffix(path.suffix + ".meta.json")
    sidecar.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def read_selection(path: str | Path) -> list[str]:
    with Path(path).open("r", encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]
