"""The three scoring regimes: ask-the-model, perplexity, and density.

Sign conventions (higher raw_score always means "better to keep"):

* ask-llm:     raw_score = exp(logprob of the "yes" token), in (0, 1].
* perplexity:  raw_score = -exp(total_nll / token_count), always <= -1 for
               nll >= 0, so low-perplexity text ranks highest.
* density:     raw_score = the raw sketch score (count scale).  This is a
               coverage signal, not a quality signal; the selection
               direction is chosen by the sampler (inverse propensity for
               the diversity preset).

Examples that cannot be scored are reported as unscored outcomes, never
silently dropped or defaulted.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .corpus import CorpusManifest, ExampleRecord, ScoreRecord, load_embeddings
from .llm import (
    LlmError,
    SequenceNllRequest,
    SequenceNllResponse,
    TokenScoreRequest,
)
from .lsh import HashFamilySpec
from .sketch import KdeSketch

YES_TOKEN = "yes"
TRUNCATION_MARKER = " [...]"
DEFAULT_CHAR_BUDGET = 4000

DEFAULT_TEMPLATE_TEXT = (
    "This is a pretraining datapoint: ### {text} ###. Does the previous "
    "paragraph contain informative content that could help train a large "
    "language model? Answer yes or no."
)

PLACEHOLDER = "{text}"


@dataclass(frozen=True)
class PromptTemplate:
    """Template with one ``{text}`` placeholder and a yes/no question."""

    text: str = DEFAULT_TEMPLATE_TEXT
    char_budget: int = DEFAULT_CHAR_BUDGET

    def __post_init__(self):
        if self.text.count(PLACEHOLDER) != 1:
            raise ValueError(
                f"template must contain the placeholder {PLACEHOLDER!r} exactly once"
            )
        if self.char_budget < 1:
            raise ValueError(f"char_budget must be >= 1, got {self.char_budget}")

    def fingerprint(self) -> str:
        return hashlib.blake2b(self.text.encode("utf-8"), digest_size=4).hexdigest()


@dataclass(frozen=True)
class RenderedPrompt:
    prompt: str
    truncated: bool


@dataclass(frozen=True)
class UnscoredExample:
    """Sentinel for an example whose scoring failed; kept, never dropped."""

    id: str
    reason: str


@dataclass
class ScoreOutcome:
    """One entry per input example, split into scored and unscored."""

    records: list[ScoreRecord]
    unscored: list[UnscoredExample]


def make_prompt(template: PromptTemplate, example: ExampleRecord) -> RenderedPrompt:
    """Substitute the example text, truncating to the character budget with
    a visible marker; the truncation is flagged in the result."""
    if not example.scorable:
        raise ValueError(f"example {example.id!r} has empty text")
    content = example.text
    truncated = False
    if len(content) > template.char_budget:
        content = content[: template.char_budget] + TRUNCATION_MARKER
        truncated = True
    return RenderedPrompt(
        prompt=template.text.replace(PLACEHOLDER, content, 1),
        truncated=truncated,
    )


def askllm_scorer_id(model: str, template: PromptTemplate) -> str:
    return f"askllm/{model}/t{template.fingerprint()}"


def perplexity_scorer_id(model: str) -> str:
    return f"perplexity/{model}"


def spec_fingerprint(spec: HashFamilySpec) -> str:
    blob = (
        f"{spec.kind}|{spec.dim}|{spec.rows}|{spec.buckets}|"
        f"{None if spec.bandwidth is None else spec.bandwidth.hex()}|{spec.seed}"
    )
    return hashlib.blake2b(blob.encode("utf-8"), digest_size=4).hexdigest()


def density_scorer_id(spec: HashFamilySpec) -> str:
    # "ips-inverse" documents the intended selection direction for this
    # coverage signal.
    return f"density/ips-inverse/{spec_fingerprint(spec)}"


def askllm_score_all(
    client,
    template: PromptTemplate,
    examples: Sequence[ExampleRecord],
    model: str | None = None,
) -> ScoreOutcome:
    """Score every example by the model's probability of answering "yes".

    raw_score = exp(logprob) in (0, 1].  Input order is preserved; client
    failures become unscored sentinels and the run continues.
    """
    model = model or getattr(getattr(client, "config", None), "model", "mock")
    scorer_id = askllm_scorer_id(model, template)
    records: list[ScoreRecord] = []
    unscored: list[UnscoredExample] = []

    requests_: list[TokenScoreRequest] = []
    req_ids: list[str] = []
    slots: list[int] = []
    results: list = [None] * len(examples)
    for i, ex in enumerate(examples):
        if not ex.scorable:
            results[i] = UnscoredExample(id=ex.id, reason="empty text")
            continue
        rendered = make_prompt(template, ex)
        requests_.append(TokenScoreRequest(prompt=rendered.prompt, target_token=YES_TOKEN))
        req_ids.append(ex.id)
        slots.append(i)

    for slot, ex_id, outcome in zip(
        slots, req_ids, client.score_token_many(requests_, ids=req_ids)
    ):
        if isinstance(outcome, LlmError):
            results[slot] = UnscoredExample(id=ex_id, reason=str(outcome))
        else:
            results[slot] = ScoreRecord(
                id=ex_id, scorer_id=scorer_id, raw_score=float(np.exp(outcome))
            )

    for res in results:
        if isinstance(res, ScoreRecord):
            records.append(res)
        else:
            unscored.append(res)
    return ScoreOutcome(records=records, unscored=unscored)


def perplexity_score_all(
    client,
    examples: Sequence[ExampleRecord],
    model: str | None = None,
) -> ScoreOutcome:
    """Score every example by negated perplexity: -exp(total_nll / tokens).

    Lower mean NLL gives a strictly higher raw_score.
    """
    model = model or getattr(getattr(client, "config", None), "model", "mock")
    scorer_id = perplexity_scorer_id(model)
    results: list = [None] * len(examples)
    requests_: list[SequenceNllRequest] = []
    req_ids: list[str] = []
    slots: list[int] = []
    for i, ex in enumerate(examples):
        if not ex.scorable:
            results[i] = UnscoredExample(id=ex.id, reason="empty text")
            continue
        requests_.append(SequenceNllRequest(text=ex.text))
        req_ids.append(ex.id)
        slots.append(i)

    for slot, ex_id, outcome in zip(
        slots, req_ids, client.sequence_nll_many(requests_, ids=req_ids)
    ):
        if isinstance(outcome, LlmError):
            results[slot] = UnscoredExample(id=ex_id, reason=str(outcome))
        else:
            results[slot] = ScoreRecord(
                id=ex_id,
                scorer_id=scorer_id,
                raw_score=perplexity_raw_score(outcome),
            )

    records = [r for r in results if isinstance(r, ScoreRecord)]
    unscored = [r for r in results if isinstance(r, UnscoredExample)]
    return ScoreOutcome(records=records, unscored=unscored)


def perplexity_raw_score(response: SequenceNllResponse) -> float:
    """Negated perplexity from a sequence NLL response (natural log base)."""
    return -float(np.exp(response.nll / response.token_count))


# ---------------------------------------------------------------------------
# Density scoring: two linear passes over the embedding shards
# ---------------------------------------------------------------------------

def _normalize_rows(batch: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(batch, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot length-normalize a zero embedding vector")
    return batch / norms


def _iter_shard_batches(
    manifest: CorpusManifest, shard_index: int, batch_size: int
) -> Iterator[tuple[list[str], np.ndarray]]:
    one_shard = CorpusManifest(
        root=manifest.root,
        embedding_shards=[manifest.embedding_shards[shard_index]],
        embedding_dim=manifest.embedding_dim,
    )
    ids: list[str] = []
    vecs: list[np.ndarray] = []
    for rec in load_embeddings(one_shard):
        ids.append(rec.id)
        vecs.append(rec.vector)
        if len(ids) >= batch_size:
            yield ids, np.stack(vecs).astype(np.float64)
            ids, vecs = [], []
    if ids:
        yield ids, np.stack(vecs).astype(np.float64)


def build_density_sketch(
    manifest: CorpusManifest,
    spec: HashFamilySpec,
    shard_parallel: bool = False,
    batch_size: int = 8192,
    after_shard: Callable[[int, KdeSketch], None] | None = None,
    prebuilt: dict[int, KdeSketch] | None = None,
) -> KdeSketch:
    """Pass 1: hash every embedding once into a sketch.

    With ``shard_parallel`` each shard is built into a private sketch and
    the results are merged in shard order; counter addition makes the
    outcome identical to a serial build.  ``prebuilt`` supplies per-shard
    sketches recovered from a resume ledger; ``after_shard`` is invoked
    with each freshly built shard sketch (used for progress persistence).
    """
    if not manifest.embedding_shards:
        raise ValueError("manifest lists no embedding shards")

    def build_one(i: int) -> KdeSketch:
        if prebuilt and i in prebuilt:
            return prebuilt[i]
        shard_sketch = KdeSketch(spec)
        for _, batch in _iter_shard_batches(manifest, i, batch_size):
            if manifest.normalize_embeddings:
                batch = _normalize_rows(batch)
            shard_sketch.add_batch(batch)
        if after_shard is not None:
            after_shard(i, shard_sketch)
        return shard_sketch

    n_shards = len(manifest.embedding_shards)
    if shard_parallel and n_shards > 1:
        with ThreadPoolExecutor(max_workers=min(4, n_shards)) as pool:
            shard_sketches = list(pool.map(build_one, range(n_shards)))
    else:
        shard_sketches = [build_one(i) for i in range(n_shards)]

    merged = shard_sketches[0]
    for sk in shard_sketches[1:]:
        merged = merged.merge(sk)
    if merged.n == 0:
        raise ValueError("manifest contains no embeddings")
    return merged


def iter_density_scores(
    manifest: CorpusManifest,
    sketch: KdeSketch,
    scorer_id: str | None = None,
    batch_size: int = 8192,
) -> Iterator[ScoreRecord]:
    """Pass 2: hash every embedding once more and emit its raw score."""
    scorer_id = scorer_id or density_scorer_id(sketch.spec)
    for i in range(len(manifest.embedding_shards)):
        for ids, batch in _iter_shard_batches(manifest, i, batch_size):
            if manifest.normalize_embeddings:
                batch = _normalize_rows(batch)
            scores = sketch.score_batch(batch)
            for rid, s in zip(ids, scores):
                yield ScoreRecord(id=rid, scorer_id=scorer_id, raw_score=float(s))


def density_score_all(
    manifest: CorpusManifest,
    spec: HashFamilySpec,
    shard_parallel: bool = False,
) -> tuple[list[ScoreRecord], KdeSketch]:
    """Two linear passes: build the sketch, then score every embedding."""
    sketch = build_density_sketch(manifest, spec, shard_parallel=shard_parallel)
    records = list(iter_density_scores(manifest, sketch))
    return records, sketch
