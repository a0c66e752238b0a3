"""Command-line pipeline: ingestion -> scoring -> selection -> analysis.

Subcommands
-----------
score-density     two-pass sketch scoring of a corpus's embeddings
score-askllm      prompt an LLM endpoint (or the mock) for yes-probabilities
score-perplexity  negated-perplexity scoring via sequence NLL
select            turn a score file into an id list under a policy
analyze           tau matrix, histograms, over-scaling, epoch plan reports
plan              iso-compute epoch accounting

Every step is deterministic given its config, fixtures, and seeds; outputs
land under the --out directory and inputs are never mutated.  The endpoint
credential token is read from the DATACULL_API_TOKEN environment variable.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import shutil
import sys
import threading
from pathlib import Path

import numpy as np

from . import analysis, sampling
from .corpus import (
    CorpusManifest,
    compute_percentiles,
    format_score_line,
    load_examples,
    load_embeddings,
    read_scores,
    write_scores,
)
from .llm import ClientConfig, HttpLlmClient, MockLlmClient
from .lsh import EUCLIDEAN_PSTABLE, HashFamilySpec, median_pairwise_distance
from .scoring import (
    PromptTemplate,
    ScoreOutcome,
    askllm_score_all,
    build_density_sketch,
    density_scorer_id,
    iter_density_scores,
    perplexity_score_all,
    spec_fingerprint,
)
from .sketch import KdeSketch

TOKEN_ENV_VAR = "DATACULL_API_TOKEN"

_POLICY_CHOICES = ("top-k", "bottom-k", "ips", "uniform", "density", "ask-llm")


def round_half_up_k(ratio: float, n: int) -> int:
    """Ratio-to-k conversion, rounding halves up (20% of 7 records -> 1)."""
    return math.floor(ratio * n + 0.5)


def _ensure_outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _make_client(args) -> MockLlmClient | HttpLlmClient:
    if args.mock:
        return MockLlmClient(ClientConfig(model=args.model or "mock"))
    config = ClientConfig(
        endpoint=args.endpoint,
        model=args.model or "unknown",
        max_in_flight=args.max_in_flight,
        timeout=args.timeout,
        max_retries=args.retries,
        auth_token=os.environ.get(TOKEN_ENV_VAR),
    )
    return HttpLlmClient(config)


def _write_outcome(outcome: ScoreOutcome, out: Path, percentiles: bool) -> int:
    records = outcome.records
    if percentiles and records:
        records = compute_percentiles(records)
    write_scores(records, out / "scores.jsonl")
    sidecar = out / "unscored.jsonl"
    with sidecar.open("w", encoding="utf-8") as fh:
        for u in outcome.unscored:
            fh.write(json.dumps({"id": u.id, "reason": u.reason}) + "\n")
    print(f"scored {len(records)} examples, {len(outcome.unscored)} unscored -> {out}")
    if outcome.unscored:
        print(f"warning: {len(outcome.unscored)} examples unscored; see {sidecar}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# score-density
# ---------------------------------------------------------------------------

def _reservoir_sample_embeddings(manifest: CorpusManifest, size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    reservoir: list[np.ndarray] = []
    for i, rec in enumerate(load_embeddings(manifest)):
        if i < size:
            reservoir.append(rec.vector.astype(np.float64))
        else:
            j = int(rng.integers(0, i + 1))
            if j < size:
                reservoir[j] = rec.vector.astype(np.float64)
    if len(reservoir) < 2:
        raise ValueError("need at least two embeddings to estimate a bandwidth")
    return np.stack(reservoir)


def _spec_to_json(spec: HashFamilySpec) -> dict:
    return {
        "kind": spec.kind,
        "dim": spec.dim,
        "rows": spec.rows,
        "buckets": spec.buckets,
        "bandwidth": None if spec.bandwidth is None else spec.bandwidth.hex(),
        "seed": spec.seed,
    }


def _spec_from_json(obj: dict) -> HashFamilySpec:
    bandwidth = obj["bandwidth"]
    return HashFamilySpec(
        kind=obj["kind"],
        dim=obj["dim"],
        rows=obj["rows"],
        buckets=obj["buckets"],
        bandwidth=None if bandwidth is None else float.fromhex(bandwidth),
        seed=obj["seed"],
    )


def cmd_score_density(args, _after_shard=None) -> int:
    manifest = CorpusManifest.load(args.manifest)
    out = _ensure_outdir(args.out)
    progress_dir = out / "progress"
    ledger_path = progress_dir / "ledger.json"

    spec = None
    prebuilt: dict[int, KdeSketch] = {}
    if args.resume and ledger_path.exists():
        ledger = json.loads(ledger_path.read_text(encoding="utf-8"))
        spec = _spec_from_json(ledger["spec"])
        if (spec.rows, spec.buckets, spec.kind) != (args.rows, args.range, args.kind) or (
            args.seed & ((1 << 64) - 1)
        ) != spec.seed:
            raise ValueError(
                "progress ledger was built with different sketch parameters; "
                "rerun without --resume to start over"
            )
        for idx_str, fname in ledger["done"].items():
            prebuilt[int(idx_str)] = KdeSketch.load(progress_dir / fname)
        print(f"resuming: {len(prebuilt)} of {len(manifest.embedding_shards)} shards done")
    elif progress_dir.exists():
        shutil.rmtree(progress_dir)

    if spec is None:
        if manifest.embedding_dim is None:
            raise ValueError("manifest has no embedding dimension; are embedding shards listed?")
        bandwidth = args.bandwidth
        if args.kind == EUCLIDEAN_PSTABLE and bandwidth is None:
            sample = _reservoir_sample_embeddings(manifest, size=1000, seed=args.seed)
            if manifest.normalize_embeddings:
                sample = sample / np.linalg.norm(sample, axis=1, keepdims=True)
            bandwidth = median_pairwise_distance(sample, seed=args.seed)
            print(f"median-heuristic bandwidth: {bandwidth:.6g}")
        spec = HashFamilySpec(
            kind=args.kind,
            dim=manifest.embedding_dim,
            rows=args.rows,
            buckets=args.range,
            bandwidth=bandwidth if args.kind == EUCLIDEAN_PSTABLE else None,
            seed=args.seed,
        )

    progress_dir.mkdir(parents=True, exist_ok=True)
    if not ledger_path.exists():
        _write_ledger(ledger_path, spec, {})
    ledger_lock = threading.Lock()

    def persist_shard(i: int, shard_sketch: KdeSketch) -> None:
        fname = f"shard-{i:04d}.kde"
        shard_sketch.save(progress_dir / fname)
        with ledger_lock:
            ledger = json.loads(ledger_path.read_text(encoding="utf-8"))
            ledger["done"][str(i)] = fname
            _write_ledger(ledger_path, spec, ledger["done"])
        if _after_shard is not None:
            _after_shard(i)

    sketch = build_density_sketch(
        manifest,
        spec,
        shard_parallel=args.parallel,
        after_shard=persist_shard,
        prebuilt=prebuilt,
    )
    sketch.save(out / "sketch.kde")

    scorer_id = density_scorer_id(spec)
    scores_path = out / "scores.jsonl"
    n = 0
    with scores_path.open("w", encoding="utf-8") as fh:
        for rec in iter_density_scores(manifest, sketch, scorer_id=scorer_id):
            fh.write(format_score_line(rec) + "\n")
            n += 1
    if args.percentiles:
        write_scores(compute_percentiles(read_scores(scores_path)), scores_path)
    shutil.rmtree(progress_dir)
    print(f"scored {n} embeddings (spec {spec_fingerprint(spec)}) -> {scores_path}")
    return 0


def _write_ledger(path: Path, spec: HashFamilySpec, done: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(
        json.dumps({"spec": _spec_to_json(spec), "done": done}, indent=2) + "\n",
        encoding="utf-8",
    )
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# score-askllm / score-perplexity
# ---------------------------------------------------------------------------

def cmd_score_askllm(args) -> int:
    manifest = CorpusManifest.load(args.manifest)
    out = _ensure_outdir(args.out)
    client = _make_client(args)
    if args.template:
        template = PromptTemplate(text=Path(args.template).read_text(encoding="utf-8"))
    else:
        template = PromptTemplate()
    examples = list(load_examples(manifest))
    outcome = askllm_score_all(client, template, examples, model=args.model)
    return _write_outcome(outcome, out, args.percentiles)


def cmd_score_perplexity(args) -> int:
    manifest = CorpusManifest.load(args.manifest)
    out = _ensure_outdir(args.out)
    client = _make_client(args)
    examples = list(load_examples(manifest))
    outcome = perplexity_score_all(client, examples, model=args.model)
    return _write_outcome(outcome, out, args.percentiles)


# ---------------------------------------------------------------------------
# select
# ---------------------------------------------------------------------------

def cmd_select(args) -> int:
    scores = read_scores(args.scores)
    if not scores:
        raise ValueError(f"score file {args.scores} is empty")
    n = len(scores)
    k = args.k if args.k is not None else round_half_up_k(args.ratio, n)
    if k < 1:
        raise ValueError(f"requested ratio {args.ratio} of {n} records selects nothing")

    policy, direction = args.policy, args.direction
    if policy == "density":
        policy, direction = "ips", "inverse"
    elif policy == "ask-llm":
        policy = "top-k"

    if policy == "top-k":
        result = sampling.select_top_k(scores, k)
    elif policy == "bottom-k":
        result = sampling.select_bottom_k(scores, k)
    elif policy == "ips":
        result = sampling.select_ips(scores, k, direction=direction, seed=args.seed)
    else:
        result = sampling.select_uniform([r.id for r in scores], k, seed=args.seed)

    out = _ensure_outdir(args.out)
    path = out / "selected.ids"
    sampling.write_selection(result, path)
    print(f"selected {len(result.ids)} of {n} ids ({result.policy.kind}) -> {path}")
    return 0


# ---------------------------------------------------------------------------
# analyze / plan
# ---------------------------------------------------------------------------

def _read_metric_triples(path: str) -> list[analysis.MetricTriple]:
    triples = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            try:
                triples.append(
                    analysis.MetricTriple(
                        metric=obj["metric"],
                        sampled=float(obj["sampled"]),
                        full=float(obj["full"]),
                        reference=float(obj["reference"]),
                        higher_is_better=bool(obj.get("higher_is_better", True)),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad metric triple: {exc}") from exc
    return triples


def _safe_name(scorer_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in scorer_id)


def cmd_analyze(args) -> int:
    out = _ensure_outdir(args.out)
    wrote_any = False

    if args.scores:
        score_sets = [read_scores(p) for p in args.scores]
        for records in score_sets:
            if not records:
                raise ValueError("cannot analyze an empty score file")
            hist = analysis.score_histogram(records, args.bins)
            name = _safe_name(records[0].scorer_id)
            analysis.write_histogram_report(hist, out / f"hist_{name}.tsv")
            wrote_any = True
        if len(score_sets) >= 2:
            matrix = analysis.correlation_matrix(score_sets)
            analysis.write_matrix_report(matrix, out / "tau_matrix.tsv")
            print(f"tau matrix over {matrix.n_common} common ids -> {out / 'tau_matrix.tsv'}")

    if args.metrics:
        triples = _read_metric_triples(args.metrics)
        value = analysis.over_scaling(triples)
        analysis.write_over_scaling_report(value, len(triples), out / "over_scaling.tsv")
        print(f"over-scaling: {value:.4f}%")
        wrote_any = True

    if args.dataset_tokens is not None:
        if args.ratio is None or args.budget_tokens is None:
            raise ValueError("epoch plan needs --dataset-tokens, --ratio and --budget-tokens")
        plan = analysis.epoch_plan(args.dataset_tokens, args.ratio, args.budget_tokens)
        analysis.write_epoch_plan_report(plan, out / "epoch_plan.tsv")
        print(f"epoch plan: {plan.sampled_tokens:.6g} sampled tokens, {plan.epochs:.2f} epochs")
        wrote_any = True

    if not wrote_any:
        raise ValueError("analyze needs --scores, --metrics, or epoch-plan token arguments")
    return 0


def cmd_plan(args) -> int:
    plan = analysis.epoch_plan(args.dataset_tokens, args.ratio, args.budget_tokens)
    print(f"dataset_tokens   {plan.dataset_tokens:.6g}")
    print(f"sampling_ratio   {plan.sampling_ratio}")
    print(f"budget_tokens    {plan.budget_tokens:.6g}")
    print(f"sampled_tokens   {plan.sampled_tokens:.6g}")
    print(f"epochs           {plan.epochs:.2f}")
    if args.out:
        analysis.write_epoch_plan_report(plan, args.out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_client_args(p: argparse.ArgumentParser) -> None:
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--endpoint", help="scoring service base URL")
    group.add_argument("--mock", action="store_true", help="use the offline deterministic mock")
    p.add_argument("--model", default=None, help="scoring model identifier (provenance)")
    p.add_argument("--max-in-flight", type=int, default=4)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--retries", type=int, default=3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="datacull",
        description="Score, select, and analyze pre-training corpora.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score-density", help="two-pass sketch density scoring")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rows", type=int, default=1000, help="sketch rows R")
    p.add_argument("--range", type=int, default=20000, help="hash range B (buckets per row)")
    p.add_argument("--bandwidth", type=float, default=None,
                   help="kernel bandwidth; default: median pairwise distance heuristic")
    p.add_argument("--kind", default=EUCLIDEAN_PSTABLE,
                   choices=(EUCLIDEAN_PSTABLE, "cosine-signed-projection"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", action="store_true", help="reuse per-shard progress")
    p.add_argument("--parallel", action="store_true", help="build shards in parallel")
    p.add_argument("--percentiles", action="store_true")
    p.set_defaults(func=cmd_score_density)

    p = sub.add_parser("score-askllm", help="yes-probability quality scoring")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--template", default=None, help="prompt template file")
    p.add_argument("--percentiles", action="store_true")
    _add_client_args(p)
    p.set_defaults(func=cmd_score_askllm)

    p = sub.add_parser("score-perplexity", help="negated-perplexity scoring")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--percentiles", action="store_true")
    _add_client_args(p)
    p.set_defaults(func=cmd_score_perplexity)

    p = sub.add_parser("select", help="select ids from a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", required=True, choices=_POLICY_CHOICES)
    p.add_argument("--direction", default="inverse", choices=("inverse", "direct"))
    size = p.add_mutually_exclusive_group(required=True)
    size.add_argument("--ratio", type=float, help="fraction of records to keep, in (0, 1]")
    size.add_argument("--k", type=int, help="absolute number of records to keep")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("analyze", help="emit comparison reports")
    p.add_argument("--scores", action="append", default=[],
                   help="score file; repeat for the tau matrix")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--metrics", default=None, help="metric-triple JSONL for over-scaling")
    p.add_argument("--dataset-tokens", type=float, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--budget-tokens", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plan", help="iso-compute epoch accounting")
    p.add_argument("--dataset-tokens", type=float, required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--budget-tokens", type=float, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plan)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # surfaced as exit status, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
