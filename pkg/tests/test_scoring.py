"""Prompt rendering and the three scorers' conventions."""

import math

import numpy as np
import pytest

import datacull.scoring as scoring_mod
from datacull.corpus import ExampleRecord, load_embeddings
from datacull.llm import (
    ClientConfig,
    HttpLlmClient,
    LlmError,
    MockLlmClient,
    SequenceNllResponse,
    mock_token_logprob,
)
from datacull.lsh import EUCLIDEAN_PSTABLE, HashFamilySpec
from datacull.scoring import (
    DEFAULT_TEMPLATE_TEXT,
    TRUNCATION_MARKER,
    PromptTemplate,
    askllm_score_all,
    density_score_all,
    make_prompt,
    perplexity_raw_score,
    perplexity_score_all,
)
from datacull.sketch import brute_force_kernel_mean
from datacull.stubserver import StubLlmServer
from conftest import make_embedding_corpus, two_blob_vectors


class FixedLogprobClient:
    """Duck-typed client answering every token request with one logprob."""

    def __init__(self, logprob):
        self.logprob = logprob
        self.config = ClientConfig(model="fixed")

    def score_token_many(self, reqs, ids=None):
        return [self.logprob] * len(reqs)


class FixedNllClient:
    def __init__(self, nll, token_count):
        self.response = SequenceNllResponse(nll=nll, token_count=token_count)
        self.config = ClientConfig(model="fixed")

    def sequence_nll_many(self, reqs, ids=None):
        return [self.response] * len(reqs)


class TestMakePrompt:
    def test_placeholder_substitution(self):
        template = PromptTemplate(text="### {text} ### Keep? yes/no")
        out = make_prompt(template, ExampleRecord(id="a", text="hello"))
        assert out.prompt == "### hello ### Keep? yes/no"
        assert not out.truncated

    def test_long_text_truncated_with_marker(self):
        template = PromptTemplate(text="{text}", char_budget=10)
        out = make_prompt(template, ExampleRecord(id="a", text="x" * 50))
        assert out.truncated
        assert out.prompt.endswith(TRUNCATION_MARKER)
        assert len(out.prompt) <= 10 + len(TRUNCATION_MARKER)

    def test_random_texts_appear_verbatim(self):
        rng = np.random.default_rng(0)
        template = PromptTemplate()
        alphabet = list("abcdefg {}[]()\"'\\/&%$#@!?.,;:")
        for _ in range(50):
            n = int(rng.integers(1, 200))
            text = "".join(rng.choice(alphabet, size=n))
            if not text.strip():
                continue
            out = make_prompt(template, ExampleRecord(id="a", text=text))
            assert out.prompt.count(text) >= 1

    def test_template_must_have_exactly_one_placeholder(self):
        with pytest.raises(ValueError, match="exactly once"):
            PromptTemplate(text="no placeholder here")
        with pytest.raises(ValueError, match="exactly once"):
            PromptTemplate(text="{text} and {text}")

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError, match="empty text"):
            make_prompt(PromptTemplate(), ExampleRecord(id="a", text="  "))

    def test_default_template_asks_a_yes_no_question(self):
        assert "{text}" in DEFAULT_TEMPLATE_TEXT
        assert "yes or no" in DEFAULT_TEMPLATE_TEXT


class TestAskLlmScoring:
    def test_fixed_logprob_exponentiates_to_score(self):
        client = FixedLogprobClient(-0.105360516)
        examples = [ExampleRecord(id="a", text="hello")]
        outcome = askllm_score_all(client, PromptTemplate(), examples)
        assert outcome.records[0].raw_score == pytest.approx(0.9, abs=1e-9)

    def test_ids_and_order_preserved(self):
        client = MockLlmClient()
        examples = [ExampleRecord(id="z", text="last"), ExampleRecord(id="a", text="first")]
        outcome = askllm_score_all(client, PromptTemplate(), examples)
        assert [r.id for r in outcome.records] == ["z", "a"]
        assert all(0.0 < r.raw_score <= 1.0 for r in outcome.records)

    def test_scores_equal_exp_of_mock_logprob(self):
        client = MockLlmClient()
        template = PromptTemplate()
        examples = [ExampleRecord(id=f"e{i}", text=f"body {i}") for i in range(10)]
        outcome = askllm_score_all(client, template, examples)
        for rec, ex in zip(outcome.records, examples):
            prompt = make_prompt(template, ex).prompt
            assert rec.raw_score == math.exp(mock_token_logprob(prompt, "yes"))

    def test_empty_text_becomes_unscored_sentinel(self):
        client = MockLlmClient()
        examples = [ExampleRecord(id="ok", text="fine"), ExampleRecord(id="bad", text=" ")]
        outcome = askllm_score_all(client, PromptTemplate(), examples)
        assert [r.id for r in outcome.records] == ["ok"]
        assert [u.id for u in outcome.unscored] == ["bad"]
        assert "empty" in outcome.unscored[0].reason

    def test_permutation_equivariance(self):
        client = MockLlmClient()
        examples = [ExampleRecord(id=f"e{i}", text=f"body {i}") for i in range(8)]
        fwd = askllm_score_all(client, PromptTemplate(), examples)
        rev = askllm_score_all(client, PromptTemplate(), examples[::-1])
        assert {r.id: r.raw_score for r in fwd.records} == {
            r.id: r.raw_score for r in rev.records
        }
        assert [r.id for r in rev.records] == [f"e{i}" for i in range(7, -1, -1)]

    def test_scorer_id_encodes_model_and_template(self):
        client = MockLlmClient(ClientConfig(model="proxy-xl"))
        outcome = askllm_score_all(client, PromptTemplate(), [ExampleRecord(id="a", text="t")])
        sid = outcome.records[0].scorer_id
        assert sid.startswith("askllm/proxy-xl/t")

    def test_transient_failures_then_full_coverage_with_retries(self):
        examples = [
            ExampleRecord(id=f"e{i:03d}", text=("FAILME " if i < 20 else "solid ") + f"text {i}")
            for i in range(200)
        ]
        with StubLlmServer(fail_marker="FAILME") as server:
            brittle = HttpLlmClient(
                ClientConfig(endpoint=server.url, model="stub", max_retries=0,
                             max_in_flight=8, backoff_base=0.01)
            )
            first_pass = askllm_score_all(brittle, PromptTemplate(), examples)
            assert len(first_pass.records) == 180
            assert len(first_pass.unscored) == 20
            assert len(first_pass.records) + len(first_pass.unscored) == 200

        with StubLlmServer(fail_marker="FAILME") as server:
            sturdy = HttpLlmClient(
                ClientConfig(endpoint=server.url, model="stub", max_retries=2,
                             max_in_flight=8, backoff_base=0.01)
            )
            second_pass = askllm_score_all(sturdy, PromptTemplate(), examples)
            assert len(second_pass.records) == 200
            assert not second_pass.unscored


class TestPerplexityScoring:
    def test_zero_nll_scores_minus_one(self):
        client = FixedNllClient(nll=0.0, token_count=12)
        outcome = perplexity_score_all(client, [ExampleRecord(id="a", text="t")])
        assert outcome.records[0].raw_score == -1.0

    def test_known_nll_arithmetic(self):
        client = FixedNllClient(nll=2.0, token_count=4)
        outcome = perplexity_score_all(client, [ExampleRecord(id="a", text="t")])
        assert outcome.records[0].raw_score == pytest.approx(-math.exp(0.5), abs=1e-12)

    def test_stub_nll_feeds_the_same_arithmetic(self):
        with StubLlmServer() as server:
            client = HttpLlmClient(ClientConfig(endpoint=server.url, model="stub"))
            resp = client.sequence_nll_many(
                [scoring_mod.SequenceNllRequest(text="alpha beta gamma delta")]
            )[0]
            outcome = perplexity_score_all(
                client, [ExampleRecord(id="a", text="alpha beta gamma delta")]
            )
        assert outcome.records[0].raw_score == -math.exp(resp.nll / resp.token_count)

    def test_lower_mean_nll_scores_strictly_higher(self):
        rng = np.random.default_rng(1)
        pairs = sorted(
            ((float(rng.uniform(0, 6)), int(rng.integers(1, 40))) for _ in range(30)),
            key=lambda p: p[0] / p[1],
        )
        scores = [
            perplexity_raw_score(SequenceNllResponse(nll=nll, token_count=tc))
            for nll, tc in pairs
        ]
        assert all(a > b for a, b in zip(scores, scores[1:]))
        assert all(s <= -1.0 for s in scores)

    def test_scores_never_exceed_minus_one(self):
        client = MockLlmClient()
        examples = [ExampleRecord(id=f"e{i}", text=f"words here {i}") for i in range(20)]
        outcome = perplexity_score_all(client, examples)
        assert all(r.raw_score <= -1.0 for r in outcome.records)


class TestDensityScoring:
    def test_single_vector_manifest_scores_one(self, tmp_path):
        manifest = make_embedding_corpus(tmp_path, np.array([[0.5, 0.25]]))
        spec = HashFamilySpec(
            kind=EUCLIDEAN_PSTABLE, dim=2, rows=16, buckets=32, bandwidth=1.0, seed=0
        )
        records, sketch = density_score_all(manifest, spec)
        assert len(records) == 1
        assert records[0].raw_score == 1.0
        assert sketch.n == 1

    def test_duplicating_every_vector_doubles_raw_scores(self, tmp_path):
        rng = np.random.default_rng(2)
        vectors = rng.standard_normal((40, 3))
        spec = HashFamilySpec(
            kind=EUCLIDEAN_PSTABLE, dim=3, rows=32, buckets=64, bandwidth=1.0, seed=1
        )
        single_dir = tmp_path / "single"
        single_dir.mkdir()
        base = make_embedding_corpus(single_dir, vectors)
        doubled_dir = tmp_path / "doubled"
        doubled_dir.mkdir()
        doubled = make_embedding_corpus(
            doubled_dir,
            np.concatenate([vectors, vectors]),
            ids=[f"a{i}" for i in range(40)] + [f"b{i}" for i in range(40)],
        )
        base_records, _ = density_score_all(base, spec)
        doubled_records, _ = density_score_all(doubled, spec)
        doubled_map = {r.id: r.raw_score for r in doubled_records}
        for i, rec in enumerate(base_records):
            assert doubled_map[f"a{i}"] == 2 * rec.raw_score
            assert doubled_map[f"b{i}"] == 2 * rec.raw_score

    def test_inserted_members_score_at_least_one(self, tmp_path):
        rng = np.random.default_rng(3)
        manifest = make_embedding_corpus(tmp_path, rng.standard_normal((100, 4)))
        spec = HashFamilySpec(
            kind=EUCLIDEAN_PSTABLE, dim=4, rows=24, buckets=512, bandwidth=0.5, seed=2
        )
        records, _ = density_score_all(manifest, spec)
        assert all(r.raw_score >= 1.0 for r in records)

    def test_two_blob_fixture_scores_track_population_ratio(self, tmp_path):
        vectors, labels = two_blob_vectors(n_major=1800, n_minor=200, seed=4)
        manifest = make_embedding_corpus(tmp_path, vectors, n_shards=2)
        spec = HashFamilySpec(
            kind=EUCLIDEAN_PSTABLE, dim=2, rows=200, buckets=1024, bandwidth=0.5, seed=3
        )
        records, _ = density_score_all(manifest, spec)
        scores = np.array([r.raw_score for r in records])
        sketch_ratio = scores[labels == 0].mean() / scores[labels == 1].mean()

        # independent oracle: exact kernel means over the same fixture
        sample = np.arange(0, 2000, 20)
        exact = np.array([brute_force_kernel_mean(vectors, vectors[i], spec) for i in sample])
        oracle_ratio = exact[labels[sample] == 0].mean() / exact[labels[sample] == 1].mean()

        assert sketch_ratio == pytest.approx(9.0, rel=0.2)
        assert sketch_ratio == pytest.approx(oracle_ratio, rel=0.15)

    def test_two_passes_touch_each_embedding_exactly_once(self, tmp_path, monkeypatch):
        rng = np.random.default_rng(5)
        manifest = make_embedding_corpus(tmp_path, rng.standard_normal((30, 3)), n_shards=3)
        touched = {"count": 0}
        real_loader = scoring_mod.load_embeddings

        def counting_loader(m):
            for rec in real_loader(m):
                touched["count"] += 1
                yield rec

        monkeypatch.setattr(scoring_mod, "load_embeddings", counting_loader)
        spec = HashFamilySpec(
            kind=EUCLIDEAN_PSTABLE, dim=3, rows=8, buckets=32, bandwidth=1.0, seed=0
        )
        records, _ = density_score_all(manifest, spec)
        assert len(records) == 30
        assert touched["count"] == 60  # one build pass + one score pass

    def test_normalized_embedding_flag_changes_geometry(self, tmp_path):
        vectors = np.array([[1.0, 0.0], [10.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        raw_dir = tmp_path / "raw"
        raw_dir.mkdir()
        norm_dir = tmp_path / "norm"
        norm_dir.mkdir()
        raw = make_embedding_corpus(raw_dir, vectors)
        normed = make_embedding_corpus(norm_dir, vectors, normalize=True)
        spec = HashFamilySpec(
            kind=EUCLIDEAN_PSTABLE, dim=2, rows=64, buckets=128, bandwidth=0.5, seed=0
        )
        raw_records, _ = density_score_all(raw, spec)
        norm_records, _ = density_score_all(normed, spec)
        # after normalization the two x-axis vectors coincide exactly
        norm_map = {r.id: r.raw_score for r in norm_records}
        raw_map = {r.id: r.raw_score for r in raw_records}
        assert norm_map["ex-00000"] == norm_map["ex-00001"]
        assert raw_map["ex-00000"] != raw_map["ex-00001"]

    def test_empty_manifest_rejected(self, tmp_path):
        manifest = make_embedding_corpus(tmp_path, np.zeros((0, 2), dtype=np.float32))
        spec = HashFamilySpec(
            kind=EUCLIDEAN_PSTABLE, dim=2, rows=4, buckets=8, bandwidth=1.0, seed=0
        )
        with pytest.raises(ValueError):
            density_score_all(manifest, spec)
