"""Shared fixture builders: tiny corpora, embedding shards, two-blob data."""

import numpy as np
import pytest

from datacull.corpus import (
    CorpusManifest,
    EmbeddingRecord,
    ExampleRecord,
    build_manifest,
    write_embeddings,
    write_examples,
)


def make_text_corpus(root, texts, shard_size=None, token_counts=None):
    """Write texts into one or more shards and return a manifest."""
    records = [
        ExampleRecord(
            id=f"ex-{i:05d}",
            text=t,
            token_count=None if token_counts is None else token_counts[i],
        )
        for i, t in enumerate(texts)
    ]
    shard_size = shard_size or len(records) or 1
    shards = []
    for s, lo in enumerate(range(0, len(records), shard_size)):
        name = f"text-{s:03d}.jsonl"
        write_examples(records[lo : lo + shard_size], root / name)
        shards.append(name)
    if not shards:
        name = "text-000.jsonl"
        write_examples([], root / name)
        shards.append(name)
    return build_manifest(root, text_shards=shards)


def make_embedding_corpus(root, vectors, n_shards=1, ids=None, normalize=False):
    """Write a (n, d) array into n_shards embedding shards; returns manifest."""
    vectors = np.asarray(vectors, dtype=np.float32)
    n = vectors.shape[0]
    if ids is None:
        ids = [f"ex-{i:05d}" for i in range(n)]
    bounds = np.linspace(0, n, n_shards + 1).astype(int)
    shards = []
    for s in range(n_shards):
        recs = [
            EmbeddingRecord(id=ids[i], vector=vectors[i])
            for i in range(bounds[s], bounds[s + 1])
        ]
        name = f"emb-{s:03d}.bin"
        write_embeddings(recs, root / name)
        shards.append(name)
    return build_manifest(root, embedding_shards=shards, normalize_embeddings=normalize)


def two_blob_vectors(n_major=1800, n_minor=200, dim=2, separation=100.0, seed=0):
    """Two disjoint uniform blobs of equal support with unbalanced counts.

    Returns (vectors, labels) with label 1 for the minority blob.  The
    default separation is large relative to any within-blob bandwidth
    because the euclidean collision kernel decays only like 1/distance.
    """
    rng = np.random.default_rng(seed)
    major = rng.uniform(0.0, 1.0, size=(n_major, dim))
    minor = rng.uniform(0.0, 1.0, size=(n_minor, dim)) + separation
    vectors = np.concatenate([major, minor])
    labels = np.concatenate([np.zeros(n_major, dtype=int), np.ones(n_minor, dtype=int)])
    return vectors, labels


@pytest.fixture
def tmp_corpus(tmp_path):
    """A small mixed corpus: 12 text records and matching 4-d embeddings."""
    text_dir = tmp_path / "text"
    text_dir.mkdir()
    texts = [f"document number {i} about topic {i % 3}" for i in range(12)]
    manifest = make_text_corpus(text_dir, texts, shard_size=5)
    rng = np.random.default_rng(42)
    vectors = rng.standard_normal((12, 4)).astype(np.float32)
    emb_dir = tmp_path / "emb"
    emb_dir.mkdir()
    emb_manifest = make_embedding_corpus(emb_dir, vectors, n_shards=2)
    return manifest, emb_manifest, vectors
