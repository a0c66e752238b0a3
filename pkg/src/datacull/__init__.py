"""datacull: scoring and selection toolkit for curating pre-training corpora.

Coverage scoring runs a mergeable LSH counter sketch over embeddings in
two linear passes; quality scoring asks an instruction-tuned LLM for its
yes-probability or uses negated perplexity.  Samplers turn score tables
into id subsets (top/bottom-k, inverse-propensity, uniform), and the
analysis module compares samplers via rank correlation, histograms,
over-scaling, and iso-compute epoch plans.
"""

from .corpus import (
    CorpusManifest,
    EmbeddingRecord,
    ExampleRecord,
    ScoreRecord,
    build_manifest,
    compute_percentiles,
    load_embeddings,
    load_examples,
    read_scores,
    write_embeddings,
    write_examples,
    write_scores,
)
from .lsh import (
    COSINE_SIGNED_PROJECTION,
    EUCLIDEAN_PSTABLE,
    HashFamily,
    HashFamilySpec,
    collision_probability,
    family_new,
    median_pairwise_distance,
)
from .sketch import KdeSketch, brute_force_kernel_mean, sketch_new
from .llm import (
    ClientConfig,
    HttpLlmClient,
    LlmError,
    MockLlmClient,
    SequenceNllRequest,
    SequenceNllResponse,
    TokenScoreRequest,
)
from .scoring import (
    PromptTemplate,
    ScoreOutcome,
    askllm_score_all,
    density_score_all,
    make_prompt,
    perplexity_score_all,
)
from .sampling import (
    SelectionPolicy,
    SelectionResult,
    select_bottom_k,
    select_ips,
    select_top_k,
    select_uniform,
)
from .analysis import (
    EpochPlan,
    MetricTriple,
    correlation_matrix,
    epoch_plan,
    kendall_tau,
    kendall_tau_scores,
    over_scaling,
    score_histogram,
)

__version__ = "0.1.0"
