"""Long-form scientific question answering over a local paper corpus.

The pipeline: a moderated query is decomposed into keyword and semantic
forms, candidates are retrieved from a hybrid (BM25 + binary-quantized
dense) index, reranked, distilled into verbatim quotes, organized under a
thematic outline, and synthesized section by section into a cited report
with optional paper-comparison tables, all streamed as progress events.
"""

from .config import AppConfig, build_engine, load_config
from .corpus import (
    BodySection,
    CitationAnchor,
    Corpus,
    Paper,
    Passage,
    chunk_paper,
    ingest_corpus,
)
from .embedding import (
    BinaryCode,
    HashEmbeddingProvider,
    asymmetric_score,
    embed,
    quantize_binary,
    symmetric_score,
)
from .events import ProgressEvent
from .gateway import (
    DenylistModerator,
    Gateway,
    HeuristicProvider,
    ScriptedProvider,
    ScriptEntry,
    moderate_query,
)
from .index import HybridIndex, IndexConfig, MetadataFilter, ScoredPassage, build_index, minmax_normalize
from .pipeline import Engine, EngineSettings
from .rerank import RerankedSet, TokenOverlapScorer, rerank_top_k
from .retrieval import CandidateSet, DecomposedQuery, decompose, retrieve
from .service import create_app
from .store import FeedbackRecord, ReportStore
from .synthesis import (
    ComparisonTable,
    OutlineSection,
    Quote,
    Report,
    ReportSection,
    extract_quotes,
    filter_table,
    follow_citations,
    generate_section,
    generate_table,
    plan_outline,
)

__version__ = "0.1.0"
