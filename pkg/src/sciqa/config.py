"""Configuration file loading, environment overrides, and engine assembly.

One JSON file configures the whole system; any subset of keys may be
present. Environment variables override the file for the knobs that vary
between deployments (providers, fusion weights, stage caps, the table
threshold, and the denylist path).

    {
      "paths": {"corpus": "papers.jsonl", "index": "index_dir",
                 "store": "reports", "denylist": "denylist.txt",
                 "script": "script.json", "webui": "frontend/dist"},
      "embedding": {"provider": "hash", "dim": 256, "seed": 13},
      "gateway": {"provider": "heuristic", "retries": 1,
                   "max_tokens": 2048, "temperature": 0.0},
      "index": {"w_dense": 0.6, "w_sparse": 0.4, "bm25_k1": 1.2,
                 "bm25_b": 0.75, "candidate_pool_per_arm": 512,
                 "exhaustive": true},
      "caps": {"snippets": 256, "abstracts": 20, "rerank_k": 50},
      "synthesis": {"table_tau": 0.5, "cell_context_chars": 6000},
      "moderation": {"fail_closed": true}
    }
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Corpus, chunk_paper, ingest_corpus
from .embedding import HashEmbeddingProvider
from .gateway import DenylistModerator, Gateway, HeuristicProvider, ScriptedProvider
from .index import HybridIndex, IndexConfig, build_index
from .pipeline import Engine, EngineSettings
from .rerank import TokenOverlapScorer
from .store import ReportStore

ENV_PREFIX = "SCIQA_"


class ConfigError(Exception):
    pass


@dataclass
class AppConfig:
    corpus_path: str | None = None
    index_path: str | None = None
    store_path: str | None = None
    denylist_path: str | None = None
    script_path: str | None = None
    webui_path: str | None = None
    embed_provider: str = "hash"
    embed_dim: int = 256
    embed_seed: int = 13
    embed_batch_size: int = 64
    gateway_provider: str = "heuristic"
    gateway_retries: int = 1
    gateway_max_tokens: int = 2048
    gateway_temperature: float = 0.0
    gateway_rate_limit_per_s: float | None = None
    index: IndexConfig = field(default_factory=IndexConfig)
    settings: EngineSettings = field(default_factory=EngineSettings)


def _env(name: str) -> str | None:
    return os.environ.get(ENV_PREFIX + name)


def load_config(path: str | Path | None = None) -> AppConfig:
    raw: dict = {}
    if path is not None:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    paths = raw.get("paths", {})
    emb = raw.get("embedding", {})
    gw = raw.get("gateway", {})
    idx = raw.get("index", {})
    caps = raw.get("caps", {})
    syn = raw.get("synthesis", {})
    mod = raw.get("moderation", {})

    w_dense = float(_env("W_DENSE") or idx.get("w_dense", 0.6))
    w_sparse = float(_env("W_SPARSE") or idx.get("w_sparse", round(1.0 - w_dense, 12)))
    index_config = IndexConfig(
        w_dense=w_dense,
        w_sparse=w_sparse,
        bm25_k1=float(idx.get("bm25_k1", 1.2)),
        bm25_b=float(idx.get("bm25_b", 0.75)),
        candidate_pool_per_arm=int(idx.get("candidate_pool_per_arm", 512)),
        exhaustive=bool(idx.get("exhaustive", True)),
    )
    settings = EngineSettings(
        snippet_cap=int(_env("SNIPPET_CAP") or caps.get("snippets", 256)),
        abstract_cap=int(_env("ABSTRACT_CAP") or caps.get("abstracts", 20)),
        rerank_k=int(_env("RERANK_K") or caps.get("rerank_k", 50)),
        table_tau=float(_env("TABLE_TAU") or syn.get("table_tau", 0.5)),
        cell_context_chars=int(syn.get("cell_context_chars", 6000)),
        moderation_fail_closed=bool(mod.get("fail_closed", True)),
    )
    return AppConfig(
        corpus_path=paths.get("corpus"),
        index_path=paths.get("index"),
        store_path=paths.get("store"),
        denylist_path=_env("DENYLIST") or paths.get("denylist"),
        script_path=paths.get("script"),
        webui_path=paths.get("webui"),
        embed_provider=emb.get("provider", "hash"),
        embed_dim=int(_env("EMBED_DIM") or emb.get("dim", 256)),
        embed_seed=int(emb.get("seed", 13)),
        embed_batch_size=int(emb.get("batch_size", 64)),
        gateway_provider=_env("GATEWAY_PROVIDER") or gw.get("provider", "heuristic"),
        gateway_retries=int(gw.get("retries", 1)),
        gateway_max_tokens=int(gw.get("max_tokens", 2048)),
        gateway_temperature=float(gw.get("temperature", 0.0)),
        gateway_rate_limit_per_s=(
            float(gw["rate_limit_per_s"]) if gw.get("rate_limit_per_s") else None
        ),
        index=index_config,
        settings=settings,
    )


def make_embedding_provider(cfg: AppConfig) -> HashEmbeddingProvider:
    if cfg.embed_provider != "hash":
        raise ConfigError(
            f"unknown embedding provider {cfg.embed_provider!r} (only 'hash' ships offline; "
            "pass a custom provider object through the library API for anything else)"
        )
    return HashEmbeddingProvider(dim=cfg.embed_dim, seed=cfg.embed_seed)


def make_gateway(cfg: AppConfig) -> Gateway:
    if cfg.gateway_provider == "heuristic":
        provider = HeuristicProvider()
    elif cfg.gateway_provider == "scripted":
        if not cfg.script_path:
            raise ConfigError("scripted gateway needs paths.script")
        records = json.loads(Path(cfg.script_path).read_text(encoding="utf-8"))
        provider = ScriptedProvider.from_records(records)
    else:
        raise ConfigError(
            f"unknown gateway provider {cfg.gateway_provider!r} (offline providers: "
            "'heuristic', 'scripted'; wire a real model through the library API)"
        )
    return Gateway(
        provider,
        retries=cfg.gateway_retries,
        max_tokens=cfg.gateway_max_tokens,
        temperature=cfg.gateway_temperature,
        rate_limit_per_s=cfg.gateway_rate_limit_per_s,
    )


def make_moderator(cfg: AppConfig) -> DenylistModerator:
    phrases: list[str] = []
    if cfg.denylist_path and Path(cfg.denylist_path).exists():
        phrases = Path(cfg.denylist_path).read_text(encoding="utf-8").splitlines()
    return DenylistModerator(phrases)


def load_corpus(cfg: AppConfig) -> Corpus:
    if not cfg.corpus_path:
        raise ConfigError("config has no paths.corpus")
    with open(cfg.corpus_path, encoding="utf-8") as fh:
        return ingest_corpus(fh)


def build_engine(cfg: AppConfig, corpus: Corpus | None = None, index: HybridIndex | None = None) -> Engine:
    """Assemble a ready engine from config, loading or building the index."""
    if corpus is None:
        corpus = load_corpus(cfg)
    provider = make_embedding_provider(cfg)
    if index is None:
        if cfg.index_path and (Path(cfg.index_path) / "meta.json").exists():
            index = HybridIndex.load(cfg.index_path, provider=provider)
        else:
            passages = [p for paper in corpus for p in chunk_paper(paper)]
            index = build_index(
                passages, provider, cfg.index, papers=corpus,
                embed_batch_size=cfg.embed_batch_size,
            )
    store = ReportStore(cfg.store_path) if cfg.store_path else None
    return Engine(
        corpus=corpus,
        index=index,
        gateway=make_gateway(cfg),
        scorer=TokenOverlapScorer(),
        moderator=make_moderator(cfg),
        store=store,
        settings=cfg.settings,
    )
