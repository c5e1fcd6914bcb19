"""Text embedding providers, binary quantization, and similarity scoring.

Document embeddings are stored as one sign bit per component (a packed
binary code). Queries stay full-precision and are scored asymmetrically
against the codes:

    score(q, b) = sum_i q_i * (2*b_i - 1) / (||q|| * sqrt(d))   in [-1, 1]

A symmetric fallback (both sides binary) scores 1 - 2*hamming/d. The
bundled ``HashEmbeddingProvider`` needs no network or model weights: it
projects the token multiset of a text through seeded per-token random
vectors, so the whole pipeline runs and tests deterministically offline.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .tokenizer import DefaultTokenizer


class EmbeddingError(Exception):
    """Provider failure; carries the failing batch range for retries."""

    def __init__(self, message: str, batch_range: tuple[int, int] | None = None):
        super().__init__(message)
        self.batch_range = batch_range


@dataclass(frozen=True)
class BinaryCode:
    """A d-bit sign code packed into bytes (big-endian bit order)."""

    bits: bytes
    dim: int

    def unpack(self) -> np.ndarray:
        """0/1 vector of length ``dim``."""
        arr = np.unpackbits(np.frombuffer(self.bits, dtype=np.uint8))
        return arr[: self.dim]


class EmbeddingProvider(Protocol):
    provider_id: str
    dim: int

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray: ...


def embed(texts: Sequence[str], provider: EmbeddingProvider) -> np.ndarray:
    """Embed texts in order; one row per input text.

    Provider failures surface as a retriable ``EmbeddingError`` carrying
    the failing batch range, so callers can retry or report precisely.
    """
    if not texts:
        raise ValueError("embed requires at least one text")
    try:
        vectors = provider.embed_batch(list(texts))
    except Exception as exc:
        raise EmbeddingError(
            f"provider {provider.provider_id} failed: {exc}", batch_range=(0, len(texts))
        ) from exc
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.shape != (len(texts), provider.dim):
        raise EmbeddingError(
            f"provider {provider.provider_id} returned shape {vectors.shape}, "
            f"expected {(len(texts), provider.dim)}",
            batch_range=(0, len(texts)),
        )
    return vectors


def quantize_binary(vector: np.ndarray) -> BinaryCode:
    """One sign bit per component: 1 where the component is > 0, else 0."""
    v = np.asarray(vector, dtype=np.float64).ravel()
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize a vector with non-finite components")
    bits = np.packbits((v > 0).astype(np.uint8))
    return BinaryCode(bits=bits.tobytes(), dim=v.shape[0])


def pack_codes(vectors: np.ndarray) -> np.ndarray:
    """Quantize a (n, d) matrix to packed uint8 codes of shape (n, ceil(d/8))."""
    return np.packbits(np.asarray(vectors) > 0, axis=1)


def unpack_codes(packed: np.ndarray, dim: int) -> np.ndarray:
    """Expand packed codes back to a (n, dim) 0/1 float32 matrix."""
    bits = np.unpackbits(packed, axis=1)[:, :dim]
    return bits.astype(np.float32)


def asymmetric_score(query: np.ndarray, code: BinaryCode) -> float:
    """Full-precision query against a binary document code, in [-1, 1]."""
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != code.dim:
        raise ValueError(f"dimension mismatch: query {q.shape[0]} vs code {code.dim}")
    signs = 2.0 * code.unpack().astype(np.float64) - 1.0
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        return 0.0
    return float(q @ signs / (norm * np.sqrt(code.dim)))


def asymmetric_scores(query: np.ndarray, bit_matrix: np.ndarray) -> np.ndarray:
    """Vectorized asymmetric score of one query against (n, d) 0/1 bits."""
    q = np.asarray(query, dtype=np.float64).ravel()
    d = bit_matrix.shape[1]
    if q.shape[0] != d:
        raise ValueError(f"dimension mismatch: query {q.shape[0]} vs codes {d}")
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        return np.zeros(bit_matrix.shape[0])
    # sum_i q_i (2 b_i - 1) == 2 (q . b) - sum(q)
    dots = bit_matrix.astype(np.float64) @ q
    return (2.0 * dots - q.sum()) / (norm * np.sqrt(d))


def symmetric_score(a: BinaryCode, b: BinaryCode) -> float:
    """Binary-vs-binary fallback: 1 - 2 * hamming / d, in [-1, 1]."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    xa = np.frombuffer(a.bits, dtype=np.uint8)
    xb = np.frombuffer(b.bits, dtype=np.uint8)
    hamming = int(np.unpackbits(np.bitwise_xor(xa, xb))[: a.dim].sum())
    return 1.0 - 2.0 * hamming / a.dim


class HashEmbeddingProvider:
    """Deterministic offline embedding: seeded random projection of tokens.

    Each distinct token maps (via a keyed blake2b digest) to a fixed
    pseudo-random unit direction; a text embeds as the normalized sum over
    its token multiset. Same text always yields the same vector, and texts
    sharing vocabulary land near each other, which is enough structure for
    retrieval tests without any model weights.
    """

    def __init__(self, dim: int = 256, seed: int = 13):
        self.dim = dim
        self.seed = seed
        self.provider_id = f"hash-v1:d{dim}:s{seed}"
        self._tokenizer = DefaultTokenizer()
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        cached = self._token_cache.get(token)
        if cached is not None:
            return cached
        digest = hashlib.blake2b(
            token.encode("utf-8"), digest_size=8, key=str(self.seed).encode()
        ).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "big")))
        vec = rng.standard_normal(self.dim).astype(np.float32)
        self._token_cache[token] = vec
        return vec

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            lowered = text.lower()
            acc = np.zeros(self.dim, dtype=np.float32)
            for span in self._tokenizer.tokenize(lowered):
                acc += self._token_vector(lowered[span.start : span.end])
            norm = float(np.linalg.norm(acc))
            if norm > 0:
                acc /= norm
            out[i] = acc
        return out
