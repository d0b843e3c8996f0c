"""Turn filtered news into numerical features and pool them per (stock, window).

Each news text yields a pair of vectors:

* a 6-dim sentiment vector of per-sentence score statistics
  (mean, population std, min, max, fraction positive, fraction negative),
* a unit-norm embedding from seeded feature hashing of token uni/bigrams
  (or a vector imported from an external model run).

Per (ticker, period) window both vector sets are reduced by elementwise
average pooling, yielding one fixed-size row per stock and time.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from bisect import bisect_right
from dataclasses import dataclass
from datetime import datetime
from typing import IO, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .hashing import hash_index_sign
from .newsflow import EsgNewsItem, format_timestamp, parse_timestamp
from .text import split_sentences, tokenize

__all__ = [
    "SentimentLexicon",
    "PooledFeatures",
    "HashedEmbedder",
    "ExternalEmbeddings",
    "tokenize",
    "split_sentences",
    "sentiment_vector",
    "embed",
    "pool",
    "transform_window",
    "group_windows",
    "load_lexicon",
    "load_external_embeddings",
    "write_external_embeddings",
    "write_features",
    "read_features",
]

SENTIMENT_DIM = 6
# Slot layout of a sentiment vector.
S_MEAN, S_STD, S_MIN, S_MAX, S_FRAC_POS, S_FRAC_NEG = range(SENTIMENT_DIM)

EXTERNAL_MAGIC = b"E2RE"
EXTERNAL_VERSION = 1


@dataclass(frozen=True)
class SentimentLexicon:
    """Token -> score in [-1, +1]."""

    scores: Mapping[str, float]

    def __post_init__(self) -> None:
        if not self.scores:
            raise ValueError("sentiment lexicon is empty")
        for token, score in self.scores.items():
            if not -1.0 <= score <= 1.0:
                raise ValueError(f"lexicon score for {token!r} outside [-1, 1]: {score}")


@dataclass(frozen=True)
class PooledFeatures:
    """Averaged feature vectors for one (ticker, period) news window."""

    ticker: str
    t: int
    s_pooled: np.ndarray  # shape (6,)
    e_pooled: np.ndarray  # shape (d,)
    m: int  # number of pooled news items
    latest_news_ts: datetime | None = None  # provenance for leakage checks


class EmbeddingProvider(Protocol):
    dim: int

    def embedding_for(self, news_id: str, text: str) -> np.ndarray: ...


class HashedEmbedder:
    """Seeded feature-hashing embedder over token unigrams and bigrams.

    Each n-gram is hashed (FNV-1a 64 with the seed mixed in) to a bucket in
    [0, dim) and a sign; signs accumulate and the result is L2-normalized.
    Deterministic for fixed (text, dim, seed) across runs and platforms.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        if dim < 1:
            raise ValueError("embedding dimension must be >= 1")
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, tuple[int, int]] = {}

    def _bucket(self, ngram: str) -> tuple[int, int]:
        hit = self._cache.get(ngram)
        if hit is None:
            hit = hash_index_sign(ngram.encode("utf-8"), self.seed, self.dim)
            self._cache[ngram] = hit
        return hit

    def embed_text(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        vec = np.zeros(self.dim)
        for i, tok in enumerate(tokens):
            idx, sign = self._bucket(tok)
            vec[idx] += sign
            if i + 1 < len(tokens):
                idx, sign = self._bucket(tok + " " + tokens[i + 1])
                vec[idx] += sign
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def embedding_for(self, news_id: str, text: str) -> np.ndarray:
        return self.embed_text(text)


class ExternalEmbeddings:
    """Embeddings precomputed elsewhere, looked up by news id."""

    def __init__(self, vectors: Mapping[str, np.ndarray]):
        dims = {v.shape for v in vectors.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")
        self.vectors = dict(vectors)
        self.dim = next(iter(dims))[0] if dims else 0

    def embedding_for(self, news_id: str, text: str) -> np.ndarray:
        try:
            return self.vectors[news_id]
        except KeyError:
            raise ValueError(f"no external embedding for news id {news_id!r}") from None


def load_lexicon(source: str | IO[str]) -> SentimentLexicon:
    """Load a sentiment lexicon from CSV with header ``token,score``."""
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.DictReader(source)
    if reader.fieldnames is None or set(reader.fieldnames) != {"token", "score"}:
        raise ValueError("lexicon CSV must have header token,score")
    scores: dict[str, float] = {}
    for row_no, row in enumerate(reader, start=2):
        token = (row["token"] or "").strip().lower()
        if not token:
            raise ValueError(f"row {row_no}: empty token")
        if token in scores:
            raise ValueError(f"row {row_no}: duplicate token {token!r}")
        try:
            scores[token] = float(row["score"])
        except (TypeError, ValueError):
            raise ValueError(f"row {row_no}: bad score {row['score']!r}") from None
    return SentimentLexicon(scores=scores)


def sentiment_vector(text: str, lexicon: SentimentLexicon) -> np.ndarray:
    """Six statistics over per-sentence sentiment scores.

    A sentence scores the mean lexicon value of its in-lexicon tokens, 0 when
    none are found. Slots: mean, population std, min, max, fraction of
    positive sentences, fraction of negative sentences. A text with zero
    sentences yields the all-zero vector.
    """
    sentences = split_sentences(text)
    if not sentences:
        return np.zeros(SENTIMENT_DIM)
    scores = np.empty(len(sentences))
    for i, sentence in enumerate(sentences):
        hits = [lexicon.scores[tok] for tok in tokenize(sentence) if tok in lexicon.scores]
        scores[i] = np.mean(hits) if hits else 0.0
    return np.array(
        [
            scores.mean(),
            scores.std(),  # population std; 0 for a single sentence
            scores.min(),
            scores.max(),
            np.mean(scores > 0),
            np.mean(scores < 0),
        ]
    )


def embed(text: str, provider: HashedEmbedder) -> np.ndarray:
    """Embed one text with the given hashed-n-gram provider."""
    return provider.embed_text(text)


def pool(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise arithmetic mean of equally sized vectors."""
    if len(vectors) == 0:
        raise ValueError("cannot pool an empty list")
    dims = {np.asarray(v).shape for v in vectors}
    if len(dims) > 1:
        raise ValueError(f"ragged vector dimensions: {sorted(dims)}")
    return np.mean(np.asarray(vectors, dtype=float), axis=0)


def transform_window(
    items: Sequence[EsgNewsItem],
    ticker: str,
    t: int,
    lexicon: SentimentLexicon,
    provider: EmbeddingProvider,
) -> PooledFeatures:
    """Featurize and average-pool all news items of one (ticker, period) window."""
    if not items:
        raise ValueError(f"empty news window for ({ticker}, {t})")
    s_vecs = [sentiment_vector(entry.item.text, lexicon) for entry in items]
    e_vecs = [provider.embedding_for(entry.item.id, entry.item.text) for entry in items]
    return PooledFeatures(
        ticker=ticker,
        t=t,
        s_pooled=pool(s_vecs),
        e_pooled=pool(e_vecs),
        m=len(items),
        latest_news_ts=max(entry.item.timestamp for entry in items),
    )


def group_windows(
    entries: Iterable[EsgNewsItem],
    boundaries: Sequence[datetime],
    w: int = 1,
) -> dict[tuple[str, int], list[EsgNewsItem]]:
    """Assign items to (ticker, period) windows covering [boundary(t-w), boundary(t)).

    An item mentioning k tickers contributes to all k stocks' windows. Items
    outside the grid range are dropped. Keys are sorted for determinism.
    """
    if w < 1:
        raise ValueError("window length must be >= 1")
    grouped: dict[tuple[str, int], list[EsgNewsItem]] = {}
    for entry in entries:
        j = bisect_right(boundaries, entry.item.timestamp)
        # Windows t with boundary(t-w) <= ts < boundary(t): t in [j, j+w-1].
        for t in range(max(j, w), min(j + w, len(boundaries))):
            for ticker in entry.tickers:
                grouped.setdefault((ticker, t), []).append(entry)
    return {key: grouped[key] for key in sorted(grouped)}


def load_external_embeddings(source: IO[bytes]) -> dict[str, np.ndarray]:
    """Read the binary external-embedding file into an id -> vector map.

    Layout: magic ``E2RE``, u32 version, u32 dim, u64 count, then per record
    a u16 id length, the UTF-8 id bytes, and dim little-endian float64.
    """
    header = source.read(20)
    if len(header) < 20 or header[:4] != EXTERNAL_MAGIC:
        raise ValueError("not an external embedding file (bad magic)")
    version, dim, count = struct.unpack("<IIQ", header[4:])
    if version != EXTERNAL_VERSION:
        raise ValueError(f"unsupported embedding file version {version}")
    vectors: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw_len = source.read(2)
        if len(raw_len) < 2:
            raise ValueError("truncated embedding file")
        (id_len,) = struct.unpack("<H", raw_len)
        id_bytes = source.read(id_len)
        payload = source.read(8 * dim)
        if len(id_bytes) < id_len or len(payload) < 8 * dim:
            raise ValueError("truncated embedding file")
        news_id = id_bytes.decode("utf-8")
        if news_id in vectors:
            raise ValueError(f"duplicate news id {news_id!r} in embedding file")
        vectors[news_id] = np.frombuffer(payload, dtype="<f8").astype(float)
    if source.read(1):
        raise ValueError("trailing bytes after declared record count")
    return vectors


def write_external_embeddings(vectors: Mapping[str, np.ndarray], sink: IO[bytes]) -> None:
    """Write the binary external-embedding format read by :func:`load_external_embeddings`."""
    dims = {np.asarray(v).shape for v in vectors.values()}
    if len(dims) > 1:
        raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")
    dim = next(iter(dims))[0] if dims else 0
    sink.write(EXTERNAL_MAGIC + struct.pack("<IIQ", EXTERNAL_VERSION, dim, len(vectors)))
    for news_id, vec in vectors.items():
        id_bytes = news_id.encode("utf-8")
        sink.write(struct.pack("<H", len(id_bytes)) + id_bytes)
        sink.write(np.asarray(vec, dtype="<f8").tobytes())


def write_features(rows: Iterable[PooledFeatures], sink: IO[str]) -> None:
    """Write pooled features as JSON-lines, one record per (ticker, period)."""
    for row in rows:
        record = {
            "ticker": row.ticker,
            "t": row.t,
            "s_pooled": [float(x) for x in row.s_pooled],
            "e_pooled": [float(x) for x in row.e_pooled],
            "m": row.m,
            "latest_news_ts": format_timestamp(row.latest_news_ts) if row.latest_news_ts else None,
        }
        sink.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")


def read_features(source: IO[str] | Iterable[str]) -> list[PooledFeatures]:
    rows: list[PooledFeatures] = []
    for line_no, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            rows.append(
                PooledFeatures(
                    ticker=record["ticker"],
                    t=int(record["t"]),
                    s_pooled=np.array(record["s_pooled"], dtype=float),
                    e_pooled=np.array(record["e_pooled"], dtype=float),
                    m=int(record["m"]),
                    latest_news_ts=(
                        parse_timestamp(record["latest_news_ts"])
                        if record.get("latest_news_ts")
                        else None
                    ),
                )
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise ValueError(f"features line {line_no}: {exc}") from exc
    return rows
