"""News stream parsing, ESG vocabulary filtering, ticker linking, topic counts.

The input is a JSON-lines stream of timestamped news texts. Items survive
only when at least one vocabulary phrase occurs as a contiguous token
subsequence of the text; surviving items are linked to tickers either via
vendor-supplied attributes or by alias lookup in a ticker dictionary.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import IO, Iterable, Iterator, Optional

from .text import contains_phrase, tokenize

PILLARS = ("E", "S", "G")


@dataclass(frozen=True)
class NewsItem:
    """One timestamped piece of news, optionally with vendor ticker tags."""

    id: str
    timestamp: datetime  # UTC, second precision
    text: str
    vendor_tickers: Optional[tuple[str, ...]] = None


@dataclass(frozen=True)
class MatchedTopic:
    phrase: tuple[str, ...]
    topic: str
    pillar: str


@dataclass(frozen=True)
class EsgNewsItem:
    """A news item that matched at least one vocabulary phrase."""

    item: NewsItem
    topics: tuple[MatchedTopic, ...]
    tickers: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.topics:
            raise ValueError("EsgNewsItem requires at least one matched topic")


@dataclass(frozen=True)
class VocabEntry:
    phrase: tuple[str, ...]
    topic: str
    pillar: str


@dataclass(frozen=True)
class EsgVocabulary:
    entries: tuple[VocabEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class TickerEntry:
    ticker: str
    aliases: tuple[tuple[str, ...], ...]
    market: str


@dataclass(frozen=True)
class TickerDictionary:
    entries: tuple[TickerEntry, ...]

    @property
    def tickers(self) -> frozenset[str]:
        return frozenset(e.ticker for e in self.entries)


@dataclass(frozen=True)
class ParseError:
    line: int
    cause: str


@dataclass(frozen=True)
class TopicHistogram:
    window: tuple[datetime, datetime]
    counts: dict[str, int] = field(default_factory=dict)


def parse_timestamp(value: str) -> datetime:
    """Parse an RFC 3339 timestamp to a UTC datetime truncated to seconds."""
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        raise ValueError(f"timestamp {value!r} has no UTC offset")
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _iter_lines(source: IO[bytes] | IO[str] | Iterable[bytes | str]) -> Iterator[str]:
    for raw in source:
        yield raw.decode("utf-8") if isinstance(raw, bytes) else raw


def _parse_line(line: str) -> NewsItem:
    record = json.loads(line)
    if not isinstance(record, dict):
        raise ValueError("line is not a JSON object")
    for key in ("id", "timestamp", "text"):
        if key not in record:
            raise ValueError(f"missing required key {key!r}")
    item_id = record["id"]
    if not isinstance(item_id, str) or not item_id:
        raise ValueError("id must be a non-empty string")
    text = record["text"]
    if not isinstance(text, str) or not text.strip():
        raise ValueError("text must be a non-empty string")
    timestamp = parse_timestamp(str(record["timestamp"]))
    vendor = record.get("tickers")
    if vendor is not None:
        if not isinstance(vendor, list) or not all(isinstance(t, str) for t in vendor):
            raise ValueError("tickers must be an array of strings")
        vendor = tuple(vendor)
    return NewsItem(id=item_id, timestamp=timestamp, text=text, vendor_tickers=vendor)


def parse_news_stream(
    source: IO[bytes] | IO[str] | Iterable[bytes | str],
    strict: bool = False,
) -> tuple[list[NewsItem], list[ParseError]]:
    """Parse a JSON-lines news stream into items plus per-line errors.

    Blank lines are skipped. In strict mode the first bad line raises.
    Duplicate ids always raise, regardless of mode, because ids key every
    downstream join.
    """
    items: list[NewsItem] = []
    errors: list[ParseError] = []
    seen: set[str] = set()
    for line_no, line in enumerate(_iter_lines(source), start=1):
        if not line.strip():
            continue
        try:
            item = _parse_line(line)
        except (ValueError, json.JSONDecodeError) as exc:
            if strict:
                raise ValueError(f"line {line_no}: {exc}") from exc
            errors.append(ParseError(line=line_no, cause=str(exc)))
            continue
        if item.id in seen:
            raise ValueError(f"line {line_no}: duplicate news id {item.id!r}")
        seen.add(item.id)
        items.append(item)
    return items, errors


def load_vocabulary(source: str | IO[str]) -> EsgVocabulary:
    """Load an ESG vocabulary from CSV with header ``phrase,topic,pillar``."""
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.DictReader(source)
    if reader.fieldnames is None or set(reader.fieldnames) != {"phrase", "topic", "pillar"}:
        raise ValueError("vocabulary CSV must have header phrase,topic,pillar")
    entries: list[VocabEntry] = []
    seen: set[tuple[str, ...]] = set()
    for row_no, row in enumerate(reader, start=2):
        phrase = tuple(tokenize(row["phrase"] or ""))
        if not phrase:
            raise ValueError(f"row {row_no}: empty phrase")
        pillar = (row["pillar"] or "").strip()
        if pillar not in PILLARS:
            raise ValueError(f"row {row_no}: pillar must be one of E/S/G, got {pillar!r}")
        topic = (row["topic"] or "").strip()
        if not topic:
            raise ValueError(f"row {row_no}: empty topic")
        if phrase in seen:
            raise ValueError(f"row {row_no}: duplicate phrase {' '.join(phrase)!r}")
        seen.add(phrase)
        entries.append(VocabEntry(phrase=phrase, topic=topic, pillar=pillar))
    if not entries:
        raise ValueError("vocabulary is empty")
    return EsgVocabulary(entries=tuple(entries))


def load_ticker_dictionary(source: str | IO[str]) -> TickerDictionary:
    """Load a ticker dictionary from CSV ``ticker,alias,market`` (one alias per row)."""
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.DictReader(source)
    if reader.fieldnames is None or set(reader.fieldnames) != {"ticker", "alias", "market"}:
        raise ValueError("ticker CSV must have header ticker,alias,market")
    aliases: dict[str, list[tuple[str, ...]]] = {}
    markets: dict[str, str] = {}
    for row_no, row in enumerate(reader, start=2):
        ticker = (row["ticker"] or "").strip()
        if not ticker:
            raise ValueError(f"row {row_no}: empty ticker")
        alias = tuple(tokenize(row["alias"] or ""))
        if not alias:
            raise ValueError(f"row {row_no}: empty alias for {ticker}")
        aliases.setdefault(ticker, []).append(alias)
        markets.setdefault(ticker, (row["market"] or "").strip())
    entries = tuple(
        TickerEntry(ticker=t, aliases=tuple(a), market=markets[t])
        for t, a in aliases.items()
    )
    return TickerDictionary(entries=entries)


def esg_filter(item: NewsItem, vocab: EsgVocabulary) -> Optional[EsgNewsItem]:
    """Wrap ``item`` with all matched vocabulary phrases, or None when none match.

    A phrase matches when its token sequence occurs contiguously in the
    tokenized text; matching is case-insensitive by construction.
    """
    tokens = tokenize(item.text)
    matched = tuple(
        MatchedTopic(phrase=e.phrase, topic=e.topic, pillar=e.pillar)
        for e in vocab.entries
        if contains_phrase(tokens, e.phrase)
    )
    if not matched:
        return None
    return EsgNewsItem(item=item, topics=matched)


def link_tickers(item: NewsItem, dictionary: TickerDictionary) -> list[str]:
    """Resolve the tickers an item refers to.

    Vendor-supplied tickers win when present (intersected with the known
    dictionary); otherwise aliases are matched as contiguous token
    subsequences of the text. The result is deduplicated and sorted.
    """
    if item.vendor_tickers:
        return sorted(set(item.vendor_tickers) & dictionary.tickers)
    tokens = tokenize(item.text)
    found = {
        entry.ticker
        for entry in dictionary.entries
        if any(contains_phrase(tokens, alias) for alias in entry.aliases)
    }
    return sorted(found)


def topic_histogram(
    items: Iterable[EsgNewsItem],
    window: tuple[datetime, datetime],
    k: int = 15,
) -> TopicHistogram:
    """Count (item, topic) matches with timestamps in [start, end), keep top-k.

    An item contributes once per distinct topic. Ties in count are broken
    alphabetically by topic name.
    """
    start, end = window
    if start >= end:
        raise ValueError("window start must precede end")
    counts: dict[str, int] = {}
    for entry in items:
        if not (start <= entry.item.timestamp < end):
            continue
        for topic in {m.topic for m in entry.topics}:
            counts[topic] = counts.get(topic, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return TopicHistogram(window=window, counts=dict(ranked))


def with_tickers(entry: EsgNewsItem, tickers: Iterable[str]) -> EsgNewsItem:
    return replace(entry, tickers=tuple(tickers))


def write_filtered(entries: Iterable[EsgNewsItem], sink: IO[str]) -> None:
    """Write filtered news as JSON-lines mirroring the input plus topics/tickers."""
    for entry in entries:
        record = {
            "id": entry.item.id,
            "timestamp": format_timestamp(entry.item.timestamp),
            "text": entry.item.text,
            "topics": [
                {"phrase": " ".join(m.phrase), "topic": m.topic, "pillar": m.pillar}
                for m in entry.topics
            ],
            "tickers": list(entry.tickers),
        }
        sink.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")


def read_filtered(source: IO[bytes] | IO[str] | Iterable[bytes | str]) -> list[EsgNewsItem]:
    """Read back the JSON-lines produced by :func:`write_filtered`."""
    entries: list[EsgNewsItem] = []
    for line_no, line in enumerate(_iter_lines(source), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            item = NewsItem(
                id=record["id"],
                timestamp=parse_timestamp(record["timestamp"]),
                text=record["text"],
            )
            topics = tuple(
                MatchedTopic(phrase=tuple(t["phrase"].split()), topic=t["topic"], pillar=t["pillar"])
                for t in record["topics"]
            )
            entries.append(EsgNewsItem(item=item, topics=topics, tickers=tuple(record["tickers"])))
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise ValueError(f"filtered news line {line_no}: {exc}") from exc
    return entries
