"""Price ingestion, returns, realized volatility, and dataset assembly.

Volatility here is the uncentered root-mean-square of simple returns over a
window: v = sqrt(sum(r^2) / K). Periods live on a time grid of end-of-period
instants (weekly grids end Friday 23:59:59 UTC); features for period t may
only use news strictly before boundary(t), targets only returns strictly
after it. ``build_dataset`` enforces that no-leakage rule on every example.
"""

from __future__ import annotations

import csv
import io
import json
from bisect import bisect_right
from dataclasses import dataclass
from datetime import date, datetime, time, timedelta, timezone
from typing import IO, Iterable, Optional, Sequence

import numpy as np

from .features import PooledFeatures
from .newsflow import format_timestamp, parse_timestamp

END_OF_DAY = time(23, 59, 59, tzinfo=timezone.utc)


def date_instant(day: date) -> datetime:
    """Map a trading date to its end-of-day UTC instant."""
    return datetime.combine(day, END_OF_DAY)


@dataclass(frozen=True)
class PriceSeries:
    ticker: str
    points: tuple[tuple[date, float], ...]  # strictly increasing dates, prices > 0

    def __post_init__(self) -> None:
        for (d1, p1), (d2, _) in zip(self.points, self.points[1:]):
            if d2 <= d1:
                raise ValueError(f"{self.ticker}: dates not strictly increasing at {d2}")
        for d, p in self.points:
            if p <= 0:
                raise ValueError(f"{self.ticker}: non-positive close {p} on {d}")


@dataclass(frozen=True)
class ReturnSeries:
    ticker: str
    points: tuple[tuple[date, float], ...]  # dated at the later price point


@dataclass(frozen=True)
class TimeGrid:
    """End-of-period instants, strictly increasing, uniform frequency."""

    boundaries: tuple[datetime, ...]
    frequency: str = "weekly"

    def __post_init__(self) -> None:
        if len(self.boundaries) < 2:
            raise ValueError("grid needs at least two boundaries")
        for a, b in zip(self.boundaries, self.boundaries[1:]):
            if b <= a:
                raise ValueError("grid boundaries must be strictly increasing")
        if self.frequency not in ("weekly", "daily"):
            raise ValueError(f"unknown grid frequency {self.frequency!r}")

    def __len__(self) -> int:
        return len(self.boundaries)

    @classmethod
    def weekly(cls, start: date, end: date) -> "TimeGrid":
        """All Fridays in [start, end], each at 23:59:59 UTC."""
        first = start + timedelta(days=(4 - start.weekday()) % 7)
        fridays = []
        day = first
        while day <= end:
            fridays.append(date_instant(day))
            day += timedelta(days=7)
        return cls(boundaries=tuple(fridays), frequency="weekly")

    @classmethod
    def daily(cls, start: date, end: date) -> "TimeGrid":
        days = []
        day = start
        while day <= end:
            days.append(date_instant(day))
            day += timedelta(days=1)
        return cls(boundaries=tuple(days), frequency="daily")


@dataclass(frozen=True)
class VolTarget:
    ticker: str
    t: int
    delta: int
    v: float  # realized volatility, >= 0
    k: int  # number of return samples used
    first_return_date: Optional[date] = None  # provenance for leakage checks


@dataclass(frozen=True)
class Example:
    features: PooledFeatures
    target: VolTarget
    split: str  # train | validation | test

    def __post_init__(self) -> None:
        if (self.features.ticker, self.features.t) != (self.target.ticker, self.target.t):
            raise ValueError("feature/target keys disagree")
        if self.split not in ("train", "validation", "test"):
            raise ValueError(f"bad split label {self.split!r}")


@dataclass(frozen=True)
class Dataset:
    examples: tuple[Example, ...]
    universe: frozenset[str]
    dropped: int = 0  # feature rows without a matching target

    def subset(self, split: str) -> list[Example]:
        return [ex for ex in self.examples if ex.split == split]


def load_prices(source: str | IO[str]) -> list[PriceSeries]:
    """Load close prices from CSV ``date,ticker,close``, one series per ticker."""
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.DictReader(source)
    if reader.fieldnames is None or set(reader.fieldnames) != {"date", "ticker", "close"}:
        raise ValueError("price CSV must have header date,ticker,close")
    rows: dict[str, dict[date, float]] = {}
    for row_no, row in enumerate(reader, start=2):
        ticker = (row["ticker"] or "").strip()
        if not ticker:
            raise ValueError(f"row {row_no}: empty ticker")
        try:
            day = date.fromisoformat((row["date"] or "").strip())
        except ValueError:
            raise ValueError(f"row {row_no}: bad date {row['date']!r}") from None
        try:
            close = float(row["close"])
        except (TypeError, ValueError):
            raise ValueError(f"row {row_no}: bad close {row['close']!r}") from None
        if close <= 0:
            raise ValueError(f"row {row_no}: non-positive close {close}")
        series = rows.setdefault(ticker, {})
        if day in series:
            raise ValueError(f"row {row_no}: duplicate ({day}, {ticker})")
        series[day] = close
    return [
        PriceSeries(ticker=ticker, points=tuple(sorted(rows[ticker].items())))
        for ticker in sorted(rows)
    ]


def simple_returns(prices: PriceSeries) -> ReturnSeries:
    """Per-period simple returns r_t = p_t / p_{t-1} - 1, dated at the later point."""
    if len(prices.points) < 2:
        raise ValueError(f"{prices.ticker}: need at least two prices")
    points = tuple(
        (d2, p2 / p1 - 1.0)
        for (_, p1), (d2, p2) in zip(prices.points, prices.points[1:])
    )
    return ReturnSeries(ticker=prices.ticker, points=points)


def realized_volatility(returns: Sequence[float] | np.ndarray) -> tuple[float, int]:
    """Uncentered root-mean-square of returns: (sqrt(mean(r^2)), count)."""
    arr = np.asarray(returns, dtype=float)
    if arr.size == 0:
        raise ValueError("realized volatility of an empty window")
    return float(np.sqrt(np.mean(arr**2))), int(arr.size)


def forward_vol_target(
    returns: ReturnSeries,
    grid: TimeGrid,
    t: int,
    delta: int,
    min_samples: int = 3,
) -> Optional[VolTarget]:
    """Realized volatility of returns dated in (boundary(t), boundary(t+delta)].

    Returns None when fewer than ``min_samples`` returns fall in the window.
    """
    if delta < 1:
        raise ValueError("delta must be >= 1")
    if t < 0 or t + delta >= len(grid.boundaries):
        raise ValueError(f"period {t}+{delta} beyond grid of {len(grid.boundaries)}")
    lo, hi = grid.boundaries[t], grid.boundaries[t + delta]
    window = [(d, r) for d, r in returns.points if lo < date_instant(d) <= hi]
    if len(window) < min_samples:
        return None
    v, k = realized_volatility([r for _, r in window])
    return VolTarget(
        ticker=returns.ticker,
        t=t,
        delta=delta,
        v=v,
        k=k,
        first_return_date=min(d for d, _ in window),
    )


def _check_leakage(example: Example, grid: TimeGrid) -> None:
    boundary = grid.boundaries[example.target.t]
    news_ts = example.features.latest_news_ts
    if news_ts is not None and news_ts >= boundary:
        raise ValueError(
            f"leakage: news at {news_ts} not before boundary {boundary} "
            f"for ({example.target.ticker}, t={example.target.t})"
        )
    first = example.target.first_return_date
    if first is not None and boundary > date_instant(first):
        raise ValueError(
            f"leakage: target return on {first} precedes boundary {boundary} "
            f"for ({example.target.ticker}, t={example.target.t})"
        )


def build_dataset(
    features: Sequence[PooledFeatures],
    targets: Sequence[VolTarget],
    split: tuple[int, int],
    grid: TimeGrid,
) -> Dataset:
    """Inner-join features and targets on (ticker, t) and label train/val/test.

    Periods t <= train_end go to train, train_end < t <= val_end to
    validation, later periods to test. Feature rows without a matching
    target are dropped and counted. Every joined example is checked against
    the no-leakage rule.
    """
    train_end, val_end = split
    if val_end <= train_end:
        raise ValueError(f"val_end {val_end} must exceed train_end {train_end}")
    by_key = {(tg.ticker, tg.t): tg for tg in targets}
    if len(by_key) != len(targets):
        raise ValueError("duplicate (ticker, t) among targets")
    examples: list[Example] = []
    dropped = 0
    dims: set[tuple[int, int]] = set()
    for feat in features:
        target = by_key.get((feat.ticker, feat.t))
        if target is None:
            dropped += 1
            continue
        label = "train" if feat.t <= train_end else "validation" if feat.t <= val_end else "test"
        example = Example(features=feat, target=target, split=label)
        _check_leakage(example, grid)
        examples.append(example)
        dims.add((feat.s_pooled.shape[0], feat.e_pooled.shape[0]))
    if not examples:
        raise ValueError("empty join between features and targets")
    if len(dims) > 1:
        raise ValueError(f"inconsistent feature dimensions: {sorted(dims)}")
    non_test = [ex.target.t for ex in examples if ex.split != "test"]
    test = [ex.target.t for ex in examples if ex.split == "test"]
    if non_test and test:
        assert max(non_test) < min(test)
    return Dataset(
        examples=tuple(examples),
        universe=frozenset(ex.target.ticker for ex in examples),
        dropped=dropped,
    )


def boundary_prices(series: PriceSeries, grid: TimeGrid) -> list[Optional[float]]:
    """Last close at or before each grid boundary (None before first trade)."""
    dates = [date_instant(d) for d, _ in series.points]
    out: list[Optional[float]] = []
    for boundary in grid.boundaries:
        idx = bisect_right(dates, boundary)
        out.append(series.points[idx - 1][1] if idx > 0 else None)
    return out


def period_returns(series: PriceSeries, grid: TimeGrid) -> dict[int, float]:
    """Per-period simple returns p(b_t)/p(b_{t-1}) - 1 keyed by period index t."""
    closes = boundary_prices(series, grid)
    out: dict[int, float] = {}
    for t in range(1, len(closes)):
        if closes[t - 1] is not None and closes[t] is not None:
            out[t] = closes[t] / closes[t - 1] - 1.0
    return out


def write_dataset(dataset: Dataset, sink: IO[str]) -> None:
    """Write examples as JSON-lines ordered by (ticker, t)."""
    for ex in sorted(dataset.examples, key=lambda e: (e.target.ticker, e.target.t)):
        record = {
            "ticker": ex.target.ticker,
            "t": ex.target.t,
            "delta": ex.target.delta,
            "s_pooled": [float(x) for x in ex.features.s_pooled],
            "e_pooled": [float(x) for x in ex.features.e_pooled],
            "m": ex.features.m,
            "latest_news_ts": (
                format_timestamp(ex.features.latest_news_ts)
                if ex.features.latest_news_ts
                else None
            ),
            "v": ex.target.v,
            "k": ex.target.k,
            "first_return_date": (
                ex.target.first_return_date.isoformat() if ex.target.first_return_date else None
            ),
            "split": ex.split,
        }
        sink.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")


def read_dataset(source: IO[str] | Iterable[str]) -> Dataset:
    examples: list[Example] = []
    dropped = 0
    for line_no, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            feat = PooledFeatures(
                ticker=r["ticker"],
                t=int(r["t"]),
                s_pooled=np.array(r["s_pooled"], dtype=float),
                e_pooled=np.array(r["e_pooled"], dtype=float),
                m=int(r["m"]),
                latest_news_ts=(
                    parse_timestamp(r["latest_news_ts"]) if r.get("latest_news_ts") else None
                ),
            )
            target = VolTarget(
                ticker=r["ticker"],
                t=int(r["t"]),
                delta=int(r["delta"]),
                v=float(r["v"]),
                k=int(r["k"]),
                first_return_date=(
                    date.fromisoformat(r["first_return_date"])
                    if r.get("first_return_date")
                    else None
                ),
            )
            examples.append(Example(features=feat, target=target, split=r["split"]))
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise ValueError(f"dataset line {line_no}: {exc}") from exc
    if not examples:
        raise ValueError("dataset file holds no examples")
    return Dataset(
        examples=tuple(examples),
        universe=frozenset(ex.target.ticker for ex in examples),
        dropped=dropped,
    )
