"""Deterministic synthetic market-and-news generator for end-to-end testing.

Each stock carries a latent AR(1) log-volatility over weekly periods; daily
prices follow log-return draws at that volatility (so prices stay positive),
and every stock-period emits a Poisson number of news items. Item texts mix

* one ESG vocabulary phrase (so the news filter keeps every item),
* a "grade" token encoding the quantized next-period log-volatility with
  probability ``beta`` (else a random grade) -- the embedding-borne signal,
* a sentiment word whose polarity tilts with next-period volatility,
  scaled by ``beta`` -- the weaker sentiment-borne signal,
* neutral filler words.

With beta = 0 both channels carry no information about forward volatility.
Everything is driven by one counter-based RNG, so a fixed seed reproduces
byte-identical outputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import date, datetime, time, timedelta, timezone

import numpy as np

from . import samples

FILLER_WORDS = (
    "market", "update", "report", "quarterly", "company", "statement",
    "release", "analysts", "sector", "operations", "shares", "outlook",
    "meeting", "review", "announcement", "plan", "program", "results",
    "guidance", "strategy",
)


@dataclass(frozen=True)
class SimConfig:
    n_stocks: int = 40
    n_periods: int = 150
    seed: int = 0
    beta: float = 0.9  # signal strength in [0, 1]
    vol_mean_log: float = math.log(0.02)  # AR(1) mean of daily log-volatility
    persistence: float = 0.8
    innovation_std: float = 0.35
    news_rate: float = 3.0  # Poisson mean news per stock-period
    n_bands: int = 8  # quantization levels of the embedded signal
    start: date = date(2020, 1, 6)  # first trading Monday
    phrases: tuple[str, ...] = ()  # empty -> packaged sample vocabulary

    def __post_init__(self) -> None:
        if self.n_stocks < 1 or self.n_periods < 2:
            raise ValueError("need n_stocks >= 1 and n_periods >= 2")
        if not 0 <= self.persistence < 1:
            raise ValueError("persistence must lie in [0, 1)")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if self.news_rate <= 0 or self.innovation_std <= 0 or self.n_bands < 2:
            raise ValueError("bad news_rate / innovation_std / n_bands")
        if self.start.weekday() != 0:
            raise ValueError("start must be a Monday")


@dataclass(frozen=True)
class SimTruth:
    """Ground truth: latent next-period volatility and emitted news per (ticker, t)."""

    latent_vol: dict[tuple[str, int], float]
    news_ids: dict[tuple[str, int], tuple[str, ...]]

    def to_csv(self) -> str:
        lines = ["ticker,period,latent_vol"]
        for (ticker, t) in sorted(self.latent_vol):
            lines.append(f"{ticker},{t},{self.latent_vol[(ticker, t)]!r}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SimData:
    news_jsonl: str
    prices_csv: str
    tickers_csv: str
    truth: SimTruth
    config: SimConfig


def _norm_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def generate(config: SimConfig) -> SimData:
    """Generate (news JSON-lines, prices CSV, ticker CSV, SimTruth) for one seed."""
    rng = np.random.Generator(np.random.Philox(config.seed))
    lexicon = samples.sample_lexicon()
    positive = sorted(t for t, s in lexicon.scores.items() if s > 0)
    negative = sorted(t for t, s in lexicon.scores.items() if s < 0)
    phrases = config.phrases or tuple(
        " ".join(e.phrase) for e in samples.sample_vocabulary().entries
    )
    tickers = [f"S{i:03d}" for i in range(config.n_stocks)]
    mu = config.vol_mean_log
    sigma_stat = config.innovation_std / math.sqrt(1.0 - config.persistence**2)

    # Latent AR(1) log-volatility per stock and period, stationary start.
    log_vol = np.empty((config.n_stocks, config.n_periods))
    log_vol[:, 0] = mu + sigma_stat * rng.standard_normal(config.n_stocks)
    for t in range(1, config.n_periods):
        log_vol[:, t] = (
            mu
            + config.persistence * (log_vol[:, t - 1] - mu)
            + config.innovation_std * rng.standard_normal(config.n_stocks)
        )

    # Daily prices: 5 trading days per week, log-return draws at the period vol.
    price_rows: list[str] = []
    for i, ticker in enumerate(tickers):
        close = 100.0
        for t in range(config.n_periods):
            vol = math.exp(log_vol[i, t])
            draws = vol * rng.standard_normal(5)
            for d in range(5):
                day = config.start + timedelta(days=7 * t + d)
                close *= math.exp(draws[d])
                price_rows.append(f"{day.isoformat()},{ticker},{close!r}")

    # News: emitted during period t, encoding the period t+1 latent volatility.
    news_records: list[tuple[datetime, str, str]] = []
    latent: dict[tuple[str, int], float] = {}
    ids: dict[tuple[str, int], tuple[str, ...]] = {}
    counter = 0
    for i, ticker in enumerate(tickers):
        for t in range(config.n_periods - 1):
            next_lv = log_vol[i, t + 1]
            latent[(ticker, t)] = math.exp(next_lv)
            z = (next_lv - mu) / sigma_stat
            true_band = min(config.n_bands - 1, int(config.n_bands * _norm_cdf(z)))
            emitted: list[str] = []
            for _ in range(rng.poisson(config.news_rate)):
                counter += 1
                news_id = f"n{counter:07d}"
                emitted.append(news_id)
                band = (
                    true_band
                    if rng.random() < config.beta
                    else int(rng.integers(config.n_bands))
                )
                p_neg = min(0.97, max(0.03, 0.5 + 0.45 * config.beta * math.tanh(z)))
                senti = (
                    negative[int(rng.integers(len(negative)))]
                    if rng.random() < p_neg
                    else positive[int(rng.integers(len(positive)))]
                )
                phrase = phrases[int(rng.integers(len(phrases)))]
                filler = [
                    FILLER_WORDS[int(rng.integers(len(FILLER_WORDS)))] for _ in range(4)
                ]
                text = (
                    f"The company faces {phrase} {filler[0]} this {filler[1]}. "
                    f"Coverage calls the {filler[2]} {senti}. "
                    f"Desk assigns grade{band} grade{band} grade{band} {filler[3]}."
                )
                day = config.start + timedelta(days=7 * t + int(rng.integers(5)))
                stamp = datetime.combine(
                    day,
                    time(
                        hour=9 + int(rng.integers(8)),
                        minute=int(rng.integers(60)),
                        second=int(rng.integers(60)),
                        tzinfo=timezone.utc,
                    ),
                )
                record = json.dumps(
                    {
                        "id": news_id,
                        "timestamp": stamp.strftime("%Y-%m-%dT%H:%M:%SZ"),
                        "text": text,
                        "tickers": [ticker],
                    },
                    sort_keys=True,
                    separators=(",", ":"),
                )
                news_records.append((stamp, news_id, record))
            ids[(ticker, t)] = tuple(emitted)

    news_records.sort(key=lambda r: (r[0], r[1]))
    ticker_rows = [f"{t},{t.lower()},SIM" for t in tickers]
    return SimData(
        news_jsonl="".join(r[2] + "\n" for r in news_records),
        prices_csv="date,ticker,close\n" + "\n".join(price_rows) + "\n",
        tickers_csv="ticker,alias,market\n" + "\n".join(ticker_rows) + "\n",
        truth=SimTruth(latent_vol=latent, news_ids=ids),
        config=config,
    )
