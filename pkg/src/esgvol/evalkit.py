"""Forecast error metrics, quintile portfolio construction, and report files.

Forecast quality is summarized by RMSE and MAE on held-out periods, for both
the full fusion model and the sentiment-only baseline. The portfolio view
ranks stocks by predicted volatility each period, splits them into quintiles
(bucket 4 = highest predicted risk), and measures realized equal-weight
returns over 1- or 2-period holdings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Mapping, Optional, Sequence

import numpy as np

from .market import Example
from .model import ModelConfig, PosteriorEnsemble, SamplerConfig, sample_posterior

N_QUINTILES = 5


def rmse_mae(preds: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """(root-mean-square error, mean absolute error) over (v_hat, v_true) pairs."""
    if len(preds) == 0:
        raise ValueError("no predictions to score")
    err = np.array([v_hat - v_true for v_hat, v_true in preds])
    return float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err)))


@dataclass(frozen=True)
class MetricReport:
    market: str
    horizon: int
    models: dict[str, tuple[float, float, int]]  # name -> (rmse, mae, n)


def senti_baseline_train(
    train: Sequence[Example],
    mcfg: ModelConfig,
    scfg: SamplerConfig,
    validation: Sequence[Example] = (),
    log_sink: Optional[IO[str]] = None,
) -> PosteriorEnsemble:
    """Train the sentiment-only ablation: same pipeline, embedding branch removed."""
    from dataclasses import replace

    return sample_posterior(
        train, replace(mcfg, use_embedding=False), scfg, validation, log_sink
    )


def quintile_split(preds: Sequence[tuple[str, float]]) -> list[list[str]]:
    """Partition tickers into 5 buckets by ascending predicted volatility.

    Ties break by ticker string. Sizes are as equal as possible; when n is
    not divisible by 5 the first (lowest-volatility) buckets take the extra
    members. Bucket 4 holds the highest predictions.
    """
    if len(preds) < N_QUINTILES:
        raise ValueError(f"need at least {N_QUINTILES} tickers, got {len(preds)}")
    ranked = [t for t, _ in sorted(preds, key=lambda p: (p[1], p[0]))]
    base, extra = divmod(len(ranked), N_QUINTILES)
    buckets: list[list[str]] = []
    idx = 0
    for q in range(N_QUINTILES):
        size = base + (1 if q < extra else 0)
        buckets.append(ranked[idx : idx + size])
        idx += size
    return buckets


@dataclass(frozen=True)
class QuintileRow:
    period: int
    quintile: int
    mean_return: float
    std_return: float
    n: int


@dataclass(frozen=True)
class QuintileReport:
    holding: int
    rows: tuple[QuintileRow, ...]
    avg_return: tuple[float, ...]  # across-period mean of period means, per quintile
    pooled_std: tuple[float, ...]  # population std of pooled member returns, per quintile
    dropped: int  # members without a full chain of holding returns


def holding_return(
    returns: Mapping[int, float], start: int, holding: int
) -> Optional[float]:
    """Compounded simple return over periods start+1 .. start+holding."""
    total = 1.0
    for h in range(1, holding + 1):
        r = returns.get(start + h)
        if r is None:
            return None
        total *= 1.0 + r
    return total - 1.0


def portfolio_stats(
    buckets_by_period: Mapping[int, Sequence[Sequence[str]]],
    returns_by_ticker: Mapping[str, Mapping[int, float]],
    holding: int,
) -> QuintileReport:
    """Equal-weight realized returns of each quintile over the holding window.

    ``buckets_by_period`` maps a formation period t to its 5 buckets; member
    returns compound the following ``holding`` period returns. Members with
    a missing return are dropped and counted.
    """
    if holding < 1:
        raise ValueError("holding must be >= 1")
    rows: list[QuintileRow] = []
    pooled: list[list[float]] = [[] for _ in range(N_QUINTILES)]
    period_means: list[list[float]] = [[] for _ in range(N_QUINTILES)]
    dropped = 0
    for t in sorted(buckets_by_period):
        buckets = buckets_by_period[t]
        if len(buckets) != N_QUINTILES:
            raise ValueError(f"period {t}: expected {N_QUINTILES} buckets")
        for q, members in enumerate(buckets):
            rets = []
            for ticker in members:
                r = holding_return(returns_by_ticker.get(ticker, {}), t, holding)
                if r is None:
                    dropped += 1
                else:
                    rets.append(r)
            if not rets:
                continue
            arr = np.array(rets)
            rows.append(
                QuintileRow(
                    period=t,
                    quintile=q,
                    mean_return=float(arr.mean()),
                    std_return=float(arr.std()),
                    n=len(rets),
                )
            )
            pooled[q].extend(rets)
            period_means[q].append(float(arr.mean()))
    avg = tuple(float(np.mean(m)) if m else float("nan") for m in period_means)
    std = tuple(float(np.std(p)) if p else float("nan") for p in pooled)
    return QuintileReport(
        holding=holding, rows=tuple(rows), avg_return=avg, pooled_std=std, dropped=dropped
    )


def write_metrics_csv(reports: Sequence[MetricReport], sink: IO[str]) -> None:
    sink.write("market,horizon,model,rmse,mae,n\n")
    for report in sorted(reports, key=lambda r: (r.market, r.horizon)):
        for name in sorted(report.models):
            rmse, mae, n = report.models[name]
            sink.write(f"{report.market},{report.horizon},{name},{rmse!r},{mae!r},{n}\n")


def read_metrics_csv(source: IO[str]) -> list[MetricReport]:
    import csv

    grouped: dict[tuple[str, int], dict[str, tuple[float, float, int]]] = {}
    for row in csv.DictReader(source):
        key = (row["market"], int(row["horizon"]))
        grouped.setdefault(key, {})[row["model"]] = (
            float(row["rmse"]),
            float(row["mae"]),
            int(row["n"]),
        )
    return [
        MetricReport(market=market, horizon=horizon, models=models)
        for (market, horizon), models in sorted(grouped.items())
    ]


def write_quintiles_csv(reports: Sequence[QuintileReport], sink: IO[str]) -> None:
    sink.write("period,quintile,holding,mean_return,std_return,n\n")
    for report in sorted(reports, key=lambda r: r.holding):
        for row in report.rows:
            sink.write(
                f"{row.period},{row.quintile},{report.holding},"
                f"{row.mean_return!r},{row.std_return!r},{row.n}\n"
            )


def write_plotdata_json(reports: Sequence[QuintileReport], sink: IO[str]) -> None:
    """Per-quintile summary series usable by any plotting tool."""
    series = {}
    for report in sorted(reports, key=lambda r: r.holding):
        series[f"avg_return_h{report.holding}"] = {
            str(q): report.avg_return[q] for q in range(N_QUINTILES)
        }
        series[f"return_std_h{report.holding}"] = {
            str(q): report.pooled_std[q] for q in range(N_QUINTILES)
        }
    sink.write(json.dumps(series, sort_keys=True, indent=2) + "\n")


def emit_report(
    metric_reports: Sequence[MetricReport],
    quintile_reports: Sequence[QuintileReport],
    sink_dir: str | Path,
) -> list[Path]:
    """Write metrics.csv, quintiles.csv, and plotdata.json with stable ordering."""
    sink_dir = Path(sink_dir)
    sink_dir.mkdir(parents=True, exist_ok=True)
    metrics = sink_dir / "metrics.csv"
    quintiles = sink_dir / "quintiles.csv"
    plotdata = sink_dir / "plotdata.json"
    with metrics.open("w") as fh:
        write_metrics_csv(metric_reports, fh)
    with quintiles.open("w") as fh:
        write_quintiles_csv(quintile_reports, fh)
    with plotdata.open("w") as fh:
        write_plotdata_json(quintile_reports, fh)
    return [metrics, quintiles, plotdata]
