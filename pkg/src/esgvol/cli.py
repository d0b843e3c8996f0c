"""Command-line pipeline: simgen -> extract -> featurize -> dataset -> train
-> predict -> evaluate -> backtest, driven by one JSON config file.

Every stage writes its artifacts plus a manifest (input/output hashes,
config hash, seed) into the working directory; downstream stages refuse to
run on inputs whose bytes no longer match the producing stage's manifest
unless --force is given. Nothing records wall-clock time, so identical
config and seed reproduce byte-identical artifacts.

Exit codes: 0 success, 1 runtime failure, 2 config/usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass, replace
from datetime import date, timedelta, timezone
from pathlib import Path
from typing import Optional, Sequence

from . import evalkit, features, market, model, newsflow, samples, simgen
from .hashing import fnv1a64

STAGES = (
    "simgen",
    "extract",
    "featurize",
    "dataset",
    "train",
    "predict",
    "evaluate",
    "backtest",
)

DEFAULT_CONFIG: dict = {
    "seed": 42,
    "workdir": None,
    "market_label": "sim",
    "paths": {
        "news": "news.jsonl",
        "prices": "prices.csv",
        "vocabulary": "vocabulary.csv",
        "lexicon": "lexicon.csv",
        "tickers": "tickers.csv",
        "external_embeddings": None,
    },
    "grid": {"frequency": "weekly", "start": None, "end": None},
    "window": 1,
    "deltas": [1, 2],
    "split": {"train_end": 89, "val_end": 111},
    "min_samples": 3,
    "topics_k": 15,
    "embedding": {"kind": "hashed", "dim": 256, "seed": 7},
    "model": {
        "width": 64,
        "encoder_blocks": 2,
        "fusion_blocks": 2,
        "activation": "tanh",
        "prior_sigma": 1.0,
        "noise_sigma_init": 0.5,
        "target_floor": 1e-8,
    },
    "sampler": {
        "eps0": 2e-6,
        "t_decay": 6000.0,
        "alpha": 0.995,
        "damping": 0.05,
        "burn_in": 16000,
        "thin": 200,
        "ensemble_size": 20,
        "batch_size": 128,
    },
    "quintiles": {"prediction_delta": 1, "holdings": [1, 2]},
    "simgen": {
        "n_stocks": 40,
        "n_periods": 150,
        "beta": 0.9,
        "news_rate": 3.0,
        "persistence": 0.8,
        "innovation_std": 0.35,
        "n_bands": 8,
        "start": "2020-01-06",
    },
}


class UsageError(Exception):
    """Configuration or invocation problem; exits with code 2."""


class StaleArtifactError(Exception):
    """An input artifact changed since its producing stage ran."""


@dataclass
class Context:
    config: dict
    workdir: Path
    seed: int
    force: bool = False
    strict: bool = False

    def path(self, key: str) -> Path:
        value = self.config["paths"].get(key)
        if value is None:
            raise UsageError(f"config paths.{key} is not set")
        p = Path(value)
        return p if p.is_absolute() else self.workdir / p

    def input_path(self, key: str) -> Path:
        p = self.path(key)
        if not p.exists():
            raise UsageError(f"missing {key} file: {p}")
        return p


def _merge(base: dict, override: dict, breadcrumb: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise UsageError(f"unknown config key {breadcrumb}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{breadcrumb}{key}.")
        else:
            out[key] = value
    return out


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return json.loads(json.dumps(DEFAULT_CONFIG))
    p = Path(path)
    if not p.exists():
        raise UsageError(f"missing config file: {p}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise UsageError(f"config {p} must hold a JSON object")
    return _merge(DEFAULT_CONFIG, user)


def resolve_workdir(args: argparse.Namespace, config: dict) -> Path:
    if args.workdir:
        return Path(args.workdir).resolve()
    if config.get("workdir"):
        base = Path(args.config).resolve().parent if args.config else Path.cwd()
        return (base / config["workdir"]).resolve()
    env = os.environ.get("E2R_WORKDIR")
    if env:
        return Path(env).resolve()
    raise UsageError("no working directory: pass --workdir, set workdir in config, or E2R_WORKDIR")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    scrubbed = {k: v for k, v in config.items() if k != "workdir"}
    return hashlib.sha256(
        json.dumps(scrubbed, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _manifest_key(ctx: Context, path: Path) -> str:
    try:
        return str(path.relative_to(ctx.workdir))
    except ValueError:
        return str(path)


def write_manifest(ctx: Context, stage: str, inputs: Sequence[Path], outputs: Sequence[Path], extra: Optional[dict] = None) -> None:
    manifest = {
        "stage": stage,
        "version": 1,
        "config_hash": config_hash(ctx.config),
        "seed": ctx.seed,
        "inputs": {_manifest_key(ctx, p): sha256_file(p) for p in inputs},
        "outputs": {_manifest_key(ctx, p): sha256_file(p) for p in outputs},
    }
    if extra:
        manifest["extra"] = extra
    target = ctx.workdir / f"{stage}.manifest.json"
    target.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def check_inputs(ctx: Context, paths: Sequence[Path]) -> None:
    """Refuse to consume artifacts whose bytes drifted from their manifests."""
    recorded: dict[str, tuple[str, str]] = {}
    for stage in STAGES:
        mpath = ctx.workdir / f"{stage}.manifest.json"
        if not mpath.exists():
            continue
        manifest = json.loads(mpath.read_text())
        for key, digest in manifest.get("outputs", {}).items():
            recorded[key] = (stage, digest)
    for path in paths:
        key = _manifest_key(ctx, path)
        if key not in recorded or not path.exists():
            continue
        stage, digest = recorded[key]
        if sha256_file(path) != digest:
            if ctx.force:
                print(f"warning: {key} changed since stage {stage!r} ran (--force given)")
            else:
                raise StaleArtifactError(
                    f"{key} changed since stage {stage!r} ran; rerun it or pass --force"
                )


def build_grid(ctx: Context) -> market.TimeGrid:
    grid_cfg = ctx.config["grid"]
    start, end = grid_cfg.get("start"), grid_cfg.get("end")
    if start and end:
        lo, hi = date.fromisoformat(start), date.fromisoformat(end)
    else:
        prices = market.load_prices(ctx.input_path("prices").read_text())
        days = [d for series in prices for d, _ in series.points]
        lo, hi = min(days), max(days)
    if grid_cfg["frequency"] == "weekly":
        return market.TimeGrid.weekly(lo, hi)
    if grid_cfg["frequency"] == "daily":
        return market.TimeGrid.daily(lo, hi)
    raise UsageError(f"unknown grid frequency {grid_cfg['frequency']!r}")


def _derived_seed(ctx: Context, tag: str) -> int:
    return fnv1a64(tag.encode("utf-8"), ctx.seed)


# --- stages -----------------------------------------------------------------


def cmd_simgen(ctx: Context) -> None:
    cfg = ctx.config["simgen"]
    sim_config = simgen.SimConfig(
        n_stocks=cfg["n_stocks"],
        n_periods=cfg["n_periods"],
        seed=ctx.seed,
        beta=cfg["beta"],
        news_rate=cfg["news_rate"],
        persistence=cfg["persistence"],
        innovation_std=cfg["innovation_std"],
        n_bands=cfg["n_bands"],
        start=date.fromisoformat(cfg["start"]),
    )
    data = simgen.generate(sim_config)
    ctx.workdir.mkdir(parents=True, exist_ok=True)
    outputs = {
        ctx.path("news"): data.news_jsonl,
        ctx.path("prices"): data.prices_csv,
        ctx.path("tickers"): data.tickers_csv,
        ctx.workdir / "truth.csv": data.truth.to_csv(),
        ctx.path("vocabulary"): samples.vocabulary_csv(),
        ctx.path("lexicon"): samples.lexicon_csv(),
    }
    for path, text in outputs.items():
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    write_manifest(ctx, "simgen", [], list(outputs))
    n_news = data.news_jsonl.count("\n")
    print(f"simgen: {sim_config.n_stocks} stocks x {sim_config.n_periods} periods, {n_news} news items")


def cmd_extract(ctx: Context) -> None:
    news_path = ctx.input_path("news")
    vocab_path = ctx.input_path("vocabulary")
    tickers_path = ctx.input_path("tickers")
    check_inputs(ctx, [news_path, vocab_path, tickers_path])
    vocab = newsflow.load_vocabulary(vocab_path.read_text())
    dictionary = newsflow.load_ticker_dictionary(tickers_path.read_text())
    with news_path.open("rb") as fh:
        items, errors = newsflow.parse_news_stream(fh, strict=ctx.strict)
    kept: list[newsflow.EsgNewsItem] = []
    for item in items:
        entry = newsflow.esg_filter(item, vocab)
        if entry is not None:
            kept.append(newsflow.with_tickers(entry, newsflow.link_tickers(item, dictionary)))
    filtered_path = ctx.workdir / "filtered.jsonl"
    topics_path = ctx.workdir / "topics.csv"
    with filtered_path.open("w") as fh:
        newsflow.write_filtered(kept, fh)
    with topics_path.open("w") as fh:
        fh.write("topic,count\n")
        if kept:
            stamps = [e.item.timestamp for e in kept]
            window = (min(stamps), max(stamps) + timedelta(seconds=1))
            hist = newsflow.topic_histogram(kept, window, k=ctx.config["topics_k"])
            for topic, count in hist.counts.items():
                fh.write(f"{topic},{count}\n")
    write_manifest(
        ctx,
        "extract",
        [news_path, vocab_path, tickers_path],
        [filtered_path, topics_path],
        extra={"parsed": len(items), "kept": len(kept), "parse_errors": len(errors)},
    )
    for err in errors:
        print(f"extract: line {err.line}: {err.cause}", file=sys.stderr)
    print(f"extract: {len(items)} items parsed, {len(kept)} ESG-matched, {len(errors)} errors")


def _embedding_provider(ctx: Context) -> features.HashedEmbedder | features.ExternalEmbeddings:
    emb = ctx.config["embedding"]
    if emb["kind"] == "hashed":
        return features.HashedEmbedder(dim=emb["dim"], seed=emb["seed"])
    if emb["kind"] == "external":
        path = ctx.input_path("external_embeddings")
        with path.open("rb") as fh:
            return features.ExternalEmbeddings(features.load_external_embeddings(fh))
    raise UsageError(f"unknown embedding kind {emb['kind']!r}")


def cmd_featurize(ctx: Context) -> None:
    filtered_path = ctx.workdir / "filtered.jsonl"
    if not filtered_path.exists():
        raise UsageError(f"missing filtered news (run extract first): {filtered_path}")
    lexicon_path = ctx.input_path("lexicon")
    check_inputs(ctx, [filtered_path, lexicon_path])
    entries = []
    with filtered_path.open() as fh:
        entries = newsflow.read_filtered(fh)
    lexicon = features.load_lexicon(lexicon_path.read_text())
    provider = _embedding_provider(ctx)
    grid = build_grid(ctx)
    grouped = features.group_windows(entries, grid.boundaries, w=ctx.config["window"])
    rows = [
        features.transform_window(items, ticker, t, lexicon, provider)
        for (ticker, t), items in grouped.items()
    ]
    out_path = ctx.workdir / "features.jsonl"
    with out_path.open("w") as fh:
        features.write_features(rows, fh)
    write_manifest(
        ctx,
        "featurize",
        [filtered_path, lexicon_path],
        [out_path],
        extra={"windows": len(rows), "grid_periods": len(grid.boundaries)},
    )
    print(f"featurize: {len(rows)} (ticker, period) windows over {len(grid.boundaries)} periods")


def cmd_dataset(ctx: Context) -> None:
    features_path = ctx.workdir / "features.jsonl"
    if not features_path.exists():
        raise UsageError(f"missing features (run featurize first): {features_path}")
    prices_path = ctx.input_path("prices")
    check_inputs(ctx, [features_path, prices_path])
    with features_path.open() as fh:
        rows = features.read_features(fh)
    prices = market.load_prices(prices_path.read_text())
    grid = build_grid(ctx)
    split = (ctx.config["split"]["train_end"], ctx.config["split"]["val_end"])
    outputs = []
    extra: dict = {"grid": [b.isoformat() for b in grid.boundaries], "split": list(split)}
    for delta in ctx.config["deltas"]:
        targets = []
        for series in prices:
            returns = market.simple_returns(series)
            for t in range(len(grid.boundaries) - delta):
                target = market.forward_vol_target(
                    returns, grid, t, delta, min_samples=ctx.config["min_samples"]
                )
                if target is not None:
                    targets.append(target)
        dataset = market.build_dataset(rows, targets, split, grid)
        out = ctx.workdir / f"dataset_d{delta}.jsonl"
        with out.open("w") as fh:
            market.write_dataset(dataset, fh)
        outputs.append(out)
        counts = {
            label: len(dataset.subset(label)) for label in ("train", "validation", "test")
        }
        extra[f"delta_{delta}"] = {
            "examples": len(dataset.examples),
            "dropped_features": dataset.dropped,
            "universe": len(dataset.universe),
            **counts,
        }
        print(
            f"dataset d{delta}: {len(dataset.examples)} examples "
            f"({counts['train']}/{counts['validation']}/{counts['test']} train/val/test, "
            f"{dataset.dropped} dropped)"
        )
    write_manifest(ctx, "dataset", [features_path, prices_path], outputs, extra=extra)


def _model_config(ctx: Context, dataset: market.Dataset) -> model.ModelConfig:
    first = dataset.examples[0]
    cfg = ctx.config["model"]
    return model.ModelConfig(
        sent_dim=first.features.s_pooled.shape[0],
        embed_dim=first.features.e_pooled.shape[0],
        width=cfg["width"],
        encoder_blocks=cfg["encoder_blocks"],
        fusion_blocks=cfg["fusion_blocks"],
        activation=cfg["activation"],
        prior_sigma=cfg["prior_sigma"],
        noise_sigma_init=cfg["noise_sigma_init"],
        target_floor=cfg["target_floor"],
    )


def _sampler_config(ctx: Context, tag: str) -> model.SamplerConfig:
    cfg = ctx.config["sampler"]
    return model.SamplerConfig(
        eps0=cfg["eps0"],
        t_decay=cfg["t_decay"],
        alpha=cfg["alpha"],
        damping=cfg["damping"],
        burn_in=cfg["burn_in"],
        thin=cfg["thin"],
        ensemble_size=cfg["ensemble_size"],
        batch_size=cfg["batch_size"],
        seed=_derived_seed(ctx, tag),
    )


def cmd_train(ctx: Context, senti: bool = False) -> None:
    for delta in ctx.config["deltas"]:
        dataset_path = ctx.workdir / f"dataset_d{delta}.jsonl"
        if not dataset_path.exists():
            raise UsageError(f"missing dataset (run dataset first): {dataset_path}")
        check_inputs(ctx, [dataset_path])
        with dataset_path.open() as fh:
            dataset = market.read_dataset(fh)
        train = dataset.subset("train")
        validation = dataset.subset("validation")
        dataset_sha = sha256_file(dataset_path)
        mcfg = _model_config(ctx, dataset)
        jobs = [("fusion", mcfg)]
        if senti:
            jobs.append(("senti", replace(mcfg, use_embedding=False)))
        outputs = []
        for name, job_cfg in jobs:
            scfg = _sampler_config(ctx, f"train:d{delta}:{name}")
            log_path = ctx.workdir / f"trainlog_d{delta}_{name}.csv"
            with log_path.open("w") as log_fh:
                ensemble = model.sample_posterior(
                    train, job_cfg, scfg, validation=validation, log_sink=log_fh
                )
            ensemble = replace(
                ensemble,
                provenance={**ensemble.provenance, "dataset_sha256": dataset_sha},
            )
            out = ctx.workdir / f"ensemble_d{delta}_{name}.bin"
            model.save_ensemble(ensemble, out)
            outputs += [out, out.with_name(out.name + ".manifest.json"), log_path]
            print(
                f"train d{delta} {name}: {len(train)} train examples, "
                f"{len(ensemble.samples)} posterior samples -> {out.name}"
            )
        write_manifest(ctx, "train", [dataset_path], outputs, extra={"delta": delta, "senti": senti})


def _predictions_path(ctx: Context, delta: int, name: str) -> Path:
    return ctx.workdir / f"predictions_d{delta}_{name}.csv"


def cmd_predict(ctx: Context) -> None:
    inputs, outputs = [], []
    for delta in ctx.config["deltas"]:
        dataset_path = ctx.workdir / f"dataset_d{delta}.jsonl"
        if not dataset_path.exists():
            raise UsageError(f"missing dataset: {dataset_path}")
        with dataset_path.open() as fh:
            dataset = market.read_dataset(fh)
        for name in ("fusion", "senti"):
            ens_path = ctx.workdir / f"ensemble_d{delta}_{name}.bin"
            if not ens_path.exists():
                if name == "fusion":
                    raise UsageError(f"missing ensemble (run train first): {ens_path}")
                continue
            check_inputs(ctx, [dataset_path, ens_path])
            ensemble = model.load_ensemble(ens_path)
            ordered = sorted(
                dataset.examples, key=lambda ex: (ex.target.ticker, ex.target.t)
            )
            rows = [ex.features for ex in ordered]
            preds = model.predict_many(ensemble, rows)
            out = _predictions_path(ctx, delta, name)
            with out.open("w") as fh:
                fh.write("ticker,t,split,v_true,v_hat,ensemble_std\n")
                for ex, pred in zip(ordered, preds):
                    fh.write(
                        f"{pred.ticker},{pred.t},{ex.split},{ex.target.v!r},"
                        f"{pred.v_hat!r},{pred.ensemble_std!r}\n"
                    )
            inputs += [dataset_path, ens_path]
            outputs.append(out)
            print(f"predict d{delta} {name}: {len(preds)} rows -> {out.name}")
    write_manifest(ctx, "predict", inputs, outputs)


def _read_predictions(path: Path) -> list[dict]:
    import csv

    with path.open() as fh:
        return [
            {
                "ticker": row["ticker"],
                "t": int(row["t"]),
                "split": row["split"],
                "v_true": float(row["v_true"]),
                "v_hat": float(row["v_hat"]),
                "ensemble_std": float(row["ensemble_std"]),
            }
            for row in csv.DictReader(fh)
        ]


def cmd_evaluate(ctx: Context) -> None:
    reports = []
    inputs = []
    for delta in ctx.config["deltas"]:
        models: dict[str, tuple[float, float, int]] = {}
        for name in ("fusion", "senti"):
            path = _predictions_path(ctx, delta, name)
            if not path.exists():
                if name == "fusion":
                    raise UsageError(f"missing predictions (run predict first): {path}")
                continue
            check_inputs(ctx, [path])
            rows = [r for r in _read_predictions(path) if r["split"] == "test"]
            if not rows:
                raise UsageError(f"no test-split rows in {path}")
            rmse, mae = evalkit.rmse_mae([(r["v_hat"], r["v_true"]) for r in rows])
            models[name] = (rmse, mae, len(rows))
            inputs.append(path)
        reports.append(
            evalkit.MetricReport(market=ctx.config["market_label"], horizon=delta, models=models)
        )
    out = ctx.workdir / "metrics.csv"
    with out.open("w") as fh:
        evalkit.write_metrics_csv(reports, fh)
    write_manifest(ctx, "evaluate", inputs, [out])
    for report in reports:
        for name, (rmse, mae, n) in sorted(report.models.items()):
            print(f"evaluate d{report.horizon} {name}: rmse={rmse:.6f} mae={mae:.6f} n={n}")


def cmd_backtest(ctx: Context) -> None:
    delta = ctx.config["quintiles"]["prediction_delta"]
    pred_path = _predictions_path(ctx, delta, "fusion")
    if not pred_path.exists():
        raise UsageError(f"missing predictions (run predict first): {pred_path}")
    prices_path = ctx.input_path("prices")
    check_inputs(ctx, [pred_path, prices_path])
    rows = [r for r in _read_predictions(pred_path) if r["split"] == "test"]
    grid = build_grid(ctx)
    prices = market.load_prices(prices_path.read_text())
    returns_by_ticker = {s.ticker: market.period_returns(s, grid) for s in prices}
    by_period: dict[int, list[tuple[str, float]]] = {}
    for r in rows:
        by_period.setdefault(r["t"], []).append((r["ticker"], r["v_hat"]))
    reports = []
    for holding in ctx.config["quintiles"]["holdings"]:
        buckets = {
            t: evalkit.quintile_split(preds)
            for t, preds in sorted(by_period.items())
            if len(preds) >= evalkit.N_QUINTILES and t + holding < len(grid.boundaries)
        }
        if not buckets:
            raise UsageError("no test periods with enough tickers to form quintiles")
        reports.append(evalkit.portfolio_stats(buckets, returns_by_ticker, holding))
    quintiles_path = ctx.workdir / "quintiles.csv"
    plot_path = ctx.workdir / "plotdata.json"
    with quintiles_path.open("w") as fh:
        evalkit.write_quintiles_csv(reports, fh)
    with plot_path.open("w") as fh:
        evalkit.write_plotdata_json(reports, fh)
    write_manifest(ctx, "backtest", [pred_path, prices_path], [quintiles_path, plot_path])
    for report in reports:
        tagged = ", ".join(f"q{q}={report.pooled_std[q]:.4f}" for q in range(evalkit.N_QUINTILES))
        print(f"backtest holding={report.holding}: pooled return std {tagged}")


def cmd_pipeline(ctx: Context) -> None:
    cmd_simgen(ctx)
    cmd_extract(ctx)
    cmd_featurize(ctx)
    cmd_dataset(ctx)
    cmd_train(ctx, senti=True)
    cmd_predict(ctx)
    cmd_evaluate(ctx)
    cmd_backtest(ctx)


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esgvol",
        description="ESG news to volatility forecasting pipeline",
    )
    parser.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--workdir", help="working directory for artifacts")
    parser.add_argument("--force", action="store_true", help="ignore stale-manifest errors")
    parser.add_argument("--strict", action="store_true", help="abort on the first bad news line")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("pipeline",):
        cmd = sub.add_parser(name, help=f"run the {name} stage")
        if name == "train":
            cmd.add_argument("--senti", action="store_true", help="also train the sentiment-only baseline")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config["seed"] = args.seed
        workdir = resolve_workdir(args, config)
        workdir.mkdir(parents=True, exist_ok=True)
        ctx = Context(
            config=config,
            workdir=workdir,
            seed=config["seed"],
            force=args.force,
            strict=args.strict,
        )
        if args.command == "pipeline":
            cmd_pipeline(ctx)
        elif args.command == "train":
            cmd_train(ctx, senti=args.senti)
        else:
            {
                "simgen": cmd_simgen,
                "extract": cmd_extract,
                "featurize": cmd_featurize,
                "dataset": cmd_dataset,
                "predict": cmd_predict,
                "evaluate": cmd_evaluate,
                "backtest": cmd_backtest,
            }[args.command](ctx)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StaleArtifactError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
