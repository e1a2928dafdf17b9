"""Command-line entry point: ingest, train, predict, backtest, report, compare.

Every command reads the same JSON experiment config and writes under its
output directory. ``run_manifest.json`` there records the config echo,
the seed and a sha256 for every artifact the commands have written.

Exit codes: 0 success, 2 input error, 3 missing prerequisite, 4 numerical
divergence. ``HYBRIDFOLIO_LOG`` sets the log level and nothing else.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import kernels
from .backtest import (REPORTED_STRATEGIES, StrategySpec, benchmark_reference_rows, plot_comparison,
                       reported_consistency, write_series_csv, write_table_csv, write_table_json)
from .config import ExperimentConfig, load_config
from .data import (PriceTable, ReturnMatrix, SplitPlan, apply_scaler, chronological_split, fit_scaler,
                   ingest_prices, load_manifest, log_returns, resample_weekly)
from .env import write_weights_csv
from .errors import DataError, DivergenceError, PrerequisiteError
from .forecaster import load_checkpoint, predict_rows, save_checkpoint, train_forecaster
from .pipeline import env_start, evaluate_strategies, train_allocator
from .ppo import load_policy, save_policy, write_curves_csv

log = logging.getLogger("hybridfolio")

RUN_MANIFEST = "run_manifest.json"
RUN_SCHEMA = "hybridfolio.run"


# ---------------------------------------------------------------- artifact bookkeeping

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class RunManifest:
    """Per-stage artifact hashes, persisted after every command."""

    def __init__(self, out_dir: Path, config: ExperimentConfig):
        self.out_dir = out_dir
        self.path = out_dir / RUN_MANIFEST
        doc = json.loads(self.path.read_text()) if self.path.exists() else {}
        self.stages: dict[str, dict] = doc.get("stages", {})
        self.archives: dict[str, dict] = doc.get("archives", {})
        self.config = config

    def record(self, stage: str, paths: list[Path], extra: dict | None = None) -> None:
        arts = {p.relative_to(self.out_dir).as_posix(): sha256_file(p) for p in sorted(paths)}
        entry = {"artifacts": arts}
        if extra:
            entry.update(extra)
        self.stages[stage] = entry

    def archive(self, stage: str, new_name: str) -> None:
        old = self.stages.pop(stage, None)
        if old is None:
            return
        prefix = f"{stage}/"
        arts = {new_name + "/" + k[len(prefix):] if k.startswith(prefix) else k: v
                for k, v in old["artifacts"].items()}
        self.archives[new_name] = {"artifacts": arts}

    def save(self) -> None:
        doc = {
            "schema": RUN_SCHEMA,
            "version": 1,
            "seed": self.config.seed,
            "kernel_backend": kernels.BACKEND,
            "config": self.config.echo(),
            "stages": dict(sorted(self.stages.items())),
            "archives": dict(sorted(self.archives.items())),
        }
        self.path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


def archive_dir(path: Path) -> Path | None:
    """Move a non-empty ``path`` aside to ``<name>.prev-<n>``; returns the new location."""
    if not path.exists() or not any(path.iterdir()):
        return None
    n = 1
    while (target := path.with_name(f"{path.name}.prev-{n}")).exists():
        n += 1
    path.rename(target)
    log.warning("archived existing %s to %s", path, target)
    return target


# ---------------------------------------------------------------- dataset artifact

def _write_frame_csv(path: Path, dates, columns: list[str], values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *columns])
        for d, row in zip(dates, values):
            w.writerow([pd.Timestamp(d).strftime("%Y-%m-%d"), *[repr(float(x)) for x in row]])


def _read_frame_csv(path: Path) -> tuple[pd.DatetimeIndex, list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "date":
        raise DataError(f"{path}:1: expected a 'date,...' header")
    cols = rows[0][1:]
    try:
        values = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return pd.DatetimeIndex([r[0] for r in rows[1:]]), cols, values.reshape(len(rows) - 1, len(cols))


class Dataset:
    def __init__(self, prices: PriceTable, returns: ReturnMatrix, split: SplitPlan, classes: list[str]):
        self.prices, self.returns, self.split, self.classes = prices, returns, split, classes

    @property
    def assets(self) -> list[str]:
        return list(self.returns.assets)


def _dataset_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "dataset"


def write_dataset(cfg: ExperimentConfig, ds: Dataset) -> list[Path]:
    d = _dataset_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    files = [d / "prices.csv", d / "returns.csv", d / "split.json", d / "assets.json"]
    _write_frame_csv(files[0], ds.prices.timestamps, ds.assets, ds.prices.prices)
    _write_frame_csv(files[1], ds.returns.timestamps, ds.assets, ds.returns.returns)
    files[2].write_text(json.dumps(ds.split.to_dict(), indent=2) + "\n")
    files[3].write_text(json.dumps({"assets": ds.assets, "classes": ds.classes}, indent=2) + "\n")
    h = hashlib.sha256()
    for f in files:
        h.update(f.read_bytes())
    info = d / "dataset.json"
    info.write_text(json.dumps({"hash": h.hexdigest(), "n_assets": len(ds.assets),
                                "n_rows": len(ds.returns), "files": [f.name for f in files]}, indent=2) + "\n")
    return files + [info]


def read_dataset(cfg: ExperimentConfig) -> Dataset:
    d = _dataset_dir(cfg)
    if not (d / "dataset.json").exists():
        raise PrerequisiteError(f"missing prerequisite: dataset ({d}); run the 'ingest' stage first")
    ts, assets, P = _read_frame_csv(d / "prices.csv")
    rts, _, R = _read_frame_csv(d / "returns.csv")
    split = SplitPlan.from_dict(json.loads((d / "split.json").read_text()))
    meta = json.loads((d / "assets.json").read_text())
    return Dataset(PriceTable(assets, ts, P), ReturnMatrix(assets, rts, R), split, meta["classes"])


def dataset_hash(cfg: ExperimentConfig) -> str:
    return json.loads((_dataset_dir(cfg) / "dataset.json").read_text())["hash"]


# ---------------------------------------------------------------- forecasts

def _forecast_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "forecaster"


def write_forecasts(cfg: ExperimentConfig, ds: Dataset, params: list) -> list[Path]:
    d = _forecast_dir(cfg)
    L = cfg.forecaster.lookback
    lo, hi = ds.split.train_range
    start, stop = ds.split.test_range
    train = ds.returns.rows(lo, hi)
    scaler = fit_scaler(train)
    if start < L:
        raise DataError(f"insufficient history: test starts at row {start}, lookback is {L}")
    insample = predict_rows(params, ds.returns, scaler, np.arange(L, hi), L)
    wf = predict_rows(params, ds.returns, scaler, np.arange(start, stop), L)
    out = [d / "forecasts.csv", d / "forecasts_insample.csv", d / "scaler.json"]
    _write_frame_csv(out[0], wf.timestamps, wf.assets, wf.scores)
    _write_frame_csv(out[1], insample.timestamps, insample.assets, insample.scores)
    out[2].write_text(json.dumps(scaler.to_dict(), indent=2) + "\n")
    return out


def read_forecast_grid(cfg: ExperimentConfig, ds: Dataset) -> np.ndarray:
    """(T, N) score grid: in-sample rows over training, walk-forward rows over the test range."""
    d = _forecast_dir(cfg)
    paths = [d / "forecasts_insample.csv", d / "forecasts.csv"]
    for p in paths:
        if not p.exists():
            raise PrerequisiteError(f"missing prerequisite: forecasts ({p}); run 'train --stage forecaster' first")
    grid = np.zeros_like(ds.returns.returns)
    pos = {t: i for i, t in enumerate(ds.returns.timestamps)}
    for p in paths:
        ts, cols, vals = _read_frame_csv(p)
        if cols != ds.assets:
            raise DataError(f"{p}: asset columns {cols} do not match the dataset {ds.assets}")
        try:
            rows = [pos[t] for t in ts]
        except KeyError as exc:
            raise DataError(f"{p}: date {exc.args[0]} not in the dataset") from exc
        grid[rows] = vals
    return grid


def _checkpoint_path(cfg: ExperimentConfig, asset: str) -> Path:
    return _forecast_dir(cfg) / f"lstm_{asset}.json"


def _policy_path(cfg: ExperimentConfig, k: int) -> Path:
    return cfg.out_dir / "allocator" / f"ppo_portfolio_weekly_k{k}.json"


def _load_forecasters(cfg: ExperimentConfig, ds: Dataset) -> list:
    params = []
    for a in ds.assets:
        p = _checkpoint_path(cfg, a)
        if not p.exists():
            raise PrerequisiteError(f"missing prerequisite: forecaster checkpoint {p}; "
                                    "run 'train --stage forecaster' first")
        params.append(load_checkpoint(p)[1])
    return params


def _load_policies(cfg: ExperimentConfig, ks) -> dict:
    out = {}
    for k in sorted(set(ks)):
        p = _policy_path(cfg, k)
        if not p.exists():
            raise PrerequisiteError(f"missing prerequisite: allocator checkpoint {p}; "
                                    "run 'train --stage allocator' first")
        out[k] = load_policy(p)[0]
    return out


# ---------------------------------------------------------------- commands

def cmd_ingest(cfg: ExperimentConfig, manifest: RunManifest) -> int:
    mpath = cfg.resolve(cfg.manifest)
    entries = load_manifest(mpath)
    prices = ingest_prices(entries, cfg.resolve(cfg.cache_dir))
    if cfg.resample:
        prices = resample_weekly(prices, cfg.anchor)
    returns = log_returns(prices)
    split = chronological_split(len(returns), cfg.split_ratio)
    classes = [str(e.get("class", "")) for e in entries]
    files = write_dataset(cfg, Dataset(prices, returns, split, classes))
    h = dataset_hash(cfg)
    manifest.record("ingest", files, {"dataset_hash": h})
    print(f"dataset: {len(returns.assets)} assets, {len(returns)} rows, "
          f"train {split.n_train} / test {split.n_test}, hash {h[:16]}")
    return 0


def cmd_train_forecaster(cfg: ExperimentConfig, manifest: RunManifest) -> None:
    ds = read_dataset(cfg)
    d = _forecast_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    lo, hi = ds.split.train_range
    train = ds.returns.rows(lo, hi)
    z = apply_scaler(fit_scaler(train), train.returns)
    params, files = [], []
    for i, a in enumerate(ds.assets):
        fc = cfg.forecaster_for(i)
        try:
            p, hist = train_forecaster(z[:, i], fc)
        except DivergenceError as exc:
            raise DivergenceError(f"forecaster for {a}: {exc}") from exc
        path = _checkpoint_path(cfg, a)
        save_checkpoint(path, a, p, fc, hist)
        files.append(path)
        params.append(p)
        log.info("forecaster %s: best epoch %d, val %.6g", a, hist.best_epoch,
                 hist.val_loss[hist.best_epoch] if hist.val_loss else float("nan"))
    files += write_forecasts(cfg, ds, params)
    manifest.record("forecaster", files, {"dataset_hash": dataset_hash(cfg)})
    print(f"forecaster: {len(ds.assets)} checkpoints, forecasts for {ds.split.n_test} test rows")


def cmd_predict(cfg: ExperimentConfig, manifest: RunManifest) -> int:
    ds = read_dataset(cfg)
    params = _load_forecasters(cfg, ds)
    files = write_forecasts(cfg, ds, params)
    stage = manifest.stages.get("forecaster", {"artifacts": {}})
    ckpts = [cfg.out_dir / k for k in stage["artifacts"] if k.endswith(".json") and "/lstm_" in k]
    manifest.record("forecaster", ckpts + files, {"dataset_hash": dataset_hash(cfg)})
    print(f"forecasts written to {files[0]}")
    return 0


def cmd_train_allocator(cfg: ExperimentConfig, manifest: RunManifest) -> None:
    ds = read_dataset(cfg)
    scores = read_forecast_grid(cfg, ds) if cfg.allocator_scores else None
    start = env_start(cfg.env, cfg.forecaster.lookback)
    d = cfg.out_dir / "allocator"
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for k in cfg.k_values:
        env_cfg = cfg.env_for(k)
        if k > len(ds.assets):
            raise DataError(f"K={k} exceeds the {len(ds.assets)} assets in the dataset")
        ppo_cfg = cfg.ppo_for(k)
        policy = train_allocator(ds.returns.returns, ds.split, env_cfg, ppo_cfg, k, scores, start)
        path = _policy_path(cfg, k)
        save_policy(path, policy, ppo_cfg, {**env_cfg.__dict__, "with_scores": cfg.allocator_scores})
        curves = d / f"curves_k{k}.csv"
        write_curves_csv(curves, policy.curves)
        files += [path, curves]
        last = policy.curves[-1]["mean_reward"] if policy.curves else float("nan")
        log.info("allocator K=%d: %d updates, last mean reward %.6g", k, len(policy.curves), last)
    manifest.record("allocator", files, {"dataset_hash": dataset_hash(cfg)})
    print(f"allocator: {len(cfg.k_values)} policies (K = {', '.join(map(str, cfg.k_values))})")


def cmd_train(cfg: ExperimentConfig, manifest: RunManifest, stage: str) -> int:
    if stage in ("forecaster", "all"):
        cmd_train_forecaster(cfg, manifest)
        manifest.save()
    if stage in ("allocator", "all"):
        cmd_train_allocator(cfg, manifest)
    return 0


def _paper_row_inventory_complete(specs: list[StrategySpec]) -> bool:
    labels = {s.label for s in specs}
    return all(name in labels for name, *_ in REPORTED_STRATEGIES)


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in label).strip("_").lower()


def _run_comparison(cfg: ExperimentConfig, manifest: RunManifest, specs: list[StrategySpec], stage: str) -> Path:
    ds = read_dataset(cfg)
    needs_scores = any(s.kind in ("hybrid", "signal-only") for s in specs)
    scores = read_forecast_grid(cfg, ds) if needs_scores else None
    policies = _load_policies(cfg, [s.top_k for s in specs if s.kind in ("hybrid", "policy-only")])

    out = cfg.out_dir / stage
    moved = archive_dir(out)
    if moved is not None:
        manifest.archive(stage, moved.name)
    out.mkdir(parents=True)

    comp = evaluate_strategies(specs, ds.returns.returns, ds.split, scores, policies, policies, cfg.env,
                               ds.assets, ds.classes, cfg.rf, cfg.periods_per_year, ds.returns.timestamps,
                               env_for_k=cfg.env_for)
    table = comp.table()
    flag = cfg.reported_benchmarks
    if flag is True or (flag == "auto" and _paper_row_inventory_complete(specs)):
        table += benchmark_reference_rows()

    files = [out / "table.csv", out / "table.json"]
    write_table_csv(files[0], table)
    write_table_json(files[1], table)
    dates = ds.returns.timestamps[np.arange(*ds.split.test_range)]
    labels = [r.label for r in comp.results]
    eq, dd = out / "equity.csv", out / "drawdowns.csv"
    write_series_csv(eq, dates, {lab: r.curve.equity for lab, r in zip(labels, comp.results)})
    write_series_csv(dd, dates, {lab: r.curve.drawdowns for lab, r in zip(labels, comp.results)})
    mw = out / "mean_weights.csv"
    with open(mw, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", *ds.assets])
        for r in comp.results:
            w.writerow([r.label, *[f"{x:.10f}" for x in r.mean_weights]])
    files += [eq, dd, mw]
    for i, r in enumerate(comp.results):
        p = out / f"weights_{i:02d}_{_slug(r.label)}.csv"
        write_weights_csv(p, dates, ds.assets, r.weights.weights)
        files.append(p)
    files += plot_comparison(comp, out, ds.assets)
    summary = out / "summary.txt"
    summary.write_text(format_table(table, title=f"{stage}: test rows {ds.split.test_range[0]}.."
                                                f"{ds.split.test_range[1] - 1}, tc={cfg.env.tc}"))
    files.append(summary)
    manifest.record(stage, files, {"dataset_hash": dataset_hash(cfg)})
    print(summary.read_text(), end="")
    return out


def format_table(table: list[dict], title: str = "") -> str:
    def f(x):
        return "n/a" if isinstance(x, float) and math.isnan(x) else f"{x:+.4f}"

    width = max([len(r["strategy"]) for r in table] + [8])
    lines = [title] if title else []
    lines.append(f"{'strategy':<{width}}  {'return':>8}  {'vol':>8}  {'sharpe':>8}  {'mdd':>8}")
    for r in table:
        lines.append(f"{r['strategy']:<{width}}  {f(r['ann_return']):>8}  {f(r['volatility']):>8}  "
                     f"{f(r['sharpe']):>8}  {f(r['mdd']):>8}")
    return "\n".join(lines) + "\n"


def cmd_backtest(cfg: ExperimentConfig, manifest: RunManifest) -> int:
    _run_comparison(cfg, manifest, cfg.strategies, "backtest")
    return 0


def cmd_compare(cfg: ExperimentConfig, manifest: RunManifest) -> int:
    """Ablation set per K (hybrid, policy-only, signal-only) plus equal weight."""
    specs = []
    for k in cfg.k_values:
        specs += [StrategySpec("hybrid", top_k=k), StrategySpec("policy-only", top_k=k),
                  StrategySpec("signal-only", top_k=k)]
    specs.append(StrategySpec("equal-weight"))
    _run_comparison(cfg, manifest, specs, "compare")
    return 0


def cmd_report(cfg: ExperimentConfig, manifest: RunManifest) -> int:
    src = cfg.out_dir / "backtest" / "table.json"
    if not src.exists():
        raise PrerequisiteError(f"missing prerequisite: backtest results ({src}); run 'backtest' first")
    table = [{k: (float("nan") if v is None else v) for k, v in row.items()}
             for row in json.loads(src.read_text())]
    parts = [format_table(table, "Backtest results"), "", "Reported-table consistency (Sharpe = return / volatility):"]
    for row in reported_consistency():
        mark = "ok" if row["ok"] else "MISMATCH"
        parts.append(f"  {row['strategy']:<28} implied {row['implied_sharpe']:+.4f} "
                     f"reported {row['reported_sharpe']:+.4f}  {mark}")
    ds = dataset_hash(cfg) if (_dataset_dir(cfg) / "dataset.json").exists() else "n/a"
    parts += ["", f"seed {cfg.seed}, dataset hash {ds}, kernels {kernels.BACKEND}"]
    out = cfg.out_dir / "report.txt"
    out.write_text("\n".join(parts) + "\n")
    manifest.record("report", [out])
    print(out.read_text(), end="")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridfolio", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="override the output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. ppo.total_timesteps=2048 (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="load prices and persist the weekly dataset")
    tr = sub.add_parser("train", parents=[common], help="train forecasters and/or allocators")
    tr.add_argument("--stage", choices=["forecaster", "allocator", "all"], default="all")
    sub.add_parser("predict", parents=[common], help="rewrite forecasts from saved forecaster checkpoints")
    sub.add_parser("backtest", parents=[common], help="evaluate the configured strategy list")
    sub.add_parser("report", parents=[common], help="summarize the latest backtest")
    sub.add_parser("compare", parents=[common], help="ablation: hybrid vs policy-only vs signal-only")
    return parser


def _run(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed, args.out)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.out_dir, cfg)
    try:
        if args.command == "ingest":
            return cmd_ingest(cfg, manifest)
        if args.command == "train":
            return cmd_train(cfg, manifest, args.stage)
        if args.command == "predict":
            return cmd_predict(cfg, manifest)
        if args.command == "backtest":
            return cmd_backtest(cfg, manifest)
        if args.command == "report":
            return cmd_report(cfg, manifest)
        if args.command == "compare":
            return cmd_compare(cfg, manifest)
        raise AssertionError(args.command)
    finally:
        manifest.save()


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("HYBRIDFOLIO_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc.args[0]}", file=sys.stderr)
        return 2
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return 4
    except (DataError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
