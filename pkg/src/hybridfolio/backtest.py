"""Cost-adjusted equity curves, performance metrics and strategy comparison.

Annualized return is ``periods * mean`` of weekly (log-)returns and the
equity curve compounds the same returns arithmetically. Both are kept as
defined even though they mix the two conventions.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import kernels
from .env import EnvConfig, PortfolioEnv
from .errors import DataError

STRATEGY_KINDS = ("hybrid", "policy-only", "signal-only", "equal-weight", "static-composite", "single-index")


@dataclass
class EquityCurve:
    timestamps: pd.DatetimeIndex | None
    equity: np.ndarray
    peaks: np.ndarray
    drawdowns: np.ndarray

    @property
    def max_drawdown(self) -> float:
        return float(self.drawdowns.min()) if len(self.drawdowns) else 0.0


@dataclass
class MetricsReport:
    ann_return: float
    ann_volatility: float
    sharpe: float  # nan when volatility is zero
    mdd: float
    rf_ann: float = 0.0
    periods_per_year: int = 52

    def row(self) -> dict:
        return {"ann_return": self.ann_return, "volatility": self.ann_volatility,
                "sharpe": self.sharpe, "mdd": self.mdd}


@dataclass
class StrategySpec:
    kind: str
    top_k: int | None = None
    class_weights: dict[str, float] | None = None
    index_column: str | int | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.kind in ("hybrid", "policy-only", "signal-only") and not self.top_k:
            raise ValueError(f"{self.kind} needs top_k")
        if self.kind == "static-composite" and not self.class_weights:
            raise ValueError("static-composite needs class_weights")
        if self.kind == "single-index" and self.index_column is None:
            raise ValueError("single-index needs index_column")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        k = self.top_k
        return {
            "hybrid": f"Hybrid LSTM+PPO (Top-{k})",
            "policy-only": f"PPO (Policy-only, Top-{k})",
            "signal-only": f"LSTM (Signal-only, Top-{k})",
            "equal-weight": "Equal-Weight (EW)",
            "static-composite": "Composite (static)",
            "single-index": f"Index ({self.index_column})",
        }[self.kind]

    @classmethod
    def from_dict(cls, d: dict) -> "StrategySpec":
        return cls(d["kind"], d.get("top_k"), d.get("class_weights"), d.get("index_column"), d.get("name"))

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


# ---------------------------------------------------------------- returns and metrics

def portfolio_gross(returns: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.einsum("tn,tn->t", np.asarray(returns, dtype=np.float64), np.asarray(weights, dtype=np.float64))


def turnovers(weights: np.ndarray, w0: np.ndarray | None = None) -> np.ndarray:
    W = np.asarray(weights, dtype=np.float64)
    prev = np.full(W.shape[1], 1.0 / W.shape[1]) if w0 is None else np.asarray(w0, dtype=np.float64)
    full = np.vstack([prev, W])
    return np.abs(np.diff(full, axis=0)).sum(axis=1)


def apply_costs(gross, weights, tc: float, w0=None) -> np.ndarray:
    """``net_t = gross_t - tc * ||w_t - w_{t-1}||_1``; ``w_{-1}`` defaults to uniform."""
    gross = np.asarray(gross, dtype=np.float64)
    W = np.asarray(weights, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != gross.shape[0]:
        raise DataError(f"{gross.shape[0]} return periods but weights have shape {W.shape}")
    return gross - tc * turnovers(W, w0)


def equity_curve(net_returns, timestamps=None) -> EquityCurve:
    net = np.ascontiguousarray(net_returns, dtype=np.float64)
    if np.any(net <= -1.0):
        raise DataError("net return <= -1 wipes out the portfolio")
    equity = np.cumprod(1.0 + net)
    peaks, dd = kernels.running_drawdown(equity)
    return EquityCurve(None if timestamps is None else pd.DatetimeIndex(timestamps), equity, peaks, dd)


def max_drawdown(net_returns) -> float:
    return equity_curve(net_returns).max_drawdown


def compute_metrics(returns, net_returns=None, rf=0.0, periods_per_year: int = 52) -> MetricsReport:
    """Annualized return/volatility and Sharpe from ``returns``; MDD from ``net_returns``.

    ``net_returns`` defaults to ``returns``. ``rf`` is a weekly rate (scalar
    or per-period series). A zero-variance series gets ``sharpe = nan``.
    """
    r = np.asarray(returns, dtype=np.float64)
    if r.shape[0] < 2:
        raise DataError("need at least 2 periods")
    net = r if net_returns is None else np.asarray(net_returns, dtype=np.float64)
    rf_mean = float(np.mean(rf))
    mu_ann = periods_per_year * float(r.mean())
    # a constant series has zero spread; the ddof=1 formula can leave rounding residue
    s = 0.0 if np.all(r == r[0]) else float(r.std(ddof=1))
    sigma_ann = math.sqrt(periods_per_year) * s
    rf_ann = periods_per_year * rf_mean
    sharpe = (mu_ann - rf_ann) / sigma_ann if sigma_ann > 0 else float("nan")
    return MetricsReport(mu_ann, sigma_ann, sharpe, max_drawdown(net), rf_ann, periods_per_year)


# ---------------------------------------------------------------- strategies

@dataclass
class WeightsHistory:
    rows: np.ndarray
    weights: np.ndarray  # (len(rows), N)


def _topk_equal(scores_row: np.ndarray, k: int) -> np.ndarray:
    w = np.zeros(scores_row.shape[0])
    keep = np.argsort(-scores_row, kind="stable")[:k]
    w[keep] = 1.0 / len(keep)
    return w


def composite_weights(asset_classes: list[str], class_weights: dict[str, float]) -> np.ndarray:
    """Class-level weights split uniformly inside each class; empty classes drop out."""
    classes = np.asarray(asset_classes)
    w = np.zeros(len(classes))
    for cls, cw in class_weights.items():
        members = classes == cls
        if members.any():
            w[members] = cw / members.sum()
    if w.sum() <= 0:
        raise DataError("no asset matches any class in class_weights")
    return w / w.sum()


def run_strategy(spec: StrategySpec, returns: np.ndarray, test_range, scores: np.ndarray | None = None,
                 policies: dict | None = None, env_config: EnvConfig | None = None,
                 assets: list[str] | None = None, asset_classes: list[str] | None = None) -> WeightsHistory:
    """Weights for every row of ``test_range``.

    ``scores`` is a (T, N) forecast grid aligned with ``returns`` rows.
    ``policies`` maps K to a trained policy (``.act(state)``).
    """
    R = np.asarray(returns, dtype=np.float64)
    start, stop = test_range
    rows = np.arange(start, stop)
    N = R.shape[1]
    kind = spec.kind
    if kind == "equal-weight":
        return WeightsHistory(rows, np.full((len(rows), N), 1.0 / N))
    if kind == "static-composite":
        if asset_classes is None:
            raise DataError("static-composite needs asset class tags")
        w = composite_weights(asset_classes, spec.class_weights)
        return WeightsHistory(rows, np.tile(w, (len(rows), 1)))
    if kind == "single-index":
        col = spec.index_column
        if isinstance(col, str):
            if assets is None or col not in assets:
                raise DataError(f"index column {col!r} not among assets")
            col = assets.index(col)
        w = np.zeros(N)
        w[col] = 1.0
        return WeightsHistory(rows, np.tile(w, (len(rows), 1)))
    if kind == "signal-only":
        if scores is None:
            raise DataError("signal-only strategy needs forecast scores")
        return WeightsHistory(rows, np.array([_topk_equal(scores[t], spec.top_k) for t in rows]))

    # policy-driven kinds
    if not policies or spec.top_k not in policies:
        raise DataError(f"{kind} strategy needs a trained policy for K={spec.top_k}")
    if kind == "hybrid" and scores is None:
        raise DataError("hybrid strategy needs forecast scores")
    from .ppo import run_policy

    base = env_config if env_config is not None else EnvConfig()
    cfg = EnvConfig(base.window, base.tc, base.tau, base.lam_sparse, spec.top_k, None)
    env = PortfolioEnv(R, cfg, scores if kind == "hybrid" else None, start=start, stop=stop)
    episode = run_policy(policies[spec.top_k], env)
    return WeightsHistory(episode.rows, episode.weights)


# ---------------------------------------------------------------- comparison

@dataclass
class StrategyResult:
    label: str
    weights: WeightsHistory
    gross: np.ndarray
    net: np.ndarray
    metrics: MetricsReport
    curve: EquityCurve
    mean_weights: np.ndarray


@dataclass
class Comparison:
    results: list[StrategyResult] = field(default_factory=list)
    reference_rows: list[dict] = field(default_factory=list)

    def table(self) -> list[dict]:
        rows = [{"strategy": r.label, **r.metrics.row()} for r in self.results]
        return rows + [dict(r) for r in self.reference_rows]


def evaluate(label: str, weights: WeightsHistory, returns: np.ndarray, tc: float, rf=0.0,
             periods_per_year: int = 52, timestamps=None) -> StrategyResult:
    R = np.asarray(returns, dtype=np.float64)[weights.rows]
    gross = portfolio_gross(R, weights.weights)
    net = apply_costs(gross, weights.weights, tc)
    ts = None if timestamps is None else pd.DatetimeIndex(timestamps)[weights.rows]
    return StrategyResult(label, weights, gross, net, compute_metrics(net, net, rf, periods_per_year),
                          equity_curve(net, ts), weights.weights.mean(axis=0))


def compare(histories: list[tuple[str, WeightsHistory]], returns: np.ndarray, test_range, tc: float,
            rf=0.0, periods_per_year: int = 52, timestamps=None) -> Comparison:
    """Evaluate every weights history on the same test range and cost."""
    rows = np.arange(*test_range)
    out = Comparison()
    for label, wh in histories:
        if not np.array_equal(wh.rows, rows):
            raise DataError(f"strategy {label!r} covers rows {wh.rows[:1]}..{wh.rows[-1:]}, "
                            f"expected {test_range}")
        out.results.append(evaluate(label, wh, returns, tc, rf, periods_per_year, timestamps))
    return out


# ---------------------------------------------------------------- reported reference values

# (strategy, annualized return, volatility, sharpe, mdd) reference values for the 2024 test year
REPORTED_STRATEGIES = [
    ("LSTM (Signal-only, Top-5)", -0.0303, 0.5278, -0.0575, -0.3500),
    ("LSTM (Signal-only, Top-10)", -0.0087, 0.4363, -0.0199, -0.3189),
    ("LSTM (Signal-only, Top-30)", 0.1575, 0.3268, 0.4821, -0.1991),
    ("PPO (Policy-only, Top-5)", 0.0575, 0.1559, 0.3686, -0.0719),
    ("PPO (Policy-only, Top-10)", 0.2020, 0.1977, 1.0219, -0.0787),
    ("PPO (Policy-only, Top-30)", 0.0803, 0.1736, 0.4627, -0.0978),
    ("Hybrid LSTM+PPO (Top-5)", 0.2538, 0.2653, 0.9565, -0.1369),
    ("Hybrid LSTM+PPO (Top-10)", 0.0983, 0.2168, 0.4535, -0.1197),
    ("Hybrid LSTM+PPO (Top-30)", 0.1025, 0.1780, 0.5756, -0.1060),
]

# Benchmark rows whose reported Sharpe does not equal return / volatility.
REPORTED_BENCHMARKS = [
    ("S&P 500", 0.0679, 0.2000, 0.0034, -0.0787),
    ("Allianz Income & Growth", -0.0327, 0.1595, -0.0020, -0.0650),
    ("Composite (25/25/25/25)", 0.0401, 0.1968, 0.0020, -0.0634),
    ("Equal-Weight (EW)", 0.0042, 0.1402, 0.0003, -0.0719),
]


def reported_consistency(tol: float = 0.002) -> list[dict]:
    """Recompute Sharpe = return / volatility for each reported strategy row."""
    out = []
    for name, mu, sigma, sr, _ in REPORTED_STRATEGIES:
        implied = mu / sigma
        out.append({"strategy": name, "implied_sharpe": implied, "reported_sharpe": sr,
                    "abs_error": abs(implied - sr), "ok": abs(implied - sr) <= tol})
    return out


def benchmark_reference_rows() -> list[dict]:
    return [{"strategy": f"{name} [reported]", "ann_return": mu, "volatility": vol,
             "sharpe": sr, "mdd": mdd} for name, mu, vol, sr, mdd in REPORTED_BENCHMARKS]


# ---------------------------------------------------------------- output

TABLE_FIELDS = ["strategy", "ann_return", "volatility", "sharpe", "mdd"]


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.10f}"


def write_table_csv(path: str | Path, table: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_FIELDS)
        for row in table:
            w.writerow([_fmt(row[k]) for k in TABLE_FIELDS])


def write_table_json(path: str | Path, table: list[dict]) -> None:
    clean = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}
             for row in table]
    Path(path).write_text(json.dumps(clean, indent=2, allow_nan=False) + "\n")


def write_series_csv(path: str | Path, dates, columns: dict[str, np.ndarray]) -> None:
    names = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *names])
        for i, d in enumerate(dates):
            w.writerow([str(d)[:10], *[_fmt(columns[n][i]) for n in names]])


def plot_comparison(comparison: Comparison, out_dir: str | Path, assets: list[str]) -> list[Path]:
    """Equity curves, drawdowns, and average-weight pies as SVG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "hybridfolio"
    out_dir = Path(out_dir)
    meta = {"Date": None}
    paths = []

    fig, ax = plt.subplots(figsize=(10, 5))
    for r in comparison.results:
        x = r.curve.timestamps if r.curve.timestamps is not None else np.arange(len(r.curve.equity))
        ax.plot(x, r.curve.equity, label=r.label, lw=1.2)
    ax.set_ylabel("equity (net of costs)")
    ax.legend(fontsize=7)
    p = out_dir / "equity_curves.svg"
    fig.savefig(p, metadata=meta)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(10, 4))
    for r in comparison.results:
        x = r.curve.timestamps if r.curve.timestamps is not None else np.arange(len(r.curve.equity))
        ax.plot(x, r.curve.drawdowns, label=r.label, lw=1.0)
    ax.set_ylabel("drawdown")
    ax.legend(fontsize=7)
    p = out_dir / "drawdowns.svg"
    fig.savefig(p, metadata=meta)
    plt.close(fig)
    paths.append(p)

    for i, r in enumerate(comparison.results):
        w = r.mean_weights
        keep = w > 1e-3
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.pie(w[keep], labels=[a for a, k in zip(assets, keep) if k], textprops={"fontsize": 6})
        ax.set_title(r.label, fontsize=8)
        p = out_dir / f"weights_pie_{i:02d}.svg"
        fig.savefig(p, metadata=meta)
        plt.close(fig)
        paths.append(p)
    return paths
