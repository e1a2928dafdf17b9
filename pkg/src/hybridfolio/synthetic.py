"""Synthetic markets with planted structure, for tests and demos."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd

ASSET_CLASSES = ("us_equity", "id_equity", "bond", "crypto")


def planted_drift_returns(n_assets: int, n_weeks: int, seed: int, drift_scale: float = 0.01,
                          vol: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """Weekly log-returns ``drift_i + vol * eps``; drifts spread evenly over ±drift_scale.

    Returns ``(returns (n_weeks, n_assets), drifts)``. Drift order is shuffled per seed.
    """
    rng = np.random.default_rng(seed)
    drifts = np.linspace(-drift_scale, drift_scale, n_assets)
    rng.shuffle(drifts)
    returns = drifts + vol * rng.standard_normal((n_weeks, n_assets))
    return returns, drifts


def prices_from_returns(returns: np.ndarray, start_price: float = 100.0) -> np.ndarray:
    r = np.asarray(returns, dtype=np.float64)
    cum = np.vstack([np.zeros(r.shape[1]), np.cumsum(r, axis=0)])
    return start_price * np.exp(cum)


def write_market(out_dir: str | Path, prices: np.ndarray, start: str = "2018-01-05",
                 freq: str = "W-FRI", classes=None) -> Path:
    """Write one ``date,close`` CSV per asset plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    T, N = prices.shape
    dates = pd.date_range(start, periods=T, freq=freq)
    entries = []
    for i in range(N):
        aid = f"A{i:02d}"
        cls = classes[i] if classes is not None else ASSET_CLASSES[i % len(ASSET_CLASSES)]
        df = pd.DataFrame({"date": dates.strftime("%Y-%m-%d"), "close": prices[:, i]})
        df.to_csv(out_dir / f"{aid}.csv", index=False, float_format="%.10f")
        entries.append({"id": aid, "path": f"{aid}.csv", "class": cls})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"assets": entries}, indent=2))
    return manifest


def demo_market(out_dir: str | Path, n_assets: int = 8, n_weeks: int = 260, seed: int = 0) -> Path:
    returns, _ = planted_drift_returns(n_assets, n_weeks, seed)
    return write_market(out_dir, prices_from_returns(returns))
