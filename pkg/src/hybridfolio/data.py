"""Price ingestion, weekly resampling, log-returns, z-scoring and splits."""

from __future__ import annotations

import hashlib
import json
import urllib.request
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError


@dataclass(frozen=True)
class PriceTable:
    assets: list[str]
    timestamps: pd.DatetimeIndex
    prices: np.ndarray  # T x N

    def __post_init__(self):
        p = np.asarray(self.prices, dtype=np.float64)
        if p.ndim != 2 or p.shape != (len(self.timestamps), len(self.assets)):
            raise DataError(f"price matrix shape {p.shape} does not match "
                            f"{len(self.timestamps)} dates x {len(self.assets)} assets")
        if len(self.assets) < 1 or p.shape[0] < 2:
            raise DataError("need at least one asset and two dates")
        if not np.all(np.isfinite(p)):
            raise DataError("missing or non-finite prices after alignment")
        if np.any(p <= 0):
            raise DataError("non-positive price encountered")
        if not self.timestamps.is_monotonic_increasing or self.timestamps.has_duplicates:
            raise DataError("timestamps must be strictly increasing")
        object.__setattr__(self, "prices", p)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.prices, index=self.timestamps, columns=self.assets)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "PriceTable":
        return cls(list(map(str, frame.columns)), pd.DatetimeIndex(frame.index),
                   frame.to_numpy(dtype=np.float64))


@dataclass(frozen=True)
class ReturnMatrix:
    assets: list[str]
    timestamps: pd.DatetimeIndex
    returns: np.ndarray  # T x N

    def __post_init__(self):
        r = np.asarray(self.returns, dtype=np.float64)
        if r.ndim != 2 or r.shape[0] != len(self.timestamps) or r.shape[1] != len(self.assets):
            raise DataError(f"return matrix shape {r.shape} inconsistent with labels")
        if not np.all(np.isfinite(r)):
            raise DataError("returns must be finite")
        object.__setattr__(self, "returns", r)

    def __len__(self) -> int:
        return self.returns.shape[0]

    def rows(self, start: int, stop: int) -> "ReturnMatrix":
        return ReturnMatrix(self.assets, self.timestamps[start:stop], self.returns[start:stop])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.returns, index=self.timestamps, columns=self.assets)


@dataclass(frozen=True)
class Scaler:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if np.any(~(np.asarray(self.sigma) > 0)):
            raise DataError("degenerate series: sigma must be positive")

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.asarray(d["mu"], dtype=np.float64), np.asarray(d["sigma"], dtype=np.float64))


@dataclass(frozen=True)
class SplitPlan:
    """Half-open row ranges ``[start, stop)``."""

    train_range: tuple[int, int]
    test_range: tuple[int, int]
    ratio: float

    @property
    def n_train(self) -> int:
        return self.train_range[1] - self.train_range[0]

    @property
    def n_test(self) -> int:
        return self.test_range[1] - self.test_range[0]

    def to_dict(self) -> dict:
        return {"train_range": list(self.train_range), "test_range": list(self.test_range),
                "ratio": self.ratio}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(tuple(d["train_range"]), tuple(d["test_range"]), float(d["ratio"]))


# ---------------------------------------------------------------- ingestion

def read_price_csv(path: str | Path) -> pd.Series:
    """Read one ``date,close`` CSV into a date-indexed series."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        df = pd.read_csv(path)
    except Exception as exc:  # pandas raises several parser error types
        raise DataError(f"{path}: unparseable file ({exc})") from exc
    if list(df.columns[:2]) != ["date", "close"]:
        raise DataError(f"{path}: expected header 'date,close', got {list(df.columns)}")
    dates = pd.to_datetime(df["date"], errors="coerce")
    closes = pd.to_numeric(df["close"], errors="coerce")
    bad = dates.isna() | (df["close"].notna() & closes.isna())
    if bad.any():
        line = int(np.flatnonzero(bad.to_numpy())[0]) + 2  # header is line 1
        raise DataError(f"{path}:{line}: cannot parse row {df.iloc[line - 2].tolist()}")
    s = pd.Series(closes.to_numpy(dtype=np.float64), index=pd.DatetimeIndex(dates), name=path.stem)
    s = s[~s.index.duplicated(keep="last")].sort_index()
    if s.dropna().empty:
        raise DataError(f"{path}: asset has zero observations")
    return s


def align_series(series: dict[str, pd.Series]) -> PriceTable:
    """Union calendar, forward-fill, truncate to the latest common start."""
    if not series:
        raise DataError("no assets given")
    for name, s in series.items():
        if s.dropna().empty:
            raise DataError(f"asset {name!r} has zero observations")
    frame = pd.concat({k: v for k, v in series.items()}, axis=1).sort_index()
    start = max(s.dropna().index.min() for s in series.values())
    frame = frame.ffill()
    frame = frame.loc[frame.index >= start]
    if len(frame) < 2:
        raise DataError("fewer than 2 common dates after alignment")
    return PriceTable.from_frame(frame)


def load_manifest(path: str | Path) -> list[dict]:
    """Manifest JSON: ``{"assets": [{"id", "path"|"url", "class"}, ...]}``.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    doc = json.loads(path.read_text())
    entries = doc["assets"] if isinstance(doc, dict) else doc
    out = []
    for e in entries:
        e = dict(e)
        if "path" in e:
            p = Path(e["path"])
            e["path"] = str(p if p.is_absolute() else path.parent / p)
        out.append(e)
    ids = [e["id"] for e in out]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate asset ids in manifest")
    return out


def fetch_csv(url: str, cache_dir: str | Path, asset_id: str, timeout: float = 30.0) -> Path:
    """GET a ``date,close`` CSV, cache it, and write a provenance sidecar.

    A cached copy is reused without contacting the server.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    target = cache_dir / f"{asset_id}.csv"
    if target.exists():
        return target
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        body = resp.read()
    target.write_bytes(body)
    sidecar = {
        "url": url,
        "fetched_at": datetime.now(timezone.utc).isoformat(),
        "sha256": hashlib.sha256(body).hexdigest(),
    }
    (cache_dir / f"{asset_id}.provenance.json").write_text(json.dumps(sidecar, indent=2))
    return target


def ingest_prices(manifest: str | Path | list[dict], cache_dir: str | Path | None = None) -> PriceTable:
    entries = load_manifest(manifest) if isinstance(manifest, (str, Path)) else manifest
    series = {}
    for e in entries:
        if "path" in e:
            src = e["path"]
        elif "url" in e:
            if cache_dir is None:
                raise DataError(f"asset {e['id']!r} has a url but no cache directory was given")
            src = fetch_csv(e["url"], cache_dir, e["id"])
        else:
            raise DataError(f"asset {e['id']!r} needs a 'path' or 'url'")
        series[e["id"]] = read_price_csv(src)
    return align_series(series)


_WEEKDAYS = {"MON": 0, "TUE": 1, "WED": 2, "THU": 3, "FRI": 4, "SAT": 5, "SUN": 6}


def resample_weekly(daily: PriceTable, anchor: str = "FRI") -> PriceTable:
    """One row per week ending on ``anchor``; last close at or before the anchor."""
    anchor = anchor.upper()[:3]
    if anchor not in _WEEKDAYS:
        raise ValueError(f"unknown anchor weekday {anchor!r}")
    frame = daily.to_frame()
    weekly = frame.resample(f"W-{anchor}", label="right", closed="right").last().ffill()
    weekly = weekly.dropna()
    if len(weekly) < 2:
        raise DataError("fewer than 2 weekly rows after resampling")
    return PriceTable.from_frame(weekly)


# ---------------------------------------------------------------- transforms

def log_returns(prices: PriceTable) -> ReturnMatrix:
    p = prices.prices
    if np.any(p <= 0):
        raise DataError("non-positive price encountered")
    return ReturnMatrix(prices.assets, prices.timestamps[1:], np.log(p[1:] / p[:-1]))


def fit_scaler(train: ReturnMatrix | np.ndarray) -> Scaler:
    x = train.returns if isinstance(train, ReturnMatrix) else np.asarray(train, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise DataError("need at least 2 rows to fit a scaler")
    cols = np.ascontiguousarray(x.T)  # per-column reductions independent of column order
    mu = cols.mean(axis=1)
    sigma = cols.std(axis=1, ddof=1)
    if np.any(sigma == 0):
        bad = np.flatnonzero(sigma == 0).tolist()
        raise DataError(f"degenerate series (zero variance) in columns {bad}")
    return Scaler(mu, sigma)


def apply_scaler(scaler: Scaler, data: ReturnMatrix | np.ndarray):
    x = data.returns if isinstance(data, ReturnMatrix) else np.asarray(data, dtype=np.float64)
    if x.shape[-1] != scaler.mu.shape[0]:
        raise DataError(f"dimension mismatch: data has {x.shape[-1]} columns, "
                        f"scaler has {scaler.mu.shape[0]}")
    z = (x - scaler.mu) / scaler.sigma
    if isinstance(data, ReturnMatrix):
        return ReturnMatrix(data.assets, data.timestamps, z)
    return z


def chronological_split(T: int, ratio: float = 0.7) -> SplitPlan:
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    if T < 4:
        raise DataError(f"T={T} too small to split (need >= 4)")
    n_train = int(np.floor(ratio * T))
    if n_train < 1 or T - n_train < 1:
        raise DataError(f"T={T}, ratio={ratio} leaves an empty range")
    return SplitPlan((0, n_train), (n_train, T), ratio)
