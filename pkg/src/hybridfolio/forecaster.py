"""Per-asset univariate LSTM return forecaster.

Single-layer LSTM (input size 1) with a linear head on the last hidden
state, trained by exact backpropagation through time and Adam. Gate rows
in the stacked weight matrices are ordered input, forget, output, candidate.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .data import ReturnMatrix, Scaler, SplitPlan
from .errors import DataError, DivergenceError
from .optim import Adam

CHECKPOINT_FORMAT = "hybridfolio.forecaster"
CHECKPOINT_VERSION = 1

_DECAYED = ("W_x", "W_h", "w_out")


@dataclass
class ForecasterConfig:
    lookback: int = 30
    hidden: int = 64
    dropout: float = 0.2
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 40
    weight_decay: float = 1e-4
    patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lookback < 1 or self.hidden < 1:
            raise ValueError("lookback and hidden size must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning rate, batch size and epochs must be positive")


@dataclass
class ForecasterParams:
    W_x: np.ndarray  # (4H,)
    W_h: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)
    w_out: np.ndarray  # (H,)
    b_out: np.ndarray  # shape ()

    @property
    def hidden(self) -> int:
        return self.w_out.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"W_x": self.W_x, "W_h": self.W_h, "b": self.b, "w_out": self.w_out, "b_out": self.b_out}

    def copy(self) -> "ForecasterParams":
        return ForecasterParams(**{k: v.copy() for k, v in self.as_dict().items()})

    @classmethod
    def zeros(cls, hidden: int) -> "ForecasterParams":
        H = hidden
        return cls(np.zeros(4 * H), np.zeros((4 * H, H)), np.zeros(4 * H), np.zeros(H), np.zeros(()))

    @classmethod
    def init(cls, hidden: int, rng: np.random.Generator) -> "ForecasterParams":
        H = hidden
        bound = 1.0 / np.sqrt(H)
        p = cls(
            rng.uniform(-bound, bound, 4 * H),
            rng.uniform(-bound, bound, (4 * H, H)),
            rng.uniform(-bound, bound, 4 * H),
            rng.uniform(-bound, bound, H),
            np.asarray(rng.uniform(-bound, bound)),
        )
        p.b[H:2 * H] = 1.0
        return p


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _forward(params: ForecasterParams, X: np.ndarray, mask: np.ndarray | None):
    """Batched forward pass. ``X`` is (B, L). Returns predictions and a cache."""
    B, L = X.shape
    H = params.hidden
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs, cs, gates = [h], [c], []
    for t in range(L):
        z = X[:, t:t + 1] * params.W_x + h @ params.W_h.T + params.b
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        o = _sigmoid(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates.append((i, f, o, g))
        hs.append(h)
        cs.append(c)
    h_head = h if mask is None else h * mask
    pred = h_head @ params.w_out + params.b_out
    return pred, (X, hs, cs, gates, h_head, mask)


def _backward(params: ForecasterParams, dpred: np.ndarray, cache) -> dict[str, np.ndarray]:
    X, hs, cs, gates, h_head, mask = cache
    H = params.hidden
    L = X.shape[1]
    grads = {k: np.zeros_like(v) for k, v in params.as_dict().items()}
    grads["w_out"] = h_head.T @ dpred
    grads["b_out"] = np.asarray(dpred.sum())
    dh = np.outer(dpred, params.w_out)
    if mask is not None:
        dh = dh * mask
    dc = np.zeros_like(dh)
    for t in range(L - 1, -1, -1):
        i, f, o, g = gates[t]
        c = cs[t + 1]
        tc = np.tanh(c)
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * cs[t]
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1)
        grads["W_x"] += dz.T @ X[:, t]
        grads["W_h"] += dz.T @ hs[t]
        grads["b"] += dz.sum(axis=0)
        dh = dz @ params.W_h
        dc = dc * f
    return grads


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray | None:
    """Inverted-dropout mask (kept units scaled by 1/(1-rate)); None if rate is 0."""
    if rate <= 0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def lstm_forward(params: ForecasterParams, window, mode: str = "eval", seed: int | None = None,
                 dropout: float = 0.0):
    """Run one window through the network.

    Returns ``(prediction, hidden_trace)`` where ``hidden_trace`` is (L, H).
    Dropout is applied only in ``mode="train"``.
    """
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"window must be one-dimensional, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("window contains non-finite values")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    mask = None
    if mode == "train":
        mask = dropout_mask(np.random.default_rng(seed), (1, params.hidden), dropout)
    pred, cache = _forward(params, x[None, :], mask)
    trace = np.stack([h[0] for h in cache[1][1:]])
    return float(pred[0]), trace


def predict_batch(params: ForecasterParams, windows: np.ndarray) -> np.ndarray:
    """Eval-mode predictions for a (B, L) stack of windows."""
    return _forward(params, np.asarray(windows, dtype=np.float64), None)[0]


def loss_and_gradients(params: ForecasterParams, windows, targets, config: ForecasterConfig | None = None,
                       mask: np.ndarray | None = None, weight_decay: float | None = None):
    """MSE plus ``weight_decay * ||weights||^2`` (biases excluded), with exact BPTT grads."""
    X = np.asarray(windows, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or y.shape != (X.shape[0],):
        raise ValueError("batch must be a nonempty (B, L) window stack with B targets")
    if weight_decay is None:
        weight_decay = config.weight_decay if config is not None else 0.0
    pd_ = params.as_dict()
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite results are caught below
        pred, cache = _forward(params, X, mask)
        err = pred - y
        mse = float(np.mean(err * err))
        decay = weight_decay * sum(float(np.sum(pd_[k] ** 2)) for k in _DECAYED)
    B = X.shape[0]
    loss = mse + decay
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite forecaster loss {loss}")
    grads = _backward(params, 2.0 * err / B, cache)
    if weight_decay:
        for k in _DECAYED:
            grads[k] += 2.0 * weight_decay * pd_[k]
    return loss, ForecasterParams(**grads)


def make_windows(series: np.ndarray, lookback: int) -> tuple[np.ndarray, np.ndarray]:
    """Sliding windows ``series[j-L:j]`` with target ``series[j]``."""
    s = np.asarray(series, dtype=np.float64)
    n = len(s) - lookback
    if n <= 0:
        return np.empty((0, lookback)), np.empty(0)
    idx = np.arange(lookback)[None, :] + np.arange(n)[:, None]
    return s[idx], s[lookback:]


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.wait = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1


def train_forecaster(series, config: ForecasterConfig) -> tuple[ForecasterParams, TrainingHistory]:
    """Fit one asset's forecaster on a scaled return column.

    The chronological tail (``val_fraction`` of the windows) is held out for
    early stopping; parameters from the best validation epoch are returned.
    History losses are eval-mode MSE without the decay term.
    """
    X, y = make_windows(series, config.lookback)
    n = len(y)
    n_val = max(1, int(np.ceil(config.val_fraction * n)))
    if n - n_val < 1:
        raise DataError(f"series of length {len(series)} too short for lookback {config.lookback}")
    X_tr, y_tr, X_val, y_val = X[:-n_val], y[:-n_val], X[-n_val:], y[-n_val:]

    rng = np.random.default_rng(config.seed)
    params = ForecasterParams.init(config.hidden, rng)
    opt = Adam(params.as_dict(), config.lr)
    stopper = EarlyStopping(config.patience)
    history = TrainingHistory()
    best = params.copy()

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(y_tr))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            mask = dropout_mask(rng, (len(idx), config.hidden), config.dropout)
            _, grads = loss_and_gradients(params, X_tr[idx], y_tr[idx], mask=mask,
                                          weight_decay=config.weight_decay)
            opt.step(params.as_dict(), grads.as_dict())
        tr = float(np.mean((predict_batch(params, X_tr) - y_tr) ** 2))
        va = float(np.mean((predict_batch(params, X_val) - y_val) ** 2))
        if not (np.isfinite(tr) and np.isfinite(va)):
            raise DivergenceError(f"non-finite forecaster loss at epoch {epoch}")
        history.train_loss.append(tr)
        history.val_loss.append(va)
        improved = va < stopper.best
        stop = stopper.update(epoch, va)
        if improved:
            best = params.copy()
        if stop:
            break
    history.best_epoch = stopper.best_epoch
    return best, history


@dataclass
class ForecastMatrix:
    assets: list[str]
    timestamps: pd.DatetimeIndex
    rows: np.ndarray  # row indices into the source ReturnMatrix
    scores: np.ndarray  # (len(rows), N), return units

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.scores, index=self.timestamps, columns=self.assets)

    def aligned(self, n_rows: int) -> np.ndarray:
        """Scores placed on a full (n_rows, N) grid; rows without a forecast are zero."""
        out = np.zeros((n_rows, len(self.assets)))
        out[self.rows] = self.scores
        return out


def predict_rows(params_per_asset, returns: ReturnMatrix, scaler: Scaler, rows, lookback: int) -> ForecastMatrix:
    """Eval-mode forecasts for ``rows`` using only returns strictly before each row."""
    rows = np.asarray(rows, dtype=int)
    if len(rows) and rows.min() < lookback:
        raise DataError(f"row {rows.min()} has fewer than {lookback} prior observations")
    R = returns.returns
    N = R.shape[1]
    if len(params_per_asset) != N:
        raise ValueError(f"{len(params_per_asset)} forecasters for {N} assets")
    idx = rows[:, None] - lookback + np.arange(lookback)[None, :]
    scores = np.empty((len(rows), N))
    for i, p in enumerate(params_per_asset):
        windows = (R[idx, i] - scaler.mu[i]) / scaler.sigma[i]
        scores[:, i] = predict_batch(p, windows) * scaler.sigma[i] + scaler.mu[i]
    return ForecastMatrix(returns.assets, returns.timestamps[rows], rows, scores)


def walk_forward_predict(params_per_asset, returns: ReturnMatrix, scaler: Scaler, split: SplitPlan,
                         lookback: int) -> ForecastMatrix:
    start, stop = split.test_range
    if stop - start < 1:
        raise DataError("empty test range")
    if start < lookback:
        raise DataError(f"insufficient history: test starts at row {start}, lookback is {lookback}")
    return predict_rows(params_per_asset, returns, scaler, np.arange(start, stop), lookback)


def save_checkpoint(path: str | Path, asset: str, params: ForecasterParams, config: ForecasterConfig,
                    history: TrainingHistory) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "asset": asset,
        "config": asdict(config),
        "params": {k: np.asarray(v).tolist() for k, v in params.as_dict().items()},
        "history": asdict(history),
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path: str | Path) -> tuple[str, ForecasterParams, ForecasterConfig, TrainingHistory]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a forecaster checkpoint")
    if doc["version"] > CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint version {doc['version']} is newer than supported")
    params = ForecasterParams(**{k: np.asarray(v, dtype=np.float64) for k, v in doc["params"].items()})
    return doc["asset"], params, ForecasterConfig(**doc["config"]), TrainingHistory(**doc["history"])
