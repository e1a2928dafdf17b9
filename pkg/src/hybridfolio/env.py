"""Portfolio allocation MDP with Top-K sparse weights and cost-aware reward.

The state at cursor ``t`` is the return window of rows ``t-L .. t-1``
(row-major, oldest first), then the previous weights, then the forecast
scores for row ``t``. Acting at ``t`` earns the return row ``t``, so the
window never contains the return being traded on.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .errors import DataError

NET_FLOOR = -0.999


@dataclass
class EnvConfig:
    window: int = 30
    tc: float = 0.001
    tau: float = 0.01
    lam_sparse: float = 0.001
    top_k: int = 5
    n_assets: int | None = None

    def validate(self, n_assets: int) -> None:
        if self.tc < 0 or self.lam_sparse < 0:
            raise ValueError("tc and lam_sparse must be nonnegative")
        if not 0 <= self.tau < 1:
            raise ValueError("tau must lie in [0, 1)")
        if not 1 <= self.top_k <= n_assets:
            raise ValueError(f"top_k={self.top_k} must lie in [1, {n_assets}]")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.n_assets is not None and self.n_assets != n_assets:
            raise ValueError(f"config says {self.n_assets} assets, data has {n_assets}")


@dataclass(frozen=True)
class StepRecord:
    index: int
    gross: float
    turnover: float
    active: int
    net: float
    reward: float
    clamped: bool
    weights: np.ndarray


def action_to_weights(logits, k: int, tau: float) -> np.ndarray:
    """Top-K masked softmax, zero entries below ``tau``, renormalize.

    Ties in the Top-K cut go to the lower index. If thresholding removes
    everything, all weight goes to the argmax logit.
    """
    a = np.ascontiguousarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("logits must be finite")
    return kernels.project_topk(a, int(k), float(tau))


def build_state(window, w_prev, scores) -> np.ndarray:
    window = np.asarray(window, dtype=np.float64)
    w_prev = np.asarray(w_prev, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if window.ndim != 2:
        raise ValueError("window must be (L, N)")
    N = window.shape[1]
    if w_prev.shape != (N,) or scores.shape != (N,):
        raise ValueError(f"shape mismatch: window has {N} assets, w_prev {w_prev.shape}, scores {scores.shape}")
    return np.concatenate([window.reshape(-1), w_prev, scores])


def state_segments(state: np.ndarray, window: int, n_assets: int):
    """Split a state back into (window (L, N), w_prev, scores)."""
    LN = window * n_assets
    return state[:LN].reshape(window, n_assets), state[LN:LN + n_assets], state[LN + n_assets:]


class PortfolioEnv:
    """One pass over ``returns[start - L:stop]``; the first action is at ``start``.

    ``returns`` are raw log-returns, ``scores`` an aligned (T, N) forecast
    grid or None (scores segment zero).
    """

    def __init__(self, returns: np.ndarray, config: EnvConfig, scores: np.ndarray | None = None,
                 start: int | None = None, stop: int | None = None):
        self.returns = np.ascontiguousarray(returns, dtype=np.float64)
        if self.returns.ndim != 2:
            raise DataError("returns must be a (T, N) matrix")
        T, N = self.returns.shape
        config.validate(N)
        self.config = config
        self.n_assets = N
        if scores is None:
            self.scores = np.zeros_like(self.returns)
        else:
            self.scores = np.ascontiguousarray(scores, dtype=np.float64)
            if self.scores.shape != self.returns.shape:
                raise DataError(f"scores shape {self.scores.shape} != returns shape {self.returns.shape}")
        self.start = config.window if start is None else int(start)
        self.stop = T if stop is None else int(stop)
        if self.start < config.window or self.stop > T or self.stop - self.start < 1:
            raise DataError(f"insufficient data: need >= {config.window + 1} rows with a window of "
                            f"{config.window} (start={self.start}, stop={self.stop}, T={T})")
        self.cursor = self.start
        self.w_prev = np.full(N, 1.0 / N)
        self.done = True

    @property
    def state_dim(self) -> int:
        return self.config.window * self.n_assets + 2 * self.n_assets

    @property
    def n_steps(self) -> int:
        return self.stop - self.start

    def _state(self) -> np.ndarray:
        t, L = self.cursor, self.config.window
        return build_state(self.returns[t - L:t], self.w_prev, self.scores[t])

    def reset(self) -> np.ndarray:
        self.cursor = self.start
        self.w_prev = np.full(self.n_assets, 1.0 / self.n_assets)
        self.done = False
        return self._state()

    def step(self, action):
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        cfg = self.config
        t = self.cursor
        w = action_to_weights(action, cfg.top_k, cfg.tau)
        gross, turnover, active, net = kernels.step_accounting(
            self.returns[t], w, self.w_prev, cfg.tc, cfg.lam_sparse)
        clamped = net < NET_FLOOR
        reward = math.log1p(max(net, NET_FLOOR))
        record = StepRecord(t, gross, turnover, active, net, reward, clamped, w)
        self.w_prev = w
        self.cursor += 1
        self.done = self.cursor >= self.stop
        next_state = None if self.done else self._state()
        return next_state, reward, record, self.done


@dataclass
class Rollout:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    value_targets: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    def append(self, state, action, log_prob, value, reward, done) -> None:
        self.states.append(state)
        self.actions.append(action)
        self.log_probs.append(log_prob)
        self.values.append(value)
        self.rewards.append(reward)
        self.dones.append(done)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "states": np.asarray(self.states, dtype=np.float64),
            "actions": np.asarray(self.actions, dtype=np.float64),
            "log_probs": np.asarray(self.log_probs, dtype=np.float64),
            "values": np.asarray(self.values, dtype=np.float64),
            "rewards": np.asarray(self.rewards, dtype=np.float64),
            "dones": np.asarray(self.dones, dtype=bool),
        }


Policy = Callable[[np.ndarray], tuple[np.ndarray, float, float]]


@dataclass
class Episode:
    rollout: Rollout
    records: list[StepRecord]
    weights: np.ndarray  # (steps, N)
    rows: np.ndarray  # return-row index of each step
    total_reward: float


def run_episode(env: PortfolioEnv, policy: Policy) -> Episode:
    """Roll ``policy(state) -> (action, log_prob, value)`` until the data runs out."""
    state = env.reset()
    rollout = Rollout()
    records = []
    total = 0.0
    done = False
    while not done:
        action, log_prob, value = policy(state)
        next_state, reward, rec, done = env.step(action)
        rollout.append(state, np.asarray(action, dtype=np.float64), log_prob, value, reward, done)
        records.append(rec)
        total += reward
        state = next_state
    weights = np.array([r.weights for r in records])
    rows = np.array([r.index for r in records])
    return Episode(rollout, records, weights, rows, total)


def write_weights_csv(path: str | Path, dates, assets, weights) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *assets])
        for d, row in zip(dates, weights):
            w.writerow([str(d)[:10], *[repr(float(x)) for x in row]])


def write_ledger_csv(path: str | Path, dates, records: list[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "gross", "turnover", "active", "net", "reward", "clamped"])
        for d, r in zip(dates, records):
            w.writerow([str(d)[:10], repr(r.gross), repr(r.turnover), r.active, repr(r.net),
                        repr(r.reward), int(r.clamped)])
