"""Stage functions that wire data, forecasters, allocators and backtests together."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backtest import StrategySpec, WeightsHistory, compare, run_strategy
from .data import ReturnMatrix, Scaler, SplitPlan, apply_scaler, fit_scaler
from .env import EnvConfig, PortfolioEnv
from .forecaster import (ForecasterConfig, ForecasterParams, ForecastMatrix, TrainingHistory,
                         predict_rows, train_forecaster, walk_forward_predict)
from .ppo import PpoConfig, TrainedPolicy, train_agent


@dataclass
class ForecastBundle:
    params: list[ForecasterParams]
    histories: list[TrainingHistory]
    scaler: Scaler
    in_sample: ForecastMatrix
    walk_forward: ForecastMatrix

    def grid(self, n_rows: int) -> np.ndarray:
        """(n_rows, N) scores: in-sample over the train range, walk-forward over the test range."""
        g = self.in_sample.aligned(n_rows)
        g[self.walk_forward.rows] = self.walk_forward.scores
        return g


def fit_forecasters(returns: ReturnMatrix, split: SplitPlan, config: ForecasterConfig) -> ForecastBundle:
    """Train one forecaster per asset on the scaled train range and produce both forecast sets."""
    lo, hi = split.train_range
    train = returns.rows(lo, hi)
    scaler = fit_scaler(train)
    z = apply_scaler(scaler, train.returns)
    params, histories = [], []
    for i in range(z.shape[1]):
        p, h = train_forecaster(z[:, i], config)
        params.append(p)
        histories.append(h)
    L = config.lookback
    in_sample = predict_rows(params, returns, scaler, np.arange(L, hi), L)
    wf = walk_forward_predict(params, returns, scaler, split, L)
    return ForecastBundle(params, histories, scaler, in_sample, wf)


def env_start(env_config: EnvConfig, lookback: int) -> int:
    """First actionable row: needs a full return window and a forecast."""
    return max(env_config.window, lookback)


def train_allocator(returns: np.ndarray, split: SplitPlan, env_config: EnvConfig, ppo_config: PpoConfig,
                    top_k: int, scores: np.ndarray | None, start: int) -> TrainedPolicy:
    hi = split.train_range[1]
    cfg = EnvConfig(env_config.window, env_config.tc, env_config.tau, env_config.lam_sparse, top_k, None)
    sc = None if scores is None else scores[:hi]
    env = PortfolioEnv(np.asarray(returns)[:hi], cfg, sc, start=start)
    return train_agent(env, ppo_config, top_k)


def evaluate_strategies(specs: list[StrategySpec], returns: np.ndarray, split: SplitPlan, scores, policies_hybrid,
                        policies_plain, env_config: EnvConfig, assets, asset_classes, rf=0.0,
                        periods_per_year: int = 52, timestamps=None, env_for_k=None):
    """``env_for_k(K)`` optionally supplies a per-K environment; costs must match ``env_config.tc``."""
    histories: list[tuple[str, WeightsHistory]] = []
    for spec in specs:
        pols = policies_hybrid if spec.kind == "hybrid" else policies_plain
        env_k = env_for_k(spec.top_k) if env_for_k is not None and spec.top_k else env_config
        wh = run_strategy(spec, returns, split.test_range, scores=scores, policies=pols,
                          env_config=env_k, assets=assets, asset_classes=asset_classes)
        histories.append((spec.label, wh))
    return compare(histories, returns, split.test_range, env_config.tc, rf, periods_per_year, timestamps)
