"""Acceptance criteria 1-9, each at its stated tolerance and runtime bound.

Every criterion records one ``criterion N PASS|FAIL`` line, printed in the
pytest terminal summary (and to stdout when run with ``-s``).
"""

import json
import math
import time

import numpy as np
import pandas as pd
import pytest

from conftest import ACCEPTANCE_LINES, central_difference, max_relative_error
from hybridfolio import kernels
from hybridfolio.backtest import REPORTED_STRATEGIES, StrategySpec, max_drawdown, reported_consistency
from hybridfolio.cli import main as cli_main
from hybridfolio.data import ReturnMatrix, chronological_split
from hybridfolio.env import EnvConfig, PortfolioEnv, action_to_weights, run_episode, write_ledger_csv
from hybridfolio.forecaster import ForecasterConfig, ForecasterParams, dropout_mask, loss_and_gradients
from hybridfolio.pipeline import env_start, evaluate_strategies, fit_forecasters, train_allocator
from hybridfolio.ppo import (PolicyParams, PpoConfig, compute_gae, gaussian_log_prob, policy_eval,
                             ppo_loss_and_gradients, run_policy, train_agent)
from hybridfolio.synthetic import demo_market, planted_drift_returns


def verdict(n: int, ok: bool, detail: str, elapsed: float, limit: float | None = None) -> None:
    in_time = limit is None or elapsed < limit
    bound = "" if limit is None else f" (limit {limit:g}s)"
    line = f"criterion {n} {'PASS' if ok and in_time else 'FAIL'}: {detail}; {elapsed:.2f}s{bound}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
    assert in_time, line


def test_criterion_1_reported_table_consistency():
    t0 = time.perf_counter()
    rows = reported_consistency(tol=0.002)
    worst = max(r["abs_error"] for r in rows)
    examples = abs(0.2538 / 0.2653 - 0.9565) <= 0.002 and abs(0.2020 / 0.1977 - 1.0219) <= 0.002
    ok = len(rows) == len(REPORTED_STRATEGIES) == 9 and all(r["ok"] for r in rows) and examples
    verdict(1, ok, f"9 strategy rows, worst |return/vol - sharpe| = {worst:.5f} <= 0.002",
            time.perf_counter() - t0)


def _lstm_instance(seed):
    rng = np.random.default_rng(seed)
    H, L, B = int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
    p = ForecasterParams.init(H, rng)
    for v in p.as_dict().values():
        v += rng.normal(scale=0.3, size=v.shape)
    X, y = rng.normal(size=(B, L)), rng.normal(size=B)
    mask = dropout_mask(rng, (B, H), 0.3) if seed % 2 else None
    decay = float(rng.choice([0.0, 1e-3]))
    _, g = loss_and_gradients(p, X, y, mask=mask, weight_decay=decay)
    num = central_difference(lambda: loss_and_gradients(p, X, y, mask=mask, weight_decay=decay)[0], p.as_dict())
    return max_relative_error(g.as_dict(), num)


def _ppo_instance(seed):
    # 2 assets, a 3-step rollout, tiny actor and critic
    rng = np.random.default_rng(10_000 + seed)
    D, N, B, H = 4, 2, 3, 3
    p = PolicyParams.init(D, N, H, init_log_std=float(rng.uniform(-1, 0.5)), rng=rng)
    for v in p.arrays.values():
        v += rng.normal(scale=0.1, size=v.shape)
    X = rng.normal(size=(B, D))
    mean, log_std, _ = policy_eval(p, X)
    A = mean + np.exp(log_std) * rng.normal(size=(B, N))
    old = gaussian_log_prob(A, mean, log_std) - rng.uniform(-0.4, 0.4, B)
    args = (X, A, old, rng.normal(size=B), rng.normal(size=B), 0.2, 0.01, 0.5)
    _, g, _ = ppo_loss_and_gradients(p, *args)
    num = central_difference(lambda: ppo_loss_and_gradients(p, *args)[0], p.arrays)
    return max_relative_error(g, num)


def test_criterion_2_gradient_oracles():
    t0 = time.perf_counter()
    lstm = [_lstm_instance(s) for s in range(60)]
    ppo = [_ppo_instance(s) for s in range(60)]
    worst = max(lstm + ppo)
    ok = len(lstm) + len(ppo) >= 100 and worst < 1e-4
    verdict(2, ok, f"{len(lstm)} LSTM + {len(ppo)} clipped-objective instances, worst relative error "
                   f"{worst:.2e} < 1e-4", time.perf_counter() - t0, 60)


def _gae_brute(r, v, last, gamma, lam):
    T = len(r)
    nxt = np.append(v[1:], last)
    delta = r + gamma * nxt - v
    return np.array([sum((gamma * lam) ** l * delta[t + l] for l in range(T - t)) for t in range(T)])


def test_criterion_3_gae_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    impls = kernels.backends()
    for _ in range(1000):
        T = int(rng.integers(1, 21))
        r, v = rng.normal(size=T), rng.normal(size=T)
        last = float(rng.normal()) if rng.random() < 0.5 else 0.0
        gamma, lam = float(rng.uniform(0.8, 1.0)), float(rng.uniform(0.0, 1.0))
        ref = _gae_brute(r, v, last, gamma, lam)
        adv, targets = compute_gae(r, v, last, gamma, lam)
        worst = max(worst, float(np.max(np.abs(adv - ref))), float(np.max(np.abs(targets - ref - v))))
        for mod in impls.values():
            worst = max(worst, float(np.max(np.abs(mod.gae(r, v, last, gamma, lam) - ref))))
    verdict(3, worst <= 1e-10, f"1000 episodes (T <= 20), backends {sorted(impls)}, max |error| {worst:.1e}",
            time.perf_counter() - t0, 10)


def test_criterion_4_projection_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    N, failures = 32, []
    for K in (5, 10, 30):
        for i in range(10_000):
            a = rng.normal(scale=float(rng.choice([0.1, 1.0, 5.0])), size=N)
            tau = float(rng.uniform(0, 0.3))
            w = action_to_weights(a, K, tau)
            nz = w[w > 0]
            shifted = action_to_weights(a + rng.normal(scale=10), K, tau)
            ok = (np.all(w >= 0) and abs(w.sum() - 1) <= 1e-9 and len(nz) <= K
                  and (np.all(nz >= tau) or len(nz) == 1) and np.allclose(shifted, w, rtol=0, atol=1e-12))
            if not ok:
                failures.append((K, i))
    verdict(4, not failures, f"30000 vectors over K in (5, 10, 30), {len(failures)} violations",
            time.perf_counter() - t0, 10)


def test_criterion_5_mdd_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 120))
        net = rng.normal(0, float(rng.uniform(0.005, 0.1)), T).clip(-0.9, None)
        E = np.cumprod(1 + net)
        pairs = E[None, :] / E[:, None] - 1  # [i, j] = E_j / E_i - 1
        brute = min(0.0, float(np.min(np.where(np.triu(np.ones((T, T), bool)), pairs, np.inf))))
        worst = max(worst, abs(max_drawdown(net) - brute))
    verdict(5, worst <= 1e-12, f"1000 curves vs O(T^2) brute force, max |error| {worst:.1e}",
            time.perf_counter() - t0, 10)


@pytest.mark.slow
def test_criterion_6_planted_dominant_asset():
    t0 = time.perf_counter()
    R = np.tile([0.01, -0.01], (80, 1))
    env_cfg = EnvConfig(window=4, top_k=2, tau=0.01, lam_sparse=0.0)
    weights = []
    for seed in range(10):
        cfg = PpoConfig(lr=3e-4, n_steps=256, batch_size=64, n_epochs=10, total_timesteps=12_000, seed=seed)
        policy = train_agent(PortfolioEnv(R, env_cfg), cfg)
        episode = run_policy(policy, PortfolioEnv(R, env_cfg))
        weights.append(float(episode.weights[:, 0].mean()))
    wins = sum(w > 0.9 for w in weights)
    verdict(6, wins >= 9, f"{wins}/10 seeds put > 0.9 on the dominant asset "
                          f"(episode-mean weights {np.round(weights, 3).tolist()})", time.perf_counter() - t0, 300)


@pytest.mark.slow
def test_criterion_7_hybrid_beats_equal_weight():
    t0 = time.perf_counter()
    T, N, K = 400, 32, 5
    wins, gaps = 0, []
    for seed in range(10):
        R, _ = planted_drift_returns(N, T, seed)
        rm = ReturnMatrix([f"A{i:02d}" for i in range(N)], pd.date_range("2018-01-05", periods=T, freq="W-FRI"), R)
        split = chronological_split(T, 0.7)
        fc = ForecasterConfig(lookback=8, hidden=8, dropout=0.0, lr=1e-3, batch_size=32, max_epochs=5, seed=seed)
        bundle = fit_forecasters(rm, split, fc)
        grid = bundle.grid(T)
        env_cfg = EnvConfig(window=4, top_k=K, tc=0.001)
        ppo = PpoConfig(lr=1e-3, n_steps=256, batch_size=64, total_timesteps=60_000, seed=seed)
        policy = train_allocator(R, split, env_cfg, ppo, K, grid, env_start(env_cfg, fc.lookback))
        specs = [StrategySpec("hybrid", top_k=K), StrategySpec("equal-weight")]
        comp = evaluate_strategies(specs, R, split, grid, {K: policy}, {K: policy}, env_cfg, rm.assets, None)
        hybrid, ew = (row["ann_return"] for row in comp.table())
        wins += hybrid > ew
        gaps.append(round(hybrid - ew, 3))
    verdict(7, wins >= 8, f"hybrid annualized return > equal weight in {wins}/10 seeds at tc=0.001 "
                          f"(gaps {gaps})", time.perf_counter() - t0, 600)


def test_criterion_8_reward_accounting(tmp_path):
    t0 = time.perf_counter()
    N = 32
    R = np.zeros((3, N))
    R[1, :5] = 0.01
    env = PortfolioEnv(R, EnvConfig(window=1, top_k=5, tc=0.001, tau=0.01, lam_sparse=0.001))
    env.reset()
    env.w_prev = np.zeros(N)
    env.w_prev[:5] = [0.45, 0.25, 0.1, 0.1, 0.1]
    target = np.array([0.2, 0.25, 0.1, 0.1, 0.35])
    logits = np.full(N, -50.0)
    logits[:5] = np.log(target)
    _, reward, rec, _ = env.step(logits)
    example_ok = (abs(reward - math.log(1.00934375)) <= 1e-9 and abs(rec.turnover - 0.5) <= 1e-12
                  and rec.active == 5 and abs(rec.gross - 0.01) <= 1e-12)

    rng = np.random.default_rng(8)
    worst = 0.0
    for i in range(50):
        returns = rng.normal(0, 0.05, (40, 6))
        env = PortfolioEnv(returns, EnvConfig(window=3, top_k=int(rng.integers(1, 7))))
        ep = run_episode(env, lambda s: (rng.normal(scale=2, size=6), 0.0, 0.0))
        path = tmp_path / f"ledger_{i}.csv"
        write_ledger_csv(path, [str(d) for d in range(len(ep.records))], ep.records)
        ledger = pd.read_csv(path, float_precision="round_trip")
        worst = max(worst, abs(math.fsum(ledger["reward"]) - ep.total_reward))
        worst = max(worst, float(np.max(np.abs(ledger["reward"] - np.log1p(np.maximum(ledger["net"], -0.999))))))
    ok = example_ok and worst <= 1e-12
    verdict(8, ok, f"example reward {reward:.12f} vs ln(1.00934375) {math.log(1.00934375):.12f}; "
                   f"50 ledgers re-sum within {worst:.1e}", time.perf_counter() - t0)


def test_criterion_9_end_to_end_determinism(tmp_path):
    t0 = time.perf_counter()
    demo_market(tmp_path / "data", n_assets=8, n_weeks=160, seed=9)
    cfg = {
        "schema": "hybridfolio.experiment", "version": 1, "manifest": "data/manifest.json", "seed": 2024,
        "forecaster": {"lookback": 8, "hidden": 6, "dropout": 0.2, "max_epochs": 3, "batch_size": 32},
        "env": {"window": 4}, "k_values": [2, 4, 8],
        "ppo": {"n_steps": 128, "batch_size": 64, "n_epochs": 3, "total_timesteps": 512, "hidden": 16},
        "strategies": [{"kind": k, "top_k": K} for k in ("signal-only", "policy-only", "hybrid") for K in (2, 4, 8)]
                      + [{"kind": "equal-weight"}],
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    outs = [tmp_path / "run_a", tmp_path / "run_b"]
    codes = []
    for out in outs:
        for args in (["ingest"], ["train", "--stage", "all"], ["backtest"]):
            codes.append(cli_main([*args, "--config", str(path), "--out", str(out)]))
    tables = [(o / "backtest/table.csv").read_bytes() for o in outs]
    jsons = [(o / "backtest/table.json").read_bytes() for o in outs]
    ok = all(c == 0 for c in codes) and tables[0] == tables[1] and jsons[0] == jsons[1]
    n_rows = len(tables[0].splitlines()) - 1
    verdict(9, ok, f"two end-to-end runs, {n_rows}-row comparison tables byte-identical: {tables[0] == tables[1]}",
            time.perf_counter() - t0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
