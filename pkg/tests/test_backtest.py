import json
import math

import numpy as np
import pytest

from hybridfolio.backtest import (REPORTED_STRATEGIES, StrategySpec, WeightsHistory, apply_costs,
                                  benchmark_reference_rows, compare, composite_weights, compute_metrics,
                                  equity_curve, max_drawdown, plot_comparison, reported_consistency,
                                  run_strategy, turnovers, write_table_csv, write_table_json)
from hybridfolio.env import EnvConfig
from hybridfolio.errors import DataError
from hybridfolio.ppo import PolicyParams, TrainedPolicy


def brute_mdd(equity):
    worst = 0.0
    for i in range(len(equity)):
        for j in range(i, len(equity)):
            worst = min(worst, equity[j] / equity[i] - 1)
    return worst


class TestEquity:
    def test_two_periods(self):
        np.testing.assert_allclose(equity_curve([0.1, -0.1]).equity, [1.1, 0.99], rtol=1e-15)

    def test_zeros(self):
        c = equity_curve(np.zeros(5))
        assert np.all(c.equity == 1) and np.all(c.drawdowns == 0)

    def test_three_periods(self):
        c = equity_curve([0.1, -0.2, 0.05])
        np.testing.assert_allclose(c.equity, [1.1, 0.88, 0.924], rtol=1e-14)
        np.testing.assert_allclose(c.drawdowns, [0, -0.2, -0.16], atol=1e-14)
        assert c.max_drawdown == pytest.approx(-0.2, abs=1e-14)

    def test_wipeout_rejected(self):
        with pytest.raises(DataError):
            equity_curve([0.1, -1.0])

    def test_mdd_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            net = rng.normal(0, 0.05, int(rng.integers(1, 40)))
            e = np.cumprod(1 + net)
            assert abs(max_drawdown(net) - brute_mdd(e)) <= 1e-12

    def test_peaks_running_max(self):
        c = equity_curve(np.random.default_rng(0).normal(0, 0.03, 50))
        np.testing.assert_array_equal(c.peaks, np.maximum.accumulate(c.equity))
        assert np.all(c.drawdowns <= 0) and np.all(c.equity > 0)


class TestMetrics:
    def test_hand_example(self):
        m = compute_metrics([0.1, -0.05])
        assert m.ann_return == pytest.approx(1.3, abs=1e-12)
        assert m.ann_volatility == pytest.approx(0.764853, abs=1e-6)
        assert m.sharpe == pytest.approx(1.69967, abs=1e-5)

    def test_constant_series_nan_sharpe(self):
        m = compute_metrics(np.full(10, 0.01))
        assert m.ann_return == pytest.approx(0.52, abs=1e-12)
        assert m.ann_volatility == 0 and math.isnan(m.sharpe)

    def test_too_short(self):
        with pytest.raises(DataError):
            compute_metrics([0.01])

    def test_sharpe_consistency_with_rf(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            r = rng.normal(0.002, 0.02, 60)
            rf = rng.uniform(0, 0.001)
            m = compute_metrics(r, rf=rf)
            assert m.sharpe * m.ann_volatility + m.rf_ann == pytest.approx(m.ann_return, abs=1e-9)

    def test_reported_hybrid_row(self):
        assert 0.2538 / 0.2653 == pytest.approx(0.9566, abs=1e-4)
        assert abs(0.2538 / 0.2653 - 0.9565) <= 0.002

    def test_reported_consistency_all_rows(self):
        rows = reported_consistency()
        assert len(rows) == len(REPORTED_STRATEGIES) == 9
        assert all(r["ok"] for r in rows)

    def test_benchmark_rows_flagged(self):
        rows = benchmark_reference_rows()
        assert len(rows) == 4 and all("[reported]" in r["strategy"] for r in rows)


class TestCosts:
    def test_turnover_example(self):
        w0 = np.array([0.5, 0.5, 0.0])
        w = np.array([[0.0, 0.25, 0.75]])
        assert turnovers(w, w0)[0] == pytest.approx(1.5)
        assert apply_costs([0.01], w, 0.001, w0)[0] == pytest.approx(0.01 - 0.0015, abs=1e-15)

    def test_first_period_from_uniform(self):
        w = np.array([[0.25] * 4, [1.0, 0, 0, 0]])
        np.testing.assert_allclose(turnovers(w), [0.0, 1.5])

    def test_constant_weights_cost_free(self):
        g = np.random.default_rng(1).normal(0, 0.02, 10)
        np.testing.assert_array_equal(apply_costs(g, np.full((10, 4), 0.25), 0.001), g)

    def test_zero_tc(self):
        rng = np.random.default_rng(2)
        g = rng.normal(0, 0.02, 10)
        np.testing.assert_array_equal(apply_costs(g, rng.dirichlet(np.ones(4), 10), 0.0), g)

    def test_cost_monotone(self):
        rng = np.random.default_rng(0)
        W = rng.dirichlet(np.ones(5), 30)
        g = rng.normal(0, 0.02, 30)
        lo, hi = apply_costs(g, W, 0.001), apply_costs(g, W, 0.01)
        assert np.all(hi <= lo)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            apply_costs(np.zeros(3), np.ones((2, 2)) / 2, 0.001)


def _market(T=60, N=4, seed=0):
    return np.random.default_rng(seed).normal(0.001, 0.02, (T, N))


class TestStrategies:
    def test_equal_weight(self):
        wh = run_strategy(StrategySpec("equal-weight"), _market(), (40, 60))
        assert wh.weights.shape == (20, 4) and np.all(wh.weights == 0.25)
        np.testing.assert_array_equal(wh.rows, np.arange(40, 60))

    def test_signal_only_example(self):
        scores = np.tile([0.3, 0.1, 0.2, -0.5], (60, 1))
        wh = run_strategy(StrategySpec("signal-only", top_k=2), _market(), (40, 60), scores=scores)
        np.testing.assert_array_equal(wh.weights[0], [0.5, 0, 0.5, 0])

    def test_signal_only_tie_lower_index(self):
        scores = np.zeros((60, 4))
        wh = run_strategy(StrategySpec("signal-only", top_k=1), _market(), (40, 60), scores=scores)
        np.testing.assert_array_equal(wh.weights[0], [1, 0, 0, 0])

    def test_static_composite(self):
        classes = ["eq", "eq", "bond", "crypto"]
        w = composite_weights(classes, {"eq": 0.5, "bond": 0.25, "crypto": 0.25})
        np.testing.assert_allclose(w, [0.25, 0.25, 0.25, 0.25])
        w = composite_weights(classes, {"eq": 0.5, "bond": 0.5, "missing": 0.5})
        np.testing.assert_allclose(w, [0.25, 0.25, 0.5, 0])

    def test_single_index(self):
        wh = run_strategy(StrategySpec("single-index", index_column="c"), _market(), (40, 60),
                          assets=["a", "b", "c", "d"])
        assert np.all(wh.weights[:, 2] == 1)

    def test_missing_inputs(self):
        with pytest.raises(DataError):
            run_strategy(StrategySpec("signal-only", top_k=2), _market(), (40, 60))
        with pytest.raises(DataError):
            run_strategy(StrategySpec("policy-only", top_k=2), _market(), (40, 60))
        with pytest.raises(ValueError):
            StrategySpec("hybrid")

    def test_hybrid_zero_scores_is_policy_only(self):
        R = _market()
        cfg = EnvConfig(window=3, top_k=2)
        params = PolicyParams.init(3 * 4 + 8, 4, hidden=8, rng=np.random.default_rng(1))
        pol = {2: TrainedPolicy(2, params, None)}
        a = run_strategy(StrategySpec("hybrid", top_k=2), R, (40, 60), scores=np.zeros_like(R),
                         policies=pol, env_config=cfg)
        b = run_strategy(StrategySpec("policy-only", top_k=2), R, (40, 60), policies=pol, env_config=cfg)
        np.testing.assert_array_equal(a.weights, b.weights)
        assert np.all((a.weights > 0).sum(axis=1) <= 2)

    def test_labels(self):
        assert StrategySpec("hybrid", top_k=5).label == "Hybrid LSTM+PPO (Top-5)"
        s = StrategySpec.from_dict({"kind": "signal-only", "top_k": 10})
        assert StrategySpec.from_dict(s.to_dict()) == s


class TestCompare:
    def _hist(self, R, rng_seed):
        W = np.random.default_rng(rng_seed).dirichlet(np.ones(R.shape[1]), 20)
        return WeightsHistory(np.arange(40, 60), W)

    def test_identical_rows(self):
        R = _market()
        h = self._hist(R, 0)
        t = compare([("a", h), ("b", h)], R, (40, 60), 0.001).table()
        assert {k: v for k, v in t[0].items() if k != "strategy"} == \
               {k: v for k, v in t[1].items() if k != "strategy"}

    def test_independence(self):
        R = _market()
        h1, h2 = self._hist(R, 0), self._hist(R, 1)
        one = compare([("a", h1)], R, (40, 60), 0.001).table()
        two = compare([("a", h1), ("b", h2)], R, (40, 60), 0.001).table()
        assert one[0] == two[0]

    def test_mismatched_range(self):
        R = _market()
        with pytest.raises(DataError):
            compare([("a", WeightsHistory(np.arange(41, 60), np.full((19, 4), 0.25)))], R, (40, 60), 0.001)

    def test_mean_weights_and_net(self):
        R = _market()
        h = self._hist(R, 2)
        res = compare([("a", h)], R, (40, 60), 0.001).results[0]
        np.testing.assert_allclose(res.mean_weights, h.weights.mean(axis=0))
        np.testing.assert_allclose(res.net, (R[40:60] * h.weights).sum(1) - 0.001 * turnovers(h.weights))

    def test_outputs(self, tmp_path):
        R = _market()
        comp = compare([("EW", WeightsHistory(np.arange(40, 60), np.full((20, 4), 0.25)))], R, (40, 60), 0.001)
        table = comp.table() + benchmark_reference_rows()
        write_table_csv(tmp_path / "t.csv", table)
        write_table_json(tmp_path / "t.json", table)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "strategy,ann_return,volatility,sharpe,mdd" and len(lines) == 6
        assert len(json.loads((tmp_path / "t.json").read_text())) == 5
        paths = plot_comparison(comp, tmp_path, ["a", "b", "c", "d"])
        assert all(p.exists() and p.read_text().lstrip().startswith("<?xml") for p in paths)

    def test_nan_serialization(self, tmp_path):
        row = {"strategy": "flat", "ann_return": 0.52, "volatility": 0.0, "sharpe": float("nan"), "mdd": 0.0}
        write_table_csv(tmp_path / "t.csv", [row])
        write_table_json(tmp_path / "t.json", [row])
        assert ",nan," in (tmp_path / "t.csv").read_text()
        assert json.loads((tmp_path / "t.json").read_text())[0]["sharpe"] is None
