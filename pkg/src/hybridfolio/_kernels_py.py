"""Pure-numpy versions of the compiled kernels.

Used when the extension is not built. Results agree with the compiled
versions to floating-point summation order.
"""

from __future__ import annotations

import numpy as np


def project_topk(logits: np.ndarray, k: int, tau: float) -> np.ndarray:
    a = np.asarray(logits, dtype=np.float64)
    n = a.shape[0]
    w = np.zeros(n)
    if n == 0:
        return w
    k = min(k, n)
    # stable sort on -a keeps the lower index first among equal logits
    keep = np.argsort(-a, kind="stable")[:k]
    z = a[keep] - a[keep].max()
    e = np.exp(z)
    w[keep] = e / e.sum()
    w[w < tau] = 0.0
    total = w.sum()
    if total <= 0.0:
        w[int(np.argmax(a))] = 1.0
        total = 1.0
    return w / total


def gae(rewards, values, terminal_value: float, gamma: float, lam: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    adv = np.empty_like(rewards)
    running = 0.0
    next_value = float(terminal_value)
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv


def running_drawdown(equity) -> tuple[np.ndarray, np.ndarray]:
    equity = np.asarray(equity, dtype=np.float64)
    peaks = np.maximum.accumulate(equity)
    return peaks, equity / peaks - 1.0


def step_accounting(returns_row, w, w_prev, tc: float, lam_sparse: float):
    w = np.asarray(w, dtype=np.float64)
    gross = float(np.dot(returns_row, w))
    turnover = float(np.abs(w - w_prev).sum())
    active = int(np.count_nonzero(w > 0.0))
    net = gross - tc * turnover - lam_sparse * (active / w.shape[0])
    return gross, turnover, active, net
