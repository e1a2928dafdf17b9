"""Clipped-surrogate actor-critic over the portfolio environment.

Actor and critic are separate two-hidden-layer tanh MLPs. The action
distribution is a diagonal Gaussian over raw logits with a learned,
state-independent log standard deviation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .env import PortfolioEnv, Rollout
from .errors import DataError, DivergenceError
from .optim import Adam, clip_grad_norm

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)

CHECKPOINT_FORMAT = "hybridfolio.policy"
CHECKPOINT_VERSION = 1


@dataclass
class PpoConfig:
    lr: float = 1e-4
    n_steps: int = 512
    batch_size: int = 128
    clip_eps: float = 0.2
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    n_epochs: int = 10
    total_timesteps: int = 200_000
    hidden: int = 64
    init_log_std: float = 0.0
    normalize_obs: bool = True
    normalize_reward: bool = False
    obs_clip: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")


# ---------------------------------------------------------------- networks

def _orthogonal(rng: np.random.Generator, shape, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(shape), min(shape)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return np.ascontiguousarray(gain * q[: shape[0], : shape[1]])


class PolicyParams:
    """Named parameter arrays. Keys prefixed ``a`` are the actor, ``c`` the critic."""

    ACTOR = ("aW1", "ab1", "aW2", "ab2", "aW3", "ab3", "log_std")
    CRITIC = ("cW1", "cb1", "cW2", "cb2", "cW3", "cb3")

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = arrays

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    @property
    def state_dim(self) -> int:
        return self.arrays["aW1"].shape[0]

    @property
    def n_actions(self) -> int:
        return self.arrays["log_std"].shape[0]

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()})

    @classmethod
    def init(cls, state_dim: int, n_actions: int, hidden: int = 64, init_log_std: float = 0.0,
             rng: np.random.Generator | None = None) -> "PolicyParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        g = math.sqrt(2.0)
        arrays = {
            "aW1": _orthogonal(rng, (state_dim, hidden), g), "ab1": np.zeros(hidden),
            "aW2": _orthogonal(rng, (hidden, hidden), g), "ab2": np.zeros(hidden),
            "aW3": _orthogonal(rng, (hidden, n_actions), 0.01), "ab3": np.zeros(n_actions),
            "log_std": np.full(n_actions, float(init_log_std)),
            "cW1": _orthogonal(rng, (state_dim, hidden), g), "cb1": np.zeros(hidden),
            "cW2": _orthogonal(rng, (hidden, hidden), g), "cb2": np.zeros(hidden),
            "cW3": _orthogonal(rng, (hidden, 1), 1.0)[:, 0].copy(), "cb3": np.zeros(()),
        }
        return cls(arrays)

    @classmethod
    def zeros(cls, state_dim: int, n_actions: int, hidden: int = 64, init_log_std: float = 0.0):
        p = cls.init(state_dim, n_actions, hidden, init_log_std)
        for k, v in p.arrays.items():
            if k != "log_std":
                v[...] = 0.0
        return p


def _mlp(X, W1, b1, W2, b2, W3, b3):
    h1 = np.tanh(X @ W1 + b1)
    h2 = np.tanh(h1 @ W2 + b2)
    return h2 @ W3 + b3, (X, h1, h2)


def _mlp_backward(dout, cache, W2, W3, prefix: str) -> dict[str, np.ndarray]:
    X, h1, h2 = cache
    if dout.ndim == 1:  # scalar-output head
        dW3 = h2.T @ dout
        db3 = np.asarray(dout.sum())
        dh2 = np.outer(dout, W3)
    else:
        dW3 = h2.T @ dout
        db3 = dout.sum(axis=0)
        dh2 = dout @ W3.T
    dz2 = dh2 * (1.0 - h2 * h2)
    dW2 = h1.T @ dz2
    db2 = dz2.sum(axis=0)
    dz1 = (dz2 @ W2.T) * (1.0 - h1 * h1)
    dW1 = X.T @ dz1
    db1 = dz1.sum(axis=0)
    p = prefix
    return {f"{p}W1": dW1, f"{p}b1": db1, f"{p}W2": dW2, f"{p}b2": db2, f"{p}W3": dW3, f"{p}b3": db3}


def _actor(params: PolicyParams, X):
    a = params.arrays
    return _mlp(X, a["aW1"], a["ab1"], a["aW2"], a["ab2"], a["aW3"], a["ab3"])


def _critic(params: PolicyParams, X):
    a = params.arrays
    return _mlp(X, a["cW1"], a["cb1"], a["cW2"], a["cb2"], a["cW3"], a["cb3"])


def policy_eval(params: PolicyParams, state):
    """Return ``(mean, log_std, value)`` for one state or a (B, D) batch."""
    X = np.asarray(state, dtype=np.float64)
    if X.shape[-1] != params.state_dim:
        raise ValueError(f"state dimension {X.shape[-1]} != network input {params.state_dim}")
    mean, _ = _actor(params, X)
    value, _ = _critic(params, X)
    log_std = np.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX)
    if X.ndim == 1:
        return mean, log_std.copy(), float(value)
    return mean, log_std.copy(), value


def gaussian_log_prob(action, mean, log_std) -> np.ndarray | float:
    z = (action - mean) * np.exp(-log_std)
    return -np.sum(0.5 * z * z + log_std + HALF_LOG_2PI, axis=-1)


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std + HALF_LOG_2PIE))


def sample_action(mean, log_std, mode: str = "stochastic", seed=None):
    """Draw from the diagonal Gaussian (``seed`` may be an int or a Generator)."""
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    if mode == "deterministic":
        action = mean.copy()
    elif mode == "stochastic":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        action = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return action, float(gaussian_log_prob(action, mean, log_std))


# ---------------------------------------------------------------- advantages

def compute_gae(rewards, values, terminal_value: float, gamma: float, lam: float):
    """Backward GAE recursion. Returns ``(advantages, value_targets)``."""
    r = np.ascontiguousarray(rewards, dtype=np.float64)
    v = np.ascontiguousarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError(f"rewards {r.shape} and values {v.shape} differ in length")
    adv = kernels.gae(r, v, float(terminal_value), float(gamma), float(lam))
    return adv, adv + v


def rollout_gae(rollout: Rollout, last_value: float, gamma: float, lam: float) -> None:
    """Fill ``rollout.advantages``/``value_targets``, segmenting on episode ends.

    Segments that end in ``done`` bootstrap from 0; a trailing unfinished
    segment bootstraps from ``last_value``.
    """
    arr = rollout.arrays()
    rewards, values, dones = arr["rewards"], arr["values"], arr["dones"]
    adv = np.empty_like(rewards)
    start = 0
    n = len(rewards)
    for end in range(n):
        if dones[end] or end == n - 1:
            tail = 0.0 if dones[end] else last_value
            adv[start:end + 1], _ = compute_gae(rewards[start:end + 1], values[start:end + 1],
                                                tail, gamma, lam)
            start = end + 1
    rollout.advantages = adv
    rollout.value_targets = adv + values


# ---------------------------------------------------------------- normalizer

@dataclass
class ObsNormalizer:
    mean: np.ndarray
    var: np.ndarray
    count: float = 0.0
    clip: float = 10.0

    @classmethod
    def create(cls, dim: int, clip: float = 10.0) -> "ObsNormalizer":
        return cls(np.zeros(dim), np.ones(dim), 0.0, clip)

    def update(self, batch) -> None:
        x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        b_mean = x.mean(axis=0)
        b_var = x.var(axis=0)
        b_count = x.shape[0]
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_var, float(b_count)
            return
        delta = b_mean - self.mean
        total = self.count + b_count
        m2 = self.var * self.count + b_var * b_count + delta * delta * self.count * b_count / total
        self.mean = self.mean + delta * b_count / total
        self.var = m2 / total
        self.count = total

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "count": self.count, "clip": self.clip}

    @classmethod
    def from_dict(cls, d: dict) -> "ObsNormalizer":
        return cls(np.asarray(d["mean"]), np.asarray(d["var"]), float(d["count"]), float(d["clip"]))


def normalize_obs(norm: ObsNormalizer, obs, update: bool = False) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != norm.mean.shape[0]:
        raise ValueError(f"observation dim {obs.shape[-1]} != normalizer dim {norm.mean.shape[0]}")
    if update:
        norm.update(obs)
    return np.clip((obs - norm.mean) / np.sqrt(norm.var + 1e-8), -norm.clip, norm.clip)


# ---------------------------------------------------------------- update

def ppo_loss_and_gradients(params: PolicyParams, states, actions, old_log_probs, advantages,
                           value_targets, clip_eps: float, ent_coef: float, vf_coef: float):
    """Total loss ``-clip_objective + vf_coef * value_mse - ent_coef * entropy`` and its gradient.

    Returns ``(loss, grads, info)``; ``info`` carries the loss parts and
    the clip fraction.
    """
    X = np.asarray(states, dtype=np.float64)
    A = np.asarray(actions, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    B = X.shape[0]
    mean, a_cache = _actor(params, X)
    log_std = params["log_std"]
    inv_var = np.exp(-2.0 * log_std)
    diff = A - mean
    logp = -np.sum(0.5 * diff * diff * inv_var + log_std + HALF_LOG_2PI, axis=1)
    ratio = np.exp(logp - old_log_probs)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    objective = float(np.mean(np.minimum(surr1, surr2)))
    entropy = gaussian_entropy(log_std)

    value, c_cache = _critic(params, X)
    verr = value - value_targets
    value_loss = float(np.mean(verr * verr))
    loss = -objective + vf_coef * value_loss - ent_coef * entropy

    # d(-objective)/d logp: the unclipped branch is active where it is the min
    active = surr1 <= surr2
    dlogp = np.where(active, -ratio * adv, 0.0) / B
    dmean = dlogp[:, None] * diff * inv_var
    dlog_std = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - ent_coef

    a = params.arrays
    grads = _mlp_backward(dmean, a_cache, a["aW2"], a["aW3"], "a")
    grads["log_std"] = dlog_std
    grads.update(_mlp_backward(vf_coef * 2.0 * verr / B, c_cache, a["cW2"], a["cW3"], "c"))
    info = {
        "policy_loss": -objective,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
        "approx_kl": float(np.mean(old_log_probs - logp)),
    }
    return loss, grads, info


def ppo_update(params: PolicyParams, rollout: Rollout, config: PpoConfig, optimizer: Adam | None = None,
               rng: np.random.Generator | None = None):
    """Run ``n_epochs`` of shuffled minibatch updates in place; returns (params, diagnostics)."""
    if rollout.advantages is None:
        raise ValueError("rollout advantages not populated; run rollout_gae first")
    arr = rollout.arrays()
    X, A, old_lp = arr["states"], arr["actions"], arr["log_probs"]
    adv = rollout.advantages
    if len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    targets = rollout.value_targets
    optimizer = optimizer if optimizer is not None else Adam(params.arrays, config.lr)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    n = len(adv)
    diag = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_fraction": [], "approx_kl": []}
    for epoch in range(config.n_epochs):
        order = rng.permutation(n)
        ep = {k: [] for k in diag}
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads, info = ppo_loss_and_gradients(
                params, X[idx], A[idx], old_lp[idx], adv[idx], targets[idx],
                config.clip_eps, config.ent_coef, config.vf_coef)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite PPO loss in epoch {epoch}: {info}")
            clip_grad_norm(grads, config.max_grad_norm)
            optimizer.step(params.arrays, grads)
            np.clip(params.arrays["log_std"], LOG_STD_MIN, LOG_STD_MAX, out=params.arrays["log_std"])
            for k in ep:
                ep[k].append(info[k])
        for k in diag:
            diag[k].append(float(np.mean(ep[k])))
    return params, diag


# ---------------------------------------------------------------- training

@dataclass
class TrainedPolicy:
    top_k: int
    params: PolicyParams
    normalizer: ObsNormalizer | None
    curves: list[dict] = field(default_factory=list)

    def act(self, state) -> np.ndarray:
        """Deterministic action (the Gaussian mean) under frozen normalizer stats."""
        obs = state if self.normalizer is None else normalize_obs(self.normalizer, state, update=False)
        mean, _, _ = policy_eval(self.params, obs)
        return mean


def train_agent(env: PortfolioEnv, config: PpoConfig, top_k: int | None = None) -> TrainedPolicy:
    """Train one actor-critic on ``env`` until ``total_timesteps`` transitions are consumed."""
    rng = np.random.default_rng(config.seed)
    params = PolicyParams.init(env.state_dim, env.n_assets, config.hidden, config.init_log_std, rng)
    norm = ObsNormalizer.create(env.state_dim, config.obs_clip) if config.normalize_obs else None
    ret_rms = ObsNormalizer.create(1) if config.normalize_reward else None
    ret_acc = 0.0
    optimizer = Adam(params.arrays, config.lr)
    curves = []

    def observe(s, update):
        return s if norm is None else normalize_obs(norm, s, update=update)

    raw = env.reset()
    obs = observe(raw, True)
    steps_done = 0
    update_idx = 0
    while steps_done < config.total_timesteps:
        n = min(config.n_steps, config.total_timesteps - steps_done)
        rollout = Rollout()
        raw_rewards = []
        for _ in range(n):
            mean, log_std, value = policy_eval(params, obs)
            action, log_prob = sample_action(mean, log_std, "stochastic", rng)
            next_raw, reward, _, done = env.step(action)
            raw_rewards.append(reward)
            if not np.isfinite(reward):
                raise DivergenceError(f"non-finite reward at step {steps_done}")
            if ret_rms is not None:
                ret_acc = ret_acc * config.gamma + reward
                ret_rms.update(np.array([[ret_acc]]))
                reward = float(np.clip(reward / math.sqrt(ret_rms.var[0] + 1e-8), -10, 10))
                if done:
                    ret_acc = 0.0
            rollout.append(obs, action, log_prob, value, reward, done)
            steps_done += 1
            if done:
                raw = env.reset()
            else:
                raw = next_raw
            obs = observe(raw, True)
        _, _, last_value = policy_eval(params, obs)
        rollout_gae(rollout, last_value, config.gamma, config.gae_lambda)
        try:
            params, diag = ppo_update(params, rollout, config, optimizer, rng)
        except DivergenceError as exc:
            raise DivergenceError(f"divergence at timestep {steps_done}: {exc}") from exc
        curves.append({
            "update": update_idx,
            "mean_reward": float(np.mean(raw_rewards)),
            "policy_loss": diag["policy_loss"][-1],
            "value_loss": diag["value_loss"][-1],
            "entropy": diag["entropy"][-1],
            "clip_fraction": diag["clip_fraction"][-1],
        })
        update_idx += 1
    k = env.config.top_k if top_k is None else top_k
    return TrainedPolicy(k, params, norm, curves)


def train_ppo(make_env: Callable[[int], PortfolioEnv], config: PpoConfig,
              k_values=(5, 10, 30)) -> dict[int, TrainedPolicy]:
    """One independently trained policy per Top-K value; ``make_env(K)`` builds its environment."""
    k_values = list(k_values)
    if len(set(k_values)) != len(k_values):
        raise ValueError("K values must be unique")
    return {k: train_agent(make_env(k), config, k) for k in k_values}


def run_policy(policy: TrainedPolicy, env: PortfolioEnv):
    """Deterministic pass over ``env``; returns the episode record."""
    from .env import run_episode

    return run_episode(env, lambda s: (policy.act(s), 0.0, 0.0))


CURVE_FIELDS = ["update", "mean_reward", "policy_loss", "value_loss", "entropy", "clip_fraction"]


def write_curves_csv(path: str | Path, curves: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        w.writeheader()
        for row in curves:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in CURVE_FIELDS})


def save_policy(path: str | Path, policy: TrainedPolicy, config: PpoConfig, env_config: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "top_k": policy.top_k,
        "config": asdict(config),
        "env_config": env_config,
        "params": {k: np.asarray(v).tolist() for k, v in policy.params.arrays.items()},
        "normalizer": None if policy.normalizer is None else policy.normalizer.to_dict(),
        "curves": policy.curves,
    }
    Path(path).write_text(json.dumps(doc))


def load_policy(path: str | Path) -> tuple[TrainedPolicy, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a policy checkpoint")
    if doc["version"] > CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint version {doc['version']} is newer than supported")
    params = PolicyParams({k: np.asarray(v, dtype=np.float64) for k, v in doc["params"].items()})
    norm = None if doc["normalizer"] is None else ObsNormalizer.from_dict(doc["normalizer"])
    return TrainedPolicy(doc["top_k"], params, norm, doc["curves"]), doc
