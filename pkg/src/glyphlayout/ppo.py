"""Proximal policy optimization for GlyphEnv: rollouts, GAE, clipped updates."""
from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .env import EnvConfig, GlyphEnv
from .policy import ActorCritic, Adam, TrainingDivergenceError, clip_grad_norm
from .seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

METRICS_HEADER = [
    "update", "timestep", "episodes", "ep_len_mean", "ep_reward_mean", "ep_overlap_mean",
    "success_rate", "policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction",
    "grad_norm", "explained_variance",
]


@dataclass(frozen=True)
class PpoConfig:
    learning_rate: float = 3e-4
    rollout_horizon: int = 2048
    minibatch_size: int = 64
    epochs_per_update: int = 10
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    entropy_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    total_timesteps: int = 200_000
    num_envs: int = 1
    hidden_sizes: tuple = (64, 64)
    checkpoint_interval: int = 10

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        self.validate()

    def validate(self) -> None:
        batch = self.rollout_horizon * self.num_envs
        if self.rollout_horizon < 1 or self.num_envs < 1:
            raise ValueError("rollout_horizon and num_envs must be >= 1")
        if self.minibatch_size < 1 or batch % self.minibatch_size:
            raise ValueError(
                f"rollout_horizon*num_envs={batch} is not divisible by minibatch_size={self.minibatch_size}"
            )
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError(f"gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if self.clip_range <= 0:
            raise ValueError(f"clip_range must be > 0, got {self.clip_range}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.total_timesteps < 1 or self.epochs_per_update < 1:
            raise ValueError("total_timesteps and epochs_per_update must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PpoConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown PpoConfig keys: {sorted(unknown)}")
        return cls(**d)


class RolloutBuffer:
    """Fixed-horizon transition storage, shaped ``(horizon, num_envs, ...)``.

    ``terminal_values`` holds the critic's estimate of the final state of an
    episode cut off by the step limit (0 elsewhere), so rewards stay exactly
    what the environment emitted.
    """

    def __init__(self, horizon: int, num_envs: int, obs_dim: int, act_dim: int):
        T, E = horizon, num_envs
        self.horizon = horizon
        self.num_envs = num_envs
        self.obs = np.zeros((T, E, obs_dim))
        self.actions = np.zeros((T, E, act_dim))
        self.log_probs = np.zeros((T, E))
        self.rewards = np.zeros((T, E))
        self.values = np.zeros((T, E))
        self.dones = np.zeros((T, E), dtype=bool)
        self.truncateds = np.zeros((T, E), dtype=bool)
        self.terminal_values = np.zeros((T, E))
        self.advantages: Optional[np.ndarray] = None
        self.returns: Optional[np.ndarray] = None
        self.pos = 0

    @property
    def full(self) -> bool:
        return self.pos == self.horizon

    def add(self, obs, actions, log_probs, rewards, values, dones, truncateds, terminal_values) -> None:
        t = self.pos
        if t >= self.horizon:
            raise IndexError("rollout buffer is full")
        self.obs[t] = obs
        self.actions[t] = actions
        self.log_probs[t] = log_probs
        self.rewards[t] = rewards
        self.values[t] = values
        self.dones[t] = dones
        self.truncateds[t] = truncateds
        self.terminal_values[t] = terminal_values
        self.pos += 1

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        if a is None:
            raise ValueError(f"{name} not computed yet; call compute_gae first")
        return a.reshape(self.horizon * self.num_envs, *a.shape[2:])


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float, last_values) -> RolloutBuffer:
    """Fill ``buffer.advantages`` and ``buffer.returns`` by the backward GAE recursion."""
    last_values = np.broadcast_to(np.asarray(last_values, dtype=np.float64), (buffer.num_envs,))
    ended = buffer.dones | buffer.truncateds
    adv = np.zeros_like(buffer.rewards)
    gae = np.zeros(buffer.num_envs)
    for t in reversed(range(buffer.horizon)):
        next_values = last_values if t == buffer.horizon - 1 else buffer.values[t + 1]
        cont = 1.0 - ended[t]
        delta = (buffer.rewards[t] + gamma * (next_values * cont + buffer.terminal_values[t])
                 - buffer.values[t])
        gae = delta + gamma * lam * cont * gae
        adv[t] = gae
    buffer.advantages = adv
    buffer.returns = adv + buffer.values
    return buffer


def normalize(adv: np.ndarray) -> np.ndarray:
    std = float(np.std(adv))
    return (adv - np.mean(adv)) / max(std, 1e-8)


def clipped_surrogate(ratio, advantages, clip_range: float) -> float:
    """Policy term of the PPO loss, ``-mean(min(r*A, clip(r)*A))``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    clipped = np.clip(ratio, 1.0 - clip_range, 1.0 + clip_range)
    return -float(np.mean(np.minimum(ratio * adv, clipped * adv)))


def ppo_loss(policy: ActorCritic, minibatch: dict, clip_range: float, vf_coef: float,
             entropy_coef: float):
    """``(loss, info)`` for a minibatch dict with keys obs/actions/log_probs/advantages/returns."""
    loss, _, info = policy.loss_and_grads(
        minibatch["obs"], minibatch["actions"], minibatch["log_probs"],
        minibatch["advantages"], minibatch["returns"], clip_range, vf_coef, entropy_coef,
    )
    return loss, info


class RolloutCollector:
    """Steps a set of persistent environments with a policy.

    Episodes that end mid-rollout are reset automatically and their returns,
    lengths and final overlaps are kept in ``episode_log``.
    """

    def __init__(self, envs: Sequence[GlyphEnv], rng: np.random.Generator):
        self.envs = list(envs)
        self.rng = rng
        self.obs = [env.reset() for env in self.envs]
        self.ep_return = [0.0] * len(self.envs)
        self.ep_len = [0] * len(self.envs)
        self.episode_log: List[dict] = []
        self.resets = 0

    def _norm(self, env: GlyphEnv, state: np.ndarray) -> np.ndarray:
        return state.reshape(-1) / env.config.window_size

    def collect(self, policy: ActorCritic, horizon: int) -> RolloutBuffer:
        E = len(self.envs)
        buf = RolloutBuffer(horizon, E, policy.obs_dim, policy.act_dim)
        for _ in range(horizon):
            obs = np.stack([self._norm(env, s) for env, s in zip(self.envs, self.obs)])
            action, z, log_prob, value = policy.act(obs, self.rng)
            rewards = np.zeros(E)
            dones = np.zeros(E, dtype=bool)
            truncs = np.zeros(E, dtype=bool)
            term_values = np.zeros(E)
            for i, env in enumerate(self.envs):
                out = env.step(action[i].reshape(env.action_shape))
                rewards[i] = out.reward
                dones[i] = out.done
                truncs[i] = out.truncated
                self.ep_return[i] += out.reward
                self.ep_len[i] += 1
                if out.truncated:
                    term_values[i] = float(policy.value(self._norm(env, out.state)))
                if out.done or out.truncated:
                    self.episode_log.append({
                        "return": self.ep_return[i], "length": self.ep_len[i],
                        "final_overlap": out.overlap, "succeeded": bool(out.done),
                    })
                    self.ep_return[i] = 0.0
                    self.ep_len[i] = 0
                    self.obs[i] = env.reset()
                    self.resets += 1
                else:
                    self.obs[i] = out.state
            buf.add(obs, z, log_prob, rewards, value, dones, truncs, term_values)
        return buf

    def last_values(self, policy: ActorCritic) -> np.ndarray:
        obs = np.stack([self._norm(env, s) for env, s in zip(self.envs, self.obs)])
        return policy.value(obs)


def collect_rollout(envs: Sequence[GlyphEnv], policy: ActorCritic, horizon: int,
                    rng: np.random.Generator) -> RolloutBuffer:
    """One-shot rollout from freshly reset environments."""
    return RolloutCollector(envs, rng).collect(policy, horizon)


def update_policy(policy: ActorCritic, optimizer: Adam, buffer: RolloutBuffer, cfg: PpoConfig,
                  rng: np.random.Generator) -> dict:
    """Run ``epochs_per_update`` shuffled minibatch passes over ``buffer``."""
    obs = buffer.flat("obs")
    actions = buffer.flat("actions")
    log_probs = buffer.flat("log_probs")
    advantages = buffer.flat("advantages")
    returns = buffer.flat("returns")
    n = obs.shape[0]
    stats = {k: [] for k in ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction", "grad_norm")}
    for _ in range(cfg.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            adv = advantages[idx]
            if cfg.normalize_advantages:
                adv = normalize(adv)
            _, grads, info = policy.loss_and_grads(
                obs[idx], actions[idx], log_probs[idx], adv, returns[idx],
                cfg.clip_range, cfg.vf_coef, cfg.entropy_coef,
            )
            norm = clip_grad_norm(grads, cfg.max_grad_norm)
            optimizer.step(policy.params, grads, cfg.learning_rate)
            for k in stats:
                stats[k].append(norm if k == "grad_norm" else info[k])
    for k, v in policy.params.items():
        if not np.all(np.isfinite(v)):
            raise TrainingDivergenceError(f"non-finite parameter {k} after update")
    out = {k: float(np.mean(v)) for k, v in stats.items()}
    var_ret = float(np.var(returns))
    out["explained_variance"] = (float("nan") if var_ret == 0
                                 else 1.0 - float(np.var(returns - buffer.flat("values"))) / var_ret)
    return out


@dataclass
class TrainResult:
    policy: ActorCritic
    metrics: List[dict]
    episodes: List[dict]
    checkpoint_path: Optional[Path]
    metrics_path: Optional[Path]


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def train(env_cfg: EnvConfig, ppo_cfg: PpoConfig, out_dir=None, seed: Optional[int] = None,
          callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train a fresh policy; writes ``metrics.csv`` and checkpoints when ``out_dir`` is set.

    Every random stream (policy init, environments, action noise, minibatch
    shuffling) is derived from ``seed`` (default ``env_cfg.seed``).
    """
    seed = env_cfg.seed if seed is None else seed
    policy = ActorCritic.for_env(env_cfg.num_rectan, ppo_cfg.hidden_sizes, seed=derive_seed(seed, "policy"))
    optimizer = Adam(policy.params)
    envs = [GlyphEnv(env_cfg, seed=derive_seed(seed, "env", i)) for i in range(ppo_cfg.num_envs)]
    collector = RolloutCollector(envs, make_rng(seed, "sample"))
    shuffle_rng = make_rng(seed, "shuffle")

    out = Path(out_dir) if out_dir is not None else None
    metrics_path = ckpt_dir = None
    writer = fh = None
    if out is not None:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        fh = open(metrics_path, "w", newline="", encoding="utf-8")
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        writer.writeheader()

    meta = {"seed": seed, "ppo_config": ppo_cfg.to_dict()}
    recent = deque(maxlen=100)
    metrics: List[dict] = []
    per_update = ppo_cfg.rollout_horizon * ppo_cfg.num_envs
    n_updates = max(1, math.ceil(ppo_cfg.total_timesteps / per_update))
    final_path = None
    try:
        for update in range(1, n_updates + 1):
            n_before = len(collector.episode_log)
            buf = collector.collect(policy, ppo_cfg.rollout_horizon)
            compute_gae(buf, ppo_cfg.gamma, ppo_cfg.gae_lambda, collector.last_values(policy))
            recent.extend(collector.episode_log[n_before:])
            backup = policy.copy()
            try:
                stats = update_policy(policy, optimizer, buf, ppo_cfg, shuffle_rng)
            except TrainingDivergenceError:
                policy.params = backup.params
                if ckpt_dir is not None:
                    policy.save(ckpt_dir / "last_good.json", env_cfg.to_dict(), {**meta, "update": update - 1})
                raise
            row = {
                "update": update,
                "timestep": update * per_update,
                "episodes": len(collector.episode_log),
                "ep_len_mean": _mean([e["length"] for e in recent]),
                "ep_reward_mean": _mean([e["return"] for e in recent]),
                "ep_overlap_mean": _mean([e["final_overlap"] for e in recent]),
                "success_rate": _mean([float(e["succeeded"]) for e in recent]),
                **stats,
            }
            metrics.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
                if ppo_cfg.checkpoint_interval and update % ppo_cfg.checkpoint_interval == 0 and update < n_updates:
                    policy.save(ckpt_dir / f"update_{update:05d}.json", env_cfg.to_dict(), {**meta, "update": update})
            logger.info("update %d/%d t=%d ep_reward_mean=%.2f ep_len_mean=%.1f", update, n_updates,
                        row["timestep"], row["ep_reward_mean"], row["ep_len_mean"])
            if callback is not None:
                callback(row)
        if ckpt_dir is not None:
            final_path = ckpt_dir / "final.json"
            policy.save(final_path, env_cfg.to_dict(), {**meta, "update": n_updates})
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(policy, metrics, collector.episode_log, final_path, metrics_path)
