"""scikit-learn style front end over the trainer and environment."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .bench import evaluate_policy, policy_actor
from .env import EnvConfig, GlyphEnv
from .policy import ActorCritic
from .ppo import PpoConfig, train
from .prompt import Layout, extract_keywords, generate_layout

ENV_PARAMS = ("window_size", "num_rectan", "min_area", "w_min", "h_min", "min_overlap", "max_steps",
              "action_scale")
PPO_PARAMS = ("learning_rate", "rollout_horizon", "minibatch_size", "epochs_per_update", "gamma",
              "gae_lambda", "clip_range", "entropy_coef", "vf_coef", "max_grad_norm",
              "normalize_advantages", "total_timesteps", "num_envs", "hidden_sizes")


def check_layouts(X, num_rectan: int, window_size: float) -> np.ndarray:
    """Validate layouts given as ``(n, N, 4)`` or flattened ``(n, 4N)``; returns ``(n, N, 4)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X.reshape(X.shape[0], -1)
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != 4 * num_rectan:
        raise ValueError(f"X has {X.shape[1]} features, expected {4 * num_rectan} (num_rectan={num_rectan})")
    if np.any(X < 0) or np.any(X > window_size):
        raise ValueError(f"layout coordinates must lie in [0, {window_size}]")
    return X.reshape(-1, num_rectan, 4)


class LayoutPPO(TransformerMixin, BaseEstimator):
    """Learns to de-overlap ``num_rectan`` boxes in a square window with PPO.

    ``fit`` trains against a freshly simulated environment (``X`` is ignored);
    ``predict`` maps layouts to the deterministic per-corner deltas the policy
    would apply; ``transform`` runs the policy to completion from each layout
    and returns the refined layouts.
    """

    def __init__(self, window_size=128.0, num_rectan=5, min_area=1500.0, w_min=10.0, h_min=10.0,
                 min_overlap=0.1, max_steps=1000, action_scale=1.0, learning_rate=3e-4,
                 rollout_horizon=2048, minibatch_size=64, epochs_per_update=10, gamma=0.99,
                 gae_lambda=0.95, clip_range=0.2, entropy_coef=0.0, vf_coef=0.5, max_grad_norm=0.5,
                 normalize_advantages=True, total_timesteps=200_000, num_envs=1, hidden_sizes=(64, 64),
                 random_state=0):
        self.window_size = window_size
        self.num_rectan = num_rectan
        self.min_area = min_area
        self.w_min = w_min
        self.h_min = h_min
        self.min_overlap = min_overlap
        self.max_steps = max_steps
        self.action_scale = action_scale
        self.learning_rate = learning_rate
        self.rollout_horizon = rollout_horizon
        self.minibatch_size = minibatch_size
        self.epochs_per_update = epochs_per_update
        self.gamma = gamma
        self.gae_lambda = gae_lambda
        self.clip_range = clip_range
        self.entropy_coef = entropy_coef
        self.vf_coef = vf_coef
        self.max_grad_norm = max_grad_norm
        self.normalize_advantages = normalize_advantages
        self.total_timesteps = total_timesteps
        self.num_envs = num_envs
        self.hidden_sizes = hidden_sizes
        self.random_state = random_state

    def env_config(self) -> EnvConfig:
        return EnvConfig(**{k: getattr(self, k) for k in ENV_PARAMS}, seed=int(self.random_state))

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(**{k: getattr(self, k) for k in PPO_PARAMS})

    def fit(self, X=None, y=None, out_dir=None):
        env_cfg = self.env_config()
        result = train(env_cfg, self.ppo_config(), out_dir=out_dir)
        self.policy_ = result.policy
        self.training_metrics_ = result.metrics
        self.n_features_in_ = 4 * env_cfg.num_rectan
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "LayoutPPO":
        policy, doc = ActorCritic.load(path)
        params = {k: v for k, v in doc.get("env_config", {}).items() if k in ENV_PARAMS}
        est = cls(**params, random_state=doc.get("env_config", {}).get("seed", 0))
        if 4 * est.num_rectan != policy.obs_dim:
            raise ValueError("checkpoint environment echo disagrees with its layer dimensions")
        est.policy_ = policy
        est.training_metrics_ = []
        est.n_features_in_ = policy.obs_dim
        return est

    def save(self, path) -> int:
        check_is_fitted(self, "policy_")
        return self.policy_.save(path, self.env_config().to_dict())

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "policy_")
        X = check_layouts(X, self.num_rectan, self.window_size)
        mean, _ = self.policy_.forward_actor(X.reshape(len(X), -1) / self.window_size)
        return np.tanh(mean).reshape(X.shape)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "policy_")
        X = check_layouts(X, self.num_rectan, self.window_size)
        cfg = self.env_config()
        env = GlyphEnv(cfg)
        act = policy_actor(self.policy_, cfg, deterministic=True)
        out = np.empty_like(X)
        for i, layout in enumerate(X):
            state = env.set_state(layout)
            while True:
                step = env.step(act(state))
                state = step.state
                if step.done or step.truncated:
                    break
            out[i] = state
        return out

    def score(self, X=None, y=None, episodes: int = 50, seed: int = 0) -> float:
        """Mean deterministic episode return over freshly sampled layouts."""
        check_is_fitted(self, "policy_")
        return evaluate_policy(self.env_config(), self.policy_, episodes, True, seed).mean_reward

    def generate(self, prompt: str, seed: int = 0, **kwargs) -> Layout:
        check_is_fitted(self, "policy_")
        return generate_layout(extract_keywords(prompt), self.policy_, self.env_config(), seed, **kwargs)
