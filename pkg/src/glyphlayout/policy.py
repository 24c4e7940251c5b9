"""Tanh-squashed Gaussian actor-critic with hand-written backprop and Adam.

All arrays are float64. The actor and critic are separate MLPs with tanh
hidden layers; the policy's log standard deviation is a free vector that does
not depend on the observation.
"""
from __future__ import annotations

import base64
import json
import math
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)

CHECKPOINT_FORMAT = "glyphlayout-policy"
CHECKPOINT_VERSION = 1


class TrainingDivergenceError(FloatingPointError):
    """Non-finite loss, gradient or parameter during optimization."""


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return np.ascontiguousarray(gain * q[:n_in, :n_out])


class MLP:
    """Dense tanh network; the output layer is linear."""

    def __init__(self, prefix: str, dims: Sequence[int]):
        self.prefix = prefix
        self.dims = list(dims)

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def keys(self):
        for i in range(self.n_layers):
            yield f"{self.prefix}.W{i}"
            yield f"{self.prefix}.b{i}"

    def init(self, params: dict, rng: np.random.Generator, out_gain: float) -> None:
        for i in range(self.n_layers):
            gain = out_gain if i == self.n_layers - 1 else math.sqrt(2.0)
            params[f"{self.prefix}.W{i}"] = _orthogonal(rng, self.dims[i], self.dims[i + 1], gain)
            params[f"{self.prefix}.b{i}"] = np.zeros(self.dims[i + 1])

    def forward(self, params: dict, x: np.ndarray):
        acts = [x]
        h = x
        for i in range(self.n_layers):
            h = h @ params[f"{self.prefix}.W{i}"] + params[f"{self.prefix}.b{i}"]
            if i < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, params: dict, acts, dout: np.ndarray, grads: dict) -> None:
        d = dout
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                d = d * (1.0 - acts[i + 1] ** 2)
            grads[f"{self.prefix}.W{i}"] = acts[i].T @ d
            grads[f"{self.prefix}.b{i}"] = d.sum(axis=0)
            if i > 0:
                d = d @ params[f"{self.prefix}.W{i}"].T


def gaussian_log_prob(z: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Diagonal Gaussian log density summed over the last axis."""
    std = np.exp(log_std)
    return np.sum(-0.5 * ((z - mean) / std) ** 2 - log_std - HALF_LOG_2PI, axis=-1)


def squash_correction(z: np.ndarray) -> np.ndarray:
    return np.sum(np.log(1.0 - np.tanh(z) ** 2 + SQUASH_EPS), axis=-1)


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std + HALF_LOG_2PIE))


def sample_action(mean: np.ndarray, log_std: np.ndarray, rng: Optional[np.random.Generator] = None,
                  noise: Optional[np.ndarray] = None):
    """Draw a squashed action.

    Returns ``(action, log_prob, z)`` where ``action = tanh(z)`` and
    ``log_prob`` includes the tanh change-of-variables term. Pass ``noise``
    to fix the standard-normal draw.
    """
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.clip(np.asarray(log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)
    if noise is None:
        noise = rng.standard_normal(mean.shape)
    z = mean + np.exp(log_std) * noise
    log_prob = gaussian_log_prob(z, mean, log_std) - squash_correction(z)
    return np.tanh(z), log_prob, z


class ActorCritic:
    """Policy mean network, value network and a state-independent log-std."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int] = (64, 64),
                 seed: Optional[int] = 0, params: Optional[Dict[str, np.ndarray]] = None):
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.actor = MLP("actor", [self.obs_dim, *self.hidden, self.act_dim])
        self.critic = MLP("critic", [self.obs_dim, *self.hidden, 1])
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            self.actor.init(params, rng, out_gain=0.01)
            self.critic.init(params, rng, out_gain=1.0)
            params["log_std"] = np.zeros(self.act_dim)
        self.params = params
        self._check_shapes()

    @classmethod
    def for_env(cls, num_rectan: int, hidden: Sequence[int] = (64, 64), seed: Optional[int] = 0):
        return cls(4 * num_rectan, 4 * num_rectan, hidden, seed)

    def _check_shapes(self) -> None:
        expected = {"log_std": (self.act_dim,)}
        for net in (self.actor, self.critic):
            for i in range(net.n_layers):
                expected[f"{net.prefix}.W{i}"] = (net.dims[i], net.dims[i + 1])
                expected[f"{net.prefix}.b{i}"] = (net.dims[i + 1],)
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} do not match {sorted(expected)}")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")

    def keys(self):
        return list(self.actor.keys()) + list(self.critic.keys()) + ["log_std"]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def _obs(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation has last dimension {obs.shape[-1]}, expected {self.obs_dim}")
        return obs

    @property
    def log_std(self) -> np.ndarray:
        return np.clip(self.params["log_std"], LOG_STD_MIN, LOG_STD_MAX)

    def forward_actor(self, obs) -> Tuple[np.ndarray, np.ndarray]:
        mean, _ = self.actor.forward(self.params, self._obs(obs))
        return mean, self.log_std

    def value(self, obs) -> np.ndarray:
        v, _ = self.critic.forward(self.params, self._obs(obs))
        return v[..., 0]

    def act(self, obs, rng: Optional[np.random.Generator] = None, deterministic: bool = False):
        """Single-step helper used during rollouts: ``(action, z, log_prob, value)``."""
        obs = self._obs(obs)
        mean, log_std = self.forward_actor(obs)
        if deterministic:
            z = mean
            log_prob = gaussian_log_prob(z, mean, log_std) - squash_correction(z)
            action = np.tanh(z)
        else:
            action, log_prob, z = sample_action(mean, log_std, rng)
        return action, z, log_prob, self.value(obs)

    def evaluate(self, obs, z) -> Tuple[np.ndarray, np.ndarray, float]:
        """Log-density of stored pre-squash actions, state values, entropy."""
        obs = self._obs(obs)
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.act_dim:
            raise ValueError(f"action has last dimension {z.shape[-1]}, expected {self.act_dim}")
        mean, log_std = self.forward_actor(obs)
        log_prob = gaussian_log_prob(z, mean, log_std) - squash_correction(z)
        return log_prob, self.value(obs), gaussian_entropy(log_std)

    def loss_and_grads(self, obs, z, old_log_prob, advantages, returns,
                       clip_range: float, vf_coef: float, ent_coef: float):
        """Clipped-surrogate PPO loss and its exact gradient.

        Returns ``(loss, grads, info)``; ``info`` carries the individual loss
        terms, the clipped fraction and an approximate KL.
        """
        obs = self._obs(obs)
        z = np.asarray(z, dtype=np.float64)
        adv = np.asarray(advantages, dtype=np.float64)
        ret = np.asarray(returns, dtype=np.float64)
        B = obs.shape[0]
        p = self.params

        mean, a_acts = self.actor.forward(p, obs)
        raw_log_std = p["log_std"]
        log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        value, c_acts = self.critic.forward(p, obs)
        value = value[:, 0]

        # The tanh correction does not depend on parameters and cancels in the ratio.
        new_log_prob = gaussian_log_prob(z, mean, log_std) - squash_correction(z)
        log_ratio = new_log_prob - np.asarray(old_log_prob, dtype=np.float64)
        ratio = np.exp(log_ratio)
        clipped = np.clip(ratio, 1.0 - clip_range, 1.0 + clip_range)
        surr1 = ratio * adv
        surr2 = clipped * adv
        policy_loss = -float(np.mean(np.minimum(surr1, surr2)))
        value_loss = float(np.mean((value - ret) ** 2))
        entropy = gaussian_entropy(log_std)
        loss = policy_loss + vf_coef * value_loss - ent_coef * entropy
        if not math.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite PPO loss {loss}")

        # d loss / d new_log_prob; zero where the clipped branch is selected.
        unclipped = surr1 <= surr2
        dlogp = np.where(unclipped, -surr1 / B, 0.0)

        inv_var = np.exp(-2.0 * log_std)
        diff = z - mean
        dmean = dlogp[:, None] * diff * inv_var
        dlog_std = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - ent_coef
        dlog_std = np.where((raw_log_std < LOG_STD_MIN) | (raw_log_std > LOG_STD_MAX), 0.0, dlog_std)

        grads: Dict[str, np.ndarray] = {}
        self.actor.backward(p, a_acts, dmean, grads)
        dvalue = (2.0 * vf_coef / B) * (value - ret)
        self.critic.backward(p, c_acts, dvalue[:, None], grads)
        grads["log_std"] = dlog_std

        info = {
            "loss": loss,
            "policy_loss": policy_loss,
            "value_loss": value_loss,
            "entropy": entropy,
            "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_range)),
            "approx_kl": float(np.mean((ratio - 1.0) - log_ratio)),
        }
        return loss, grads, info

    # -- serialization -------------------------------------------------

    def to_document(self, env_config: Optional[dict] = None, metadata: Optional[dict] = None) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "env_config": env_config or {},
            "layer_dims": {"actor": self.actor.dims, "critic": self.critic.dims},
            "params": {
                k: {
                    "shape": list(self.params[k].shape),
                    "data": base64.b64encode(np.ascontiguousarray(self.params[k], dtype="<f8").tobytes()).decode("ascii"),
                }
                for k in self.keys()
            },
            "metadata": metadata or {},
        }

    @classmethod
    def from_document(cls, doc: dict) -> "ActorCritic":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a policy checkpoint (format={doc.get('format')!r})")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        actor_dims = doc["layer_dims"]["actor"]
        critic_dims = doc["layer_dims"]["critic"]
        if actor_dims[1:-1] != critic_dims[1:-1] or actor_dims[0] != critic_dims[0]:
            raise ValueError("actor and critic layer dimensions are inconsistent")
        params = {}
        for k, entry in doc["params"].items():
            raw = base64.b64decode(entry["data"])
            params[k] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
        return cls(actor_dims[0], actor_dims[-1], actor_dims[1:-1], params=params)

    def save(self, path, env_config: Optional[dict] = None, metadata: Optional[dict] = None) -> int:
        """Write a JSON checkpoint; returns its size in bytes."""
        text = json.dumps(self.to_document(env_config, metadata), sort_keys=True, indent=1)
        data = text.encode("utf-8")
        Path(path).write_bytes(data)
        return len(data)

    @classmethod
    def load(cls, path) -> Tuple["ActorCritic", dict]:
        """Return the policy and the raw document (for its config echo)."""
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_document(doc), doc

    def copy(self) -> "ActorCritic":
        return ActorCritic(self.obs_dim, self.act_dim, self.hidden,
                           params={k: v.copy() for k, v in self.params.items()})


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to a global L2 norm of at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= scale
    return norm


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-5):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        for k, g in grads.items():
            if g.shape != params[k].shape:
                raise ValueError(f"gradient {k} has shape {g.shape}, parameter has {params[k].shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(f"non-finite gradient for {k}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
