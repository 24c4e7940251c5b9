"""GlyphEnv: N boxes in a square window, nudged by per-corner deltas until
their summed pairwise IoU drops below a threshold."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .geometry import total_overlap

MAX_INIT_ATTEMPTS = 1000
REWARD_SCALE = 10.0


class InfeasibleConfigError(ValueError):
    """Raised when the box constraints cannot be met inside the window."""


class EpisodeFinishedError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    window_size: float = 128.0
    num_rectan: int = 5
    min_area: float = 1500.0
    w_min: float = 10.0
    h_min: float = 10.0
    min_overlap: float = 0.1
    max_steps: int = 1000
    action_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.window_size <= 0:
            raise InfeasibleConfigError(f"window_size must be > 0, got {self.window_size}")
        if int(self.num_rectan) != self.num_rectan or self.num_rectan < 1:
            raise InfeasibleConfigError(f"num_rectan must be an integer >= 1, got {self.num_rectan}")
        if self.max_steps < 1:
            raise InfeasibleConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if not 0.0 < self.min_overlap < 1.0:
            raise InfeasibleConfigError(f"min_overlap must lie in (0, 1), got {self.min_overlap}")
        if self.w_min <= 0 or self.h_min <= 0:
            raise InfeasibleConfigError("w_min and h_min must be positive")
        if self.w_min * self.h_min > self.min_area:
            raise InfeasibleConfigError(
                f"min_area={self.min_area} is below w_min*h_min={self.w_min * self.h_min}"
            )
        capacity = (self.window_size - self.w_min) * (self.window_size - self.h_min)
        if self.w_min >= self.window_size or self.h_min >= self.window_size or self.min_area > capacity:
            raise InfeasibleConfigError(
                f"min_area={self.min_area} exceeds (window_size-w_min)*(window_size-h_min)={capacity}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown EnvConfig keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def max_total_overlap(self) -> float:
        n = self.num_rectan
        return n * (n - 1) / 2.0


@dataclass
class StepOutcome:
    state: np.ndarray
    reward: float
    overlap: float
    done: bool
    truncated: bool
    steps_elapsed: int


def overlap_reward(overlap: float, min_overlap: float) -> float:
    """Piecewise-linear reward: positive below the threshold, penalty above."""
    if overlap < min_overlap:
        return REWARD_SCALE * (1.0 - overlap / min_overlap)
    return -REWARD_SCALE * (overlap - min_overlap) / (1.0 - min_overlap)


def generate_initial_state(cfg: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    """Sample ``num_rectan`` boxes of area ``min_area`` inside the window.

    The top-left corner is drawn first; the width is then drawn from the
    interval that keeps both sides above their minimum and the box inside the
    window. Corners with an empty interval are redrawn.
    """
    W = float(cfg.window_size)
    A = float(cfg.min_area)
    state = np.empty((cfg.num_rectan, 4), dtype=np.float64)
    for i in range(cfg.num_rectan):
        for _ in range(MAX_INIT_ATTEMPTS):
            x1 = rng.uniform(0.0, W - cfg.w_min)
            y1 = rng.uniform(0.0, W - cfg.h_min)
            lo = max(cfg.w_min, A / (W - y1))
            hi = min(W - x1, A / cfg.h_min)
            if lo <= hi:
                break
        else:
            raise InfeasibleConfigError(
                f"could not place a box of area {A} with w>={cfg.w_min}, h>={cfg.h_min} "
                f"inside a {W}x{W} window after {MAX_INIT_ATTEMPTS} attempts"
            )
        w = rng.uniform(lo, hi)
        h = A / w
        state[i] = (x1, y1, x1 + w, y1 + h)
    return state


def apply_deltas(state: np.ndarray, action: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Move corners, clip to the window, repair ordering, restore min sizes."""
    W = float(cfg.window_size)
    w_min, h_min = float(cfg.w_min), float(cfg.h_min)
    moved = (state + cfg.action_scale * action).tolist()
    out = []
    for x1, y1, x2, y2 in moved:
        x1, y1, x2, y2 = (min(max(v, 0.0), W) for v in (x1, y1, x2, y2))
        if x2 < x1:
            x1, x2 = x2, x1
        if y2 < y1:
            y1, y2 = y2, y1
        if x2 - x1 < w_min:
            x2 = min(x1 + w_min, W)
            if x2 - x1 < w_min:
                x1 = x2 - w_min
        if y2 - y1 < h_min:
            y2 = min(y1 + h_min, W)
            if y2 - y1 < h_min:
                y1 = y2 - h_min
        out.append((x1, y1, x2, y2))
    return np.array(out, dtype=np.float64)


class GlyphEnv:
    """Continuous-control layout environment.

    Observations are the raw ``(N, 4)`` corner matrix. Actions are ``(N, 4)``
    deltas clamped to ``[-1, 1]`` and scaled by ``action_scale`` pixels.
    """

    def __init__(self, config: Optional[EnvConfig] = None, seed: Optional[int] = None):
        self.config = config if config is not None else EnvConfig()
        self.rng = np.random.default_rng(self.config.seed if seed is None else seed)
        self.state: Optional[np.ndarray] = None
        self.steps = 0
        self._finished = True

    @property
    def action_shape(self) -> tuple:
        return (self.config.num_rectan, 4)

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = generate_initial_state(self.config, self.rng)
        self.steps = 0
        self._finished = False
        return self.state.copy()

    def set_state(self, state) -> np.ndarray:
        """Start an episode from a caller-supplied ``(N, 4)`` layout."""
        state = np.array(state, dtype=np.float64)
        if state.shape != self.action_shape:
            raise ValueError(f"state shape {state.shape} does not match {self.action_shape}")
        W = self.config.window_size
        if np.any(state < 0) or np.any(state > W):
            raise ValueError(f"state coordinates must lie in [0, {W}]")
        if np.any(state[:, 2] < state[:, 0]) or np.any(state[:, 3] < state[:, 1]):
            raise ValueError("state rows must satisfy x1 <= x2 and y1 <= y2")
        self.state = state
        self.steps = 0
        self._finished = False
        return state.copy()

    def overlap(self) -> float:
        return total_overlap(self.state.tolist())

    def step(self, action) -> StepOutcome:
        if self.state is None or self._finished:
            raise EpisodeFinishedError("episode has ended; call reset() first")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != self.action_shape:
            raise ValueError(f"action shape {action.shape} does not match {self.action_shape}")
        action = np.clip(action, -1.0, 1.0)

        self.state = apply_deltas(self.state, action, self.config)
        self.steps += 1
        o = self.overlap()
        m = self.config.min_overlap
        reward = overlap_reward(o, m)
        done = o < m
        truncated = (not done) and self.steps >= self.config.max_steps
        self._finished = done or truncated
        return StepOutcome(self.state.copy(), reward, o, done, truncated, self.steps)
