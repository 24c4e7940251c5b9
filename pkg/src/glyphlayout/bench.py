"""Evaluation protocol, random baseline, ablation sweeps and inference cost."""
from __future__ import annotations

import csv
import json
import statistics
import time
import tracemalloc
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from .env import EnvConfig, GlyphEnv, InfeasibleConfigError
from .policy import ActorCritic
from .ppo import PpoConfig, train
from .seeding import derive_seed, make_rng

EPISODE_HEADER = ["episode", "seed", "return", "steps", "final_overlap", "succeeded"]
REPORT_HEADER = ["mean_reward", "reward_std", "mean_final_overlap", "success_rate", "mean_steps",
                 "episodes", "policy_bytes"]

RECTANGLE_COUNTS = (4, 5, 6, 7)
MIN_AREAS = (1300, 1500, 1800, 2000)
SEEDS = (0, 42, 123, 551, 999)


@dataclass
class EpisodeMetrics:
    episode_return: float
    steps: int
    final_overlap: float
    succeeded: bool
    seed: int = 0


@dataclass
class BenchReport:
    mean_reward: float
    reward_std: float
    mean_final_overlap: float
    success_rate: float
    mean_steps: float
    wall_time_per_episode: float
    policy_bytes: int
    episodes: List[EpisodeMetrics] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("episodes")
        d["episodes"] = len(self.episodes)
        return d

    def format(self) -> str:
        return (f"mean_reward={self.mean_reward:.2f} reward_std={self.reward_std:.2f} "
                f"mean_iou={self.mean_final_overlap:.4f} success_rate={self.success_rate:.3f} "
                f"mean_steps={self.mean_steps:.1f} ms/episode={self.wall_time_per_episode:.2f} "
                f"policy_bytes={self.policy_bytes}")


def aggregate(episodes: Sequence[EpisodeMetrics], wall_ms: float = 0.0, policy_bytes: int = 0) -> BenchReport:
    """Reduce per-episode metrics in episode order."""
    if not episodes:
        raise ValueError("no episodes to aggregate")
    returns = np.array([e.episode_return for e in episodes])
    return BenchReport(
        mean_reward=float(np.mean(returns)),
        reward_std=float(np.std(returns)),
        mean_final_overlap=float(np.mean([e.final_overlap for e in episodes])),
        success_rate=float(np.mean([float(e.succeeded) for e in episodes])),
        mean_steps=float(np.mean([e.steps for e in episodes])),
        wall_time_per_episode=wall_ms,
        policy_bytes=int(policy_bytes),
        episodes=list(episodes),
    )


def run_episode(env: GlyphEnv, act: Callable[[np.ndarray], np.ndarray], seed: int) -> EpisodeMetrics:
    state = env.reset(seed=seed)
    total = 0.0
    while True:
        out = env.step(act(state))
        total += out.reward
        if out.done or out.truncated:
            return EpisodeMetrics(total, out.steps_elapsed, out.overlap, out.done, seed)
        state = out.state


def policy_actor(policy: ActorCritic, cfg: EnvConfig, deterministic: bool = True,
                 rng: Optional[np.random.Generator] = None):
    """Wrap ``policy`` as ``state -> action`` for raw ``(N, 4)`` states."""
    shape = (cfg.num_rectan, 4)
    scale = 1.0 / cfg.window_size

    def act(state):
        mean, log_std = policy.forward_actor(state.reshape(-1) * scale)
        if deterministic:
            return np.tanh(mean).reshape(shape)
        z = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return np.tanh(z).reshape(shape)

    return act


def check_compatible(env_cfg: EnvConfig, policy: ActorCritic) -> None:
    if policy.obs_dim != 4 * env_cfg.num_rectan or policy.act_dim != 4 * env_cfg.num_rectan:
        raise ValueError(
            f"policy was built for {policy.obs_dim // 4} boxes but the environment has {env_cfg.num_rectan}"
        )


def policy_size(policy: ActorCritic, env_cfg: Optional[EnvConfig] = None) -> int:
    doc = policy.to_document(env_cfg.to_dict() if env_cfg else None)
    return len(json.dumps(doc, sort_keys=True, indent=1).encode("utf-8"))


def evaluate_policy(env_cfg: EnvConfig, policy: ActorCritic, episodes: int = 200,
                    deterministic: bool = True, seed: int = 0) -> BenchReport:
    """Run ``episodes`` episodes; episode ``i`` starts from seed ``derive_seed(seed, 'eval', i)``."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    check_compatible(env_cfg, policy)
    env = GlyphEnv(env_cfg)
    results = []
    t0 = time.perf_counter()
    for i in range(episodes):
        rng = None if deterministic else make_rng(seed, "eval-noise", i)
        act = policy_actor(policy, env_cfg, deterministic, rng)
        results.append(run_episode(env, act, derive_seed(seed, "eval", i)))
    wall = (time.perf_counter() - t0) * 1000.0 / episodes
    return aggregate(results, wall, policy_size(policy, env_cfg))


def random_baseline(env_cfg: EnvConfig, episodes: int = 200, seed: int = 0) -> BenchReport:
    """Uniform random actions in ``[-1, 1]``; same initial states as :func:`evaluate_policy`."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = GlyphEnv(env_cfg)
    shape = (env_cfg.num_rectan, 4)
    results = []
    t0 = time.perf_counter()
    for i in range(episodes):
        rng = make_rng(seed, "random-actions", i)
        results.append(run_episode(env, lambda _s: rng.uniform(-1.0, 1.0, shape), derive_seed(seed, "eval", i)))
    wall = (time.perf_counter() - t0) * 1000.0 / episodes
    return aggregate(results, wall, 0)


def measure_inference(env_cfg: EnvConfig, policy: ActorCritic, episodes: int = 20, seed: int = 0) -> dict:
    """Median wall time of a full deterministic layout episode, checkpoint size, peak allocations.

    One warm-up episode runs first and is excluded.
    """
    check_compatible(env_cfg, policy)
    env = GlyphEnv(env_cfg)
    act = policy_actor(policy, env_cfg, deterministic=True)
    run_episode(env, act, derive_seed(seed, "warmup"))
    times = []
    steps = []
    for i in range(episodes):
        t0 = time.perf_counter()
        m = run_episode(env, act, derive_seed(seed, "eval", i))
        times.append((time.perf_counter() - t0) * 1000.0)
        steps.append(m.steps)
    tracemalloc.start()
    try:
        run_episode(env, act, derive_seed(seed, "eval", 0))
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return {
        "ms_per_layout": float(statistics.median(times)),
        "mean_steps": float(np.mean(steps)),
        "policy_bytes": policy_size(policy, env_cfg),
        "peak_alloc_bytes": int(peak),
    }


# -- CSV output ---------------------------------------------------------------

def _write_comment_header(fh, config: dict) -> None:
    for k in sorted(config):
        fh.write(f"# {k}={json.dumps(config[k], sort_keys=True)}\n")


def write_episodes_csv(path, episodes: Iterable[EpisodeMetrics], config: Optional[dict] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _write_comment_header(fh, config or {})
        w = csv.writer(fh)
        w.writerow(EPISODE_HEADER)
        for i, e in enumerate(episodes):
            w.writerow([i, e.seed, repr(e.episode_return), e.steps, repr(e.final_overlap), int(e.succeeded)])


def read_episodes_csv(path) -> List[EpisodeMetrics]:
    with open(path, encoding="utf-8") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        return [EpisodeMetrics(float(r["return"]), int(r["steps"]), float(r["final_overlap"]),
                               bool(int(r["succeeded"])), int(r["seed"])) for r in rows]


def write_report_csv(path, report: BenchReport, config: Optional[dict] = None) -> None:
    """Aggregate CSV; wall time is left out so reruns are byte-identical."""
    s = report.summary()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _write_comment_header(fh, config or {})
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        w.writerow([repr(s[k]) if isinstance(s[k], float) else s[k] for k in REPORT_HEADER])


# -- ablation sweeps ----------------------------------------------------------

ABLATION_HEADER = ["value", "mean_reward", "std", "mean_iou", "success_rate", "mean_steps",
                   "baseline_mean_reward", "baseline_mean_iou", "error"]


@dataclass
class AblationRow:
    value: object
    report: Optional[BenchReport]
    baseline: Optional[BenchReport] = None
    error: str = ""

    def csv_row(self) -> list:
        if self.report is None:
            return [self.value, "", "", "", "", "", "", "", self.error]
        r, b = self.report, self.baseline
        return [self.value, repr(r.mean_reward), repr(r.reward_std), repr(r.mean_final_overlap),
                repr(r.success_rate), repr(r.mean_steps),
                repr(b.mean_reward) if b else "", repr(b.mean_final_overlap) if b else "", ""]


def _train_and_evaluate(args) -> AblationRow:
    value, env_cfg, ppo_cfg, episodes, eval_seed, with_baseline = args
    try:
        if isinstance(env_cfg, Exception):
            raise env_cfg
        result = train(env_cfg, ppo_cfg)
        report = evaluate_policy(env_cfg, result.policy, episodes, deterministic=True, seed=eval_seed)
        baseline = random_baseline(env_cfg, episodes, seed=eval_seed) if with_baseline else None
        return AblationRow(value, report, baseline)
    except InfeasibleConfigError as exc:
        return AblationRow(value, None, None, str(exc))


def _sweep(jobs, workers: int) -> List[AblationRow]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_and_evaluate, jobs))
    return [_train_and_evaluate(j) for j in jobs]


def _variant(base: EnvConfig, **changes):
    try:
        return replace(base, **changes)
    except InfeasibleConfigError as exc:
        return exc


def _ppo_with_budget(ppo_cfg: Optional[PpoConfig], budget: int) -> PpoConfig:
    return replace(ppo_cfg or PpoConfig(), total_timesteps=int(budget))


def ablate_rectangles(base_cfg: EnvConfig, counts: Sequence[int] = RECTANGLE_COUNTS, budget: int = 100_000,
                      episodes: int = 50, ppo_cfg: Optional[PpoConfig] = None, eval_seed: int = 0,
                      workers: int = 1, with_baseline: bool = False) -> List[AblationRow]:
    ppo = _ppo_with_budget(ppo_cfg, budget)
    jobs = [(n, _variant(base_cfg, num_rectan=int(n)), ppo, episodes, eval_seed, with_baseline) for n in counts]
    return _sweep(jobs, workers)


def ablate_min_area(base_cfg: EnvConfig, areas: Sequence[float] = MIN_AREAS, budget: int = 100_000,
                    episodes: int = 50, ppo_cfg: Optional[PpoConfig] = None, eval_seed: int = 0,
                    workers: int = 1, with_baseline: bool = False) -> List[AblationRow]:
    ppo = _ppo_with_budget(ppo_cfg, budget)
    jobs = [(a, _variant(base_cfg, min_area=float(a)), ppo, episodes, eval_seed, with_baseline) for a in areas]
    return _sweep(jobs, workers)


def seed_study(base_cfg: EnvConfig, seeds: Sequence[int] = SEEDS, budget: int = 100_000, episodes: int = 50,
               ppo_cfg: Optional[PpoConfig] = None, eval_seed: int = 0, workers: int = 1,
               with_baseline: bool = False) -> List[AblationRow]:
    ppo = _ppo_with_budget(ppo_cfg, budget)
    jobs = [(s, _variant(base_cfg, seed=int(s)), ppo, episodes, eval_seed, with_baseline) for s in seeds]
    return _sweep(jobs, workers)


def overlap_spread(rows: Sequence[AblationRow]) -> float:
    vals = [r.report.mean_final_overlap for r in rows if r.report is not None]
    return float(max(vals) - min(vals)) if vals else float("nan")


def write_ablation_csv(path, name: str, rows: Sequence[AblationRow], config: Optional[dict] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _write_comment_header(fh, {"sweep": name, **(config or {})})
        w = csv.writer(fh)
        w.writerow([name] + ABLATION_HEADER[1:])
        for r in rows:
            w.writerow(r.csv_row())
