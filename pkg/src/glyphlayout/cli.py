"""Command-line entry point: ``glyphlayout {train,eval,ablate,generate,render}``.

Settings resolve as defaults < checkpoint echo (eval/generate) < ``--config``
JSON file < command-line flags. Flags are the kebab-case form of the config
keys. Every command prints its resolved configuration before doing anything.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .bench import (MIN_AREAS, RECTANGLE_COUNTS, SEEDS, ablate_min_area, ablate_rectangles,
                    evaluate_policy, measure_inference, overlap_spread, random_baseline, seed_study,
                    write_ablation_csv, write_episodes_csv, write_report_csv)
from .env import EnvConfig, InfeasibleConfigError
from .policy import ActorCritic, TrainingDivergenceError
from .ppo import PpoConfig, train
from .prompt import EmptyLayoutError, extract_keywords, generate_layout, parse_layout, render_svg, serialize_layout

ENV_KEYS = [f.name for f in fields(EnvConfig)]
PPO_KEYS = [f.name for f in fields(PpoConfig)]

PROTOCOL_DEFAULTS = {
    "episodes": 200,
    "deterministic": True,
    "eval_seed": None,
    "budget": 100_000,
    "workers": 1,
    "out_dir": "runs",
    "checkpoint": None,
}

DEFAULTS = {**{f.name: f.default for f in fields(EnvConfig)},
            **{f.name: f.default for f in fields(PpoConfig)},
            **PROTOCOL_DEFAULTS}
DEFAULTS["hidden_sizes"] = list(DEFAULTS["hidden_sizes"])

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("glyphlayout")


class UsageError(Exception):
    pass


def flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def _add_env_flags(p):
    g = p.add_argument_group("environment")
    g.add_argument("--window-size", type=float)
    g.add_argument("--num-rectan", type=int)
    g.add_argument("--min-area", type=float)
    g.add_argument("--w-min", type=float)
    g.add_argument("--h-min", type=float)
    g.add_argument("--min-overlap", type=float)
    g.add_argument("--max-steps", type=int)
    g.add_argument("--action-scale", type=float)


def _add_ppo_flags(p):
    g = p.add_argument_group("ppo")
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--rollout-horizon", type=int)
    g.add_argument("--minibatch-size", type=int)
    g.add_argument("--epochs-per-update", type=int)
    g.add_argument("--gamma", type=float)
    g.add_argument("--gae-lambda", type=float)
    g.add_argument("--clip-range", type=float)
    g.add_argument("--entropy-coef", type=float)
    g.add_argument("--vf-coef", type=float)
    g.add_argument("--max-grad-norm", type=float)
    g.add_argument("--normalize-advantages", type=_bool)
    g.add_argument("--total-timesteps", type=int)
    g.add_argument("--num-envs", type=int)
    g.add_argument("--hidden-sizes", type=_int_list)
    g.add_argument("--checkpoint-interval", type=int)


def _add_common(p):
    p.add_argument("--config", help="JSON file of key/value settings")
    p.add_argument("--seed", type=int, help="base seed for every random stream")
    p.add_argument("--out-dir")
    p.add_argument("--workers", type=int, help="upper bound on worker processes")
    p.add_argument("--dry-run", action="store_true", help="validate and print the config, then exit")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glyphlayout", description=__doc__.splitlines()[0],
                                     argument_default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a PPO layout policy", argument_default=argparse.SUPPRESS)
    _add_common(p)
    _add_env_flags(p)
    _add_ppo_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint and/or the random baseline",
                       argument_default=argparse.SUPPRESS)
    _add_common(p)
    _add_env_flags(p)
    p.add_argument("--checkpoint", help="checkpoint path, or 'final' for <out-dir>/checkpoints/final.json")
    p.add_argument("--baseline", choices=["random"])
    p.add_argument("--episodes", type=int)
    p.add_argument("--deterministic", type=_bool)
    p.add_argument("--eval-seed", type=int)
    p.add_argument("--timing", action="store_true", help="also measure per-layout latency")

    p = sub.add_parser("ablate", help="run a rectangle-count, min-area or seed sweep",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("sweep", choices=["rectangles", "min-area", "seeds"])
    _add_common(p)
    _add_env_flags(p)
    _add_ppo_flags(p)
    p.add_argument("--counts", type=_int_list)
    p.add_argument("--areas", type=_float_list)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--budget", type=int, help="training timesteps per row")
    p.add_argument("--episodes", type=int)
    p.add_argument("--eval-seed", type=int)
    p.add_argument("--baseline", action="store_true", help="add random-baseline columns")

    p = sub.add_parser("generate", help="prompt -> layout document (+ optional SVG)",
                       argument_default=argparse.SUPPRESS)
    _add_common(p)
    _add_env_flags(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--output", help="layout document path (default <out-dir>/layout.json)")
    p.add_argument("--svg")
    p.add_argument("--scale", type=float)
    p.add_argument("--fixed-n", action="store_true", help="always use the policy's box count")
    p.add_argument("--reading-order", action="store_true", help="pair keywords with boxes top-to-bottom")

    p = sub.add_parser("render", help="render a layout document to SVG", argument_default=argparse.SUPPRESS)
    p.add_argument("--layout", required=True)
    p.add_argument("--svg", required=True)
    p.add_argument("--scale", type=float)
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


CLI_ONLY = {"command", "config", "dry_run", "verbose", "sweep", "baseline", "timing", "counts", "areas",
            "seeds", "prompt", "output", "svg", "scale", "fixed_n", "reading_order", "layout"}


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"--config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise UsageError(f"--config file {path} must be a flat key/value object")
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"--config file {path} has unknown keys: {', '.join(sorted(unknown))}")
    return data


def resolve(args: argparse.Namespace, base: dict | None = None) -> dict:
    """Merge defaults, an optional base layer, the config file and explicit flags."""
    cfg = dict(DEFAULTS)
    cfg.update(base or {})
    ns = vars(args)
    if ns.get("config"):
        cfg.update(load_config_file(ns["config"]))
    cfg.update({k: v for k, v in ns.items() if k not in CLI_ONLY})
    return cfg


def _flags_for(message: str, keys) -> str:
    named = [flag(k) for k in keys if k in message]
    return ", ".join(named) if named else "configuration"


def env_config(cfg: dict) -> EnvConfig:
    try:
        return EnvConfig(**{k: cfg[k] for k in ENV_KEYS})
    except (InfeasibleConfigError, TypeError) as exc:
        raise UsageError(f"invalid {_flags_for(str(exc), ENV_KEYS)}: {exc}")


def ppo_config(cfg: dict) -> PpoConfig:
    try:
        return PpoConfig(**{k: cfg[k] for k in PPO_KEYS})
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid {_flags_for(str(exc), PPO_KEYS)}: {exc}")


def eval_seed(cfg: dict) -> int:
    """Evaluation seed; falls back to ``--seed`` so one integer reproduces a run."""
    return cfg["seed"] if cfg.get("eval_seed") is None else cfg["eval_seed"]


def print_config(command: str, cfg: dict) -> None:
    print(f"# {command} config: " + json.dumps(cfg, sort_keys=True))


def _checkpoint_path(cfg: dict) -> Path:
    ck = cfg.get("checkpoint")
    if ck is None:
        raise UsageError("--checkpoint is required")
    path = Path(cfg["out_dir"]) / "checkpoints" / "final.json" if ck == "final" else Path(ck)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def _load_policy(cfg: dict):
    path = _checkpoint_path(cfg)
    policy, doc = ActorCritic.load(path)
    return policy, doc, path


def _checkpoint_layer(args) -> dict:
    """Env settings echoed in the checkpoint named on the command line, if any."""
    ns = vars(args)
    ck = ns.get("checkpoint")
    if ck is None and ns.get("config"):
        ck = load_config_file(ns["config"]).get("checkpoint")
    if ck is None:
        return {}
    out_dir = ns.get("out_dir", DEFAULTS["out_dir"])
    path = Path(out_dir) / "checkpoints" / "final.json" if ck == "final" else Path(ck)
    if not path.is_file():
        return {}
    doc = json.loads(path.read_text(encoding="utf-8"))
    return {k: v for k, v in doc.get("env_config", {}).items() if k in ENV_KEYS}


def cmd_train(args) -> int:
    cfg = resolve(args)
    print_config("train", cfg)
    env_cfg = env_config(cfg)
    ppo_cfg = ppo_config(cfg)
    if args.dry_run:
        return EXIT_OK
    try:
        result = train(env_cfg, ppo_cfg, out_dir=cfg["out_dir"], seed=cfg["seed"])
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}; last good checkpoint kept in {cfg['out_dir']}/checkpoints",
              file=sys.stderr)
        return EXIT_DIVERGED
    last = result.metrics[-1]
    print(f"ep_reward_mean={last['ep_reward_mean']:.4f} ep_len_mean={last['ep_len_mean']:.2f}")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ns = vars(args)
    cfg = resolve(args, _checkpoint_layer(args))
    print_config("eval", cfg)
    env_cfg = env_config(cfg)
    want_policy = cfg.get("checkpoint") is not None
    if not want_policy and "baseline" not in ns:
        raise UsageError("nothing to evaluate: pass --checkpoint and/or --baseline random")
    if cfg["episodes"] < 1:
        raise UsageError("--episodes must be >= 1")
    policy = None
    if want_policy:
        policy, _, path = _load_policy(cfg)
        if policy.obs_dim != 4 * env_cfg.num_rectan:
            raise UsageError(f"checkpoint {path} is for {policy.obs_dim // 4} boxes, "
                             f"--num-rectan is {env_cfg.num_rectan}")
    if args.dry_run:
        return EXIT_OK
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    echo = {k: cfg[k] for k in ENV_KEYS + ["seed", "episodes", "deterministic", "eval_seed", "checkpoint"]}
    print("which,mean_reward,reward_std,mean_iou,success_rate,mean_steps")
    if policy is not None:
        rep = evaluate_policy(env_cfg, policy, cfg["episodes"], cfg["deterministic"], eval_seed(cfg))
        write_episodes_csv(out / "eval_episodes.csv", rep.episodes, echo)
        write_report_csv(out / "eval_report.csv", rep, echo)
        print(f"ppo,{rep.mean_reward:.2f},{rep.reward_std:.2f},{rep.mean_final_overlap:.4f},"
              f"{rep.success_rate:.3f},{rep.mean_steps:.1f}")
        if ns.get("timing"):
            t = measure_inference(env_cfg, policy, min(cfg["episodes"], 50), eval_seed(cfg))
            print(f"# ms_per_layout={t['ms_per_layout']:.3f} policy_bytes={t['policy_bytes']} "
                  f"peak_alloc_bytes={t['peak_alloc_bytes']}")
    if ns.get("baseline") == "random":
        echo = {**echo, "baseline": "random"}
        rep = random_baseline(env_cfg, cfg["episodes"], eval_seed(cfg))
        write_episodes_csv(out / "baseline_episodes.csv", rep.episodes, echo)
        write_report_csv(out / "baseline_report.csv", rep, echo)
        print(f"random,{rep.mean_reward:.2f},{rep.reward_std:.2f},{rep.mean_final_overlap:.4f},"
              f"{rep.success_rate:.3f},{rep.mean_steps:.1f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    ns = vars(args)
    cfg = resolve(args)
    print_config(f"ablate {args.sweep}", cfg)
    env_cfg = env_config(cfg)
    ppo_cfg = ppo_config(cfg)
    sweep = args.sweep
    values = {"rectangles": ns.get("counts", list(RECTANGLE_COUNTS)),
              "min-area": ns.get("areas", list(MIN_AREAS)),
              "seeds": ns.get("seeds", list(SEEDS))}[sweep]
    if args.dry_run:
        return EXIT_OK
    kwargs = dict(budget=cfg["budget"], episodes=cfg["episodes"], ppo_cfg=ppo_cfg, eval_seed=eval_seed(cfg),
                  workers=max(1, cfg["workers"]), with_baseline=bool(ns.get("baseline")))
    if sweep == "rectangles":
        rows = ablate_rectangles(env_cfg, values, **kwargs)
        name = "num_rect"
    elif sweep == "min-area":
        rows = ablate_min_area(env_cfg, values, **kwargs)
        name = "min_area"
    else:
        rows = seed_study(env_cfg, values, **kwargs)
        name = "seed"
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"ablate_{sweep.replace('-', '_')}.csv"
    echo = {k: cfg[k] for k in ENV_KEYS + PPO_KEYS + ["seed", "budget", "episodes", "eval_seed"]}
    write_ablation_csv(path, name, rows, echo)
    print(f"{name},mean_reward,std,mean_iou")
    for r in rows:
        if r.report is None:
            print(f"{r.value},error: {r.error}")
        else:
            print(f"{r.value},{r.report.mean_reward:.2f},{r.report.reward_std:.2f},"
                  f"{r.report.mean_final_overlap:.4f}")
    if sweep == "seeds":
        print(f"# overlap spread (max-min) = {overlap_spread(rows):.4f}")
    print(f"table: {path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    ns = vars(args)
    cfg = resolve(args, _checkpoint_layer(args))
    print_config("generate", cfg)
    env_cfg = env_config(cfg)
    spec = extract_keywords(args.prompt)
    if not spec.keywords:
        raise EmptyLayoutError('no quoted text in --prompt; wrap the words to place in double quotes, '
                               'e.g. --prompt \'poster "SALE TODAY"\'')
    policy, _, _ = _load_policy(cfg)
    if args.dry_run:
        return EXIT_OK
    layout = generate_layout(spec, policy, env_cfg, seed=cfg["seed"], size_from_keywords=not ns.get("fixed_n"),
                             reading_order=bool(ns.get("reading_order")))
    out_path = Path(ns.get("output") or Path(cfg["out_dir"]) / "layout.json")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(serialize_layout(layout), encoding="utf-8")
    print(f"keywords: {spec.keyword_string}")
    print(f"layout: {out_path}")
    print(f"final_overlap={layout.metadata['final_overlap']:.6f} steps={layout.metadata['steps']}")
    if ns.get("svg"):
        Path(ns["svg"]).write_text(render_svg(layout, ns.get("scale", 1.0)), encoding="utf-8")
        print(f"svg: {ns['svg']}")
    return EXIT_OK


def cmd_render(args) -> int:
    ns = vars(args)
    print_config("render", {"layout": ns["layout"], "svg": ns["svg"], "scale": ns.get("scale", 1.0)})
    layout = parse_layout(Path(ns["layout"]).read_text(encoding="utf-8"))
    if ns.get("dry_run"):
        return EXIT_OK
    Path(ns["svg"]).write_text(render_svg(layout, ns.get("scale", 1.0)), encoding="utf-8")
    print(f"svg: {ns['svg']}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "generate": cmd_generate,
            "render": cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for k in ("dry_run", "verbose"):
        if not hasattr(args, k):
            setattr(args, k, False)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"glyphlayout {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EmptyLayoutError as exc:
        print(f"glyphlayout {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"glyphlayout {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
