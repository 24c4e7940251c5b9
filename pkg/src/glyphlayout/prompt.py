"""Prompt keywords to labelled boxes: extraction, layout generation, export."""
from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple
from xml.sax.saxutils import escape

import numpy as np

from .bench import policy_actor
from .env import EnvConfig, GlyphEnv
from .geometry import Rect
from .policy import ActorCritic
from .seeding import derive_seed

QUOTED = re.compile(r'"([^"]*)"')
LAYOUT_FORMAT = "glyphlayout-layout"
LAYOUT_VERSION = 1
PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#9a6324")


class EmptyLayoutError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    raw_prompt: str
    keywords: Tuple[str, ...]

    @property
    def keyword_string(self) -> str:
        return "/".join(self.keywords)


@dataclass
class Layout:
    window_size: float
    entries: List[Tuple[str, Rect]]
    metadata: dict = field(default_factory=dict)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([list(r) for _, r in self.entries], dtype=np.float64).reshape(-1, 4)


def extract_keywords(prompt: str) -> PromptSpec:
    """Words of every double-quoted span, left to right. Splits on whitespace only."""
    words: List[str] = []
    for span in QUOTED.findall(prompt):
        words.extend(span.split())
    return PromptSpec(prompt, tuple(words))


def _labels(keywords, n_boxes: int) -> List[str]:
    labels = list(keywords[:n_boxes])
    if len(keywords) > n_boxes:
        labels[-1] = " ".join(keywords[n_boxes - 1:])
    return labels


def checkpoint_id(policy: ActorCritic) -> str:
    doc = json.dumps(policy.to_document(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(doc).hexdigest()[:16]


def rollout_layout(policy: ActorCritic, env_cfg: EnvConfig, seed: int) -> Tuple[np.ndarray, int, float]:
    """Deterministic episode from a seeded initial state; returns ``(boxes, steps, overlap)``.

    An environment with fewer boxes than the policy was trained for is padded
    with zero-area boxes at the origin, which never overlap anything.
    """
    n_policy = policy.obs_dim // 4
    n = env_cfg.num_rectan
    if n > n_policy:
        raise ValueError(f"policy handles {n_policy} boxes, environment has {n}")
    env = GlyphEnv(env_cfg)
    state = env.reset(seed=seed)
    pad = np.zeros((n_policy - n, 4))
    act = policy_actor(policy, replace(env_cfg, num_rectan=n_policy), deterministic=True)
    while True:
        action = act(np.vstack([state, pad]))[:n]
        out = env.step(action)
        if out.done or out.truncated:
            return out.state, out.steps_elapsed, out.overlap
        state = out.state


def generate_layout(spec: PromptSpec, policy: ActorCritic, env_cfg: Optional[EnvConfig] = None,
                    seed: int = 0, size_from_keywords: bool = True, reading_order: bool = False) -> Layout:
    """Place one box per keyword using ``policy``.

    With ``size_from_keywords`` the environment holds ``min(len(keywords), N)``
    boxes; otherwise it always holds the policy's ``N``. Surplus keywords are
    merged into the last box's label. Boxes pair with keywords by index, or in
    top-to-bottom, left-to-right order when ``reading_order`` is set.
    """
    if not spec.keywords:
        raise EmptyLayoutError(
            'no quoted text in prompt; wrap the words to place in double quotes, e.g. poster "SALE TODAY"'
        )
    env_cfg = env_cfg or EnvConfig()
    n_policy = policy.obs_dim // 4
    n = min(len(spec.keywords), n_policy) if size_from_keywords else n_policy
    cfg = replace(env_cfg, num_rectan=n)
    boxes, steps, overlap = rollout_layout(policy, cfg, derive_seed(seed, "layout"))
    order = list(range(n))
    if reading_order:
        order.sort(key=lambda i: (boxes[i][1], boxes[i][0]))
    labels = _labels(spec.keywords, n)
    entries = [(label, Rect(*map(float, boxes[i]))) for label, i in zip(labels, order)]
    meta = {
        "checkpoint_id": checkpoint_id(policy),
        "seed": int(seed),
        "steps": int(steps),
        "final_overlap": float(overlap),
        "keyword_string": spec.keyword_string,
    }
    return Layout(float(cfg.window_size), entries, meta)


def round_half_away(v: float) -> int:
    return int(math.floor(abs(v) + 0.5)) * (1 if v >= 0 else -1)


def _int_box(r, window: float) -> List[int]:
    hi = int(math.floor(window))
    return [min(max(round_half_away(v), 0), hi) for v in r]


def layout_to_document(layout: Layout) -> dict:
    if not layout.entries:
        raise EmptyLayoutError("layout has no entries")
    window = layout.window_size
    return {
        "format": LAYOUT_FORMAT,
        "version": LAYOUT_VERSION,
        "window_size": int(window) if float(window).is_integer() else window,
        "entries": [{"keyword": k, "box": _int_box(r, window)} for k, r in layout.entries],
        "metadata": layout.metadata,
    }


def serialize_layout(layout: Layout) -> str:
    return json.dumps(layout_to_document(layout), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def parse_layout(text: str) -> Layout:
    doc = json.loads(text)
    if doc.get("format") != LAYOUT_FORMAT or doc.get("version") != LAYOUT_VERSION:
        raise ValueError("not a layout document of a supported version")
    entries = [(e["keyword"], Rect(*e["box"])) for e in doc["entries"]]
    return Layout(doc["window_size"], entries, doc.get("metadata", {}))


def render_svg(layout: Layout, scale: float = 1.0) -> str:
    """Standalone SVG: one outlined rectangle and one label per entry."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    size = layout.window_size * scale
    fmt = lambda v: f"{v:g}"
    font = max(6.0, 7.0 * scale)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{fmt(size)}" height="{fmt(size)}" '
        f'viewBox="0 0 {fmt(size)} {fmt(size)}" style="background:#ffffff">',
    ]
    for i, (label, r) in enumerate(layout.entries):
        color = PALETTE[i % len(PALETTE)]
        x, y = r.x1 * scale, r.y1 * scale
        w, h = (r.x2 - r.x1) * scale, (r.y2 - r.y1) * scale
        lines.append(f'  <rect x="{fmt(x)}" y="{fmt(y)}" width="{fmt(w)}" height="{fmt(h)}" '
                     f'fill="none" stroke="{color}" stroke-width="{fmt(max(1.0, scale))}"/>')
        lines.append(f'  <text x="{fmt(x + 2 * scale)}" y="{fmt(y + font + scale)}" font-family="sans-serif" '
                     f'font-size="{fmt(font)}" fill="{color}">{escape(label)}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
