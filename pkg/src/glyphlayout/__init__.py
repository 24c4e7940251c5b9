"""Reinforcement-learned text-box layouts: GlyphEnv, a numpy PPO trainer and tools around them."""
from .env import EnvConfig, GlyphEnv, InfeasibleConfigError, StepOutcome
from .estimator import LayoutPPO
from .geometry import Rect, clip_to_window, intersection_area, iou, total_overlap
from .policy import ActorCritic, Adam, TrainingDivergenceError
from .ppo import PpoConfig, RolloutBuffer, compute_gae, train
from .prompt import Layout, PromptSpec, extract_keywords, generate_layout, render_svg, serialize_layout

__version__ = "0.1.0"
