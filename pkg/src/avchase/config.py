"""Run configuration: defaults, validation, and JSON round-trip.

Validation collects every problem before failing; each error carries a
JSON-pointer path such as ``/policy/fsa/d``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .gridworld import NUM_SIGNATURES, EnvParams

FUSION_KINDS = ("concat", "emul", "em", "fsa")


class ConfigError(ValueError):
    def __init__(self, errors: List[Tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


@dataclass
class EnvConfig:
    seed: int = 0
    width: int = 9
    height: int = 9
    obstacle_density: float = 0.15
    max_steps: int = 500
    depth_res: List[int] = field(default_factory=lambda: [16, 16])
    max_range: int = 8
    audio_bins: int = 16
    noise_std: float = 0.02
    move_prob: float = 0.3
    signature_seed: int = 0

    def env_params(self, ppo: "PPOConfig") -> EnvParams:
        return EnvParams(
            max_steps=self.max_steps, depth_res=tuple(self.depth_res), max_range=self.max_range,
            noise_std=self.noise_std, move_prob=self.move_prob,
            success_reward=ppo.success_reward, slack_reward=ppo.slack_reward,
            distance_reward_scale=ppo.distance_reward_scale)


@dataclass
class FsaConfig:
    d: int = 32


@dataclass
class PolicyConfig:
    fusion: str = "fsa"
    feature_dim: int = 64
    hidden_size: int = 128
    fsa: FsaConfig = field(default_factory=FsaConfig)
    # (kernel_h, kernel_w, stride, out_channels) per conv layer
    visual_conv: List[List[int]] = field(
        default_factory=lambda: [[4, 4, 2, 8], [3, 3, 1, 16], [3, 3, 1, 16]])
    audio_conv: List[List[int]] = field(
        default_factory=lambda: [[1, 4, 2, 8], [1, 3, 1, 16], [1, 3, 1, 16]])


# full-scale stack for 128x128 depth
CANONICAL_VISUAL_CONV = [[8, 8, 4, 32], [4, 4, 2, 64], [3, 3, 1, 64]]


@dataclass
class PPOConfig:
    clip: float = 0.1
    ppo_epochs: int = 4
    minibatches: int = 1
    value_loss_coef: float = 0.5
    entropy_coef: float = 0.02
    learning_rate: float = 2.5e-4
    max_grad_norm: float = 0.5
    rollout_steps: int = 150
    gamma: float = 0.99
    tau: float = 0.95
    num_envs: int = 4
    num_updates: int = 10
    max_episode_steps: int = 500
    success_reward: float = 10.0
    slack_reward: float = -0.01
    distance_reward_scale: float = 1.0
    move_prob: float = 0.3
    beta_reserved: float = 0.01
    adam_eps: float = 1e-5
    eval_interval: int = 0
    eval_episodes: int = 50
    checkpoint_interval: int = 0


@dataclass
class SplitConfig:
    train: List[int] = field(default_factory=lambda: list(range(0, 73)))
    val: List[int] = field(default_factory=lambda: list(range(73, 84)))
    test: List[int] = field(default_factory=lambda: list(range(84, 102)))
    eval_split: str = "train"


@dataclass
class Seeds:
    env: int = 0
    init: int = 0
    action: int = 0
    noise: int = 0


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    splits: SplitConfig = field(default_factory=SplitConfig)
    seeds: Seeds = field(default_factory=Seeds)
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


_SECTIONS = {"env": EnvConfig, "policy": PolicyConfig, "ppo": PPOConfig,
             "splits": SplitConfig, "seeds": Seeds}


def _build(cls, data: Any, path: str, errors: list):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        errors.append((path, "expected an object"))
        return cls()
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            errors.append((f"{path}/{key}", "unknown field"))
            continue
        if key == "fsa":
            kwargs[key] = _build(FsaConfig, value, f"{path}/{key}", errors)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _conv_out(size: Tuple[int, int], layers, path: str, errors: list) -> None:
    h, w = size
    for i, layer in enumerate(layers):
        if not (isinstance(layer, (list, tuple)) and len(layer) == 4
                and all(isinstance(v, int) and v > 0 for v in layer)):
            errors.append((f"{path}/{i}", "expected [kh, kw, stride, channels] of positive ints"))
            return
        kh, kw, s, _ = layer
        if kh > h or kw > w:
            errors.append((f"{path}/{i}", f"kernel {kh}x{kw} exceeds input {h}x{w}"))
            return
        h, w = (h - kh) // s + 1, (w - kw) // s + 1


def validate_config(raw: Optional[dict]) -> RunConfig:
    """Fill defaults and range-check; raises :class:`ConfigError` listing every problem."""
    raw = raw or {}
    errors: List[Tuple[str, str]] = []
    if not isinstance(raw, dict):
        raise ConfigError([("", "config must be a JSON object")])
    parts = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            parts[key] = _build(_SECTIONS[key], value, f"/{key}", errors)
        elif key == "out":
            parts[key] = str(value)
        else:
            errors.append((f"/{key}", "unknown section"))
    cfg = RunConfig(**parts)

    def check(ok: bool, path: str, msg: str):
        if not ok:
            errors.append((path, msg))

    def num(v) -> bool:
        return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)

    def integer(v) -> bool:
        return isinstance(v, int) and not isinstance(v, bool)

    e = cfg.env
    check(integer(e.width) and e.width >= 3, "/env/width", "must be an integer >= 3")
    check(integer(e.height) and e.height >= 3, "/env/height", "must be an integer >= 3")
    check(num(e.obstacle_density) and 0 <= e.obstacle_density <= 0.4,
          "/env/obstacle_density", "must be in [0, 0.4]")
    check(integer(e.max_steps) and e.max_steps >= 1, "/env/max_steps", "must be >= 1")
    check(isinstance(e.depth_res, (list, tuple)) and len(e.depth_res) == 2
          and all(integer(v) and v >= 1 for v in e.depth_res), "/env/depth_res",
          "must be [H, W] positive ints")
    check(integer(e.max_range) and e.max_range >= 1, "/env/max_range", "must be >= 1")
    check(integer(e.audio_bins) and e.audio_bins >= 1, "/env/audio_bins", "must be >= 1")
    check(num(e.noise_std) and e.noise_std >= 0, "/env/noise_std", "must be >= 0")
    check(num(e.move_prob) and 0 <= e.move_prob <= 1, "/env/move_prob", "must be in [0, 1]")
    for name in ("seed", "signature_seed"):
        check(integer(getattr(e, name)), f"/env/{name}", "must be an integer")

    p = cfg.policy
    check(p.fusion in FUSION_KINDS, "/policy/fusion", f"must be one of {FUSION_KINDS}")
    check(integer(p.feature_dim) and p.feature_dim >= 1, "/policy/feature_dim", "must be >= 1")
    check(integer(p.hidden_size) and p.hidden_size >= 1, "/policy/hidden_size", "must be >= 1")
    if p.fusion == "fsa":
        d = p.fsa.d
        if not (integer(d) and d >= 1):
            errors.append(("/policy/fsa/d", "must be a positive integer"))
        elif integer(p.feature_dim) and (2 * p.feature_dim) % d != 0:
            errors.append(("/policy/fsa/d", f"must divide 2*feature_dim = {2 * p.feature_dim}"))
    if isinstance(e.depth_res, (list, tuple)) and len(e.depth_res) == 2:
        _conv_out(tuple(e.depth_res), p.visual_conv, "/policy/visual_conv", errors)
    if integer(e.audio_bins):
        _conv_out((1, e.audio_bins), p.audio_conv, "/policy/audio_conv", errors)

    q = cfg.ppo
    check(num(q.clip) and q.clip > 0, "/ppo/clip", "must be > 0")
    check(num(q.gamma) and 0 < q.gamma <= 1, "/ppo/gamma", "must be in (0, 1]")
    check(num(q.tau) and 0 < q.tau <= 1, "/ppo/tau", "must be in (0, 1]")
    for name in ("value_loss_coef", "entropy_coef", "learning_rate", "max_grad_norm",
                 "success_reward", "slack_reward", "distance_reward_scale", "beta_reserved",
                 "adam_eps"):
        check(num(getattr(q, name)), f"/ppo/{name}", "must be a finite number")
    check(num(q.learning_rate) and q.learning_rate >= 0, "/ppo/learning_rate", "must be >= 0")
    check(num(q.max_grad_norm) and q.max_grad_norm > 0, "/ppo/max_grad_norm", "must be > 0")
    for name in ("ppo_epochs", "rollout_steps", "num_envs", "max_episode_steps"):
        check(integer(getattr(q, name)) and getattr(q, name) >= 1, f"/ppo/{name}", "must be >= 1")
    check(q.minibatches == 1, "/ppo/minibatches", "only full-batch updates (1) are supported")
    for name in ("num_updates", "eval_interval", "eval_episodes", "checkpoint_interval"):
        check(integer(getattr(q, name)) and getattr(q, name) >= 0, f"/ppo/{name}", "must be >= 0")
    check(num(q.move_prob) and 0 <= q.move_prob <= 1, "/ppo/move_prob", "must be in [0, 1]")

    s = cfg.splits
    seen: Dict[int, str] = {}
    for name in ("train", "val", "test"):
        ids = getattr(s, name)
        if not isinstance(ids, list) or not ids:
            errors.append((f"/splits/{name}", "must be a non-empty list of ids"))
            continue
        for i, sid in enumerate(ids):
            if not (integer(sid) and 0 <= sid < NUM_SIGNATURES):
                errors.append((f"/splits/{name}/{i}", f"id must be in [0, {NUM_SIGNATURES})"))
            elif sid in seen:
                errors.append((f"/splits/{name}/{i}", f"id {sid} already in split {seen[sid]!r}"))
            else:
                seen[sid] = name
    check(s.eval_split in ("train", "val", "test"), "/splits/eval_split",
          "must be train, val or test")

    for name in ("env", "init", "action", "noise"):
        check(integer(getattr(cfg.seeds, name)), f"/seeds/{name}", "must be an explicit integer")

    if errors:
        raise ConfigError(errors)
    # the environment section owns these; a value given only under ppo is honoured
    raw_env = raw.get("env") or {}
    raw_ppo = raw.get("ppo") or {}
    if "move_prob" in raw_ppo and "move_prob" not in raw_env:
        e.move_prob = q.move_prob
    if "max_episode_steps" in raw_ppo and "max_steps" not in raw_env:
        e.max_steps = q.max_episode_steps
    q.max_episode_steps = e.max_steps
    q.move_prob = e.move_prob
    return cfg


def load_config(path) -> RunConfig:
    return validate_config(json.loads(Path(path).read_text()))


def config_from_dict(d: dict) -> RunConfig:
    return validate_config(d)
