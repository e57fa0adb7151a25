"""Recurrent PPO: rollout collection, GAE, clipped update and the training loop."""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import diffcore as dc
from . import gridworld as gw
from .config import PPOConfig, RunConfig, validate_config
from .metrics import aggregate_report
from .policy import Policy, PolicyDivergence, forward
from .rollout import EnvPool, TrajectoryWriter, evaluate, make_policy, step_record

log = logging.getLogger(__name__)

REWARD_WINDOW = 50


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RolloutBuffer:
    depth: np.ndarray  # T x N x H x W
    audio: np.ndarray  # T x N x 2 x F
    hidden: np.ndarray  # T x N x hidden (state before the step)
    actions: np.ndarray  # T x N
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    bootstrap: np.ndarray  # N
    summaries: List[gw.EpisodeSummary] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.actions.shape[0]

    @property
    def num_envs(self) -> int:
        return self.actions.shape[1]


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    grad_norm: float
    mean_episode_reward: float

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- advantages

def compute_gae(rewards, values, dones, bootstrap, gamma: float, tau: float,
                normalize: bool = True):
    """GAE along axis 0. Inputs are T or T x N; ``bootstrap`` is the value after the last step.

    Returns ``(advantages, returns)``; returns use the raw advantages,
    normalization (zero mean, unit variance) applies to the advantages only.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards, values and dones must share a shape")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap, dtype=np.float64)
    running = np.zeros_like(rewards[0])
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * tau * live * running
        adv[t] = running
        next_value = values[t]
    returns = adv + values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params: dc.ParamStore, lr: float, eps: float = 1e-5,
                 betas=(0.9, 0.999)):
        self.lr = lr
        self.eps = eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: dc.ParamStore) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.items():
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            if self.lr == 0:
                continue
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"adam.m/{k}"] = self.m[k]
            out[f"adam.v/{k}"] = self.v[k]
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.m:
            self.m[k] = arrays[f"adam.m/{k}"].copy()
            self.v[k] = arrays[f"adam.v/{k}"].copy()


def clip_grad_norm(params: dc.ParamStore, max_norm: float) -> float:
    """Scale gradients in place so the global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values()))
    if total > max_norm:
        scale = max_norm / total
        for p in params.values():
            p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------- loss

def ppo_loss(params, policy_cfg, depth, audio, hidden, actions, old_log_probs, advantages,
             returns, clip: float, value_coef: float, entropy_coef: float):
    """Clipped surrogate + value regression - entropy bonus, as a tape scalar.

    Returns ``(loss, info)`` where ``info`` holds detached diagnostics.
    """
    out = forward(params, policy_cfg, depth, audio, hidden)
    logp_all = dc.log_softmax(out.logits, axis=-1)
    logp = dc.take_along(logp_all, actions)
    ratio = dc.exp(dc.sub(logp, old_log_probs))
    surr1 = dc.mul(ratio, advantages)
    surr2 = dc.mul(dc.clip(ratio, 1.0 - clip, 1.0 + clip), advantages)
    policy_loss = dc.mul(dc.mean(dc.minimum(surr1, surr2)), -1.0)
    value_loss = dc.mean(dc.square(dc.sub(out.value, returns)))
    probs = dc.exp(logp_all)
    entropy = dc.mul(dc.mean(dc.dsum(dc.mul(probs, logp_all), axis=-1)), -1.0)
    total = dc.sub(dc.add(policy_loss, dc.mul(value_loss, value_coef)),
                   dc.mul(entropy, entropy_coef))
    r = ratio.data
    info = {
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "entropy": float(entropy.data),
        "clip_fraction": float(np.mean(np.abs(r - 1.0) > clip)),
    }
    return total, info


def ppo_update(buffer: RolloutBuffer, policy: Policy, optimizer: Adam, cfg: PPOConfig,
               reward_window: Optional[Sequence[float]] = None) -> UpdateStats:
    """Full-batch clipped PPO over ``ppo_epochs`` passes.

    Each transition is replayed from its stored pre-step hidden state, so the
    batch is flat: (T * N) independent one-step forwards.
    """
    T, N = buffer.steps, buffer.num_envs
    adv, ret = compute_gae(buffer.rewards, buffer.values, buffer.dones, buffer.bootstrap,
                           cfg.gamma, cfg.tau)
    B = T * N
    depth = buffer.depth.reshape((B,) + buffer.depth.shape[2:])
    audio = buffer.audio.reshape((B,) + buffer.audio.shape[2:])
    hidden = buffer.hidden.reshape(B, -1)
    actions = buffer.actions.reshape(B)
    old_lp = buffer.log_probs.reshape(B)
    adv, ret = adv.reshape(B), ret.reshape(B)
    params = policy.params
    optimizer.lr = cfg.learning_rate
    acc = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0}
    norms = []
    for _ in range(cfg.ppo_epochs):
        params.zero_grad()
        with dc.Tape() as tape:
            loss, info = ppo_loss(params, policy.cfg, depth, audio, hidden, actions, old_lp,
                                  adv, ret, cfg.clip, cfg.value_loss_coef, cfg.entropy_coef)
        if not np.isfinite(loss.data):
            raise TrainingDiverged("non-finite PPO loss")
        dc.backward(tape, loss)
        norm = clip_grad_norm(params, cfg.max_grad_norm)
        if not math.isfinite(norm):
            raise TrainingDiverged("non-finite gradient norm")
        norms.append(norm)
        optimizer.step(params)
        for k in acc:
            acc[k] += info[k] / cfg.ppo_epochs
    window = list(reward_window) if reward_window else [s.total_reward for s in buffer.summaries]
    return UpdateStats(
        policy_loss=acc["policy_loss"], value_loss=acc["value_loss"], entropy=acc["entropy"],
        clip_fraction=acc["clip_fraction"], grad_norm=float(np.mean(norms)),
        mean_episode_reward=float(np.mean(window)) if window else 0.0)


# ---------------------------------------------------------------- rollout

def collect_rollout(pool: EnvPool, policy: Policy, hidden: np.ndarray, steps: int,
                    rng: np.random.Generator,
                    writer: Optional[TrajectoryWriter] = None) -> RolloutBuffer:
    """Step every env ``steps`` times with sampled actions.

    ``hidden`` (N x hidden) is updated in place and zeroed for any env whose
    episode finished, so the next step starts a fresh recurrent state.
    """
    N = len(pool)
    H, W = pool.obs[0].depth.shape
    F = pool.obs[0].audio.shape[1]
    buf = RolloutBuffer(
        depth=np.zeros((steps, N, H, W)), audio=np.zeros((steps, N, 2, F)),
        hidden=np.zeros((steps, N, hidden.shape[1])), actions=np.zeros((steps, N), dtype=np.int64),
        log_probs=np.zeros((steps, N)), values=np.zeros((steps, N)), rewards=np.zeros((steps, N)),
        dones=np.zeros((steps, N)), bootstrap=np.zeros(N))
    for t in range(steps):
        depth, audio = pool.batch_obs()
        buf.depth[t], buf.audio[t], buf.hidden[t] = depth, audio, hidden
        acts, logp, values, h_new = policy.act_batch(depth, audio, hidden, "sample", rng)
        buf.actions[t], buf.log_probs[t], buf.values[t] = acts, logp, values
        hidden[:] = h_new
        for i in range(N):
            st = pool.states[i]
            prev_obs = pool.obs[i]
            _, obs, reward, done, info = gw.step(st, int(acts[i]))
            if writer is not None:
                writer.write(step_record(pool.episode_ids[i], pool.episode_seeds[i], st,
                                         int(acts[i]), reward), prev_obs, buf.hidden[t, i])
            buf.rewards[t, i] = reward
            buf.dones[t, i] = float(done)
            pool.obs[i] = obs
            if done:
                buf.summaries.append(info["summary"])
                pool.reset_slot(i)
                hidden[i] = 0.0
    depth, audio = pool.batch_obs()
    out = policy.forward(depth, audio, hidden)
    buf.bootstrap[:] = out.value.data
    return buf


# ---------------------------------------------------------------- training loop

@dataclass
class Trainer:
    """All mutable training state; snapshot/restore goes through checkpoints."""

    config: RunConfig
    policy: Policy
    optimizer: Adam
    pool: EnvPool
    hidden: np.ndarray
    action_rng: np.random.Generator
    update: int = 0
    env_steps: int = 0
    reward_window: deque = field(default_factory=lambda: deque(maxlen=REWARD_WINDOW))

    @classmethod
    def create(cls, config: RunConfig) -> "Trainer":
        policy = make_policy(config)
        pool = EnvPool(config, config.ppo.num_envs)
        return cls(config=config, policy=policy,
                   optimizer=Adam(policy.params, config.ppo.learning_rate, config.ppo.adam_eps),
                   pool=pool, hidden=policy.zero_hidden(len(pool)),
                   action_rng=np.random.default_rng(config.seeds.action))

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        arrays = {f"param/{k}": v.data for k, v in self.policy.params.items()}
        arrays.update(self.optimizer.state_arrays())
        arrays["runner/hidden"] = self.hidden.copy()
        meta = {
            "config": self.config.to_dict(),
            "update": self.update,
            "env_steps": self.env_steps,
            "adam_t": self.optimizer.t,
            "rng": {"action": self.action_rng.bit_generator.state},
            "pool": self.pool.to_dict(),
            "reward_window": list(self.reward_window),
        }
        return ckpt_io.Checkpoint(arrays, meta)

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint) -> "Trainer":
        config = validate_config(ck.meta["config"])
        tr = cls.create(config)
        for k, p in tr.policy.params.items():
            p.data = ck.arrays[f"param/{k}"].copy()
        tr.optimizer.load_arrays(ck.arrays, ck.meta["adam_t"])
        tr.hidden = ck.arrays["runner/hidden"].copy()
        tr.action_rng.bit_generator.state = ck.meta["rng"]["action"]
        tr.pool.load_dict(ck.meta["pool"])
        tr.update = ck.meta["update"]
        tr.env_steps = ck.meta["env_steps"]
        tr.reward_window.extend(ck.meta["reward_window"])
        return tr

    def train_step(self, writer: Optional[TrajectoryWriter] = None):
        cfg = self.config.ppo
        buf = collect_rollout(self.pool, self.policy, self.hidden, cfg.rollout_steps,
                              self.action_rng, writer)
        self.reward_window.extend(s.total_reward for s in buf.summaries)
        stats = ppo_update(buf, self.policy, self.optimizer, cfg, self.reward_window)
        self.update += 1
        self.env_steps += buf.steps * buf.num_envs
        return stats, buf


def policy_from_checkpoint(ck: ckpt_io.Checkpoint) -> Policy:
    config = validate_config(ck.meta["config"])
    policy = make_policy(config)
    for k, p in policy.params.items():
        p.data = ck.arrays[f"param/{k}"].copy()
    return policy


@dataclass
class TrainResult:
    trainer: Trainer
    stats: List[dict]
    evals: List[dict]
    checkpoint_path: Optional[Path]


def _append_jsonl(fh, obj: dict) -> None:
    fh.write(json.dumps(obj, sort_keys=True) + "\n")
    fh.flush()


def train(config: RunConfig, out_dir=None, resume=None, stop_after: Optional[int] = None,
          target_srt: Optional[float] = None, max_env_steps: Optional[int] = None,
          log_trajectory: bool = True, record_obs: bool = False,
          on_update: Optional[Callable[[int, dict], None]] = None,
          num_updates: Optional[int] = None, target_patience: int = 1) -> TrainResult:
    """Run ``config.ppo.num_updates`` rollout/update iterations.

    ``resume`` continues from a checkpoint path; ``stop_after`` halts once
    that many updates exist (saving a checkpoint), which together reproduce
    an uninterrupted run. ``target_srt`` stops early once ``target_patience``
    consecutive periodic evaluations reach it. ``num_updates`` overrides the
    total (useful to extend a resumed run, whose own config otherwise governs).
    """
    trainer = Trainer.from_checkpoint(ckpt_io.load(resume)) if resume else Trainer.create(config)
    config = trainer.config
    if num_updates is not None:
        config.ppo.num_updates = num_updates
    cfg = config.ppo
    out = Path(out_dir) if out_dir is not None else None
    files = {}
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        mode = "a" if resume else "w"
        for name in ("train_log", "episodes", "eval_log"):
            path = out / f"{name}.jsonl"
            fresh = mode == "w" or not path.exists()
            fh = open(path, "w" if fresh else "a")
            if fresh:
                _append_jsonl(fh, {"type": "header", "config": config.to_dict()})
            files[name] = fh
        if log_trajectory:
            writer = TrajectoryWriter(out / "trajectory.jsonl", config, record_obs,
                                      append=bool(resume))
    stats_log, eval_log = [], []
    streak = 0
    limit = cfg.num_updates if stop_after is None else min(stop_after, cfg.num_updates)
    try:
        while trainer.update < limit:
            if max_env_steps is not None and trainer.env_steps >= max_env_steps:
                break
            snapshot = trainer.to_checkpoint() if out is not None else None
            try:
                stats, buf = trainer.train_step(writer)
            except (TrainingDiverged, PolicyDivergence) as exc:
                log.error("training diverged at update %d: %s", trainer.update, exc)
                if out is not None and snapshot is not None:
                    ckpt_io.save(out / "checkpoint.avc", snapshot)
                raise TrainingDiverged(str(exc)) from exc
            rec = {"type": "update", "update": trainer.update, "env_steps": trainer.env_steps,
                   **stats.to_dict()}
            stats_log.append(rec)
            if out is not None:
                _append_jsonl(files["train_log"], rec)
                for s in buf.summaries:
                    _append_jsonl(files["episodes"], {"type": "episode", **s.to_dict()})
            log.info("update %d steps %d R_mean %.3f entropy %.3f", trainer.update,
                     trainer.env_steps, stats.mean_episode_reward, stats.entropy)
            if on_update is not None:
                on_update(trainer.update, rec)
            stop = False
            if cfg.eval_interval and trainer.update % cfg.eval_interval == 0:
                ev = evaluate(trainer.policy, config, cfg.eval_episodes, graph=trainer.pool.graph,
                              signatures=trainer.pool.signatures)
                rep = aggregate_report(ev.summaries).to_dict()
                erec = {"type": "eval", "update": trainer.update,
                        "env_steps": trainer.env_steps, **rep}
                eval_log.append(erec)
                if out is not None:
                    _append_jsonl(files["eval_log"], erec)
                log.info("eval at update %d: srt %.3f splt %.3f", trainer.update, rep["srt"],
                         rep["splt"])
                if target_srt is not None:
                    streak = streak + 1 if rep["srt"] >= target_srt else 0
                    stop = streak >= target_patience
            if out is not None and cfg.checkpoint_interval and \
                    trainer.update % cfg.checkpoint_interval == 0:
                ckpt_io.save(out / f"checkpoint_{trainer.update:06d}.avc", trainer.to_checkpoint())
            if stop:
                break
        path = None
        if out is not None:
            path = out / "checkpoint.avc"
            ckpt_io.save(path, trainer.to_checkpoint())
    finally:
        for fh in files.values():
            fh.close()
        if writer is not None:
            writer.close()
    return TrainResult(trainer, stats_log, eval_log, path)


# ---------------------------------------------------------------- gradient harness

def grad_check_config(fusion: str):
    """A deliberately tiny network so every coordinate can be finite-differenced."""
    from .config import FsaConfig, PolicyConfig
    return PolicyConfig(fusion=fusion, feature_dim=4, hidden_size=4, fsa=FsaConfig(d=4),
                        visual_conv=[[3, 3, 2, 2], [2, 2, 1, 2], [2, 2, 1, 2]],
                        audio_conv=[[1, 3, 2, 2], [1, 2, 1, 2], [1, 2, 1, 2]])


def unrolled_loss(params, policy_cfg, depth, audio, h0, actions, advantages, returns,
                  value_coef: float = 0.5, entropy_coef: float = 0.02):
    """Actor-critic loss through a full recurrent unroll (gradients flow across steps).

    ``depth`` is T x B x H x W etc.; the hidden state is threaded step to step.
    """
    h = h0
    total = None
    for t in range(depth.shape[0]):
        out = forward(params, policy_cfg, depth[t], audio[t], h)
        h = out.hidden
        logp_all = dc.log_softmax(out.logits, axis=-1)
        pg = dc.mul(dc.mean(dc.mul(dc.take_along(logp_all, actions[t]), advantages[t])), -1.0)
        vl = dc.mean(dc.square(dc.sub(out.value, returns[t])))
        ent = dc.mul(dc.mean(dc.dsum(dc.mul(dc.exp(logp_all), logp_all), axis=-1)), -1.0)
        term = dc.sub(dc.add(pg, dc.mul(vl, value_coef)), dc.mul(ent, entropy_coef))
        total = term if total is None else dc.add(total, term)
    return total


def policy_grad_check(fusion: str, seed: int = 0, steps: int = 3, batch: int = 2,
                      h: float = 1e-5) -> float:
    """Max relative finite-difference error of the full policy loss for one fusion kind."""
    from .policy import init_params
    cfg = grad_check_config(fusion)
    depth_hw, bins = (8, 8), 8
    rng = np.random.default_rng(seed)
    params = init_params(cfg, depth_hw, bins, seed)
    for p in params.values():
        # non-zero biases so every path carries signal
        p.data = p.data + 0.1 * rng.standard_normal(p.data.shape)
    depth = rng.uniform(0.0, 1.0, (steps, batch) + depth_hw)
    audio = np.abs(rng.standard_normal((steps, batch, 2, bins)))
    h0 = 0.1 * rng.standard_normal((batch, cfg.hidden_size))
    actions = rng.integers(0, 4, (steps, batch))
    adv = rng.standard_normal((steps, batch))
    ret = rng.standard_normal((steps, batch))

    def f(ps):
        return unrolled_loss(ps, cfg, depth, audio, h0, actions, adv, ret)

    return dc.grad_check(f, params, h)
