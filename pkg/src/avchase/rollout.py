"""Batched episode driving shared by training, evaluation and replay."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import gridworld as gw
from .config import RunConfig
from .policy import Policy

# salt mixed into the env seed for the evaluation episode stream
EVAL_STREAM = 0xE7A1


def build_graph(cfg: RunConfig) -> gw.NavGraph:
    e = cfg.env
    return gw.generate_grid(e.seed, e.width, e.height, e.obstacle_density)


def build_signatures(cfg: RunConfig) -> np.ndarray:
    return gw.make_signatures(cfg.env.signature_seed, cfg.env.audio_bins)


def make_policy(cfg: RunConfig, params=None) -> Policy:
    return Policy(cfg.policy, cfg.env.depth_res, cfg.env.audio_bins, params=params,
                  seed=cfg.seeds.init)


def step_record(episode: int, episode_seed: int, state: gw.EpisodeState, action: int,
                reward: float) -> dict:
    return {
        "episode": episode,
        "episode_seed": episode_seed,
        "signature": state.source.signature,
        "step": state.step_count,
        "robot_cell": state.robot.cell,
        "robot_heading": state.robot.heading,
        "source_cell": state.source.cell,
        "action": int(action),
        "reward": reward,
        "done": state.done,
        "success": state.success,
    }


class TrajectoryWriter:
    """Append-only JSONL step log with optional observation capture.

    The first line of a fresh file is a header carrying the resolved config.
    Observations (the ones the agent acted on) and pre-step hidden states go
    to a sibling ``.npz`` when ``record_obs`` is set.
    """

    def __init__(self, path, config: RunConfig, record_obs: bool = False, append: bool = False):
        self.path = Path(path)
        self.record_obs = record_obs
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a")
        if fresh:
            self._fh.write(json.dumps({"type": "header", "config": config.to_dict()},
                                      sort_keys=True) + "\n")
        self._depth: List[np.ndarray] = []
        self._audio: List[np.ndarray] = []
        self._hidden: List[np.ndarray] = []

    def write(self, record: dict, obs: Optional[gw.Observation] = None,
              hidden: Optional[np.ndarray] = None) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        if self.record_obs:
            self._depth.append(obs.depth)
            self._audio.append(obs.audio)
            self._hidden.append(hidden)

    def close(self) -> None:
        self._fh.close()
        if self.record_obs:
            np.savez(self.path.with_suffix(".obs.npz"), depth=np.array(self._depth),
                     audio=np.array(self._audio), hidden=np.array(self._hidden))


def read_jsonl(path) -> List[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


class EnvPool:
    """``n`` independent episodes on one graph, auto-reset from a seeded stream."""

    def __init__(self, cfg: RunConfig, n: int, graph: Optional[gw.NavGraph] = None,
                 signatures: Optional[np.ndarray] = None, stream_seed=None,
                 split: str = "train"):
        self.cfg = cfg
        self.graph = graph if graph is not None else build_graph(cfg)
        self.signatures = signatures if signatures is not None else build_signatures(cfg)
        self.params = cfg.env.env_params(cfg.ppo)
        self.split_ids = list(getattr(cfg.splits, split))
        seed = cfg.seeds.env if stream_seed is None else stream_seed
        self.rng = np.random.default_rng(seed)
        self.episode_counter = 0
        self.states: List[gw.EpisodeState] = []
        self.obs: List[gw.Observation] = []
        self.episode_ids: List[int] = []
        self.episode_seeds: List[int] = []
        for _ in range(n):
            s, o, eid, eseed = self._new_episode()
            self.states.append(s)
            self.obs.append(o)
            self.episode_ids.append(eid)
            self.episode_seeds.append(eseed)

    def __len__(self):
        return len(self.states)

    def _new_episode(self):
        eseed = int(self.rng.integers(2**62))
        sig = int(self.split_ids[int(self.rng.integers(len(self.split_ids)))])
        state, obs = gw.reset(self.graph, eseed, sig, self.signatures[sig], self.params)
        eid = self.episode_counter
        self.episode_counter += 1
        return state, obs, eid, eseed

    def reset_slot(self, i: int) -> None:
        s, o, eid, eseed = self._new_episode()
        self.states[i], self.obs[i] = s, o
        self.episode_ids[i], self.episode_seeds[i] = eid, eseed

    def batch_obs(self):
        return (np.stack([o.depth for o in self.obs]), np.stack([o.audio for o in self.obs]))

    def to_dict(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "episode_counter": self.episode_counter,
            "episodes": [
                {"id": eid, "seed": es,
                 "state": dict(st.to_dict(), obs={"depth": ob.depth.tolist(),
                                                  "audio": ob.audio.tolist()})}
                for eid, es, st, ob in zip(self.episode_ids, self.episode_seeds, self.states,
                                           self.obs)
            ],
        }

    def load_dict(self, d: dict) -> None:
        self.rng.bit_generator.state = d["rng"]
        self.episode_counter = d["episode_counter"]
        self.states, self.obs, self.episode_ids, self.episode_seeds = [], [], [], []
        for ep in d["episodes"]:
            sig = ep["state"]["source"]["signature"]
            st = gw.EpisodeState.from_dict(ep["state"], self.graph, self.signatures[sig],
                                           self.params)
            self.states.append(st)
            self.episode_ids.append(ep["id"])
            self.episode_seeds.append(ep["seed"])
            self.obs.append(_resume_obs(st, ep["state"]))

    def observation_for(self, i: int) -> gw.Observation:
        return self.obs[i]


def _resume_obs(state: gw.EpisodeState, saved: dict) -> gw.Observation:
    obs = saved.get("obs")
    if obs is None:
        raise ValueError("pool snapshot lacks the pending observation")
    return gw.Observation(np.asarray(obs["depth"], dtype=np.float64),
                          np.asarray(obs["audio"], dtype=np.float64))


@dataclass
class EvalResult:
    summaries: List[gw.EpisodeSummary]
    records: List[dict] = field(default_factory=list)


def evaluate(policy: Policy, cfg: RunConfig, n_episodes: int, graph=None, signatures=None,
             split: Optional[str] = None, seed: Optional[int] = None, mode: str = "argmax",
             rng: Optional[np.random.Generator] = None,
             writer: Optional[TrajectoryWriter] = None) -> EvalResult:
    """Run ``n_episodes`` to completion, all in one batch.

    Episodes come from a stream keyed on the env seed, so evaluation never
    touches training randomness.
    """
    stream = seed if seed is not None else [cfg.seeds.env, EVAL_STREAM]
    pool = EnvPool(cfg, n_episodes, graph, signatures, stream_seed=stream,
                   split=split or cfg.splits.eval_split)
    hidden = policy.zero_hidden(n_episodes)
    active = list(range(n_episodes))
    summaries: List[Optional[gw.EpisodeSummary]] = [None] * n_episodes
    while active:
        depth = np.stack([pool.obs[i].depth for i in active])
        audio = np.stack([pool.obs[i].audio for i in active])
        acts, _, _, h_new = policy.act_batch(depth, audio, hidden[active], mode, rng)
        still = []
        for k, i in enumerate(active):
            st = pool.states[i]
            prev_obs, prev_h = pool.obs[i], hidden[i].copy()
            _, obs, reward, done, info = gw.step(st, int(acts[k]))
            pool.obs[i] = obs
            hidden[i] = h_new[k]
            if writer is not None:
                writer.write(step_record(pool.episode_ids[i], pool.episode_seeds[i], st,
                                         int(acts[k]), reward), prev_obs, prev_h)
            if done:
                summaries[i] = info["summary"]
            else:
                still.append(i)
        active = still
    return EvalResult(summaries)
