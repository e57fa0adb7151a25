"""Modality-impact probing and activation export."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

from .gridworld import Observation
from .policy import Policy, log_probs_from_logits


@dataclass
class RecordedTrajectory:
    """Observations the agent acted on, with the hidden state it held before each step."""

    depth: np.ndarray  # L x H x W
    audio: np.ndarray  # L x 2 x F
    hidden: np.ndarray  # L x hidden

    def __len__(self):
        return self.depth.shape[0]

    @classmethod
    def load(cls, npz_path, rows: Optional[np.ndarray] = None) -> "RecordedTrajectory":
        with np.load(npz_path) as z:
            if "depth" not in z or "hidden" not in z:
                raise ValueError(f"{npz_path} has no stored observations")
            depth, audio, hidden = z["depth"], z["audio"], z["hidden"]
        if rows is not None:
            depth, audio, hidden = depth[rows], audio[rows], hidden[rows]
        return cls(depth, audio, hidden)


@dataclass
class ImpactScores:
    visual: np.ndarray
    audio: np.ndarray
    raw_visual: np.ndarray
    raw_audio: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "visual_impact", "audio_impact"])
            for i, (v, a) in enumerate(zip(self.visual, self.audio)):
                w.writerow([i, repr(float(v)), repr(float(a))])


def _log_probs(policy: Policy, depth, audio, hidden) -> np.ndarray:
    return log_probs_from_logits(policy.forward(depth, audio, hidden).logits.data)


def modality_impact(policy: Policy, trajectory: RecordedTrajectory, noise_seed: int,
                    repeats: int = 1) -> ImpactScores:
    """Per-step share of the action log-probability shift caused by noising each input.

    Each modality in turn is replaced by unit Gaussian noise of the same
    shape; the raw impact is the L1 distance between intact and corrupted
    log-probabilities. The pair is normalized to sum to one (0.5/0.5 when
    neither input matters). Noise comes from its own generator.
    """
    if trajectory is None or len(trajectory) == 0:
        raise ValueError("trajectory has no stored observations")
    rng = np.random.default_rng(noise_seed)
    base = _log_probs(policy, trajectory.depth, trajectory.audio, trajectory.hidden)
    raw_v = np.zeros(len(trajectory))
    raw_a = np.zeros(len(trajectory))
    for _ in range(repeats):
        noisy_depth = rng.standard_normal(trajectory.depth.shape)
        noisy_audio = rng.standard_normal(trajectory.audio.shape)
        lv = _log_probs(policy, noisy_depth, trajectory.audio, trajectory.hidden)
        la = _log_probs(policy, trajectory.depth, noisy_audio, trajectory.hidden)
        raw_v += np.abs(base - lv).sum(axis=1)
        raw_a += np.abs(base - la).sum(axis=1)
    raw_v /= repeats
    raw_a /= repeats
    total = raw_v + raw_a
    both_zero = total == 0
    safe = np.where(both_zero, 1.0, total)
    vis = np.where(both_zero, 0.5, raw_v / safe)
    aud = np.where(both_zero, 0.5, raw_a / safe)
    return ImpactScores(vis, aud, raw_v, raw_a)


def available_layers(policy: Policy) -> List[str]:
    names = []
    for branch, layers in (("visual", policy.cfg.visual_conv), ("audio", policy.cfg.audio_conv)):
        names += [f"{branch}.conv{i}" for i in range(len(layers))] + [f"{branch}.feature"]
    if policy.cfg.fusion == "fsa":
        names += ["e_i", "attention"]
    return names + ["e_o", "s_t", "logits", "value"]


def export_activations(policy: Policy, observation: Observation,
                       layer_selector: Union[str, Iterable[str]] = "all",
                       hidden: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """Named intermediate activations for one observation (batch axis dropped)."""
    known = available_layers(policy)
    if layer_selector == "all":
        wanted = known
    else:
        wanted = [layer_selector] if isinstance(layer_selector, str) else list(layer_selector)
        unknown = [n for n in wanted if n not in known]
        if unknown:
            raise KeyError(f"unknown layer(s) {unknown}; available: {', '.join(known)}")
    h = policy.zero_hidden(1) if hidden is None else np.asarray(hidden).reshape(1, -1)
    capture: Dict[str, np.ndarray] = {}
    policy.forward(observation.depth[None], observation.audio[None], h, capture)
    return {n: np.array(capture[n][0]) for n in wanted}


def write_activations(path, acts: Dict[str, np.ndarray]) -> None:
    payload = {n: {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}
               for n, a in acts.items()}
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def read_activations(path) -> Dict[str, np.ndarray]:
    payload = json.loads(Path(path).read_text())
    return {n: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
            for n, v in payload.items()}
