"""Figures written next to the CSV/JSONL reports."""
from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .gridworld import NavGraph  # noqa: E402

VISUAL_COLOR = "#2a9d8f"
AUDIO_COLOR = "#f4a261"


def _finish(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_learning_curve(updates: Sequence[dict], evals: Sequence[dict], path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    if updates:
        steps = [u["env_steps"] for u in updates]
        ax1.plot(steps, [u["mean_episode_reward"] for u in updates], lw=1.2)
    ax1.set_xlabel("environment steps")
    ax1.set_ylabel("mean episode reward (window 50)")
    if evals:
        steps = [e["env_steps"] for e in evals]
        ax2.plot(steps, [e["srt"] for e in evals], marker="o", ms=3, label="SRT")
        ax2.plot(steps, [e["splt"] for e in evals], marker="s", ms=3, label="SPLT")
        ax2.legend(frameon=False)
    ax2.set_ylim(0, 1.02)
    ax2.set_xlabel("environment steps")
    ax2.set_ylabel("evaluation")
    _finish(fig, path)


def plot_impact(visual: np.ndarray, audio: np.ndarray, path, title: Optional[str] = None) -> None:
    """Stacked per-step bars: visual share below, audio share on top."""
    steps = np.arange(len(visual))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.12 * len(steps) + 2), 3))
    ax.bar(steps, visual, color=VISUAL_COLOR, width=0.9, label="visual")
    ax.bar(steps, audio, bottom=visual, color=AUDIO_COLOR, width=0.9, label="audio")
    ax.set_ylim(0, 1)
    ax.set_xlabel("step")
    ax.set_ylabel("normalized impact")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, ncol=2, loc="upper right")
    _finish(fig, path)


def plot_grid(graph: NavGraph, path, robot: Optional[int] = None,
              source: Optional[int] = None) -> None:
    fig, ax = plt.subplots(figsize=(0.4 * graph.width + 1, 0.4 * graph.height + 1))
    ax.imshow(~graph.traversable, cmap="Greys", vmin=0, vmax=1.4)
    for cell, marker, color in ((robot, "^", "tab:blue"), (source, "*", "tab:red")):
        if cell is not None:
            r, c = graph.rc(cell)
            ax.plot(c, r, marker, color=color, ms=10)
    ax.set_xticks([])
    ax.set_yticks([])
    _finish(fig, path)
