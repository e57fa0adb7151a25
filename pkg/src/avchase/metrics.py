"""Tracking metrics over finished episodes (SPLT family, NAT/SNAT, DTGT/NDTGT)."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

from .gridworld import EpisodeSummary

log = logging.getLogger(__name__)


class NoEpisodes(ValueError):
    def __init__(self):
        super().__init__("no episodes")


def _check(summaries: Sequence[EpisodeSummary]) -> None:
    if not summaries:
        raise NoEpisodes()


def _efficiency(shortest: float, executed: float) -> float:
    denom = max(executed, shortest)
    return 1.0 if denom == 0 else shortest / denom


def compute_splt(summaries: Sequence[EpisodeSummary]) -> float:
    _check(summaries)
    total = 0.0
    for s in summaries:
        if s.success:
            total += _efficiency(s.shortest_path_length, s.path_length)
    return total / len(summaries)


def compute_ssplt(summaries: Sequence[EpisodeSummary]) -> float:
    """Soft SPLT: success replaced by the fraction of start distance closed."""
    _check(summaries)
    total = 0.0
    for s in summaries:
        if s.start_distance == 0:
            progress = 1.0 if s.final_distance == 0 else 0.0
        else:
            progress = max(0.0, 1.0 - s.final_distance / s.start_distance)
        total += progress * _efficiency(s.shortest_path_length, s.path_length)
    return total / len(summaries)


def compute_srt(summaries: Sequence[EpisodeSummary]) -> float:
    _check(summaries)
    return sum(1.0 for s in summaries if s.success) / len(summaries)


def compute_nat(summaries: Sequence[EpisodeSummary]) -> float:
    _check(summaries)
    return sum(s.action_count for s in summaries) / len(summaries)


def compute_snat(summaries: Sequence[EpisodeSummary]) -> float:
    _check(summaries)
    total = 0.0
    for s in summaries:
        if s.success:
            total += _efficiency(s.shortest_action_count, s.action_count)
    return total / len(summaries)


def compute_dtgt(summaries: Sequence[EpisodeSummary]) -> float:
    _check(summaries)
    return sum(s.final_distance for s in summaries) / len(summaries)


def compute_ndtgt(summaries: Sequence[EpisodeSummary]) -> float:
    """Mean final/start distance ratio; episodes with zero start distance are skipped."""
    _check(summaries)
    kept = [s for s in summaries if s.start_distance > 0]
    skipped = len(summaries) - len(kept)
    if skipped:
        log.warning("ndtgt: excluded %d episode(s) with zero start-to-goal distance", skipped)
    if not kept:
        return 0.0
    return sum(s.final_distance / s.start_distance for s in kept) / len(kept)


def compute_r_mean(summaries: Sequence[EpisodeSummary]) -> float:
    _check(summaries)
    return sum(s.total_reward for s in summaries) / len(summaries)


@dataclass
class MetricReport:
    splt: float
    ssplt: float
    srt: float
    nat: float
    snat: float
    dtgt: float
    ndtgt: float
    r_mean: float
    episodes: int

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate_report(summaries: Sequence[EpisodeSummary], stats_stream=None) -> MetricReport:
    """All metrics at once. ``stats_stream`` is accepted for log symmetry but unused."""
    _check(summaries)
    return MetricReport(
        splt=compute_splt(summaries),
        ssplt=compute_ssplt(summaries),
        srt=compute_srt(summaries),
        nat=compute_nat(summaries),
        snat=compute_snat(summaries),
        dtgt=compute_dtgt(summaries),
        ndtgt=compute_ndtgt(summaries),
        r_mean=compute_r_mean(summaries),
        episodes=len(summaries),
    )


def read_summaries(path) -> List[EpisodeSummary]:
    """Episode summaries from JSONL; header and non-summary lines are skipped."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("type", "episode") != "episode":
                continue
            out.append(EpisodeSummary.from_dict(rec))
    return out


def write_report(path, report: MetricReport, config: Optional[dict] = None) -> None:
    payload = report.to_dict()
    if config is not None:
        payload["config"] = config
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
