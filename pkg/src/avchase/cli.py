"""Command-line entry point: ``avchase <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad flags, config, or input),
2 runtime failure (divergence, replay mismatch, failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import checkpoint as ckpt_io
from . import gridworld as gw
from .config import FUSION_KINDS, ConfigError, RunConfig, validate_config
from .metrics import NoEpisodes, aggregate_report, read_summaries, write_report

log = logging.getLogger("avchase")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_config_flags(p: argparse.ArgumentParser, fusion: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON run config")
    p.add_argument("--out", type=Path, help="output directory")
    for name in ("env", "init", "action", "noise"):
        p.add_argument(f"--seed-{name}", type=int, dest=f"seed_{name}")
    if fusion:
        p.add_argument("--fusion", choices=FUSION_KINDS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="avchase", description="Audio-visual pursuit navigation lab")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-env", help="generate a grid and print its ASCII map")
    _add_config_flags(p, fusion=False)

    p = sub.add_parser("train", help="PPO training")
    _add_config_flags(p)
    p.add_argument("--updates", type=int)
    p.add_argument("--record-obs", action="store_true")
    p.add_argument("--no-trajectory", action="store_true", help="skip the per-step log")
    p.add_argument("--resume", type=Path, help="continue from a checkpoint")
    p.add_argument("--target-srt", type=float, help="stop once evaluation SRT reaches this")
    p.add_argument("--target-patience", type=int, default=1,
                   help="consecutive evaluations at or above --target-srt before stopping")
    p.add_argument("--max-env-steps", type=int)

    p = sub.add_parser("eval", help="argmax rollouts -> summaries and metric report")
    _add_config_flags(p, fusion=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--record-obs", action="store_true")

    p = sub.add_parser("replay", help="re-execute a trajectory log and verify it")
    p.add_argument("--log", type=Path, help="trajectory.jsonl (default: <run>/trajectory.jsonl)")
    p.add_argument("--run", type=Path, help="run directory")

    p = sub.add_parser("metrics", help="metric report from episode JSONL")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("impact", help="per-step modality impact on a recorded trajectory")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--trajectory", type=Path, required=True,
                   help="trajectory.jsonl recorded with --record-obs")
    p.add_argument("--episode", type=int, help="restrict to one episode id")
    p.add_argument("--seed-noise", type=int, dest="seed_noise")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("grad-check", help="finite-difference check of the full policy loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fusion", choices=FUSION_KINDS, action="append")
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("export-activations", help="dump intermediate activations as JSON")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--layers", default="all", help="comma-separated layer names or 'all'")
    p.add_argument("--episode-seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    return parser


def resolve_config(args) -> RunConfig:
    raw = json.loads(args.config.read_text()) if getattr(args, "config", None) else {}
    seeds = raw.setdefault("seeds", {})
    for name in ("env", "init", "action", "noise"):
        v = getattr(args, f"seed_{name}", None)
        if v is not None:
            seeds[name] = v
    if getattr(args, "fusion", None):
        raw.setdefault("policy", {})["fusion"] = args.fusion
    if getattr(args, "updates", None) is not None:
        raw.setdefault("ppo", {})["num_updates"] = args.updates
    if getattr(args, "out", None) is not None:
        raw["out"] = str(args.out)
    return validate_config(raw)


# ---------------------------------------------------------------- commands

def cmd_gen_env(args) -> int:
    from .plotting import plot_grid
    from .rollout import build_graph
    cfg = resolve_config(args)
    graph = build_graph(cfg)
    print(graph.to_ascii())
    out = Path(cfg.out)
    if args.out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "graph.json").write_text(json.dumps(
            {"config": cfg.to_dict(), "graph": graph.to_dict()}, indent=2, sort_keys=True))
        (out / "map.txt").write_text(graph.to_ascii() + "\n")
        plot_grid(graph, out / "map.png")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_learning_curve
    from .ppo import train
    cfg = resolve_config(args)
    if args.resume is not None and not args.resume.exists():
        raise ValueError(f"checkpoint {args.resume} not found")
    out = Path(cfg.out)
    res = train(cfg, out_dir=out, resume=args.resume, target_srt=args.target_srt,
                max_env_steps=args.max_env_steps, log_trajectory=not args.no_trajectory,
                record_obs=args.record_obs, num_updates=args.updates,
                target_patience=args.target_patience)
    plot_learning_curve(res.stats, res.evals, out / "learning_curve.png")
    print(f"updates {res.trainer.update} env_steps {res.trainer.env_steps} "
          f"checkpoint {res.checkpoint_path}")
    if res.evals:
        print(f"last eval srt {res.evals[-1]['srt']:.3f} splt {res.evals[-1]['splt']:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .ppo import policy_from_checkpoint
    from .rollout import TrajectoryWriter, evaluate
    ck = ckpt_io.load(args.checkpoint)
    cfg = validate_config(ck.meta["config"])
    if args.out is not None:
        cfg.out = str(args.out)
    for name in ("env", "init", "action", "noise"):
        v = getattr(args, f"seed_{name}", None)
        if v is not None:
            setattr(cfg.seeds, name, v)
    policy = policy_from_checkpoint(ck)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    writer = TrajectoryWriter(out / "trajectory.jsonl", cfg, record_obs=args.record_obs)
    try:
        res = evaluate(policy, cfg, args.episodes, split=args.split, writer=writer)
    finally:
        writer.close()
    with open(out / "episodes.jsonl", "w") as fh:
        fh.write(json.dumps({"type": "header", "config": cfg.to_dict()}, sort_keys=True) + "\n")
        for s in res.summaries:
            fh.write(json.dumps({"type": "episode", **s.to_dict()}, sort_keys=True) + "\n")
    report = aggregate_report(res.summaries)
    write_report(out / "report.json", report, cfg.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def replay_log(path: Path) -> tuple:
    """Re-execute every episode in a trajectory log; returns (steps, divergent steps)."""
    from .rollout import build_graph, build_signatures, read_jsonl
    records = read_jsonl(path)
    if not records or records[0].get("type") != "header":
        raise ValueError(f"{path} lacks a config header")
    cfg = validate_config(records[0]["config"])
    graph, sigs = build_graph(cfg), build_signatures(cfg)
    params = cfg.env.env_params(cfg.ppo)
    obs_path = path.with_suffix(".obs.npz")
    stored = np.load(obs_path) if obs_path.exists() else None
    episodes: dict = {}
    steps = divergent = 0
    for row, rec in enumerate(records[1:]):
        eid = rec["episode"]
        if eid not in episodes:
            st, obs = gw.reset(graph, rec["episode_seed"], rec["signature"],
                               sigs[rec["signature"]], params)
            episodes[eid] = [st, obs]
        st, obs = episodes[eid]
        ok = True
        if stored is not None:
            ok &= bool(np.array_equal(stored["depth"][row], obs.depth)
                       and np.array_equal(stored["audio"][row], obs.audio))
        try:
            _, obs, reward, done, _ = gw.step(st, rec["action"])
        except gw.EpisodeDone:
            ok = False
        else:
            episodes[eid][1] = obs
            ok &= (st.step_count == rec["step"] and st.robot.cell == rec["robot_cell"]
                   and st.robot.heading == rec["robot_heading"]
                   and st.source.cell == rec["source_cell"] and reward == rec["reward"]
                   and done == rec["done"] and st.success == rec["success"])
        steps += 1
        if not ok:
            divergent += 1
            log.warning("divergence at episode %s step %s", eid, rec["step"])
    if stored is not None:
        stored.close()
    return steps, divergent


def cmd_replay(args) -> int:
    if args.log is None and args.run is None:
        raise ValueError("give --log or --run")
    path = args.log if args.log is not None else args.run / "trajectory.jsonl"
    if not path.exists():
        raise ValueError(f"{path} not found")
    steps, divergent = replay_log(path)
    print(f"replayed {steps} steps, {divergent} divergent")
    return EXIT_OK if divergent == 0 else EXIT_RUNTIME


def _header_config(path: Path) -> Optional[dict]:
    with open(path) as fh:
        first = fh.readline().strip()
    if not first:
        return None
    rec = json.loads(first)
    return rec.get("config") if rec.get("type") == "header" else None


def cmd_metrics(args) -> int:
    if not args.inp.exists():
        raise ValueError(f"{args.inp} not found")
    summaries = read_summaries(args.inp)
    report = aggregate_report(summaries)
    if args.out is not None:
        write_report(args.out, report, _header_config(args.inp))
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_impact(args) -> int:
    from .analysis import RecordedTrajectory, modality_impact
    from .plotting import plot_impact
    from .ppo import policy_from_checkpoint
    from .rollout import read_jsonl
    ck = ckpt_io.load(args.checkpoint)
    cfg = validate_config(ck.meta["config"])
    policy = policy_from_checkpoint(ck)
    records = [r for r in read_jsonl(args.trajectory) if r.get("type") != "header"]
    rows = np.arange(len(records))
    if args.episode is not None:
        rows = np.array([i for i, r in enumerate(records) if r["episode"] == args.episode])
        if rows.size == 0:
            raise ValueError(f"episode {args.episode} not in {args.trajectory}")
    npz = args.trajectory.with_suffix(".obs.npz")
    if not npz.exists():
        raise ValueError(f"{npz} missing: record the trajectory with --record-obs")
    traj = RecordedTrajectory.load(npz, rows)
    seed = args.seed_noise if args.seed_noise is not None else cfg.seeds.noise
    scores = modality_impact(policy, traj, seed, args.repeats)
    out = args.out if args.out is not None else args.trajectory.parent
    out.mkdir(parents=True, exist_ok=True)
    scores.write_csv(out / "impact.csv")
    (out / "impact.config.json").write_text(json.dumps(
        {"config": cfg.to_dict(), "noise_seed": seed, "episode": args.episode,
         "repeats": args.repeats}, indent=2, sort_keys=True))
    title = None if args.episode is None else f"episode {args.episode}"
    plot_impact(scores.visual, scores.audio, out / "impact.png", title)
    print(f"steps {len(traj)} mean visual {scores.visual.mean():.3f} "
          f"mean audio {scores.audio.mean():.3f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .ppo import policy_grad_check
    worst = 0.0
    for fusion in args.fusion or FUSION_KINDS:
        err = policy_grad_check(fusion, seed=args.seed)
        print(f"{fusion}: max rel error {err:.3e}")
        worst = max(worst, err)
    print(f"max rel error {worst:.3e}")
    return EXIT_OK if worst <= args.tol else EXIT_RUNTIME


def cmd_export(args) -> int:
    from .analysis import export_activations, write_activations
    from .ppo import policy_from_checkpoint
    from .rollout import build_graph, build_signatures
    ck = ckpt_io.load(args.checkpoint)
    cfg = validate_config(ck.meta["config"])
    policy = policy_from_checkpoint(ck)
    graph, sigs = build_graph(cfg), build_signatures(cfg)
    sig = cfg.splits.train[0]
    _, obs = gw.reset(graph, args.episode_seed, sig, sigs[sig], cfg.env.env_params(cfg.ppo))
    layers = "all" if args.layers == "all" else args.layers.split(",")
    acts = export_activations(policy, obs, layers)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_activations(args.out, acts)
    args.out.with_suffix(".config.json").write_text(json.dumps(
        {"config": cfg.to_dict(), "episode_seed": args.episode_seed, "layers": list(acts)},
        indent=2, sort_keys=True))
    print(", ".join(f"{k}{list(v.shape)}" for k, v in acts.items()))
    return EXIT_OK


COMMANDS = {
    "gen-env": cmd_gen_env, "train": cmd_train, "eval": cmd_eval, "replay": cmd_replay,
    "metrics": cmd_metrics, "impact": cmd_impact, "grad-check": cmd_grad_check,
    "export-activations": cmd_export,
}


def dispatch(argv: Optional[List[str]] = None) -> int:
    level = os.environ.get("AVCHASE_LOG_LEVEL", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "avchase: error: a subcommand is required")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"config error at {path or '/'}: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except NoEpisodes as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ckpt_io.CheckpointError, FloatingPointError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
