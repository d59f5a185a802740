"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .allocator import (
    PrecedenceDag, Schedule, Segment, VlmConfig, assign_arms, detect_conflicts, render_overlay, role_precedence,
    segment_polyline, segment_streams, vlm_allocate,
)
from .dualsim import TaskGoal, WorldState, collision_count, evaluate_task, execute_schedule, write_events
from .lift3d import AnchorDepth, PlaneDepth, initial_pose_of, lift_trajectory, load_trajectories, save_trajectories
from .scene import TEMPLATES, anchor_world, generate_episode, grid_anchors, ground_instruction, read_episodes, \
    read_flows, track_flows, write_episodes, write_flows
from .sfdnet import SFDNet, sample_flows, samples_from_episodes, train

log = logging.getLogger("dualflow")

SCHEDULE_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _seed_range(text: str) -> list[int]:
    try:
        if ":" in text:
            a, b = text.split(":")
            seeds = list(range(int(a), int(b)))
        else:
            seeds = [int(s) for s in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}; use A:B or a,b,c") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{path} does not exist")
    return p


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--task", choices=TEMPLATES)
    p.add_argument("--episodes", type=int, help="number of evaluation episodes")
    p.add_argument("--checkpoint")
    p.add_argument("--lr", type=float)
    p.add_argument("--vae-lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--vae-epochs", type=int)
    p.add_argument("--train-episodes", type=int)
    p.add_argument("--d-safe", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--vlm-endpoint")


def _config(args) -> pl.RunConfig:
    if args.config:
        _existing(args.config)
    overrides = {k: getattr(args, k, None) for k in ("seed", "task", "episodes", "checkpoint", "lr", "vae_lr",
                                                     "epochs", "vae_epochs", "train_episodes", "d_safe", "dt",
                                                     "vlm_endpoint")}
    return pl.load_config(args.config, overrides)


def _episode(args):
    eps = read_episodes(_existing(args.data))
    if not 0 <= args.index < len(eps):
        raise UsageError(f"episode index {args.index} out of range (file has {len(eps)})")
    return eps[args.index]


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> None:
    eps = [generate_episode(args.task, s) for s in args.seeds]
    write_episodes(args.out, eps)
    print(f"wrote {len(eps)} {args.task} episodes to {args.out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    if args.data:
        eps = read_episodes(_existing(args.data))
        data = samples_from_episodes(eps, cfg.grid)
        n_val = max(1, len(data) // 8)
        net, _ = train(data[:-n_val], cfg.train_config(not args.no_siamese), val=data[-n_val:],
                       model_cfg=cfg.model_config(), log_path=args.log)
    else:
        net = pl.train_checkpoint(cfg, siamese=not args.no_siamese, log_path=args.log)
    net.save(args.out)
    print(f"saved {'shared' if net.siamese else 'unshared'} checkpoint to {args.out}")


def cmd_sample(args) -> None:
    net = SFDNet.load(_existing(args.checkpoint))
    ep = _episode(args)
    boxes = ground_instruction(ep)
    F1, F2 = sample_flows(net, (ep.camera.width, ep.camera.height), ep.instruction, *boxes,
                          seeds=(args.seed, args.seed + 1))
    write_flows(args.out, F1, F2)
    print(f"wrote flows {F1.shape} to {args.out}")


def cmd_lift(args) -> None:
    ep = _episode(args)
    boxes = ground_instruction(ep)
    if args.flows:
        flows = read_flows(_existing(args.flows))
        grid = flows[0].shape[-1]
        depths = []
        for b in boxes:
            oid, local = grid_anchors(ep, b, grid)
            depths.append(PlaneDepth(ep.camera, anchor_world(ep, oid, local, 0)[..., 2]))
    else:
        flows = track_flows(ep, *boxes, G=args.grid)
        depths = [AnchorDepth(ep, b, args.grid) for b in boxes]
    trs = [lift_trajectory(flows[s], ep.camera, depths[s], reference=initial_pose_of(ep, boxes[s]), stream=s + 1)
           for s in range(2)]
    save_trajectories(args.out, trs)
    print(f"wrote 2 trajectories to {args.out}")


def _load_streams(path):
    trs = load_trajectories(_existing(path))
    if sorted(t.stream for t in trs) != [1, 2]:
        raise UsageError("trajectory file must hold streams 1 and 2")
    return sorted(trs, key=lambda t: t.stream)


def cmd_allocate(args) -> None:
    cfg = _config(args)
    ep = _episode(args)
    trs = _load_streams(args.trajectories)
    by_stream = {t.stream: t for t in trs}
    assignment = assign_arms(trs)
    segs = segment_streams(trs, ep.segments_per_stream, v_max=cfg.v_max, m_max=cfg.m_max)
    dag = PrecedenceDag.build(segs, role_precedence(segs, ep.segment_roles, ep.precedence))
    conflicts = detect_conflicts(segs, by_stream, cfg.d_safe, assignment)
    polylines = {s.id: segment_polyline(s, by_stream[s.stream]) for s in segs}
    overlay = render_overlay(ep.camera, segs, polylines, assignment)
    outcome = vlm_allocate(VlmConfig(cfg.vlm_endpoint, cfg.vlm_timeout_s), overlay, segs, polylines,
                           ep.instruction, dag, conflicts, assignment)
    doc = {"version": SCHEDULE_VERSION, "segments": [s.to_dict() for s in segs],
           "assignment": {str(k): v for k, v in assignment.items()}, "conflicts": conflicts.pairs(),
           "precedence": dag.pairs(), **outcome.to_dict()}
    Path(args.out).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    if args.overlay:
        Path(args.overlay).write_text(overlay)
    note = f" (fallback: {outcome.reason})" if outcome.reason else ""
    print(f"{len(outcome.schedule.slots)} slots, makespan {outcome.schedule.makespan:.3f} s, "
          f"source {outcome.source}{note}")


def cmd_execute(args) -> None:
    cfg = _config(args)
    ep = _episode(args)
    trs = _load_streams(args.trajectories)
    doc = json.loads(_existing(args.schedule).read_text())
    if doc.get("version") != SCHEDULE_VERSION:
        raise pl.ConfigError("unsupported schedule file version")
    segs = [Segment.from_dict(d) for d in doc["segments"]]
    schedule = Schedule(tuple(tuple(s) for s in doc["slots"]), {s.id: s.duration for s in segs})
    world = WorldState.from_episode(ep, v_max=cfg.v_max)
    world, events = execute_schedule(world, schedule, segs, {t.stream: t for t in trs}, cfg.dt)
    result = evaluate_task(world, events, TaskGoal.from_episode(ep))
    result["collisions"] = collision_count(events)
    result["sim_time"] = round(world.tick * cfg.dt, 10)
    if args.events:
        write_events(args.events, events)
    Path(args.out).write_text(json.dumps(result, sort_keys=True, indent=1) + "\n")
    print(f"success={result['success']} collisions={result['collisions']}")


def _checkpoint_for(cfg: pl.RunConfig, mode: str, want_train: bool, oracle: bool):
    if oracle:
        return None
    if want_train:
        net = pl.train_checkpoint(cfg, siamese=mode != "no_siamese")
        if cfg.checkpoint:
            net.save(cfg.checkpoint)
        return net
    return pl.load_checkpoint(cfg, mode)


def cmd_pipeline(args) -> None:
    cfg = _config(args)
    net = _checkpoint_for(cfg, args.mode, args.train, args.oracle_flows)
    report = pl.run_pipeline(cfg, args.mode, args.oracle_flows, net, args.out_dir)
    if args.out:
        pl.write_report(args.out, report)
    print(f"{cfg.task} {args.mode}: success {report['success_rate']:.0%} over {len(report['episodes'])} episodes")


def cmd_report(args) -> None:
    reports = [pl.load_report(_existing(p)) for p in args.reports]
    rows = pl.aggregate(reports)
    csv_text = pl.table_csv(rows)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    if args.svg:
        Path(args.svg).write_text(pl.table_svg(rows))
    sys.stdout.write(csv_text)


def cmd_ablate(args) -> None:
    cfg = _config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    modes = ["full", "no_allocation"]
    if args.unshared_checkpoint and not args.oracle_flows:
        modes.append("no_siamese")
    reports = []
    for mode in modes:
        mcfg = cfg
        if mode == "no_siamese":
            mcfg = pl.RunConfig(**{**cfg.__dict__, "checkpoint": str(_existing(args.unshared_checkpoint))})
        net = None if args.oracle_flows else pl.load_checkpoint(mcfg, mode)
        rep = pl.run_pipeline(mcfg, mode, args.oracle_flows, net, out / mode)
        reports.append(rep)
    rows = pl.aggregate(reports)
    (out / "table.csv").write_text(pl.table_csv(rows))
    (out / "table.svg").write_text(pl.table_svg(rows))
    sys.stdout.write(pl.table_csv(rows))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualflow", description="Two-arm flow generation, allocation and simulation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate scripted episodes")
    s.add_argument("--task", choices=TEMPLATES, required=True)
    s.add_argument("--seeds", type=_seed_range, default=_seed_range("0:10"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a flow generator checkpoint")
    _config_flags(s)
    s.add_argument("--data", help="episode JSONL (default: synthesise from the config)")
    s.add_argument("--no-siamese", action="store_true", help="train two unshared parameter sets")
    s.add_argument("--log", help="loss CSV")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample flows for one episode")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="episode JSONL")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("lift", help="lift flows to 3D trajectories")
    s.add_argument("--data", required=True, help="episode JSONL")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--flows", help="SFDF flow file (default: track the scene oracle)")
    s.add_argument("--grid", type=int, default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_lift)

    s = sub.add_parser("allocate", help="segment, assign arms and schedule")
    _config_flags(s)
    s.add_argument("--data", required=True, help="episode JSONL")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--trajectories", required=True)
    s.add_argument("--overlay", help="write the segment overlay SVG here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_allocate)

    s = sub.add_parser("execute", help="run a schedule in the simulator")
    _config_flags(s)
    s.add_argument("--data", required=True, help="episode JSONL")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--trajectories", required=True)
    s.add_argument("--schedule", required=True)
    s.add_argument("--events", help="event log JSONL")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_execute)

    s = sub.add_parser("pipeline", help="end-to-end evaluation over scripted scenes")
    _config_flags(s)
    s.add_argument("--mode", choices=pl.MODES, default="full")
    s.add_argument("--oracle-flows", action="store_true", help="use tracked ground-truth flows")
    s.add_argument("--train", action="store_true", help="train the checkpoint first")
    s.add_argument("--out-dir")
    s.add_argument("--out", help="report JSON")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("report", help="aggregate run reports")
    s.add_argument("reports", nargs="+")
    s.add_argument("--csv")
    s.add_argument("--svg")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("ablate", help="run every mode and tabulate")
    _config_flags(s)
    s.add_argument("--oracle-flows", action="store_true")
    s.add_argument("--unshared-checkpoint")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"dualflow: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, pl.ConfigError) as exc:
        print(f"dualflow: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("pipeline failure", exc_info=True)
        print(f"dualflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
