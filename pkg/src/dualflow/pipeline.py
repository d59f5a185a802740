"""Run configuration, the end-to-end episode loop and report aggregation."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .allocator import (
    Infeasible, PrecedenceDag, Schedule, VlmConfig, assign_arms, detect_conflicts, render_overlay,
    role_precedence, segment_polyline, segment_streams, vlm_allocate,
)
from .dualsim import TaskGoal, WorldState, collision_count, evaluate_task, execute_schedule, write_events
from .lift3d import AnchorDepth, PlaneDepth, Trajectory3D, initial_pose_of, lift_trajectory
from .scene import TEMPLATES, EpisodeRecord, anchor_world, generate_episode, grid_anchors, ground_instruction, \
    track_flows
from .sfdnet import ModelConfig, SFDNet, TrainConfig, sample_flows, samples_from_episodes, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

REPORT_VERSION = 1
MODES = ("full", "no_allocation", "no_siamese")
VLM_ENV = "SFD_VLM_ENDPOINT"
TRAIN_SEED_OFFSET = 100_000


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    task: str = "packing"
    episodes: int = 10
    checkpoint: str | None = None
    # model and training
    grid: int = 8
    latent: int = 16
    text_width: int = 16
    diffusion_steps: int = 100
    lora_rank: int = 4
    lr: float = 1e-4
    vae_lr: float | None = None
    weight_decay: float = 0.01
    epochs: int = 300
    vae_epochs: int = 60
    train_episodes: int = 64
    # allocation and simulation
    d_safe: float = 0.10
    m_max: int = 6
    dt: float = 0.02
    v_max: float = 0.5
    vlm_endpoint: str | None = None
    vlm_timeout_s: float = 30.0

    def validate(self) -> None:
        if self.task not in TEMPLATES:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {', '.join(TEMPLATES)}")
        positive = ("episodes", "grid", "latent", "text_width", "diffusion_steps", "lora_rank", "lr", "epochs",
                    "vae_epochs", "train_episodes", "d_safe", "m_max", "dt", "v_max", "vlm_timeout_s")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.grid < 2:
            raise ConfigError("grid must be at least 2")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")

    def model_config(self) -> ModelConfig:
        return ModelConfig(grid=self.grid, latent=self.latent, text_width=self.text_width, lora_rank=self.lora_rank,
                           lora_alpha=float(self.lora_rank))

    def train_config(self, siamese: bool = True) -> TrainConfig:
        return TrainConfig(seed=self.seed, lr=self.lr, weight_decay=self.weight_decay, vae_lr=self.vae_lr,
                           vae_epochs=self.vae_epochs, epochs=self.epochs, diffusion_steps=self.diffusion_steps,
                           siamese=siamese)

    def eval_seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.episodes)]

    def train_seeds(self) -> list[int]:
        return [self.seed + TRAIN_SEED_OFFSET + i for i in range(self.train_episodes)]


_SECTIONS = {
    "": ("seed", "task", "episodes"),
    "paths": ("checkpoint",),
    "model": ("grid", "latent", "text_width", "diffusion_steps", "lora_rank", "lr", "vae_lr", "weight_decay",
              "epochs", "vae_epochs", "train_episodes"),
    "allocator": ("d_safe", "m_max"),
    "sim": ("dt", "v_max"),
    "vlm": ("endpoint", "timeout_s"),
}


def _coerce(name: str, value, default):
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    kind = fields[name].type
    try:
        if value is None:
            return None
        if "int" in kind and "float" not in kind:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if "float" in kind:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot use {value!r}") from None


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                env: dict | None = None) -> RunConfig:
    """TOML file, then explicit overrides, then the VLM endpoint environment variable."""
    values: dict = {}
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        for key, val in raw.items():
            if isinstance(val, dict):
                if key not in _SECTIONS or key == "":
                    raise ConfigError(f"unknown config section [{key}]")
                for sub, v in val.items():
                    if sub not in _SECTIONS[key]:
                        raise ConfigError(f"unknown key {key}.{sub}")
                    values[f"vlm_{sub}" if key == "vlm" else sub] = v
            elif key in _SECTIONS[""]:
                values[key] = val
            else:
                raise ConfigError(f"unknown top-level key {key!r}")
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    env = os.environ if env is None else env
    if env.get(VLM_ENV):
        values["vlm_endpoint"] = env[VLM_ENV]
    defaults = RunConfig()
    kwargs = {}
    for k, v in values.items():
        if not hasattr(defaults, k):
            raise ConfigError(f"unknown setting {k!r}")
        kwargs[k] = _coerce(k, v, getattr(defaults, k))
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- model handling


def train_checkpoint(config: RunConfig, siamese: bool = True, log_path: str | Path | None = None) -> SFDNet:
    episodes = [generate_episode(config.task, s) for s in config.train_seeds()]
    data = samples_from_episodes(episodes, config.grid)
    n_val = max(1, len(data) // 8)
    net, _ = train(data[:-n_val], config.train_config(siamese), val=data[-n_val:], model_cfg=config.model_config(),
                   log_path=log_path)
    return net


def load_checkpoint(config: RunConfig, mode: str) -> SFDNet:
    if not config.checkpoint:
        raise ConfigError("a checkpoint path is required unless flows come from the scene oracle")
    path = Path(config.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} not found")
    net = SFDNet.load(path)
    if mode == "no_siamese" and net.siamese:
        raise ConfigError("no_siamese mode needs a checkpoint trained without weight sharing")
    if mode != "no_siamese" and not net.siamese:
        raise ConfigError(f"{mode} mode needs a weight-shared checkpoint")
    if net.cfg.grid != config.grid:
        raise ConfigError(f"checkpoint grid {net.cfg.grid} differs from configured grid {config.grid}")
    return net


# ---------------------------------------------------------------- one episode


@dataclass
class EpisodeArtifacts:
    row: dict
    overlay_svg: str | None
    events: list[dict]


def _lift_streams(ep: EpisodeRecord, config: RunConfig, boxes, net: SFDNet | None, episode_seed: int):
    if net is None:
        flows = track_flows(ep, *boxes, G=config.grid)
        depths = [AnchorDepth(ep, b, config.grid) for b in boxes]
    else:
        seeds = tuple(int(s) for s in np.random.SeedSequence([config.seed, episode_seed]).generate_state(2))
        flows = sample_flows(net, (ep.camera.width, ep.camera.height), ep.instruction, *boxes, seeds=seeds)
        depths = []
        for b in boxes:
            oid, local = grid_anchors(ep, b, config.grid)
            depths.append(PlaneDepth(ep.camera, anchor_world(ep, oid, local, 0)[..., 2]))
    return [lift_trajectory(flows[s], ep.camera, depths[s], reference=initial_pose_of(ep, boxes[s]), stream=s + 1)
            for s in range(2)]


def run_episode(ep: EpisodeRecord, config: RunConfig, mode: str, net: SFDNet | None) -> EpisodeArtifacts:
    row = {"seed": ep.seed, "success": False, "reasons": [], "collisions": 0, "makespan": None, "sim_time": None,
           "allocation": None, "fallback_reason": None}
    try:
        boxes = ground_instruction(ep)
        trs = _lift_streams(ep, config, boxes, net, ep.seed)
        assignment = assign_arms(trs)
    except (ValueError, ArithmeticError) as exc:  # grounding, lifting and reach failures end the episode
        row["reasons"] = [f"{type(exc).__name__}: {exc}"]
        return EpisodeArtifacts(row, None, [])
    by_stream = {1: trs[0], 2: trs[1]}
    overlay = None
    if mode == "no_allocation":
        segs = segment_streams(trs, (1, 1), v_max=config.v_max, m_max=config.m_max)
        slot = [None, None]
        for s in segs:
            slot[assignment[s.stream]] = s.id
        schedule = Schedule((tuple(slot),), {s.id: s.duration for s in segs})
        row["allocation"] = "bypassed"
    else:
        segs = segment_streams(trs, ep.segments_per_stream, v_max=config.v_max, m_max=config.m_max)
        try:
            dag = PrecedenceDag.build(segs, role_precedence(segs, ep.segment_roles, ep.precedence))
        except Infeasible as exc:
            row["reasons"] = [f"Infeasible: {exc}"]
            return EpisodeArtifacts(row, None, [])
        conflicts = detect_conflicts(segs, by_stream, config.d_safe, assignment)
        polylines = {s.id: segment_polyline(s, by_stream[s.stream]) for s in segs}
        overlay = render_overlay(ep.camera, segs, polylines, assignment)
        outcome = vlm_allocate(VlmConfig(config.vlm_endpoint, config.vlm_timeout_s), overlay, segs, polylines,
                               ep.instruction, dag, conflicts, assignment)
        schedule = outcome.schedule
        row["allocation"] = outcome.source
        row["fallback_reason"] = outcome.reason
    world = WorldState.from_episode(ep, v_max=config.v_max)
    world, events = execute_schedule(world, schedule, segs, by_stream, config.dt)
    result = evaluate_task(world, events, TaskGoal.from_episode(ep))
    row.update(success=result["success"], reasons=result["reasons"], collisions=collision_count(events),
               makespan=schedule.makespan, sim_time=round(world.tick * config.dt, 10))
    return EpisodeArtifacts(row, overlay, events)


def run_pipeline(config: RunConfig, mode: str = "full", oracle_flows: bool = False, net: SFDNet | None = None,
                 out_dir: str | Path | None = None) -> dict:
    """Evaluate ``config.episodes`` scripted scenes end to end and return the run report."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if oracle_flows and mode == "no_siamese":
        raise ConfigError("no_siamese compares flow generators and cannot run on oracle flows")
    if not oracle_flows and net is None:
        net = load_checkpoint(config, mode)
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "overlays").mkdir(parents=True, exist_ok=True)
        (out / "events").mkdir(parents=True, exist_ok=True)
    for seed in config.eval_seeds():
        ep = generate_episode(config.task, seed)
        art = run_episode(ep, config, mode, None if oracle_flows else net)
        rows.append(art.row)
        if out is not None:
            if art.overlay_svg is not None:
                (out / "overlays" / f"seed_{seed}.svg").write_text(art.overlay_svg)
            write_events(out / "events" / f"seed_{seed}.jsonl", art.events)
    report = {
        "version": REPORT_VERSION,
        "task": config.task,
        "mode": mode,
        "flows": "oracle" if oracle_flows else "model",
        "seed": config.seed,
        "episodes": rows,
        "success_rate": sum(r["success"] for r in rows) / len(rows),
    }
    if out is not None:
        write_report(out / "report.json", report)
    return report


def write_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------- aggregation


def load_report(path: str | Path) -> dict:
    rep = json.loads(Path(path).read_text())
    if rep.get("version") != REPORT_VERSION:
        raise ValueError(f"{path}: report schema version {rep.get('version')!r}, expected {REPORT_VERSION}")
    return rep


def aggregate(reports: list[dict]) -> list[dict]:
    """One row per (task, mode, flow source), sorted."""
    if not reports:
        raise ValueError("no reports given")
    groups: dict[tuple, list[dict]] = {}
    for rep in reports:
        if rep.get("version") != REPORT_VERSION:
            raise ValueError(f"report schema version {rep.get('version')!r}, expected {REPORT_VERSION}")
        groups.setdefault((rep["task"], rep["mode"], rep["flows"]), []).extend(rep["episodes"])
    rows = []
    for (task, mode, flows), eps in sorted(groups.items()):
        if not eps:
            raise ValueError(f"{task}/{mode}: report has no episodes")
        spans = [e["makespan"] for e in eps if e["makespan"] is not None]
        rows.append({
            "task": task, "mode": mode, "flows": flows, "episodes": len(eps),
            "success_rate": sum(e["success"] for e in eps) / len(eps),
            "mean_makespan": sum(spans) / len(spans) if spans else None,
            "collision_rate": sum(e["collisions"] > 0 for e in eps) / len(eps),
        })
    return rows


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "mode", "flows", "episodes", "success_rate", "mean_makespan", "collision_rate"])
    for r in rows:
        span = "" if r["mean_makespan"] is None else f"{r['mean_makespan']:.4f}"
        w.writerow([r["task"], r["mode"], r["flows"], r["episodes"], f"{r['success_rate']:.4f}", span,
                    f"{r['collision_rate']:.4f}"])
    return buf.getvalue()


def table_svg(rows: list[dict]) -> str:
    """Horizontal bar chart of success rate per row."""
    bar_w, row_h, left = 300, 26, 260
    H = row_h * len(rows) + 40
    W = left + bar_w + 80
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<text x="8" y="18" font-size="14">success rate</text>']
    for i, r in enumerate(rows):
        y = 30 + i * row_h
        w = r["success_rate"] * bar_w
        out.append(f'<text x="8" y="{y + 16}" font-size="12">{r["task"]} / {r["mode"]} / {r["flows"]}</text>')
        out.append(f'<rect x="{left}" y="{y + 4}" width="{w:.1f}" height="{row_h - 8}" fill="#4363d8"/>')
        out.append(f'<text x="{left + w + 6:.1f}" y="{y + 16}" font-size="12">{100 * r["success_rate"]:.0f}%</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
