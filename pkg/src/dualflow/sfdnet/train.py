"""Two-stage training: flow VAE, then the latent denoiser."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .. import tensor as tn
from ..optim import AdamW
from ..scene import EpisodeRecord, ground_instruction, track_flows
from ..tensor import Tensor
from .model import (
    ModelConfig, Params, denoise, encode_instruction, init_params, pad_ids, vae_encode_t, vae_loss,
)
from .network import SFDNet
from .schedule import NoiseSchedule, diffuse_forward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowSample:
    F1: np.ndarray  # (3, T, G, G)
    F2: np.ndarray
    instruction: str


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float = 0.01
    vae_lr: float | None = None  # defaults to lr
    vae_epochs: int = 60
    vae_batch: int = 256
    beta_kl: float = 1e-3
    epochs: int = 300
    batch: int = 8
    val_repeats: int = 4
    diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    siamese: bool = True


def samples_from_episodes(episodes: Iterable[EpisodeRecord], grid: int = 8) -> list[FlowSample]:
    out = []
    for ep in episodes:
        F1, F2 = track_flows(ep, *ground_instruction(ep), G=grid)
        out.append(FlowSample(F1, F2, ep.instruction))
    return out


def _check_dataset(data: list[FlowSample], grid: int) -> int:
    if not data:
        raise ValueError("empty dataset")
    T = data[0].F1.shape[1]
    for s in data:
        for F in (s.F1, s.F2):
            if F.shape != (3, T, grid, grid):
                raise ValueError(f"flow shape {F.shape} inconsistent with (3, {T}, {grid}, {grid})")
    return T


def _frames(data: list[FlowSample]) -> np.ndarray:
    """All (3, G, G) frames of both streams, stacked (N, 3, G, G)."""
    return np.concatenate([np.moveaxis(F, 1, 0) for s in data for F in (s.F1, s.F2)]).astype(np.float32)


def _finite(loss: Tensor, stage: str, step: int) -> float:
    v = float(loss.data)
    if not math.isfinite(v):
        raise TrainingDiverged(f"non-finite {stage} loss at step {step}")
    return v


def _stream_latents(p: Params, data: list[FlowSample], shift: np.ndarray, scale: float) -> np.ndarray:
    """Centred, scaled posterior means, (n, 2, T, d)."""
    out = []
    for s in data:
        pair = []
        for F in (s.F1, s.F2):
            mu, _ = vae_encode_t(p, Tensor(np.moveaxis(F, 1, 0).astype(np.float32)))
            pair.append((mu.data - shift) * scale)
        out.append(pair)
    return np.array(out, dtype=np.float32)


class _Writer:
    def __init__(self, path: str | Path | None):
        self.fh = open(path, "w") if path else None
        self.rows: list[tuple[int, str, float, float]] = []
        if self.fh:
            self.fh.write("step,stage,train_loss,val_loss\n")

    def row(self, step: int, stage: str, train: float, val: float) -> None:
        self.rows.append((step, stage, train, val))
        if self.fh:
            self.fh.write(f"{step},{stage},{train:.8g},{val:.8g}\n")

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def train(data: list[FlowSample], config: TrainConfig = TrainConfig(), val: list[FlowSample] | None = None,
          model_cfg: ModelConfig = ModelConfig(), log_path: str | Path | None = None) -> tuple[SFDNet, list]:
    """Train both stages; returns the network and the loss log rows."""
    grid = model_cfg.grid
    T = _check_dataset(data, grid)
    if val:
        if _check_dataset(val, grid) != T:
            raise ValueError("validation flows have a different length")
    else:
        val = data[-max(1, len(data) // 8):]
    rng = np.random.default_rng(config.seed)
    n_branch = 1 if config.siamese else 2
    branches = [init_params(model_cfg, config.seed + 1000 * b) for b in range(n_branch)]
    writer = _Writer(log_path)
    try:
        for b, p in enumerate(branches):
            streams = (0, 1) if config.siamese else (b,)
            _train_vae(p, data, val, streams, config, grid, rng, writer, f"vae{'' if config.siamese else b + 1}")
        shift, scale = _latent_stats(branches, data)
        schedule = NoiseSchedule(config.diffusion_steps, config.beta_start, config.beta_end)
        _train_denoiser(branches, data, val, shift, scale, schedule, config, model_cfg, rng, writer)
    except tn.NonFiniteError as exc:
        last = writer.rows[-1] if writer.rows else None
        raise TrainingDiverged(f"training aborted: {exc} (last logged row: {last})") from exc
    finally:
        writer.close()
    net = SFDNet(model_cfg, schedule, branches, T, scale, {"trained": True, "seed": config.seed}, shift)
    return net, writer.rows


def _select_frames(data: list[FlowSample], streams: tuple[int, ...]) -> np.ndarray:
    parts = []
    for s in data:
        for i, F in enumerate((s.F1, s.F2)):
            if i in streams:
                parts.append(np.moveaxis(F, 1, 0))
    return np.concatenate(parts).astype(np.float32)


def _train_vae(p: Params, data, val, streams, config: TrainConfig, grid: int, rng, writer: _Writer, stage: str) -> None:
    frames = _select_frames(data, streams)
    vframes = _select_frames(val, streams)
    vxi = rng.standard_normal((len(vframes), p["vae.mu.b"].shape[0])).astype(np.float32)
    params = p.trainable("vae.")
    opt = AdamW(params, lr=config.vae_lr or config.lr, weight_decay=config.weight_decay)
    step = 0
    for _ in range(config.vae_epochs):
        order = rng.permutation(len(frames))
        for k in range(0, len(order), config.vae_batch):
            idx = order[k:k + config.vae_batch]
            xi = rng.standard_normal((len(idx), vxi.shape[1])).astype(np.float32)
            step += 1
            loss, _ = vae_loss(p, Tensor(frames[idx]), xi, config.beta_kl, grid)
            train_v = _finite(loss, stage, step)
            opt.step(tn.backward(loss, params))
            vloss, _ = vae_loss(p, Tensor(vframes), vxi, config.beta_kl, grid)
            writer.row(step, stage, train_v, _finite(vloss, stage, step))


def _latent_stats(branches: list[Params], data) -> tuple[np.ndarray, float]:
    """Per-dimension mean and a single scale that bring posterior means to zero mean, unit spread.

    The VAE tends to park most of the signal in a few dimensions with large
    offsets; centring them keeps the denoiser from having to learn those offsets.
    """
    frames = Tensor(_frames(data))
    mus = np.concatenate([vae_encode_t(p, frames)[0].data for p in branches]).astype(np.float64)
    shift = mus.mean(axis=0)
    std = float((mus - shift).std())
    return shift.astype(np.float32), 1.0 / max(std, 1e-6)


def _batch_inputs(data: list[FlowSample], idx) -> tuple[np.ndarray, np.ndarray]:
    return pad_ids([encode_instruction(data[i].instruction) for i in idx])


def stage2_loss(branches: list[Params], cfg: ModelConfig, z0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                schedule: NoiseSchedule, ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Denoising loss for a batch; z0, eps (B, 2, T, d), t (B, 2)."""
    zt, _ = diffuse_forward(schedule, z0, t, None, eps=eps)
    B = z0.shape[0]
    ctx = z0[:, :, 0, :]
    if len(branches) == 1:
        # both streams in one call; rows never interact, so this equals two separate calls
        flat = lambda a: np.concatenate([a[:, 0], a[:, 1]])
        pred = denoise(branches[0], cfg, Tensor(flat(zt)), flat(t), np.concatenate([ids, ids]),
                       np.concatenate([mask, mask]), Tensor(flat(ctx)), schedule)
        preds = [tn.slice_(pred, slice(0, B)), tn.slice_(pred, slice(B, 2 * B))]
    else:
        preds = [denoise(branches[i], cfg, Tensor(zt[:, i]), t[:, i], ids, mask, Tensor(ctx[:, i]), schedule)
                 for i in range(2)]
    total = None
    for i, pr in enumerate(preds):
        term = tn.mean(tn.square(pr - Tensor(eps[:, i], dtype=pr.dtype)))
        total = term if total is None else total + term
    return total


def _train_denoiser(branches, data, val, shift, scale, schedule: NoiseSchedule, config: TrainConfig, cfg: ModelConfig,
                    rng, writer: _Writer) -> None:
    z_train = _stream_latents_multi(branches, data, shift, scale)
    z_val = _stream_latents_multi(branches, val, shift, scale)
    reps = config.val_repeats
    vz = np.repeat(z_val, reps, axis=0)
    vt = rng.integers(1, schedule.steps + 1, size=vz.shape[:2])
    veps = rng.standard_normal(vz.shape).astype(np.float32)
    vids, vmask = _batch_inputs(val, np.repeat(np.arange(len(val)), reps))
    params = [t for p in branches for t in p.trainable() if not _is_vae(p, t)]
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(data))
        for k in range(0, len(order), config.batch):
            idx = order[k:k + config.batch]
            z0 = z_train[idx]
            t = rng.integers(1, schedule.steps + 1, size=z0.shape[:2])
            eps = rng.standard_normal(z0.shape).astype(np.float32)
            ids, mask = _batch_inputs(data, idx)
            step += 1
            loss = stage2_loss(branches, cfg, z0, t, eps, schedule, ids, mask)
            train_v = _finite(loss, "diffusion", step)
            opt.step(tn.backward(loss, params))
            vloss = stage2_loss(branches, cfg, vz, vt, veps, schedule, vids, vmask)
            writer.row(step, "diffusion", train_v, _finite(vloss, "diffusion", step))
        log.debug("diffusion step %d loss %.4f", step, train_v)


def _is_vae(p: Params, t: Tensor) -> bool:
    return any(t is p[k] for k in p if k.startswith("vae."))


def _stream_latents_multi(branches: list[Params], data, shift: np.ndarray, scale: float) -> np.ndarray:
    if len(branches) == 1:
        return _stream_latents(branches[0], data, shift, scale)
    a = _stream_latents(branches[0], data, shift, scale)
    b = _stream_latents(branches[1], data, shift, scale)
    a[:, 1] = b[:, 1]
    return a
