"""Trained network bundle and its SFDC checkpoint mapping."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import checkpoint
from .model import VOCAB, ModelConfig, Params
from .schedule import NoiseSchedule

FORMAT = "sfdnet-1"


@dataclass
class SFDNet:
    """Model config, noise schedule and one parameter set per branch.

    The shared-weight network has a single branch used by both streams;
    the unshared ablation keeps one branch per stream.
    """

    cfg: ModelConfig
    schedule: NoiseSchedule
    branches: list[Params]
    frames: int
    latent_scale: float = 1.0
    extra: dict = field(default_factory=dict)
    latent_shift: np.ndarray | None = None

    @property
    def siamese(self) -> bool:
        return len(self.branches) == 1

    def branch(self, stream: int) -> Params:
        """Parameters used by ``stream`` (0 or 1)."""
        return self.branches[min(stream, len(self.branches) - 1)]

    def _shift(self) -> np.ndarray:
        return np.zeros(self.cfg.latent, np.float32) if self.latent_shift is None else self.latent_shift

    def to_diffusion(self, mu: np.ndarray) -> np.ndarray:
        """VAE posterior means to the normalised space the denoiser works in."""
        return (mu - self._shift()) * self.latent_scale

    def from_diffusion(self, z: np.ndarray) -> np.ndarray:
        return z / self.latent_scale + self._shift()

    def to_bytes(self) -> bytes:
        tensors = {}
        frozen = []
        for b, p in enumerate(self.branches):
            for k, arr in p.to_arrays().items():
                tensors[f"b{b}.{k}"] = arr
            frozen.extend(f"b{b}.{k}" for k in sorted(p.frozen()))
        meta = {
            "format": FORMAT,
            "config": asdict(self.cfg),
            "schedule": self.schedule.to_dict(),
            "branches": len(self.branches),
            "frames": self.frames,
            "latent_scale": self.latent_scale,
            "latent_shift": [float(v) for v in self._shift()],
            "vocab": list(VOCAB),
            "frozen": frozen,
            "extra": self.extra,
        }
        return checkpoint.dumps(tensors, meta)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SFDNet":
        tensors, meta = checkpoint.loads(buf)
        if meta.get("format") != FORMAT:
            raise checkpoint.CheckpointError("checkpoint does not hold a trained flow network")
        if tuple(meta["vocab"]) != VOCAB:
            raise checkpoint.CheckpointError("checkpoint vocabulary does not match this build")
        frozen = set(meta["frozen"])
        branches = []
        for b in range(meta["branches"]):
            pre = f"b{b}."
            arrays = {k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)}
            branches.append(Params.from_arrays(arrays, {k[len(pre):] for k in frozen if k.startswith(pre)}))
        net = cls(ModelConfig(**meta["config"]), NoiseSchedule(**meta["schedule"]), branches, meta["frames"],
                  meta["latent_scale"], meta.get("extra", {}),
                  np.asarray(meta.get("latent_shift", np.zeros(meta["config"]["latent"])), np.float32))
        net.validate()
        return net

    def validate(self) -> None:
        for p in self.branches:
            if "den.out.W" not in p or "vae.enc1.W" not in p:
                raise checkpoint.CheckpointError("checkpoint is missing network tensors")
            if p["vae.enc1.W"].shape[1] != self.cfg.frame_size:
                raise checkpoint.CheckpointError("checkpoint grid size does not match its config")
            if not all(np.isfinite(t.data).all() for t in p.values()):
                raise checkpoint.CheckpointError("checkpoint holds non-finite weights")
        if not self.extra.get("trained", False):
            raise checkpoint.CheckpointError("checkpoint is untrained")

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "SFDNet":
        return cls.from_bytes(Path(path).read_bytes())
