"""Two-stream ancestral sampling of object flows."""

from __future__ import annotations

import numpy as np

from ..scene import BBox, query_grid
from ..tensor import Tensor
from .model import Params, denoise, encode_instruction, pad_ids, vae_decode_t, vae_encode_t
from .network import SFDNet
from .schedule import reverse_step


def initial_frame(bbox: BBox, grid: int, image_size: tuple[int, int]) -> np.ndarray:
    """Normalised frame-0 query grid of a box, visibility 1: (3, G, G)."""
    q = query_grid(bbox, grid)
    W, H = image_size
    return np.stack([q[..., 0] / W, q[..., 1] / H, np.ones((grid, grid))]).astype(np.float32)


def stream_context(net: SFDNet, p: Params, frame0: np.ndarray) -> np.ndarray:
    mu, _ = vae_encode_t(p, Tensor(frame0[None]))
    return net.to_diffusion(mu.data[0])


def sample_stream(net: SFDNet, stream: int, instruction: str, frame0: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    """Sample one stream's flow (3, T, G, G) from noise."""
    p = net.branch(stream)
    cfg = net.cfg
    ctx = stream_context(net, p, frame0)
    ids, mask = pad_ids([encode_instruction(instruction)])
    z = rng.standard_normal((net.frames, cfg.latent))
    for t in range(net.schedule.steps, 0, -1):
        eps = denoise(p, cfg, Tensor(z[None].astype(np.float32)), np.array([t]), ids, mask,
                      Tensor(ctx[None]), net.schedule).data[0].astype(np.float64)
        xi = rng.standard_normal(z.shape) if t > 1 else np.zeros_like(z)
        z = reverse_step(net.schedule, z, t, eps, xi)
    frames = vae_decode_t(p, Tensor(net.from_diffusion(z).astype(np.float32)), cfg.grid).data
    return np.moveaxis(frames, 0, 1).astype(np.float64)


def sample_flows(net: SFDNet, image_size: tuple[int, int], instruction: str, O_1: BBox, O_2: BBox,
                 rng: np.random.Generator | None = None,
                 seeds: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Predicted flows for the two boxed objects.

    Each stream draws its noise from its own generator.  ``seeds`` fixes
    them directly; otherwise two seeds are drawn from ``rng``.
    """
    net.validate()
    if seeds is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        seeds = tuple(int(s) for s in rng.integers(0, 2**63 - 1, size=2))
    out = []
    for stream, (box, seed) in enumerate(zip((O_1, O_2), seeds)):
        frame0 = initial_frame(box, net.cfg.grid, image_size)
        out.append(sample_stream(net, stream, instruction, frame0, np.random.default_rng(seed)))
    return out[0], out[1]
