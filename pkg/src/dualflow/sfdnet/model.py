"""Shared-weight flow VAE, instruction embedding and temporal denoiser.

One :class:`Params` set serves both object streams.  Nothing in the
forward passes mixes the streams, so running stream 1 and stream 2 through
the same functions with swapped inputs swaps the outputs bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import tensor as tn
from ..lora import LoraAdapter, lora_forward
from ..scene import COLORS, LABELS
from ..tensor import Tensor
from .schedule import NoiseSchedule

LOGVAR_MIN, LOGVAR_MAX = -20.0, 20.0
MASK_LOGIT = -1e9

PAD, UNK = "<pad>", "<unk>"
_TEMPLATE_WORDS = (
    "pack the and into box remove put pot close it bring over pour can cup open drawer place inside "
    "lid a an in on of to from with then"
).split()
VOCAB = (PAD, UNK) + tuple(sorted(set(_TEMPLATE_WORDS) | set(COLORS) | set(LABELS)))


@dataclass(frozen=True)
class ModelConfig:
    grid: int = 8
    latent: int = 16
    vae_hidden: int = 64
    width: int = 16
    text_width: int = 16
    heads: int = 2
    blocks: int = 2
    mlp_hidden: int = 32
    lora_rank: int = 4
    lora_alpha: float = 4.0
    sigma_data: float = 0.2

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("heads must divide the model width")
        if not self.sigma_data > 0:
            raise ValueError("sigma_data must be positive")

    @property
    def frame_size(self) -> int:
        return 3 * self.grid * self.grid


# ---------------------------------------------------------------- text


def tokenize(text: str) -> list[str]:
    return [w.strip(",.;:!?") for w in text.lower().split() if w.strip(",.;:!?")]


def encode_instruction(text: str, vocab: tuple[str, ...] = VOCAB) -> np.ndarray:
    index = {w: i for i, w in enumerate(vocab)}
    unk = index[UNK]
    return np.array([index.get(w, unk) for w in tokenize(text)], dtype=np.int64)


def pad_ids(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token id rows; returns ids and a boolean validity mask."""
    n = max(1, max(len(s) for s in seqs))
    ids = np.zeros((len(seqs), n), dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


# ---------------------------------------------------------------- parameters


class Params(dict):
    """Named tensors.  Frozen LoRA bases have ``requires_grad=False``."""

    def trainable(self, prefix: str = "") -> list[Tensor]:
        return [p for k, p in sorted(self.items()) if p.requires_grad and k.startswith(prefix)]

    def names(self, prefix: str = "") -> list[str]:
        return [k for k, p in sorted(self.items()) if p.requires_grad and k.startswith(prefix)]

    def astype(self, dtype) -> "Params":
        return Params({k: Tensor(v.data.astype(dtype), v.requires_grad, dtype=dtype) for k, v in self.items()})

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: self[k].data for k in sorted(self)}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], frozen: set[str]) -> "Params":
        return cls({k: Tensor(v, k not in frozen, dtype=np.float32) for k, v in arrays.items()})

    def frozen(self) -> set[str]:
        return {k for k, p in self.items() if not p.requires_grad}


def _dense(p: Params, name: str, n_out: int, n_in: int, rng, scale: float = 1.0) -> None:
    p[f"{name}.W"] = Tensor(rng.normal(0, scale / math.sqrt(n_in), (n_out, n_in)).astype(np.float32), True)
    p[f"{name}.b"] = Tensor(np.zeros(n_out, np.float32), True)


def _lora(p: Params, name: str, n_out: int, n_in: int, cfg: ModelConfig, rng) -> None:
    ad = LoraAdapter.create(rng.normal(0, 1 / math.sqrt(n_in), (n_out, n_in)), cfg.lora_rank, cfg.lora_alpha, rng)
    p[f"{name}.W"], p[f"{name}.A"], p[f"{name}.B"] = ad.W, ad.A, ad.B


def linear(p: Params, name: str, x: Tensor) -> Tensor:
    return tn.matmul(x, tn.transpose(p[f"{name}.W"])) + p[f"{name}.b"]


def lora_linear(p: Params, name: str, x: Tensor, cfg: ModelConfig) -> Tensor:
    ad = LoraAdapter(p[f"{name}.W"], p[f"{name}.A"], p[f"{name}.B"], cfg.lora_rank, cfg.lora_alpha)
    return lora_forward(ad, x)


def init_params(cfg: ModelConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    p = Params()
    # VAE
    _dense(p, "vae.enc1", cfg.vae_hidden, cfg.frame_size, rng)
    _dense(p, "vae.mu", cfg.latent, cfg.vae_hidden, rng)
    _dense(p, "vae.logvar", cfg.latent, cfg.vae_hidden, rng, scale=0.1)
    _dense(p, "vae.dec1", cfg.vae_hidden, cfg.latent, rng)
    _dense(p, "vae.dec2", cfg.frame_size, cfg.vae_hidden, rng)
    # instruction encoder
    p["text.emb"] = Tensor(rng.normal(0, 1.0, (len(VOCAB), cfg.text_width)).astype(np.float32), True)
    # denoiser
    d = cfg.width
    _dense(p, "den.in", d, cfg.latent, rng)
    _dense(p, "den.ctx", cfg.text_width, cfg.latent, rng)
    _dense(p, "den.step1", d, d, rng)
    _dense(p, "den.step2", d, d, rng)
    for i in range(cfg.blocks):
        for kind, kv_in in (("sa", d), ("ca", cfg.text_width)):
            _lora(p, f"den.b{i}.{kind}.q", d, d, cfg, rng)
            _lora(p, f"den.b{i}.{kind}.k", d, kv_in, cfg, rng)
            _lora(p, f"den.b{i}.{kind}.v", d, kv_in, cfg, rng)
            _lora(p, f"den.b{i}.{kind}.o", d, d, cfg, rng)
        _dense(p, f"den.b{i}.mlp1", cfg.mlp_hidden, d, rng)
        _dense(p, f"den.b{i}.mlp2", d, cfg.mlp_hidden, rng)
    _dense(p, "den.out", cfg.latent, d, rng, scale=0.1)
    return p


# ---------------------------------------------------------------- VAE


def _require_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise tn.NonFiniteError(f"non-finite {what}")


def vae_encode_t(p: Params, frames: Tensor) -> tuple[Tensor, Tensor]:
    """Frames (N, 3, G, G) -> mu, clamped logvar (N, d)."""
    x = tn.reshape(frames, (frames.shape[0], -1))
    h = tn.gelu(linear(p, "vae.enc1", x))
    return linear(p, "vae.mu", h), tn.clip(linear(p, "vae.logvar", h), LOGVAR_MIN, LOGVAR_MAX)


def vae_decode_t(p: Params, z: Tensor, grid: int) -> Tensor:
    h = tn.gelu(linear(p, "vae.dec1", z))
    out = tn.sigmoid(linear(p, "vae.dec2", h))
    return tn.reshape(out, (z.shape[0], 3, grid, grid))


def vae_encode(p: Params, frame: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encode one (3, G, G) frame or a stack of them; ``z = mu + exp(logvar / 2) * xi``."""
    frame = np.asarray(frame, dtype=np.float32)
    _require_finite(frame, "flow frame")
    single = frame.ndim == 3
    x = frame[None] if single else frame
    mu, lv = vae_encode_t(p, Tensor(x))
    xi = rng.standard_normal(mu.shape).astype(np.float32)
    z = mu.data + np.exp(lv.data / 2) * xi
    if single:
        return mu.data[0], lv.data[0], z[0]
    return mu.data, lv.data, z


def vae_decode(p: Params, z: np.ndarray, grid: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float32)
    _require_finite(z, "latent")
    single = z.ndim == 1
    out = vae_decode_t(p, Tensor(z[None] if single else z), grid).data
    return out[0] if single else out


def vae_loss(p: Params, frames: Tensor, xi: np.ndarray, beta_kl: float, grid: int) -> tuple[Tensor, Tensor]:
    """Reconstruction MSE (per element) plus ``beta_kl`` times the mean KL; returns (loss, mse)."""
    mu, lv = vae_encode_t(p, frames)
    z = mu + tn.exp(lv * 0.5) * Tensor(xi, dtype=mu.dtype)
    rec = vae_decode_t(p, z, grid)
    mse = tn.mean(tn.square(rec - frames))
    kl = tn.mean(tn.sum_(tn.exp(lv) + tn.square(mu) - lv - 1.0, axis=-1)) * 0.5
    return mse + kl * beta_kl, mse


# ---------------------------------------------------------------- attention


def sinusoid(pos: np.ndarray, dim: int) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = pos[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, n, d = x.shape
    return tn.transpose(tn.reshape(x, (B, n, heads, d // heads)), (0, 2, 1, 3))


def attention_weights(q: Tensor, k: Tensor, mask: np.ndarray | None) -> Tensor:
    """Row-softmax of scaled dot products; q (B, h, a, dh), k (B, h, b, dh)."""
    logits = tn.matmul(q, tn.transpose(k)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        bias = np.where(mask, 0.0, MASK_LOGIT).astype(logits.dtype)[:, None, None, :]
        logits = logits + bias
    return tn.softmax(logits, axis=-1)


def mhca(p: Params, name: str, X: Tensor, Y: Tensor, cfg: ModelConfig,
         mask: np.ndarray | None = None) -> Tensor:
    """Multi-head attention of queries X (B, a, d) over context Y (B, b, d_ctx)."""
    if X.ndim != 3 or Y.ndim != 3 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"mhca expects (B, a, d) and (B, b, d_ctx), got {X.shape} and {Y.shape}")
    if mask is not None and mask.shape != (Y.shape[0], Y.shape[1]):
        raise ValueError("context mask shape mismatch")
    h = cfg.heads
    q = _split_heads(lora_linear(p, f"{name}.q", X, cfg), h)
    k = _split_heads(lora_linear(p, f"{name}.k", Y, cfg), h)
    v = _split_heads(lora_linear(p, f"{name}.v", Y, cfg), h)
    att = attention_weights(q, k, mask)
    out = tn.matmul(att, v)  # (B, h, a, dh)
    B, _, a, _ = out.shape
    out = tn.reshape(tn.transpose(out, (0, 2, 1, 3)), (B, a, cfg.width))
    return lora_linear(p, f"{name}.o", out, cfg)


# ---------------------------------------------------------------- denoiser


def context_tokens(p: Params, text_ids: np.ndarray, text_mask: np.ndarray, ctx_latent: Tensor) -> tuple[Tensor, np.ndarray]:
    """Instruction tokens followed by the stream's initial-frame token."""
    if ctx_latent is None:
        raise ValueError("missing per-stream context token")
    emb = tn.slice_(p["text.emb"], text_ids)  # (B, n, dt)
    tok = tn.reshape(linear(p, "den.ctx", ctx_latent), (ctx_latent.shape[0], 1, -1))
    Y = tn.concat([emb, tok], axis=1)
    mask = np.concatenate([text_mask, np.ones((text_mask.shape[0], 1), bool)], axis=1)
    return Y, mask


def denoise(p: Params, cfg: ModelConfig, zt: Tensor, t: np.ndarray, text_ids: np.ndarray,
            text_mask: np.ndarray, ctx_latent: Tensor, schedule: NoiseSchedule = NoiseSchedule()) -> Tensor:
    """Predict the noise in ``zt`` (B, T, d) for a batch of single-stream sequences.

    The transformer's output is mixed with ``zt`` itself.  A plain noise target
    needs a gain on ``zt`` that grows steeply as noise shrinks, which a narrow
    layer-normed network fits poorly; the mix keeps its target at unit scale.
    """
    t = np.asarray(t).reshape(zt.shape[0])
    skip, out = schedule.preconditioning(t, cfg.sigma_data)
    skip, out = (Tensor(c.reshape(-1, 1, 1), dtype=zt.dtype) for c in (skip, out))
    raw = _transformer(p, cfg, zt, t, text_ids, text_mask, ctx_latent)
    return skip * Tensor(zt.data, dtype=zt.dtype) + raw * out


def _transformer(p: Params, cfg: ModelConfig, zt: Tensor, t: np.ndarray, text_ids: np.ndarray,
                 text_mask: np.ndarray, ctx_latent: Tensor) -> Tensor:
    B, T, _ = zt.shape
    t = np.asarray(t).reshape(B)
    dtype = zt.dtype
    Y, mask = context_tokens(p, text_ids, text_mask, ctx_latent)
    step = Tensor(sinusoid(t, cfg.width).astype(dtype))
    step = linear(p, "den.step2", tn.gelu(linear(p, "den.step1", step)))
    pos = Tensor(sinusoid(np.arange(T), cfg.width).astype(dtype))
    h = linear(p, "den.in", zt) + pos + tn.reshape(step, (B, 1, cfg.width))
    for i in range(cfg.blocks):
        x = tn.layernorm(h)
        h = h + mhca(p, f"den.b{i}.sa", x, x, cfg)
        h = h + mhca(p, f"den.b{i}.ca", tn.layernorm(h), Y, cfg, mask)
        h = h + linear(p, f"den.b{i}.mlp2", tn.gelu(linear(p, f"den.b{i}.mlp1", tn.layernorm(h))))
    return linear(p, "den.out", tn.layernorm(h))


def diffusion_loss(eps: list[Tensor], eps_hat: list[Tensor]) -> Tensor:
    """Per-element mean squared error, summed over streams."""
    if len(eps) != len(eps_hat):
        raise ValueError("stream count mismatch")
    total = None
    for e, eh in zip(eps, eps_hat):
        e = e if isinstance(e, Tensor) else Tensor(np.asarray(e, dtype=eh.dtype))
        if e.shape != eh.shape:
            raise ValueError(f"shape mismatch {e.shape} vs {eh.shape}")
        term = tn.mean(tn.square(eh - e))
        total = term if total is None else total + term
    return total


def predict_noise(p: Params, cfg: ModelConfig, zt: tuple[np.ndarray, np.ndarray], t, instruction: str,
                  context: tuple[np.ndarray | None, np.ndarray | None],
                  schedule: NoiseSchedule = NoiseSchedule()) -> tuple[np.ndarray, np.ndarray]:
    """Noise estimates for both streams, each run independently through the shared denoiser."""
    z1, z2 = (np.asarray(z) for z in zt)
    if z1.shape != z2.shape:
        raise ValueError("streams must share sequence length and latent width")
    if context[0] is None or context[1] is None:
        raise ValueError("missing per-stream context token")
    ids, mask = pad_ids([encode_instruction(instruction)])
    out = []
    for z, c in zip((z1, z2), context):
        zb = z[None] if z.ndim == 2 else z
        cb = np.asarray(c).reshape(zb.shape[0], -1)
        B = zb.shape[0]
        tb = np.broadcast_to(np.asarray(t), (B,))
        e = denoise(p, cfg, Tensor(zb, dtype=zb.dtype), tb, np.repeat(ids, B, 0), np.repeat(mask, B, 0),
                    Tensor(cb, dtype=zb.dtype), schedule).data
        out.append(e[0] if z.ndim == 2 else e)
    return out[0], out[1]


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)

