"""Low-rank adapters on frozen linear maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor


@dataclass
class LoraAdapter:
    """Effective weight ``W + (alpha / r) * B @ A`` with ``W`` frozen.

    ``W`` is (m, n), ``A`` is (r, n), ``B`` is (m, r).  ``B`` starts at zero
    so a fresh adapter reproduces the base layer exactly.
    """

    W: Tensor
    A: Tensor
    B: Tensor
    rank: int
    alpha: float

    @classmethod
    def create(cls, W: np.ndarray, rank: int = 4, alpha: float | None = None,
               rng: np.random.Generator | None = None, dtype=tn.DTYPE) -> "LoraAdapter":
        if rank <= 0:
            raise ValueError("LoRA rank must be positive")
        m, n = W.shape
        rng = rng if rng is not None else np.random.default_rng(0)
        A = rng.normal(0.0, 1.0 / np.sqrt(n), size=(rank, n))
        return cls(
            W=Tensor(np.asarray(W, dtype=dtype), requires_grad=False),
            A=Tensor(A.astype(dtype), requires_grad=True),
            B=Tensor(np.zeros((m, rank), dtype=dtype), requires_grad=True),
            rank=rank,
            alpha=float(rank if alpha is None else alpha),
        )

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def effective_weight(self) -> np.ndarray:
        return self.W.data + self.scale * (self.B.data @ self.A.data)

    def trainable(self) -> list[Tensor]:
        return [self.A, self.B]


def lora_forward(adapter: LoraAdapter, x: Tensor) -> Tensor:
    """Apply the adapted map to the rows of ``x`` (shape ``(..., n)``)."""
    if adapter.rank <= 0:
        raise ValueError("LoRA rank must be positive")
    n = adapter.W.shape[1]
    if x.shape[-1] != n:
        raise ValueError(f"input width {x.shape[-1]} does not match adapter input {n}")
    base = tn.matmul(x, tn.transpose(adapter.W))
    low = tn.matmul(tn.matmul(x, tn.transpose(adapter.A)), tn.transpose(adapter.B))
    return base + low * adapter.scale
