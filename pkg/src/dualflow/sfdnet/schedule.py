"""DDPM noise schedule, forward corruption and one ancestral reverse step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule over steps ``1..steps``; ``alpha_bar(0) == 1``."""

    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        if not (0 < self.beta_start <= self.beta_end < 1):
            raise ValueError("betas must satisfy 0 < start <= end < 1")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.steps, dtype=np.float64)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        """Cumulative products indexed so that ``alpha_bars[t] == alpha_bar(t)``, t = 0..steps."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha_bar(self, t):
        return self.alpha_bars[t]

    def sigma(self, t: int) -> float:
        self._check(t)
        if t == 1:
            return 0.0
        ab = self.alpha_bars
        return float(np.sqrt(self.betas[t - 1] * (1 - ab[t - 1]) / (1 - ab[t])))

    def preconditioning(self, t, sigma_data: float) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients (skip, out) with noise estimate = skip * z_t + out * network output.

        Chosen so the network's regression target has unit variance at every
        step when the clean latents have spread ``sigma_data``.  With
        ``sigma_data == 1`` this is the velocity parameterisation.
        """
        self._check(t)
        ab = self.alpha_bars[np.asarray(t)]
        denom = 1.0 - ab + sigma_data**2 * ab
        return np.sqrt(1.0 - ab) / denom, sigma_data * np.sqrt(ab / denom)

    def _check(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.steps):
            raise ValueError(f"diffusion step out of range 1..{self.steps}")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "beta_start": self.beta_start, "beta_end": self.beta_end}


def diffuse_forward(schedule: NoiseSchedule, z0: np.ndarray, t, rng: np.random.Generator,
                    eps: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt ``z0`` to step ``t``; ``t`` may be per-sequence (leading axis)."""
    schedule._check(t)
    z0 = np.asarray(z0)
    if eps is None:
        eps = rng.standard_normal(z0.shape)
    ab = np.asarray(schedule.alpha_bar(t), dtype=np.float64)
    ab = ab.reshape(ab.shape + (1,) * (z0.ndim - ab.ndim))
    zt = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    return zt.astype(z0.dtype, copy=False), eps.astype(z0.dtype, copy=False)


def posterior_mean(schedule: NoiseSchedule, zt: np.ndarray, t: int, eps_hat: np.ndarray) -> np.ndarray:
    schedule._check(t)
    beta = schedule.beta(t)
    ab = schedule.alpha_bar(t)
    return (zt - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)


def reverse_step(schedule: NoiseSchedule, zt: np.ndarray, t: int, eps_hat: np.ndarray,
                 xi: np.ndarray) -> np.ndarray:
    return posterior_mean(schedule, zt, t, eps_hat) + schedule.sigma(t) * xi
