"""Variance-preserving forward diffusion over stacked latent blocks.

The forward process is dz = -1/2 beta(t) z dt + sqrt(beta(t)) dw with a
linear schedule beta(t) = beta_min + t (beta_max - beta_min) on t in [0, 1].
Its perturbation kernel is Gaussian with closed-form coefficients:

    alpha(t) = exp(-1/2 integral_0^t beta)   where the integral is
               beta_min t + 1/2 (beta_max - beta_min) t^2
    sigma(t) = sqrt(1 - alpha(t)^2)

so z(t) = alpha(t) z(0) + sigma(t) eps and the score of the kernel is
-eps / sigma(t). Unit-variance data keeps E||z(t)||^2 constant in t.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError

T_MIN = 1e-5  # lower truncation of diffusion time; sigma(0) = 0 makes the target unbounded


@dataclass(frozen=True)
class VPSDESchedule:
    beta_min: float = 0.1
    beta_max: float = 5.0
    n_steps: int = 100

    def __post_init__(self) -> None:
        if not (self.beta_min > 0.0):
            raise ConfigError(f"beta_min must be positive, got {self.beta_min}")
        if self.beta_max < self.beta_min:
            raise ConfigError(f"beta_max {self.beta_max} < beta_min {self.beta_min}")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")

    def beta(self, t):
        return self.beta_min + np.asarray(t, dtype=np.float64) * (self.beta_max - self.beta_min)

    def beta_integral(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t

    def grid_times(self) -> np.ndarray:
        """The sampling grid t_i = i / N for i = 0..N."""
        return np.arange(self.n_steps + 1, dtype=np.float64) / self.n_steps


def marginal_params(schedule: VPSDESchedule, t):
    """(alpha(t), sigma(t)) of the perturbation kernel; t scalar or array in [0, 1]."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ConfigError(f"diffusion time outside [0, 1]: {t}")
    alpha = np.exp(-0.5 * schedule.beta_integral(t_arr))
    sigma = np.sqrt(np.maximum(1.0 - alpha * alpha, 0.0))
    if t_arr.ndim == 0:
        return float(alpha), float(sigma)
    return alpha, sigma


def perturb(schedule: VPSDESchedule, z0: np.ndarray, t, rng: np.random.Generator):
    """Diffuse clean latents to time t; returns (z_t, kernel score at z_t).

    `z0` is (D,) or (B, D); `t` a scalar or (B,). t = 0 is rejected: the
    kernel is degenerate there (sigma = 0) and the score target undefined.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr <= 0.0) or np.any(t_arr > 1.0):
        raise ConfigError(f"perturbation time must lie in (0, 1], got {t}")
    alpha = np.exp(-0.5 * schedule.beta_integral(t_arr))
    sigma = np.sqrt(1.0 - alpha * alpha)
    if z0.ndim == 2 and t_arr.ndim == 1:
        alpha = alpha[:, None]
        sigma = sigma[:, None]
    eps = rng.standard_normal(z0.shape)
    z_t = alpha * z0 + sigma * eps
    target_score = -eps / sigma
    return z_t, target_score


# ------------------------------------------------------------- latent blocks


@dataclass(frozen=True)
class BlockLayout:
    """Slice boundaries of the per-modality latents inside one stacked vector."""

    dims: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.dims or any(d < 1 for d in self.dims):
            raise ConfigError(f"invalid per-modality dimensions: {self.dims}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def n_modalities(self) -> int:
        return len(self.dims)

    @property
    def total_dim(self) -> int:
        return sum(self.dims)

    @property
    def offsets(self) -> tuple[int, ...]:
        out, acc = [], 0
        for d in self.dims:
            out.append(acc)
            acc += d
        return tuple(out)

    def slice_of(self, k: int) -> slice:
        off = self.offsets[k]
        return slice(off, off + self.dims[k])

    def coordinate_mask(self, modality_flags: Sequence[bool]) -> np.ndarray:
        """Expand per-modality booleans to a per-coordinate boolean mask."""
        flags = list(modality_flags)
        if len(flags) != self.n_modalities:
            raise DimensionError(
                f"{len(flags)} flags for {self.n_modalities} modalities"
            )
        mask = np.zeros(self.total_dim, dtype=bool)
        for k, flag in enumerate(flags):
            if flag:
                mask[self.slice_of(k)] = True
        return mask

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        return [values[..., self.slice_of(k)] for k in range(self.n_modalities)]

    def stack(self, parts: Sequence[np.ndarray]) -> np.ndarray:
        if len(parts) != self.n_modalities:
            raise DimensionError(f"{len(parts)} parts for {self.n_modalities} modalities")
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=-1)


@dataclass
class LatentBlock:
    """One stacked latent vector with its modality layout and diffusion time."""

    values: np.ndarray
    layout: BlockLayout
    t: float = 0.0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.total_dim,):
            raise DimensionError(
                f"values shape {self.values.shape} does not tile layout dims {self.layout.dims}"
            )
        if not (0.0 <= self.t <= 1.0):
            raise ConfigError(f"diffusion time outside [0, 1]: {self.t}")

    def modality(self, k: int) -> np.ndarray:
        return self.values[self.layout.slice_of(k)]
