"""Reverse-time Predictor-Corrector sampling from the latent score model.

Generation runs the reverse SDE on the time grid t_i = i/N from t = 1 down
to t = 0: one Euler-Maruyama predictor step per grid interval (the step into
t = 0 omits its noise term), followed by L Langevin corrector passes at the
new time. For conditional generation the observed modalities' coordinates
are overwritten after every update with the clean observed latents diffused
to the current grid time (set `hold_clean` to pin them undiffused instead);
at t = 0 they equal the given latents exactly.

Energy guidance subtracts gamma * dE/dz_u from one randomly chosen
unobserved modality's score slice per grid step, with one randomly chosen
observed modality as the energy's first argument. Contrastive guidance needs
no score edit: the conditioning embedding is an extra score-network input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .guidance import EnergyNetwork
from .rng import child_rng
from .score import ScoreNetwork
from .sde import BlockLayout, LatentBlock, VPSDESchedule

GUIDANCE_MODES = ("none", "energy", "contrastive")


@dataclass(frozen=True)
class ModalityMask:
    """Per-modality observation flags: True = observed, False = to sample."""

    observed: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "observed", tuple(bool(b) for b in self.observed))

    @property
    def n_modalities(self) -> int:
        return len(self.observed)

    @property
    def observed_idx(self) -> tuple:
        return tuple(k for k, o in enumerate(self.observed) if o)

    @property
    def unobserved_idx(self) -> tuple:
        return tuple(k for k, o in enumerate(self.observed) if not o)

    @property
    def any_observed(self) -> bool:
        return any(self.observed)

    @property
    def all_observed(self) -> bool:
        return all(self.observed)


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: Optional[int] = None     # default: the schedule's discretization
    corrector_steps: int = 1          # Langevin passes per predictor step
    snr: float = 0.16                 # corrector signal-to-noise ratio
    guidance_scale: float = 1000.0
    guidance_mode: str = "none"
    hold_clean: bool = False

    def __post_init__(self) -> None:
        if self.n_steps is not None and self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.corrector_steps < 0:
            raise ConfigError("corrector steps must be >= 0")
        if self.corrector_steps > 0 and not (self.snr > 0.0):
            raise ConfigError("corrector snr must be > 0 when correctors run")
        if self.guidance_scale < 0.0:
            raise ConfigError("guidance scale must be >= 0")
        if self.guidance_mode not in GUIDANCE_MODES:
            raise ConfigError(f"guidance mode must be one of {GUIDANCE_MODES}")


ScoreFn = Callable[[np.ndarray, float], np.ndarray]


def _as_score_fn(score: Union[ScoreNetwork, ScoreFn], cond=None) -> ScoreFn:
    if isinstance(score, ScoreNetwork):
        return lambda z, t: score.score(z, t, cond)
    return score


def predictor_step(
    score: Union[ScoreNetwork, ScoreFn],
    schedule: VPSDESchedule,
    z: np.ndarray,
    step_index: int,
    rng: np.random.Generator,
    n_steps: Optional[int] = None,
) -> np.ndarray:
    """One reverse Euler-Maruyama update from grid time i/N to (i-1)/N.

    The discretized reverse drift is dt (beta/2 z + beta s); the final step
    (into t = 0) omits the diffusion noise. `z` is (D,) or (B, D).
    """
    n = n_steps or schedule.n_steps
    if not (1 <= step_index <= n):
        raise ConfigError(f"step index {step_index} outside [1, {n}]")
    t = step_index / n
    dt = 1.0 / n
    beta = float(schedule.beta(t))
    s = _as_score_fn(score)(z, t)
    z_mean = z + dt * (0.5 * beta * z + beta * s)
    if step_index > 1:
        z_new = z_mean + np.sqrt(beta * dt) * rng.standard_normal(np.shape(z))
    else:
        z_new = z_mean
    if not np.all(np.isfinite(z_new)):
        raise NumericError(f"non-finite state after predictor step {step_index}")
    return z_new


def corrector_step(
    score: Union[ScoreNetwork, ScoreFn],
    z: np.ndarray,
    t: float,
    snr: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One Langevin refinement at fixed time t.

    Step size eta = 2 (snr ||eps|| / ||s||)^2, with the norms taken as batch
    means so the step stays at the score's typical scale (the usual rule; a
    single chain reduces to its own norms). A zero mean score norm skips the
    update instead of erroring.
    """
    if not (snr > 0.0):
        raise ConfigError("corrector snr must be > 0")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z.reshape(1, -1) if single else z
    eps = rng.standard_normal(z2.shape)
    s = np.atleast_2d(_as_score_fn(score)(z2, t))
    s_norm = float(np.mean(np.linalg.norm(s, axis=1)))
    eps_norm = float(np.mean(np.linalg.norm(eps, axis=1)))
    if s_norm == 0.0:
        return z
    eta = 2.0 * (snr * eps_norm / s_norm) ** 2
    z_new = z2 + eta * s + np.sqrt(2.0 * eta) * eps
    if not np.all(np.isfinite(z_new)):
        raise NumericError(f"non-finite state after corrector at t={t}")
    return z_new[0] if single else z_new


def apply_guidance(
    score_value: np.ndarray,
    mode: str,
    gamma: float,
    context,
    z: np.ndarray,
    t: float,
    mask: ModalityMask,
    layout: BlockLayout,
    rng: np.random.Generator,
) -> np.ndarray:
    """Adjust a raw score according to the guidance mode.

    Energy mode picks one random observed and one random unobserved modality
    and subtracts gamma * dE/dz_u from the unobserved slice only; contrastive
    and none leave the score untouched (conditioning, if any, already entered
    the score network's input).
    """
    if mode not in GUIDANCE_MODES:
        raise ConfigError(f"guidance mode must be one of {GUIDANCE_MODES}")
    if mode != "energy" or gamma == 0.0:
        return score_value
    if not mask.observed_idx or not mask.unobserved_idx:
        raise ConfigError("energy guidance needs at least one observed and one unobserved modality")
    if not isinstance(context, EnergyNetwork):
        raise ConfigError("energy guidance needs an EnergyNetwork context")
    o_k = int(rng.choice(mask.observed_idx))
    u_k = int(rng.choice(mask.unobserved_idx))
    z2 = np.atleast_2d(z)
    b = z2.shape[0]
    grad = context.grad_wrt_unobserved(
        z2[:, layout.slice_of(o_k)],
        z2[:, layout.slice_of(u_k)],
        np.full(b, o_k),
        np.full(b, u_k),
    )
    adjusted = np.array(score_value, dtype=np.float64, copy=True)
    adjusted2 = np.atleast_2d(adjusted)
    adjusted2[:, layout.slice_of(u_k)] -= gamma * grad
    return adjusted if score_value.ndim > 1 else adjusted2[0]


def pc_sample_batch(
    score_net: Union[ScoreNetwork, ScoreFn],
    schedule: VPSDESchedule,
    cfg: SamplerConfig,
    mask: ModalityMask,
    layout: BlockLayout,
    *,
    observed_latents: Optional[np.ndarray] = None,
    cond: Optional[np.ndarray] = None,
    energy_net: Optional[EnergyNetwork] = None,
    seed: int = 0,
    n: int = 1,
) -> np.ndarray:
    """Draw n latent blocks at t = 0, conditioning on the observed modalities.

    `observed_latents` is a full-width (n, D) array whose observed columns
    hold the clean conditioning latents (unobserved columns are ignored); it
    must be given exactly when the mask observes something. With an all-false
    mask every coordinate is sampled; with an all-true mask the inputs are
    returned unchanged.
    """
    if mask.n_modalities != layout.n_modalities:
        raise ConfigError(
            f"mask covers {mask.n_modalities} modalities, layout has {layout.n_modalities}"
        )
    if mask.any_observed != (observed_latents is not None):
        raise ConfigError("observed latents must be given exactly when the mask observes something")
    if cfg.guidance_mode == "energy" and cfg.guidance_scale > 0.0:
        if energy_net is None:
            raise ConfigError("energy guidance needs an energy network")
        if not mask.any_observed or mask.all_observed:
            raise ConfigError("energy guidance needs both observed and unobserved modalities")
    dim = layout.total_dim
    obs_cols = layout.coordinate_mask(mask.observed)
    if observed_latents is not None:
        observed_latents = np.atleast_2d(np.asarray(observed_latents, dtype=np.float64))
        if observed_latents.shape != (n, dim):
            raise DimensionError(
                f"observed latents shape {observed_latents.shape} != ({n}, {dim})"
            )
        if mask.all_observed:
            return observed_latents.copy()
        obs_vals = observed_latents[:, obs_cols]

    n_grid = cfg.n_steps or schedule.n_steps
    rng = child_rng(seed, "pc-sample")
    guide_rng = child_rng(seed, "pc-guidance")
    raw_fn = _as_score_fn(score_net, cond)

    def impose(z: np.ndarray, t: float) -> np.ndarray:
        if not mask.any_observed:
            return z
        if t <= 0.0 or cfg.hold_clean:
            z[:, obs_cols] = obs_vals
            return z
        alpha = float(np.exp(-0.5 * schedule.beta_integral(t)))
        sigma = float(np.sqrt(1.0 - alpha * alpha))
        z[:, obs_cols] = alpha * obs_vals + sigma * rng.standard_normal(obs_vals.shape)
        return z

    z = rng.standard_normal((n, dim))
    z = impose(z, 1.0)
    for i in range(n_grid, 0, -1):
        if cfg.guidance_mode == "energy" and cfg.guidance_scale > 0.0:
            step_rng_state = guide_rng  # one (o, u) draw per grid step, shared below
            o_k = int(step_rng_state.choice(mask.observed_idx))
            u_k = int(step_rng_state.choice(mask.unobserved_idx))

            def score_fn(zz, tt, _o=o_k, _u=u_k):
                raw = raw_fn(zz, tt)
                zz2 = np.atleast_2d(zz)
                grad = energy_net.grad_wrt_unobserved(
                    zz2[:, layout.slice_of(_o)],
                    zz2[:, layout.slice_of(_u)],
                    np.full(zz2.shape[0], _o),
                    np.full(zz2.shape[0], _u),
                )
                adjusted = np.array(raw, copy=True)
                np.atleast_2d(adjusted)[:, layout.slice_of(_u)] -= cfg.guidance_scale * grad
                return adjusted
        else:
            score_fn = raw_fn
        z = predictor_step(score_fn, schedule, z, i, rng, n_steps=n_grid)
        t_new = (i - 1) / n_grid
        z = impose(z, t_new)
        if t_new > 0.0:
            for _ in range(cfg.corrector_steps):
                z = corrector_step(score_fn, z, t_new, cfg.snr, rng)
                z = impose(z, t_new)
    return z


def pc_sample(
    score_net: Union[ScoreNetwork, ScoreFn],
    schedule: VPSDESchedule,
    cfg: SamplerConfig,
    mask: ModalityMask,
    layout: BlockLayout,
    *,
    observed_latents: Optional[np.ndarray] = None,
    cond: Optional[np.ndarray] = None,
    energy_net: Optional[EnergyNetwork] = None,
    seed: int = 0,
) -> LatentBlock:
    """Single-chain convenience wrapper around `pc_sample_batch`."""
    obs = None
    if observed_latents is not None:
        obs = np.atleast_2d(np.asarray(observed_latents, dtype=np.float64))
    values = pc_sample_batch(
        score_net, schedule, cfg, mask, layout,
        observed_latents=obs, cond=cond, energy_net=energy_net, seed=seed, n=1,
    )
    return LatentBlock(values=values[0], layout=layout, t=0.0)
