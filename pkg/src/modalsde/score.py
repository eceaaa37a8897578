"""Score-network training by denoising score matching (step II).

The score network takes the perturbed latent block concatenated with a
sinusoidal time embedding (and, for the conditioned variant, an extra
embedding vector) and predicts the score of the perturbation kernel,
-eps / sigma(t). Training minimizes the unweighted squared error between
the prediction and that target, with time drawn uniformly on [t_min, 1].

Incomplete rows are supported by masking: missing modality slices are filled
with unit Gaussian noise and their coordinates are excluded from the loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .nn import Adam, DenseNet, time_embed
from .rng import child_rng
from .sde import T_MIN, BlockLayout, VPSDESchedule

DEFAULT_TIME_DIM = 32


@dataclass
class ScoreNetwork:
    """Score predictor s(z, t) = net(z, emb(t) [, cond]) / sigma(t).

    The network itself predicts at the scale of the perturbation noise (an
    O(1) quantity at every time), and the closed-form 1/sigma(t) factor
    carries the small-t growth of the true score; a dense net asked to output
    the raw score would need to reproduce that near-singularity itself.
    """

    net: DenseNet
    latent_dim: int
    schedule: VPSDESchedule
    time_dim: int = DEFAULT_TIME_DIM
    cond_dim: int = 0

    def __post_init__(self) -> None:
        expected_in = self.latent_dim + self.time_dim + self.cond_dim
        if self.net.in_dim != expected_in:
            raise DimensionError(
                f"score net input width {self.net.in_dim} != latent {self.latent_dim} "
                f"+ time {self.time_dim} + condition {self.cond_dim}"
            )
        if self.net.out_dim != self.latent_dim:
            raise DimensionError(
                f"score net output width {self.net.out_dim} != latent dim {self.latent_dim}"
            )

    @classmethod
    def create(cls, latent_dim, hidden, seed, *, schedule: Optional[VPSDESchedule] = None,
               time_dim=DEFAULT_TIME_DIM, cond_dim=0, activation="relu") -> "ScoreNetwork":
        net = DenseNet.create(
            [latent_dim + time_dim + cond_dim, *hidden, latent_dim],
            activation,
            child_rng(seed, "score-net"),
        )
        return cls(net, latent_dim, schedule or VPSDESchedule(), time_dim=time_dim, cond_dim=cond_dim)

    def copy(self) -> "ScoreNetwork":
        return ScoreNetwork(self.net.copy(), self.latent_dim, self.schedule,
                            self.time_dim, self.cond_dim)

    def _sigma(self, t):
        alpha = np.exp(-0.5 * self.schedule.beta_integral(t))
        return np.sqrt(1.0 - alpha * alpha)

    def _assemble(self, z: np.ndarray, t, cond: Optional[np.ndarray]) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        emb = time_embed(t, self.time_dim)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (z.shape[0], self.time_dim))
        pieces = [z, emb]
        if self.cond_dim:
            if cond is None:
                cond = np.zeros((z.shape[0], self.cond_dim))
            cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
            if cond.shape[0] == 1 and z.shape[0] > 1:
                cond = np.broadcast_to(cond, (z.shape[0], self.cond_dim))
            pieces.append(cond)
        elif cond is not None:
            raise ConfigError("this score network was built without a condition input")
        return np.concatenate([np.ascontiguousarray(p) for p in pieces], axis=1)

    def score(self, z: np.ndarray, t, cond: Optional[np.ndarray] = None) -> np.ndarray:
        """Predicted score at latent z and time t > 0; z is (D,) or (B, D)."""
        single = np.asarray(z).ndim == 1
        sigma = self._sigma(t)
        if np.any(np.asarray(sigma) <= 0.0):
            raise ConfigError("the score is undefined at t = 0 (sigma = 0)")
        out = self.net.forward(self._assemble(z, t, cond))
        sigma = sigma[:, None] if np.ndim(sigma) == 1 else sigma
        return (out / sigma)[0] if single else out / sigma


@dataclass(frozen=True)
class DSMConfig:
    """Denoising-score-matching hyperparameters; the time weighting is fixed at 1."""

    batch_size: int = 256
    epochs: int = 100
    lr: float = 2e-4
    lr_decay: float = 1.0     # per-epoch multiplicative decay
    ema_decay: float = 0.999  # parameter moving average; 0 disables
    weighting: float = 1.0
    t_min: float = T_MIN
    val_fraction: float = 0.1
    cond_dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.weighting != 1.0:
            raise ConfigError("only the unweighted objective (weighting = 1) is supported")
        if not (0.0 < self.t_min < 1.0):
            raise ConfigError(f"t_min must lie in (0, 1), got {self.t_min}")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("invalid batch size / epochs / learning rate")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ConfigError("lr_decay must lie in (0, 1]")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ConfigError("ema_decay must lie in [0, 1)")


def dsm_loss(
    score_net: ScoreNetwork,
    schedule: VPSDESchedule,
    z0: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    *,
    t: Optional[np.ndarray] = None,
    eps: Optional[np.ndarray] = None,
    coord_mask: Optional[np.ndarray] = None,
    cond: Optional[np.ndarray] = None,
    t_min: float = T_MIN,
):
    """One-draw denoising score-matching loss over a batch of clean latents.

    The objective is the unweighted (time weight = 1, uniform time on
    [t_min, 1]) expected squared error between the predicted score and the
    kernel score. Its one-draw estimator samples times log-uniformly and
    multiplies each row by the exact density ratio t ln(1/t_min)/(1 - t_min):
    same objective, but the per-row gradient magnitude stays bounded near
    beta_min^-1 ln(1/t_min) instead of reaching 1/sigma(t)^2 (about 1e6 at
    t_min = 1e-5), which makes the estimator's variance finite in practice.

    Squared errors are summed over coordinates (restricted to `coord_mask`
    when given) and averaged over the batch. Pass frozen (t, eps) to make
    the value deterministic (finite-difference checks, validation).

    Returns (loss, parameter gradient).
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    b, dim = z0.shape
    if b == 0:
        raise ConfigError("empty batch")
    if t is None or eps is None:
        if rng is None:
            raise ConfigError("dsm_loss needs rng unless (t, eps) are frozen")
        if t is None:
            t = np.exp(rng.uniform(np.log(t_min), 0.0, size=b))
        eps = rng.standard_normal((b, dim)) if eps is None else eps
    t = np.asarray(t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    row_w = (t * np.log(1.0 / t_min) / (1.0 - t_min))[:, None]

    alpha = np.exp(-0.5 * schedule.beta_integral(t))[:, None]
    sigma = np.sqrt(1.0 - alpha * alpha)
    z_t = alpha * z0 + sigma * eps
    target = -eps / sigma

    out, cache = score_net.net.forward(score_net._assemble(z_t, t, cond), want_cache=True)
    diff = out / sigma - target
    if coord_mask is not None:
        diff = diff * coord_mask
    loss = float(np.sum(row_w * diff * diff)) / b
    if not np.isfinite(loss):
        raise NumericError(f"non-finite DSM loss: {loss}")
    pgrad, _ = score_net.net.backward(2.0 * row_w * diff / (sigma * b), cache)
    return loss, pgrad


def train_score(
    score_net: ScoreNetwork,
    schedule: VPSDESchedule,
    latents: np.ndarray,
    cfg: DSMConfig,
    seed: int,
    *,
    mask_stream: Optional[np.ndarray] = None,
    layout: Optional[BlockLayout] = None,
    cond: Optional[np.ndarray] = None,
    resample_fn: Optional[Callable[[int], np.ndarray]] = None,
    curve_path=None,
) -> tuple[ScoreNetwork, list[dict]]:
    """Train on a materialized latent dataset; returns the epoch with the best
    held-out loss.

    `mask_stream` is an optional (n, M) boolean array of modality presence;
    missing slices are filled once with unit Gaussian noise, and every row's
    loss covers only its present coordinates (`layout` is then required).
    `resample_fn(epoch)` may supply fresh latents per epoch (posterior
    resampling); masking and resampling are mutually exclusive.
    """
    latents = np.array(latents, dtype=np.float64)
    n = latents.shape[0]
    if n == 0:
        raise ConfigError("empty latent dataset")
    coord_masks = None
    if mask_stream is not None:
        if resample_fn is not None:
            raise ConfigError("cannot combine masked training with latent resampling")
        if layout is None:
            raise ConfigError("masked training needs the block layout")
        mask_stream = np.asarray(mask_stream, dtype=bool)
        if mask_stream.shape != (n, layout.n_modalities):
            raise DimensionError(
                f"mask stream shape {mask_stream.shape} != ({n}, {layout.n_modalities})"
            )
        coord_masks = np.zeros((n, layout.total_dim))
        for k in range(layout.n_modalities):
            coord_masks[:, layout.slice_of(k)] = mask_stream[:, k : k + 1]
        fill_rng = child_rng(seed, "score-mask-fill")
        missing = coord_masks == 0.0
        latents[missing] = fill_rng.standard_normal(int(missing.sum()))

    split_rng = child_rng(seed, "score-split")
    order = split_rng.permutation(n)
    n_val = int(round(n * cfg.val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise ConfigError("validation split leaves no training data")

    val_rng = child_rng(seed, "score-val-draws")
    if n_val:
        val_t = np.exp(val_rng.uniform(np.log(cfg.t_min), 0.0, size=n_val))
        val_eps = val_rng.standard_normal((n_val, latents.shape[1]))

    train_rng = child_rng(seed, "score-train")
    shuffle_rng = child_rng(seed, "score-shuffle")
    opt = Adam(cfg.lr, score_net.net.n_params)
    ema = score_net.net.params.copy()
    best_val = np.inf
    best_params = ema.copy()
    curve = []
    for epoch in range(cfg.epochs):
        if resample_fn is not None:
            latents = np.asarray(resample_fn(epoch), dtype=np.float64)
        opt.lr = cfg.lr * cfg.lr_decay**epoch
        ep_order = train_idx[shuffle_rng.permutation(train_idx.size)]
        ep_loss, n_batches = 0.0, 0
        for start in range(0, ep_order.size, cfg.batch_size):
            rows = ep_order[start : start + cfg.batch_size]
            batch_cond = None
            if cond is not None:
                batch_cond = np.array(cond[rows], dtype=np.float64)
                if cfg.cond_dropout > 0.0:
                    drop = train_rng.random(rows.size) < cfg.cond_dropout
                    batch_cond[drop] = 0.0
            loss, pgrad = dsm_loss(
                score_net,
                schedule,
                latents[rows],
                train_rng,
                coord_mask=None if coord_masks is None else coord_masks[rows],
                cond=batch_cond,
                t_min=cfg.t_min,
            )
            opt.step(score_net.net.params, pgrad)
            if cfg.ema_decay > 0.0:
                ema *= cfg.ema_decay
                ema += (1.0 - cfg.ema_decay) * score_net.net.params
            else:
                ema = score_net.net.params
            ep_loss += loss
            n_batches += 1
        row = {"epoch": epoch, "train_dsm": ep_loss / max(n_batches, 1)}
        if n_val:
            live_params = score_net.net.params
            score_net.net.params = ema
            v_loss, _ = dsm_loss(
                score_net,
                schedule,
                latents[val_idx],
                t=val_t,
                eps=val_eps,
                coord_mask=None if coord_masks is None else coord_masks[val_idx],
                cond=None if cond is None else cond[val_idx],
                t_min=cfg.t_min,
            )
            score_net.net.params = live_params
            row["val_dsm"] = v_loss
            if v_loss < best_val:
                best_val = v_loss
                best_params = ema.copy()
        curve.append(row)
    if cfg.epochs:
        score_net.net.params = best_params if n_val else ema.copy()
    if curve_path is not None and curve:
        path = Path(curve_path)
        new = not path.exists()
        with path.open("a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(curve[0].keys()))
            if new:
                writer.writeheader()
            writer.writerows(curve)
    return score_net, curve
