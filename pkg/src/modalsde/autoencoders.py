"""Per-modality autoencoders (step I of the two-stage pipeline).

Each modality gets its own autoencoder, trained independently of the others:
either a variational one (Gaussian posterior, KL against an isotropic prior,
weighted by beta) or a regularized deterministic one (squared-error
reconstruction plus an L2 penalty on the latent, with Gaussian noise injected
before decoding). The joint structure across modalities is deliberately NOT
modeled here; that is the score model's job.

All losses return hand-derived gradients compatible with finite-difference
checking when the sampling noise is frozen.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import Dataset
from .errors import ConfigError, DimensionError, NumericError
from .nn import Adam, DenseNet
from .rng import child_rng, child_seed
from .sde import BlockLayout

_BERNOULLI_EPS = 1e-6


@dataclass
class ModalityVAE:
    encoder: DenseNet          # x -> (mu || log variance), width 2 d
    decoder: DenseNet          # z -> reconstruction head
    latent_dim: int
    beta: float = 0.1
    prior_std: float = 1.0
    likelihood: str = "gaussian"

    def __post_init__(self) -> None:
        if self.encoder.out_dim != 2 * self.latent_dim:
            raise DimensionError(
                f"encoder output width {self.encoder.out_dim} != 2 x latent dim {self.latent_dim}"
            )
        if self.decoder.in_dim != self.latent_dim:
            raise DimensionError(
                f"decoder input width {self.decoder.in_dim} != latent dim {self.latent_dim}"
            )
        if self.beta < 0.0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.prior_std <= 0.0:
            raise ConfigError(f"prior std must be > 0, got {self.prior_std}")
        if self.likelihood not in ("gaussian", "bernoulli"):
            raise ConfigError(f"unknown likelihood {self.likelihood!r}")

    @classmethod
    def create(
        cls,
        data_dim: int,
        latent_dim: int,
        hidden: Sequence[int],
        seed: int,
        *,
        beta: float = 0.1,
        prior_std: float = 1.0,
        likelihood: str = "gaussian",
        activation: str = "relu",
    ) -> "ModalityVAE":
        enc = DenseNet.create(
            [data_dim, *hidden, 2 * latent_dim], activation, child_rng(seed, "vae-enc")
        )
        dec = DenseNet.create(
            [latent_dim, *reversed(hidden), data_dim], activation, child_rng(seed, "vae-dec")
        )
        return cls(enc, dec, latent_dim, beta=beta, prior_std=prior_std, likelihood=likelihood)

    def copy(self) -> "ModalityVAE":
        return ModalityVAE(
            self.encoder.copy(), self.decoder.copy(), self.latent_dim,
            beta=self.beta, prior_std=self.prior_std, likelihood=self.likelihood,
        )


@dataclass
class ModalityRAE:
    encoder: DenseNet          # x -> z, deterministic
    decoder: DenseNet
    latent_dim: int
    latent_penalty: float = 1e-5
    decoder_noise_std: float = 0.1
    likelihood: str = "gaussian"

    def __post_init__(self) -> None:
        if self.encoder.out_dim != self.latent_dim:
            raise DimensionError("encoder output width must equal the latent dim")
        if self.decoder.in_dim != self.latent_dim:
            raise DimensionError("decoder input width must equal the latent dim")
        if self.latent_penalty < 0.0 or not np.isfinite(self.latent_penalty):
            raise ConfigError("latent penalty must be finite and >= 0")
        if self.decoder_noise_std < 0.0 or not np.isfinite(self.decoder_noise_std):
            raise ConfigError("decoder noise std must be finite and >= 0")

    @classmethod
    def create(
        cls,
        data_dim: int,
        latent_dim: int,
        hidden: Sequence[int],
        seed: int,
        *,
        latent_penalty: float = 1e-5,
        decoder_noise_std: float = 0.1,
        activation: str = "relu",
    ) -> "ModalityRAE":
        enc = DenseNet.create(
            [data_dim, *hidden, latent_dim], activation, child_rng(seed, "rae-enc")
        )
        dec = DenseNet.create(
            [latent_dim, *reversed(hidden), data_dim], activation, child_rng(seed, "rae-dec")
        )
        return cls(enc, dec, latent_dim, latent_penalty=latent_penalty,
                   decoder_noise_std=decoder_noise_std)

    def copy(self) -> "ModalityRAE":
        return ModalityRAE(
            self.encoder.copy(), self.decoder.copy(), self.latent_dim,
            latent_penalty=self.latent_penalty, decoder_noise_std=self.decoder_noise_std,
        )


Autoencoder = Union[ModalityVAE, ModalityRAE]


# ------------------------------------------------------------------- losses


def _check_finite(value: float, term: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {term} in autoencoder loss: {value}")


def _reconstruction_terms(model, x: np.ndarray, dec_out: np.ndarray):
    """Per-batch-mean reconstruction NLL and its gradient wrt the decoder head."""
    b = x.shape[0]
    if model.likelihood == "gaussian":
        diff = dec_out - x
        nll = 0.5 * float(np.sum(diff * diff)) / b
        grad = diff / b
        return nll, grad
    # bernoulli with the clamped-probability guard
    p_raw = 1.0 / (1.0 + np.exp(-dec_out))
    p = np.clip(p_raw, _BERNOULLI_EPS, 1.0 - _BERNOULLI_EPS)
    nll = -float(np.sum(x * np.log(p) + (1.0 - x) * np.log1p(-p))) / b
    active = (p_raw > _BERNOULLI_EPS) & (p_raw < 1.0 - _BERNOULLI_EPS)
    grad = np.where(active, p_raw - x, 0.0) / b
    return nll, grad


def vae_loss(
    model: ModalityVAE,
    batch: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    eps: Optional[np.ndarray] = None,
):
    """Negative per-modality ELBO, batch-averaged, with gradients.

    loss = reconstruction NLL + beta KL(q(z|x) || N(0, prior_std^2 I)),
    with z drawn by reparameterization (z = mu + sigma_q eps). Pass `eps`
    to freeze the noise (finite-difference checks); otherwise it is drawn
    from `rng`.

    Returns (loss, parts, encoder gradient, decoder gradient) where parts
    is a dict with the 'recon' and 'kl' components.
    """
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x.shape[0] == 0:
        raise ConfigError("empty batch")
    b = x.shape[0]
    d = model.latent_dim

    enc_out, enc_cache = model.encoder.forward(x, want_cache=True)
    mu, logvar = enc_out[:, :d], enc_out[:, d:]
    sigma_q = np.exp(0.5 * logvar)
    if eps is None:
        if rng is None:
            raise ConfigError("vae_loss needs either rng or frozen eps")
        eps = rng.standard_normal((b, d))
    z = mu + sigma_q * eps

    dec_out, dec_cache = model.decoder.forward(z, want_cache=True)
    recon, dec_grad_out = _reconstruction_terms(model, x, dec_out)
    _check_finite(recon, "reconstruction term")

    var_p = model.prior_std**2
    kl = 0.5 * float(
        np.sum((mu * mu + sigma_q * sigma_q) / var_p - 1.0 - logvar + np.log(var_p))
    ) / b
    _check_finite(kl, "KL term")
    loss = recon + model.beta * kl

    dec_pgrad, dz = model.decoder.backward(dec_grad_out, dec_cache)
    dmu = dz + (model.beta / b) * mu / var_p
    dlogvar = dz * eps * 0.5 * sigma_q + (model.beta / b) * 0.5 * (sigma_q * sigma_q / var_p - 1.0)
    enc_pgrad, _ = model.encoder.backward(np.concatenate([dmu, dlogvar], axis=1), enc_cache)
    return loss, {"recon": recon, "kl": kl}, enc_pgrad, dec_pgrad


def rae_loss(
    model: ModalityRAE,
    batch: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    eps: Optional[np.ndarray] = None,
):
    """Squared-error reconstruction plus latent L2 penalty, batch-averaged.

    Gaussian noise of the configured std is added to z before decoding;
    there is no decoder regularizer. Same return convention as `vae_loss`.
    """
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x.shape[0] == 0:
        raise ConfigError("empty batch")
    b = x.shape[0]

    z, enc_cache = model.encoder.forward(x, want_cache=True)
    if model.decoder_noise_std > 0.0:
        if eps is None:
            if rng is None:
                raise ConfigError("rae_loss needs either rng or frozen eps")
            eps = rng.standard_normal(z.shape)
        z_in = z + model.decoder_noise_std * eps
    else:
        z_in = z
    dec_out, dec_cache = model.decoder.forward(z_in, want_cache=True)

    diff = dec_out - x
    recon = float(np.sum(diff * diff)) / b
    penalty = model.latent_penalty * float(np.sum(z * z)) / b
    _check_finite(recon, "reconstruction term")
    _check_finite(penalty, "latent penalty term")
    loss = recon + penalty

    dec_pgrad, dz = model.decoder.backward(2.0 * diff / b, dec_cache)
    dz = dz + 2.0 * model.latent_penalty * z / b
    enc_pgrad, _ = model.encoder.backward(dz, enc_cache)
    return loss, {"recon": recon, "penalty": penalty}, enc_pgrad, dec_pgrad


# -------------------------------------------------------------- encode / decode


def encode(model: Autoencoder, x: np.ndarray, mode: str = "mean",
           rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Latent representation of x ((d_x,) or (n, d_x)).

    For a VAE, mode 'mean' returns the posterior mean and 'sample' a
    reparameterized posterior draw; an RAE is deterministic and ignores the
    mode flag.
    """
    if mode not in ("mean", "sample"):
        raise ConfigError(f"unknown encode mode {mode!r}")
    out = model.encoder.forward(x)
    if isinstance(model, ModalityRAE):
        return out
    d = model.latent_dim
    mu, logvar = out[..., :d], out[..., d:]
    if mode == "mean":
        return mu
    if rng is None:
        raise ConfigError("encode mode 'sample' needs an rng")
    return mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)


def decode(model: Autoencoder, z: np.ndarray) -> np.ndarray:
    """Reconstruction parameters for latent z: the Gaussian mean, or Bernoulli
    probabilities clamped to [1e-6, 1 - 1e-6]."""
    out = model.decoder.forward(z)
    if getattr(model, "likelihood", "gaussian") == "bernoulli":
        return np.clip(1.0 / (1.0 + np.exp(-out)), _BERNOULLI_EPS, 1.0 - _BERNOULLI_EPS)
    return out


def encode_dataset(
    models: Sequence[Autoencoder],
    dataset: Dataset,
    mode: str,
    seed: int,
) -> tuple[np.ndarray, BlockLayout]:
    """Stack every sample's per-modality latents into (n, D) plus the layout."""
    if len(models) != dataset.n_modalities:
        raise DimensionError(
            f"{len(models)} autoencoders for {dataset.n_modalities} modalities"
        )
    parts = []
    for k, model in enumerate(models):
        rng = child_rng(seed, f"encode-{k}")
        parts.append(encode(model, dataset.modalities[k], mode, rng))
    layout = BlockLayout(tuple(m.latent_dim for m in models))
    return np.concatenate(parts, axis=1), layout


# ----------------------------------------------------------------- training


def train_autoencoder(
    model: Autoencoder,
    train_x: np.ndarray,
    val_x: Optional[np.ndarray] = None,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    curve_path=None,
) -> list[dict]:
    """Adam training loop for one modality. Returns the per-epoch curve
    (and appends it to `curve_path` as CSV when given)."""
    train_x = np.asarray(train_x, dtype=np.float64)
    n = train_x.shape[0]
    if n == 0:
        raise ConfigError("empty training set")
    loss_fn = vae_loss if isinstance(model, ModalityVAE) else rae_loss
    opt_enc = Adam(lr, model.encoder.n_params)
    opt_dec = Adam(lr, model.decoder.n_params)
    shuffle_rng = child_rng(seed, "ae-shuffle")
    noise_rng = child_rng(seed, "ae-noise")
    curve = []
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        ep_loss = ep_a = ep_b = 0.0
        n_batches = 0
        for start in range(0, n, batch_size):
            batch = train_x[order[start : start + batch_size]]
            loss, parts, g_enc, g_dec = loss_fn(model, batch, rng=noise_rng)
            opt_enc.step(model.encoder.params, g_enc)
            opt_dec.step(model.decoder.params, g_dec)
            ep_loss += loss
            ep_a += parts.get("recon", 0.0)
            ep_b += parts.get("kl", parts.get("penalty", 0.0))
            n_batches += 1
        row = {
            "epoch": epoch,
            "loss": ep_loss / n_batches,
            "recon": ep_a / n_batches,
            "kl": ep_b / n_batches,
        }
        if val_x is not None and len(val_x):
            val_rng = child_rng(seed, f"ae-val-{epoch}")
            v_loss, _, _, _ = loss_fn(model, val_x, rng=val_rng)
            row["val_loss"] = v_loss
        curve.append(row)
    if curve_path is not None:
        path = Path(curve_path)
        new = not path.exists()
        with path.open("a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(curve[0].keys()))
            if new:
                writer.writeheader()
            writer.writerows(curve)
    return curve


# --------------------------------------------------------------- fine-tuning


@dataclass(frozen=True)
class FinetuneConfig:
    """Decoder fine-tuning on conditional samples of randomly dropped modalities."""

    drop_prob: float = 0.5
    n_latent_samples: int = 1       # draws of z for each dropped modality
    lr: float = 1e-4
    n_batches: int = 20
    batch_size: int = 32

    def __post_init__(self) -> None:
        if not (0.0 <= self.drop_prob < 1.0):
            raise ConfigError("drop probability must lie in [0, 1)")
        if self.n_latent_samples < 1:
            raise ConfigError("need at least one latent sample per example")


def finetune_decoders(
    models: Sequence[Autoencoder],
    score_net,
    schedule,
    dataset: Dataset,
    cfg: FinetuneConfig,
    seed: int,
    sampler_cfg=None,
) -> list[Autoencoder]:
    """Fine-tune decoders toward conditional queries; encoders stay frozen.

    For every batch example each modality is dropped independently with
    probability `cfg.drop_prob` (an all-dropped mask is resampled). Latents
    for the dropped modalities are drawn conditionally via the score-model
    sampler, and each dropped modality's decoder takes an ascent step on the
    average conditional log-likelihood of the true observation over
    `cfg.n_latent_samples` draws. Returns fine-tuned copies of the models.
    """
    from .sampler import ModalityMask, SamplerConfig, pc_sample_batch

    models = [m.copy() for m in models]
    n_mod = len(models)
    if sampler_cfg is None:
        sampler_cfg = SamplerConfig()
    opts = [Adam(cfg.lr, m.decoder.n_params) for m in models]
    mask_rng = child_rng(seed, "finetune-mask")
    order_rng = child_rng(seed, "finetune-order")
    n = len(dataset)

    for batch_idx in range(cfg.n_batches):
        rows = order_rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        drops = mask_rng.random((len(rows), n_mod)) < cfg.drop_prob
        all_dropped = drops.all(axis=1)
        while all_dropped.any():
            drops[all_dropped] = mask_rng.random((int(all_dropped.sum()), n_mod)) < cfg.drop_prob
            all_dropped = drops.all(axis=1)
        if not drops.any():
            continue
        # group rows by identical drop patterns so sampling stays batched
        patterns: dict[tuple, list[int]] = {}
        for i, pattern in enumerate(map(tuple, drops)):
            if any(pattern):
                patterns.setdefault(pattern, []).append(i)
        for pattern, members in sorted(patterns.items()):
            rows_here = rows[members]
            observed = [k for k in range(n_mod) if not pattern[k]]
            dropped = [k for k in range(n_mod) if pattern[k]]
            obs_latents = np.concatenate(
                [
                    encode(models[k], dataset.modalities[k][rows_here], "mean")
                    if k in observed
                    else np.zeros((len(rows_here), models[k].latent_dim))
                    for k in range(n_mod)
                ],
                axis=1,
            )
            mask = ModalityMask(tuple(not p for p in pattern))
            layout = BlockLayout(tuple(m.latent_dim for m in models))
            for s in range(cfg.n_latent_samples):
                z = pc_sample_batch(
                    score_net,
                    schedule,
                    sampler_cfg,
                    mask,
                    layout,
                    observed_latents=obs_latents,
                    seed=child_seed(seed, f"finetune-{batch_idx}-{pattern}-{s}"),
                    n=len(rows_here),
                )
                for k in dropped:
                    x_true = np.asarray(dataset.modalities[k][rows_here], dtype=np.float64)
                    z_k = z[:, layout.slice_of(k)]
                    dec = models[k].decoder
                    out, cache = dec.forward(z_k, want_cache=True)
                    _, up = _reconstruction_terms(models[k], x_true, out)
                    pgrad, _ = dec.backward(up / cfg.n_latent_samples, cache)
                    opts[k].step(dec.params, pgrad)
    return models
