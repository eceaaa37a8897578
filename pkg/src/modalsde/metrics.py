"""Evaluation harness: coherence, Fréchet distance, mode coverage, F1,
latent cosine similarity.

Coherence metrics judge whether generated modalities express one shared
concept, using a classifier trained jointly on all modalities. They refuse
to run when the classifier's recorded held-out accuracy is below 95%: scores
from a weak judge are noise, not measurements. Generative quality uses the
Fréchet distance between Gaussian fits of the classifier's penultimate-layer
features (no pretrained feature extractor is involved anywhere).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, DimensionError, NumericError
from .nn import Adam, DenseNet
from .rng import child_rng
from .sde import BlockLayout

CLASSIFIER_ACCURACY_GATE = 0.95


@dataclass
class EvalClassifier:
    """Dense classifier over one modality's observation vector; the layer
    before the logits doubles as the feature map for Fréchet distances."""

    net: DenseNet
    n_classes: int
    held_out_accuracy: float = 0.0

    def __post_init__(self) -> None:
        if self.net.out_dim != self.n_classes:
            raise DimensionError("classifier output width must equal the class count")
        if len(self.net.widths) < 3:
            raise ConfigError("classifier needs at least one hidden (feature) layer")

    @classmethod
    def create(cls, data_dim: int, n_classes: int, hidden: Sequence[int], seed: int) -> "EvalClassifier":
        net = DenseNet.create([data_dim, *hidden, n_classes], "relu", child_rng(seed, "classifier"))
        return cls(net, n_classes)

    @property
    def feature_dim(self) -> int:
        return self.net.widths[-2]

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(np.atleast_2d(self.logits(x)), axis=1)

    def features(self, x: np.ndarray) -> np.ndarray:
        _, cache = self.net.forward(np.atleast_2d(np.asarray(x, dtype=np.float64)), want_cache=True)
        return cache.post[-2]

    def require_trusted(self) -> None:
        if self.held_out_accuracy < CLASSIFIER_ACCURACY_GATE:
            raise ConfigError(
                f"classifier held-out accuracy {self.held_out_accuracy:.3f} is below the "
                f"{CLASSIFIER_ACCURACY_GATE:.0%} gate; coherence scores would be meaningless"
            )


def cross_entropy_loss(net: DenseNet, x: np.ndarray, labels: np.ndarray):
    """Mean softmax cross entropy and its parameter gradient."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    b = x.shape[0]
    logits, cache = net.forward(x, want_cache=True)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(b), labels]))
    if not np.isfinite(loss):
        raise NumericError("non-finite classifier loss")
    probs = np.exp(shifted - log_z[:, None])
    grad_out = probs
    grad_out[np.arange(b), labels] -= 1.0
    pgrad, _ = net.backward(grad_out / b, cache)
    return loss, pgrad


def train_classifier(
    classifier: EvalClassifier,
    train: Dataset,
    val: Dataset,
    *,
    epochs: int = 20,
    batch_size: int = 128,
    lr: float = 1e-3,
    seed: int = 0,
) -> EvalClassifier:
    """Train on all modalities pooled (each modality image is one example)
    and record the held-out accuracy over all modalities."""
    x = np.concatenate([m for m in train.modalities], axis=0).astype(np.float64)
    y = np.tile(train.labels, train.n_modalities)
    rng = child_rng(seed, "classifier-train")
    opt = Adam(lr, classifier.net.n_params)
    for _ in range(epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], batch_size):
            rows = order[start : start + batch_size]
            _, pgrad = cross_entropy_loss(classifier.net, x[rows], y[rows])
            opt.step(classifier.net.params, pgrad)
    x_val = np.concatenate([m for m in val.modalities], axis=0).astype(np.float64)
    y_val = np.tile(val.labels, val.n_modalities)
    classifier.held_out_accuracy = float(np.mean(classifier.predict(x_val) == y_val))
    return classifier


# ----------------------------------------------------------------- coherence


def conditional_coherence(
    classifier: EvalClassifier, generated: np.ndarray, true_labels: np.ndarray
) -> float:
    """Fraction of generated observations classified as their conditioning label."""
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if generated.shape[0] == 0:
        raise ConfigError("empty generated sample set")
    if generated.shape[0] != true_labels.shape[0]:
        raise DimensionError("one label per generated sample required")
    classifier.require_trusted()
    return float(np.mean(classifier.predict(generated) == true_labels))


def unconditional_coherence(
    classifier: EvalClassifier, modality_samples: Sequence[np.ndarray]
):
    """Agreement profile of jointly generated modalities.

    Classifies every modality of every sample and records the size of the
    largest label-agreeing subset. Returns (normalized histogram over sizes
    1..M, fraction of samples where all M agree).
    """
    if not modality_samples:
        raise ConfigError("no modalities given")
    n = np.atleast_2d(modality_samples[0]).shape[0]
    if n == 0:
        raise ConfigError("empty generated sample set")
    classifier.require_trusted()
    m = len(modality_samples)
    preds = np.stack(
        [classifier.predict(np.atleast_2d(np.asarray(s, dtype=np.float64))) for s in modality_samples],
        axis=1,
    )  # (n, M)
    agree = np.array([np.bincount(row).max() for row in preds])
    hist = np.bincount(agree, minlength=m + 1)[1 : m + 1].astype(np.float64) / n
    return hist, float(np.mean(agree == m))


def mode_coverage(classifier: EvalClassifier, samples: np.ndarray):
    """Per-class counts of unconditional samples plus the min/max class share."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise ConfigError("empty sample set")
    preds = classifier.predict(samples)
    counts = np.bincount(preds, minlength=classifier.n_classes)
    shares = counts / counts.sum()
    return counts, float(shares.min()), float(shares.max())


# ------------------------------------------------------------------ frechet


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    w, v = np.linalg.eigh(sym)
    if w.min() < -1e-8:
        raise NumericError(
            f"matrix square root failed: eigenvalue {w.min():.3e} below tolerance"
        )
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature populations.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with the cross
    term's square root computed on the symmetrized product
    sqrt(S_a) S_b sqrt(S_a). Each set must have at least 10x its feature
    dimension in samples for the covariance to be meaningful.
    """
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionError("feature dimensions differ")
    d = a.shape[1]
    if a.shape[0] < 10 * d or b.shape[0] < 10 * d:
        raise ConfigError(
            f"need at least 10 x {d} samples per set, got {a.shape[0]} and {b.shape[0]}"
        )
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    s_a = _sqrt_psd(cov_a)
    cross = _sqrt_psd(s_a @ cov_b @ s_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


# --------------------------------------------------------------- f1 / cosine


def attribute_f1(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Sample-averaged F1 over binary attribute vectors.

    Per sample, F1 = 2 tp / (2 tp + fp + fn); a sample where prediction and
    truth are both all-zero counts as 1 (correctly predicting "nothing").
    """
    p = np.atleast_2d(np.asarray(predicted))
    t = np.atleast_2d(np.asarray(truth))
    if p.shape != t.shape:
        raise DimensionError(f"shape mismatch: {p.shape} vs {t.shape}")
    p = (p > 0.5).astype(np.int64)
    t = (t > 0.5).astype(np.int64)
    tp = np.sum(p & t, axis=1)
    fp = np.sum(p & ~t.astype(bool), axis=1)
    fn = np.sum(~p.astype(bool) & t, axis=1)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 1.0)
    return float(np.mean(f1))


def latent_cosine_similarity(
    true_latents: np.ndarray,
    recovered_latents: np.ndarray,
    layout: BlockLayout,
):
    """Mean cosine similarity between matched true and recovered latents.

    Returns (per-modality means, across-modality average, per-modality count
    of pairs excluded for a zero-norm member).
    """
    a = np.atleast_2d(np.asarray(true_latents, dtype=np.float64))
    b = np.atleast_2d(np.asarray(recovered_latents, dtype=np.float64))
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    per_modality, excluded = [], []
    for k in range(layout.n_modalities):
        sl = layout.slice_of(k)
        ak, bk = a[:, sl], b[:, sl]
        na = np.linalg.norm(ak, axis=1)
        nb = np.linalg.norm(bk, axis=1)
        ok = (na > 0) & (nb > 0)
        excluded.append(int(np.sum(~ok)))
        if not ok.any():
            per_modality.append(float("nan"))
            continue
        cos = np.sum(ak[ok] * bk[ok], axis=1) / (na[ok] * nb[ok])
        per_modality.append(float(np.mean(cos)))
    valid = [v for v in per_modality if np.isfinite(v)]
    overall = float(np.mean(valid)) if valid else float("nan")
    return per_modality, overall, excluded


# ------------------------------------------------------------------- report


@dataclass
class MetricReport:
    """Named metric values plus the run metadata needed to reproduce them."""

    values: dict
    sample_counts: dict = field(default_factory=dict)
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self) -> None:
        for name, value in self.values.items():
            if not np.isfinite(value):
                raise NumericError(f"metric {name!r} is not finite: {value}")

    def write_csv(self, path) -> None:
        lines = ["metric,value,n,seed,config_hash"]
        for name in sorted(self.values):
            n = self.sample_counts.get(name, "")
            lines.append(f"{name},{self.values[name]:.10g},{n},{self.seed},{self.config_hash}")
        Path(path).write_text("\n".join(lines) + "\n")

    def write_json(self, path) -> None:
        payload = {
            "values": {k: float(v) for k, v in sorted(self.values.items())},
            "sample_counts": {k: int(v) for k, v in sorted(self.sample_counts.items())},
            "seed": int(self.seed),
            "config_hash": self.config_hash,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
