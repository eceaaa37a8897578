"""Synthetic paired-modality datasets with known ground truth.

Two families:

* a correlated Gaussian joint (`GaussianJointSpec`) whose conditionals have
  one-line closed forms, used as the oracle for samplers and score models;
* a procedural multi-background digit family (`ToyDigitSpec`): every sample
  renders one seven-segment digit glyph into M images, each over a distinct
  deterministic background, with a shared per-sample scale/stroke and a small
  per-modality translation jitter. Glyphs are drawn from stroke templates, so
  the package has no external data dependency.

Datasets are immutable after creation, stored as float32 (the container
format's payload type), and all generators are pure functions of
(spec, seed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .rng import child_rng

MAGIC = b"SBMD"
VERSION = 1


@dataclass(frozen=True)
class MultimodalSample:
    """One example: M per-modality observation vectors plus a shared label."""

    modalities: tuple
    label: int

    def __post_init__(self) -> None:
        if len(self.modalities) < 1:
            raise ConfigError("a sample needs at least one modality")


@dataclass
class Dataset:
    """Column-major store of n samples: one (n, d_k) float32 array per modality."""

    modalities: list
    labels: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        for k, arr in enumerate(self.modalities):
            if arr.shape[0] != n:
                raise DimensionError(f"modality {k} has {arr.shape[0]} rows, labels have {n}")
            self.modalities[k] = np.ascontiguousarray(arr, dtype=np.float32)
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConfigError("labels must lie in [0, n_classes)")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def dims(self) -> tuple:
        return tuple(arr.shape[1] for arr in self.modalities)

    def sample(self, i: int) -> MultimodalSample:
        return MultimodalSample(
            modalities=tuple(arr[i].copy() for arr in self.modalities),
            label=int(self.labels[i]),
        )

    def __iter__(self) -> Iterator[MultimodalSample]:
        return (self.sample(i) for i in range(len(self)))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            modalities=[arr[idx].copy() for arr in self.modalities],
            labels=self.labels[idx].copy(),
            n_classes=self.n_classes,
        )


@dataclass(frozen=True)
class SplitDatasets:
    train: Dataset
    val: Dataset
    test: Dataset


# ---------------------------------------------------------------- gaussians


@dataclass(frozen=True)
class GaussianJointSpec:
    """Equicorrelated Gaussian joint over M modalities of dimension d each.

    Coordinate j of modality k correlates with coordinate j of every other
    modality at `correlation`; within a modality the covariance is identity.
    Optional isotropic observation noise is added on top.
    """

    n_modalities: int = 2
    dim: int = 1
    correlation: float = 0.8
    observation_noise: float = 0.0

    def __post_init__(self) -> None:
        if self.n_modalities < 2:
            raise ConfigError("need at least two modalities")
        if self.dim < 1:
            raise ConfigError("per-modality dimension must be >= 1")
        if not (-1.0 < self.correlation < 1.0):
            raise ConfigError(f"correlation must lie in (-1, 1), got {self.correlation}")
        if self.observation_noise < 0.0:
            raise ConfigError("observation noise must be >= 0")
        # equicorrelation matrix eigenvalues: 1 + rho (M-1) and 1 - rho
        if 1.0 + self.correlation * (self.n_modalities - 1) <= 1e-12:
            raise ConfigError(
                f"correlation {self.correlation} makes the {self.n_modalities}-modality "
                "covariance non positive definite"
            )

    def modality_covariance(self) -> np.ndarray:
        """The M x M cross-modality correlation matrix (per matching coordinate)."""
        m = np.full((self.n_modalities, self.n_modalities), self.correlation)
        np.fill_diagonal(m, 1.0)
        return m


def gen_gaussian_joint(spec: GaussianJointSpec, n: int, seed: int) -> Dataset:
    """Draw n samples from the joint; bit-reproducible for fixed (spec, seed)."""
    if n < 1:
        raise ConfigError(f"need n >= 1, got {n}")
    rng = child_rng(seed, "gaussian-joint")
    cov = spec.modality_covariance()
    chol = np.linalg.cholesky(cov)
    # shared structure acts per coordinate: (n, d, M) standard normals mixed over M
    raw = rng.standard_normal((n, spec.dim, spec.n_modalities))
    mixed = raw @ chol.T
    if spec.observation_noise > 0.0:
        mixed = mixed + spec.observation_noise * rng.standard_normal(mixed.shape)
    modalities = [np.ascontiguousarray(mixed[:, :, k], dtype=np.float32) for k in range(spec.n_modalities)]
    return Dataset(modalities=modalities, labels=np.zeros(n, dtype=np.int64), n_classes=1)


def gaussian_conditional_moments(spec: GaussianJointSpec, observed_value: float):
    """Closed-form E and Var of one modality's coordinate given another's (d=1 pairs)."""
    rho = spec.correlation
    return rho * observed_value, 1.0 - rho * rho


# --------------------------------------------------------------- toy digits

# seven-segment skeleton in a unit glyph frame: x in [0, 1], y in [0, 2]
_SEGMENT_POINTS = {
    "A": ((0.0, 0.0), (1.0, 0.0)),
    "B": ((1.0, 0.0), (1.0, 1.0)),
    "C": ((1.0, 1.0), (1.0, 2.0)),
    "D": ((0.0, 2.0), (1.0, 2.0)),
    "E": ((0.0, 1.0), (0.0, 2.0)),
    "F": ((0.0, 0.0), (0.0, 1.0)),
    "G": ((0.0, 1.0), (1.0, 1.0)),
}

_DIGIT_SEGMENTS = {
    0: "ABCDEF",
    1: "BC",
    2: "ABGED",
    3: "ABGCD",
    4: "FGBC",
    5: "AFGCD",
    6: "AFGEDC",
    7: "ABC",
    8: "ABCDEFG",
    9: "ABCDFG",
}


@dataclass(frozen=True)
class ToyDigitSpec:
    n_modalities: int = 5
    side: int = 12
    n_classes: int = 10
    n_train: int = 4000
    n_val: int = 500
    n_test: int = 1000
    jitter: float = 1.0      # per-modality translation, pixels (<= 2)
    scale_range: tuple = (0.88, 1.08)
    stroke_range: tuple = (1.0, 1.4)

    def __post_init__(self) -> None:
        if self.side < 8:
            raise ConfigError(f"side {self.side} too small to render glyphs (need >= 8)")
        if not (2 <= self.n_classes <= 10):
            raise ConfigError("n_classes must lie in [2, 10]")
        if self.n_modalities < 2:
            raise ConfigError("need at least two modalities")
        if self.jitter > 2.0:
            raise ConfigError("per-modality jitter must stay <= 2 pixels")

    @property
    def dim(self) -> int:
        return self.side * self.side


def background_pattern(spec: ToyDigitSpec, modality: int) -> np.ndarray:
    """Deterministic low-intensity background for one modality, (side, side)."""
    s = spec.side
    yy, xx = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64), indexing="ij")
    u, v = xx / s, yy / s
    k = modality
    pattern = (
        0.20
        + 0.13 * np.sin(2.0 * np.pi * ((k % 3 + 1) * u + (k % 4) * v) + 0.7 * k)
        + 0.09 * np.cos(2.0 * np.pi * ((k % 2 + 1) * v - (k % 5) * u) + 1.3 * k)
    )
    return np.clip(pattern, 0.0, 0.45)


def _render_glyph(spec: ToyDigitSpec, digit: int, scale: float, stroke: float,
                  dx: float, dy: float) -> np.ndarray:
    """Coverage in [0, 1] of one glyph, (side, side)."""
    s = spec.side
    glyph_h = 0.62 * s * scale
    glyph_w = 0.52 * glyph_h
    x0 = (s - glyph_w) / 2.0 + dx
    y0 = (s - glyph_h) / 2.0 + dy
    half_w = 0.55 * stroke
    yy, xx = np.meshgrid(np.arange(s) + 0.5, np.arange(s) + 0.5, indexing="ij")
    coverage = np.zeros((s, s), dtype=np.float64)
    for seg in _DIGIT_SEGMENTS[digit]:
        (ax, ay), (bx, by) = _SEGMENT_POINTS[seg]
        px0, py0 = x0 + ax * glyph_w, y0 + ay * glyph_h / 2.0
        px1, py1 = x0 + bx * glyph_w, y0 + by * glyph_h / 2.0
        vx, vy = px1 - px0, py1 - py0
        seg_len2 = vx * vx + vy * vy
        tproj = np.clip(((xx - px0) * vx + (yy - py0) * vy) / seg_len2, 0.0, 1.0)
        dist = np.hypot(xx - (px0 + tproj * vx), yy - (py0 + tproj * vy))
        coverage = np.maximum(coverage, np.clip(half_w + 0.5 - dist, 0.0, 1.0))
    return coverage


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    reps = -(-n // n_classes)  # ceil
    labels = np.tile(np.arange(n_classes, dtype=np.int64), reps)[:n]
    rng.shuffle(labels)
    return labels


def _gen_digit_split(spec: ToyDigitSpec, n: int, rng: np.random.Generator) -> Dataset:
    labels = _balanced_labels(n, spec.n_classes, rng)
    scales = rng.uniform(*spec.scale_range, size=n)
    strokes = rng.uniform(*spec.stroke_range, size=n)
    offsets = rng.uniform(-spec.jitter, spec.jitter, size=(n, spec.n_modalities, 2))
    backgrounds = [background_pattern(spec, k) for k in range(spec.n_modalities)]
    modalities = [np.empty((n, spec.dim), dtype=np.float32) for _ in range(spec.n_modalities)]
    for i in range(n):
        for k in range(spec.n_modalities):
            glyph = _render_glyph(
                spec, int(labels[i]), scales[i], strokes[i], offsets[i, k, 0], offsets[i, k, 1]
            )
            img = backgrounds[k] * (1.0 - glyph) + glyph
            modalities[k][i] = np.clip(img, 0.0, 1.0).reshape(-1).astype(np.float32)
    return Dataset(modalities=modalities, labels=labels, n_classes=spec.n_classes)


def gen_toy_digits(spec: ToyDigitSpec, seed: int) -> SplitDatasets:
    """Generate the train/val/test splits; pure in (spec, seed)."""
    return SplitDatasets(
        train=_gen_digit_split(spec, spec.n_train, child_rng(seed, "digits-train")),
        val=_gen_digit_split(spec, spec.n_val, child_rng(seed, "digits-val")),
        test=_gen_digit_split(spec, spec.n_test, child_rng(seed, "digits-test")),
    )


# ----------------------------------------------------------------- file io


def write_dataset(dataset: Dataset, path) -> None:
    """Serialize to the SBMD container (see package docs for the byte layout)."""
    n = len(dataset)
    header = MAGIC + struct.pack(
        "<HHII", VERSION, dataset.n_modalities, dataset.n_classes, n
    )
    header += b"".join(struct.pack("<I", d) for d in dataset.dims)
    total = sum(dataset.dims)
    payload = np.empty((n, total), dtype="<f4")
    off = 0
    for arr, d in zip(dataset.modalities, dataset.dims):
        payload[:, off : off + d] = arr
        off += d
    labels = dataset.labels.astype("<u4").tobytes()
    Path(path).write_bytes(header + payload.tobytes() + labels)


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    version, n_mod, n_classes, n = struct.unpack_from("<HHII", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    pos = 16
    if len(data) < pos + 4 * n_mod:
        raise FormatError(f"{path}: truncated dimension table")
    dims = struct.unpack_from(f"<{n_mod}I", data, pos)
    pos += 4 * n_mod
    total = sum(dims)
    payload_bytes = 4 * n * total
    label_bytes = 4 * n
    if len(data) != pos + payload_bytes + label_bytes:
        raise FormatError(
            f"{path}: expected {pos + payload_bytes + label_bytes} bytes, file has {len(data)}"
        )
    flat = np.frombuffer(data, dtype="<f4", count=n * total, offset=pos).reshape(n, total)
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=pos + payload_bytes)
    modalities = []
    off = 0
    for d in dims:
        modalities.append(np.ascontiguousarray(flat[:, off : off + d]))
        off += d
    return Dataset(
        modalities=modalities, labels=labels.astype(np.int64), n_classes=int(n_classes)
    )
