"""Dense-network substrate with explicit parameters and hand-derived gradients.

Everything trainable in this package (encoders, decoders, score networks,
energy networks, contrastive encoders, the eval classifier) is a `DenseNet`:
a chain of affine layers with per-layer activations, parameters held in one
flat float64 vector with a fixed layout (per layer: weight matrix row-major,
then bias). Gradients are computed by explicit reverse-mode passes so they
can be checked coordinate-by-coordinate against central finite differences.

No autograd, no GPU, no convolutions. The latent spaces this package works
in are small enough (tens of dimensions) that dense layers are both adequate
and fully testable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, StateError

ACTIVATIONS = ("relu", "softplus", "tanh", "identity")
ACTIVATION_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


def _apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "softplus":
        return np.logaddexp(0.0, z)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ConfigError(f"unknown activation: {name!r}")


def _activation_grad(name: str, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d activation / d pre-activation, given pre-activation z and output y."""
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "softplus":
        # sigmoid(z), computed stably for both signs
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if name == "tanh":
        return 1.0 - y * y
    if name == "identity":
        return np.ones_like(z)
    raise ConfigError(f"unknown activation: {name!r}")


def parameter_count(widths: Sequence[int]) -> int:
    """Total parameters for the given layer widths (weights plus biases)."""
    return sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(len(widths) - 1))


@dataclass
class ForwardCache:
    """Intermediate values of one forward pass, consumed by `DenseNet.backward`."""

    x: np.ndarray                 # (B, w0) input as evaluated
    pre: list[np.ndarray]         # pre-activations per layer, each (B, w_{l+1})
    post: list[np.ndarray]        # post-activations per layer


@dataclass
class DenseNet:
    widths: tuple[int, ...]
    activations: tuple[str, ...]
    params: np.ndarray

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        self.activations = tuple(self.activations)
        if len(self.widths) < 2:
            raise ConfigError("a network needs at least an input and an output width")
        if len(self.activations) != len(self.widths) - 1:
            raise ConfigError(
                f"{len(self.widths) - 1} layers need {len(self.widths) - 1} activations, "
                f"got {len(self.activations)}"
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation: {act!r}")
        expected = parameter_count(self.widths)
        if self.params.shape != (expected,):
            raise DimensionError(
                f"parameter vector has shape {self.params.shape}, expected ({expected},)"
            )

    # ------------------------------------------------------------------ setup

    @classmethod
    def create(
        cls,
        widths: Sequence[int],
        activations: Sequence[str] | str,
        rng: np.random.Generator,
    ) -> "DenseNet":
        """Initialize with variance-scaled uniform weights, zero biases.

        The uniform bound per layer is sqrt(6 / (fan_in + fan_out)); with a
        hidden-activation string, the last layer gets an identity head.
        """
        widths = tuple(int(w) for w in widths)
        if isinstance(activations, str):
            activations = tuple([activations] * (len(widths) - 2) + ["identity"])
        params = np.zeros(parameter_count(widths), dtype=np.float64)
        offset = 0
        for i in range(len(widths) - 1):
            fan_in, fan_out = widths[i], widths[i + 1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            n_w = fan_in * fan_out
            params[offset : offset + n_w] = rng.uniform(-bound, bound, size=n_w)
            offset += n_w + fan_out  # biases stay zero
        return cls(widths=widths, activations=tuple(activations), params=params)

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def layer_slices(self) -> list[tuple[slice, slice]]:
        """(weight slice, bias slice) into the flat parameter vector, per layer."""
        out = []
        offset = 0
        for i in range(len(self.widths) - 1):
            n_w = self.widths[i] * self.widths[i + 1]
            n_b = self.widths[i + 1]
            out.append((slice(offset, offset + n_w), slice(offset + n_w, offset + n_w + n_b)))
            offset += n_w + n_b
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(self.widths, self.activations, self.params.copy())

    # ---------------------------------------------------------------- forward

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """Evaluate the network on a vector (w0,) or batch (B, w0).

        With `want_cache=True`, also returns the `ForwardCache` that
        `backward` requires.
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x.reshape(1, -1) if squeeze else x
        if h.shape[1] != self.widths[0]:
            raise DimensionError(
                f"input width {h.shape[1]} does not match first layer width {self.widths[0]}"
            )
        pre: list[np.ndarray] = []
        post: list[np.ndarray] = []
        for (w_sl, b_sl), act, w_in, w_out in zip(
            self.layer_slices(), self.activations, self.widths[:-1], self.widths[1:]
        ):
            weight = self.params[w_sl].reshape(w_in, w_out)
            z = h @ weight + self.params[b_sl]
            h = _apply_activation(act, z)
            if want_cache:
                pre.append(z)
                post.append(h)
        y = h[0] if squeeze else h
        if want_cache:
            return y, ForwardCache(x=x.reshape(1, -1) if squeeze else x, pre=pre, post=post)
        return y

    def backward(
        self, upstream: np.ndarray, cache: Optional[ForwardCache]
    ) -> tuple[np.ndarray, np.ndarray]:
        """Reverse-mode gradients for the forward pass recorded in `cache`.

        `upstream` is d loss / d output, shaped like the forward output.
        Returns (parameter gradient, input gradient); batch rows are summed
        into the parameter gradient in a fixed order.
        """
        if cache is None:
            raise StateError("backward called without a cached forward pass")
        upstream = np.asarray(upstream, dtype=np.float64)
        squeeze = upstream.ndim == 1
        g = upstream.reshape(1, -1) if squeeze else upstream
        if g.shape != cache.post[-1].shape:
            raise DimensionError(
                f"upstream gradient shape {g.shape} does not match output shape {cache.post[-1].shape}"
            )
        pgrad = np.zeros_like(self.params)
        slices = self.layer_slices()
        for layer in range(len(self.widths) - 2, -1, -1):
            act = self.activations[layer]
            z = cache.pre[layer]
            y = cache.post[layer]
            g = g * _activation_grad(act, z, y)
            h_in = cache.x if layer == 0 else cache.post[layer - 1]
            w_sl, b_sl = slices[layer]
            pgrad[w_sl] = (h_in.T @ g).reshape(-1)
            pgrad[b_sl] = g.sum(axis=0)
            weight = self.params[w_sl].reshape(self.widths[layer], self.widths[layer + 1])
            g = g @ weight.T
        xgrad = g[0] if squeeze else g
        return pgrad, xgrad


# --------------------------------------------------------------------- adam


@dataclass
class Adam:
    """Bias-corrected Adam state for one parameter vector."""

    lr: float
    n_params: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step_count: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        self.m = np.zeros(self.n_params, dtype=np.float64)
        self.v = np.zeros(self.n_params, dtype=np.float64)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """One update. Returns the new parameter vector (also written in place)."""
        if params.shape != (self.n_params,) or grad.shape != (self.n_params,):
            raise DimensionError(
                f"expected vectors of length {self.n_params}, got {params.shape} and {grad.shape}"
            )
        bad = ~np.isfinite(grad)
        if bad.any():
            idx = int(np.argmax(bad))
            raise NumericError(f"non-finite gradient component at index {idx}: {grad[idx]}")
        self.step_count += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.step_count)
        v_hat = self.v / (1.0 - self.beta2**self.step_count)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


# ----------------------------------------------------------- time embedding


TIME_EMBED_SCALE = 1000.0  # maps t in [0, 1] onto the embedding's working range


def time_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of diffusion time t in [0, 1].

    Interleaved sin/cos pairs at geometric frequencies with base 1e4:
    component 2i is sin(1000 t / 10000^(2i/dim)), component 2i+1 the matching
    cos. The 1000x input scale spreads [0, 1] over the frequency ladder so
    both coarse and fine time differences are visible; the slowest pairs stay
    monotone on [0, 1], which keeps the embedding injective on any sampling
    grid. Accepts a scalar (returns (dim,)) or a batch (B,) (returns (B, dim)).
    """
    if dim % 2 != 0:
        raise ConfigError(f"time embedding dimension must be even, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    squeeze = t_arr.ndim == 0
    t_col = t_arr.reshape(-1, 1) * TIME_EMBED_SCALE
    i = np.arange(dim // 2, dtype=np.float64)
    freq = np.power(10000.0, -2.0 * i / dim)
    phase = t_col * freq
    out = np.empty((t_col.shape[0], dim), dtype=np.float64)
    out[:, 0::2] = np.sin(phase)
    out[:, 1::2] = np.cos(phase)
    return out[0] if squeeze else out
