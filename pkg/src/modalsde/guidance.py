"""Coherence-guidance artifacts: a pairwise latent energy model and
contrastively aligned auxiliary encoders.

The energy network scores an (observed latent, unobserved latent) pair, low
for coherent pairs, and is trained by noise contrastive estimation against
negatives built by swapping in a different-label sample. Both members of a
pair are perturbed with the score model's own perturbation kernel so the
energy stays meaningful along the sampling trajectory. One shared network
serves every modality pair via one-hot modality ids; per-pair networks are
available behind a flag.

The contrastive encoders map every modality into one embedding space and are
trained with a symmetric in-batch objective over cosine similarities; their
pooled embedding conditions the score network directly ("-T" variants).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, DimensionError, NumericError
from .nn import Adam, DenseNet
from .rng import child_rng
from .sde import BlockLayout, T_MIN, VPSDESchedule

# ------------------------------------------------------------- energy model


@dataclass
class EnergyNetwork:
    """Scalar energy over latent pairs. Not symmetric: callers always pass
    (observed, unobserved) in that order."""

    latent_dim: int
    n_modalities: int
    net: Optional[DenseNet] = None                  # shared over pairs
    pair_nets: Optional[dict] = None                # (o, u) -> DenseNet

    def __post_init__(self) -> None:
        if (self.net is None) == (self.pair_nets is None):
            raise ConfigError("exactly one of shared net / per-pair nets must be set")

    @classmethod
    def create(cls, latent_dim: int, n_modalities: int, hidden: Sequence[int],
               seed: int, *, per_pair: bool = False) -> "EnergyNetwork":
        if per_pair:
            nets = {}
            for o in range(n_modalities):
                for u in range(n_modalities):
                    if o != u:
                        nets[(o, u)] = DenseNet.create(
                            [2 * latent_dim, *hidden, 1], "softplus",
                            child_rng(seed, f"energy-{o}-{u}"),
                        )
            return cls(latent_dim, n_modalities, pair_nets=nets)
        net = DenseNet.create(
            [2 * latent_dim + 2 * n_modalities, *hidden, 1], "softplus",
            child_rng(seed, "energy"),
        )
        return cls(latent_dim, n_modalities, net=net)

    @property
    def per_pair(self) -> bool:
        return self.pair_nets is not None

    def _net_for(self, o_idx: np.ndarray, u_idx: np.ndarray):
        if not self.per_pair:
            return self.net
        pairs = set(zip(o_idx.tolist(), u_idx.tolist()))
        if len(pairs) != 1:
            raise ConfigError("per-pair energy networks need a single (o, u) pair per call")
        return self.pair_nets[next(iter(pairs))]

    def _inputs(self, z_o: np.ndarray, z_u: np.ndarray,
                o_idx: np.ndarray, u_idx: np.ndarray) -> np.ndarray:
        z_o = np.atleast_2d(np.asarray(z_o, dtype=np.float64))
        z_u = np.atleast_2d(np.asarray(z_u, dtype=np.float64))
        if z_o.shape[1] != self.latent_dim or z_u.shape[1] != self.latent_dim:
            raise DimensionError("pair members must each have the energy latent dim")
        if self.per_pair:
            return np.concatenate([z_o, z_u], axis=1)
        b = z_o.shape[0]
        one_hot = np.zeros((b, 2 * self.n_modalities))
        one_hot[np.arange(b), o_idx] = 1.0
        one_hot[np.arange(b), self.n_modalities + u_idx] = 1.0
        return np.concatenate([z_o, z_u, one_hot], axis=1)

    def energy(self, z_o, z_u, o_idx, u_idx) -> np.ndarray:
        """E(z_o, z_u) for a batch; o_idx/u_idx are per-row modality ids."""
        o_idx = np.atleast_1d(np.asarray(o_idx, dtype=np.int64))
        u_idx = np.atleast_1d(np.asarray(u_idx, dtype=np.int64))
        net = self._net_for(o_idx, u_idx)
        out = net.forward(self._inputs(z_o, z_u, o_idx, u_idx))
        return out[:, 0]

    def grad_wrt_unobserved(self, z_o, z_u, o_idx, u_idx) -> np.ndarray:
        """d E / d z_u with the observed member treated as constant, (B, d)."""
        o_idx = np.atleast_1d(np.asarray(o_idx, dtype=np.int64))
        u_idx = np.atleast_1d(np.asarray(u_idx, dtype=np.int64))
        net = self._net_for(o_idx, u_idx)
        inputs = self._inputs(z_o, z_u, o_idx, u_idx)
        out, cache = net.forward(inputs, want_cache=True)
        _, in_grad = net.backward(np.ones_like(out), cache)
        return in_grad[:, self.latent_dim : 2 * self.latent_dim]

    def all_nets(self) -> dict:
        if self.per_pair:
            return {f"energy_{o}_{u}": n for (o, u), n in sorted(self.pair_nets.items())}
        return {"energy": self.net}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def nce_loss(
    energy_net: EnergyNetwork,
    pos_pairs: tuple,
    neg_pairs: tuple,
    schedule: Optional[VPSDESchedule],
    rng: Optional[np.random.Generator] = None,
    *,
    t: Optional[np.ndarray] = None,
    eps: Optional[tuple] = None,
):
    """Logistic discrimination loss between coherent and incoherent pairs.

    `pos_pairs` is (z_o, z_u, o_idx, u_idx) and `neg_pairs` the same with the
    second member swapped for a different-label latent. Pair members are
    diffused with the score model's perturbation kernel at one shared random
    time per row (pass `t`/`eps` to freeze the draws, or `schedule=None` to
    skip perturbation). The loss per row couple is
    softplus(E(pos)) + softplus(-E(neg)), so all-zero energies give 2 ln 2.

    Returns (loss, {net name: parameter gradient}).
    """
    z_o_p, z_u_p, o_idx, u_idx = pos_pairs
    z_o_n, z_n, o_idx_n, u_idx_n = neg_pairs
    z_o_p = np.atleast_2d(np.asarray(z_o_p, dtype=np.float64))
    z_u_p = np.atleast_2d(np.asarray(z_u_p, dtype=np.float64))
    z_o_n = np.atleast_2d(np.asarray(z_o_n, dtype=np.float64))
    z_n = np.atleast_2d(np.asarray(z_n, dtype=np.float64))
    b = z_o_p.shape[0]
    if z_o_n.shape[0] != b:
        raise ConfigError("positive and negative pair counts must match")

    if schedule is not None:
        if t is None:
            if rng is None:
                raise ConfigError("nce_loss needs rng unless draws are frozen")
            t = rng.uniform(T_MIN, 1.0, size=b)
        t = np.asarray(t, dtype=np.float64)
        alpha = np.exp(-0.5 * schedule.beta_integral(t))[:, None]
        sigma = np.sqrt(1.0 - alpha * alpha)
        if eps is None:
            if rng is None:
                raise ConfigError("nce_loss needs rng unless draws are frozen")
            eps = tuple(rng.standard_normal(z.shape) for z in (z_o_p, z_u_p, z_o_n, z_n))
        z_o_p = alpha * z_o_p + sigma * eps[0]
        z_u_p = alpha * z_u_p + sigma * eps[1]
        z_o_n = alpha * z_o_n + sigma * eps[2]
        z_n = alpha * z_n + sigma * eps[3]

    o_idx = np.atleast_1d(np.asarray(o_idx, dtype=np.int64))
    u_idx = np.atleast_1d(np.asarray(u_idx, dtype=np.int64))
    o_idx_n = np.atleast_1d(np.asarray(o_idx_n, dtype=np.int64))
    u_idx_n = np.atleast_1d(np.asarray(u_idx_n, dtype=np.int64))
    net_p = energy_net._net_for(o_idx, u_idx)
    net_n = energy_net._net_for(o_idx_n, u_idx_n)
    in_p = energy_net._inputs(z_o_p, z_u_p, o_idx, u_idx)
    in_n = energy_net._inputs(z_o_n, z_n, o_idx_n, u_idx_n)
    e_p, cache_p = net_p.forward(in_p, want_cache=True)
    e_n, cache_n = net_n.forward(in_n, want_cache=True)
    e_p, e_n = e_p[:, 0], e_n[:, 0]
    if not (np.isfinite(e_p).all() and np.isfinite(e_n).all()):
        raise NumericError("non-finite energies in NCE loss")

    loss = float(np.mean(np.logaddexp(0.0, e_p) + np.logaddexp(0.0, -e_n)))
    d_ep = (_sigmoid(e_p) / b)[:, None]
    d_en = (-_sigmoid(-e_n) / b)[:, None]
    pg_p, _ = net_p.backward(d_ep, cache_p)
    pg_n, _ = net_n.backward(d_en, cache_n)

    grads: dict[str, np.ndarray] = {}
    for name, net in energy_net.all_nets().items():
        if net is net_p and net is net_n:
            grads[name] = pg_p + pg_n
        elif net is net_p:
            grads[name] = pg_p
        elif net is net_n:
            grads[name] = pg_n
    return loss, grads


def _gather_modality(latents: np.ndarray, layout: BlockLayout, rows: np.ndarray,
                     mod_idx: np.ndarray) -> np.ndarray:
    """latents[rows] restricted to a per-row modality slice (equal dims)."""
    d = layout.dims[0]
    offsets = np.asarray(layout.offsets)[mod_idx]
    cols = offsets[:, None] + np.arange(d)[None, :]
    return latents[rows[:, None], cols]


def train_ebm(
    energy_net: EnergyNetwork,
    latents: np.ndarray,
    labels: np.ndarray,
    layout: BlockLayout,
    schedule: VPSDESchedule,
    *,
    epochs: int = 30,
    batch_size: int = 128,
    lr: float = 1e-3,
    seed: int = 0,
) -> EnergyNetwork:
    """NCE training over random modality pairs with different-label negatives."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    n = latents.shape[0]
    if len(set(layout.dims)) != 1:
        raise ConfigError("the energy model assumes equal per-modality latent dims")
    if np.unique(labels).size < 2:
        raise ConfigError("cannot form different-label negatives from a single-class dataset")
    if layout.n_modalities < 2:
        raise ConfigError("need at least two modalities")

    rng = child_rng(seed, "ebm-train")
    opts = {name: Adam(lr, net.n_params) for name, net in energy_net.all_nets().items()}
    pair_mode_single = energy_net.per_pair
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            b = rows.size
            if pair_mode_single:
                o = int(rng.integers(layout.n_modalities))
                u = int(rng.integers(layout.n_modalities - 1))
                u = u + 1 if u >= o else u
                o_idx = np.full(b, o)
                u_idx = np.full(b, u)
            else:
                o_idx = rng.integers(layout.n_modalities, size=b)
                shift = rng.integers(1, layout.n_modalities, size=b)
                u_idx = (o_idx + shift) % layout.n_modalities
            neg_rows = rng.integers(n, size=b)
            clash = labels[neg_rows] == labels[rows]
            while clash.any():
                neg_rows[clash] = rng.integers(n, size=int(clash.sum()))
                clash = labels[neg_rows] == labels[rows]
            z_o = _gather_modality(latents, layout, rows, o_idx)
            z_u = _gather_modality(latents, layout, rows, u_idx)
            z_n = _gather_modality(latents, layout, neg_rows, u_idx)
            loss, grads = nce_loss(
                energy_net, (z_o, z_u, o_idx, u_idx), (z_o, z_n, o_idx, u_idx),
                schedule, rng,
            )
            nets = energy_net.all_nets()
            for name, g in grads.items():
                opts[name].step(nets[name].params, g)
    return energy_net


def ebm_margin(
    energy_net: EnergyNetwork,
    latents: np.ndarray,
    labels: np.ndarray,
    layout: BlockLayout,
    schedule: VPSDESchedule,
    t_level: float,
    seed: int = 0,
) -> float:
    """mean E(negative) - mean E(positive) at one fixed perturbation level."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    n = latents.shape[0]
    rng = child_rng(seed, f"ebm-margin-{t_level}")
    rows = np.arange(n)
    o_idx = rng.integers(layout.n_modalities, size=n)
    shift = rng.integers(1, layout.n_modalities, size=n)
    u_idx = (o_idx + shift) % layout.n_modalities
    neg_rows = rng.integers(n, size=n)
    clash = labels[neg_rows] == labels[rows]
    while clash.any():
        neg_rows[clash] = rng.integers(n, size=int(clash.sum()))
        clash = labels[neg_rows] == labels[rows]
    alpha = float(np.exp(-0.5 * schedule.beta_integral(t_level)))
    sigma = float(np.sqrt(1.0 - alpha * alpha))
    z_o = alpha * _gather_modality(latents, layout, rows, o_idx)
    z_u = alpha * _gather_modality(latents, layout, rows, u_idx)
    z_n = alpha * _gather_modality(latents, layout, neg_rows, u_idx)
    z_o = z_o + sigma * rng.standard_normal(z_o.shape)
    z_u = z_u + sigma * rng.standard_normal(z_u.shape)
    z_n = z_n + sigma * rng.standard_normal(z_n.shape)
    if energy_net.per_pair:
        margins = []
        for o in range(layout.n_modalities):
            for u in range(layout.n_modalities):
                if o == u:
                    continue
                sel = (o_idx == o) & (u_idx == u)
                if not sel.any():
                    continue
                e_p = energy_net.energy(z_o[sel], z_u[sel], o_idx[sel], u_idx[sel])
                e_n = energy_net.energy(z_o[sel], z_n[sel], o_idx[sel], u_idx[sel])
                margins.append((float(np.sum(e_n) - np.sum(e_p)), int(sel.sum())))
        total = sum(m for m, _ in margins)
        count = sum(c for _, c in margins)
        return total / count
    e_p = energy_net.energy(z_o, z_u, o_idx, u_idx)
    e_n = energy_net.energy(z_o, z_n, o_idx, u_idx)
    return float(np.mean(e_n) - np.mean(e_p))


# ------------------------------------------------------ contrastive encoders


@dataclass
class ContrastiveEncoder:
    """Per-modality encoders into one shared embedding space, with a learnable
    similarity temperature."""

    nets: list
    embed_dim: int
    log_inv_temp: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        for k, net in enumerate(self.nets):
            if net.out_dim != self.embed_dim:
                raise DimensionError(f"encoder {k} maps to {net.out_dim}, expected {self.embed_dim}")
        if self.log_inv_temp is None:
            self.log_inv_temp = np.array([np.log(1.0 / 0.07)])

    @classmethod
    def create(cls, data_dims: Sequence[int], embed_dim: int, hidden: Sequence[int],
               seed: int, *, activation: str = "relu") -> "ContrastiveEncoder":
        nets = [
            DenseNet.create([d, *hidden, embed_dim], activation, child_rng(seed, f"contrastive-{k}"))
            for k, d in enumerate(data_dims)
        ]
        return cls(nets=nets, embed_dim=embed_dim)

    @property
    def temperature(self) -> float:
        return float(np.exp(-self.log_inv_temp[0]))

    def embed(self, x: np.ndarray, modality: int) -> np.ndarray:
        return self.nets[modality].forward(x)


def _l2_normalize(a: np.ndarray):
    norms = np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    return a / norms, norms


def contrastive_loss(
    encoders: ContrastiveEncoder,
    modality_batches: Sequence[np.ndarray],
    rng: np.random.Generator,
    pair: Optional[tuple] = None,
):
    """Symmetric in-batch objective over one random modality pair.

    Cosine similarities between the two modalities' embeddings, scaled by the
    learnable inverse temperature, feed a row- and column-wise cross entropy
    whose targets are the matched pairs. A batch of identical embeddings
    scores ln(batch size).

    Returns (loss, {net index: gradient}, temperature gradient).
    """
    b = modality_batches[0].shape[0]
    if b < 2:
        raise ConfigError("contrastive loss needs a batch of at least 2 (no negatives)")
    n_mod = len(modality_batches)
    if pair is None:
        a_k = int(rng.integers(n_mod))
        b_k = int(rng.integers(n_mod - 1))
        b_k = b_k + 1 if b_k >= a_k else b_k
    else:
        a_k, b_k = pair
        if a_k == b_k:
            raise ConfigError("modality pair must be distinct")

    net_a, net_b = encoders.nets[a_k], encoders.nets[b_k]
    ea, cache_a = net_a.forward(np.asarray(modality_batches[a_k], dtype=np.float64), want_cache=True)
    eb, cache_b = net_b.forward(np.asarray(modality_batches[b_k], dtype=np.float64), want_cache=True)
    a_hat, a_norm = _l2_normalize(ea)
    b_hat, b_norm = _l2_normalize(eb)
    scale = float(np.exp(encoders.log_inv_temp[0]))
    sims = a_hat @ b_hat.T
    logits = scale * sims

    # row-wise and column-wise cross entropy against the diagonal
    row_max = logits.max(axis=1, keepdims=True)
    p = np.exp(logits - row_max)
    p /= p.sum(axis=1, keepdims=True)
    col_max = logits.max(axis=0, keepdims=True)
    q = np.exp(logits - col_max)
    q /= q.sum(axis=0, keepdims=True)
    diag = np.arange(b)
    loss = 0.5 * float(
        -np.mean(np.log(np.maximum(p[diag, diag], 1e-300)))
        - np.mean(np.log(np.maximum(q[diag, diag], 1e-300)))
    )
    if not np.isfinite(loss):
        raise NumericError("non-finite contrastive loss")

    eye = np.eye(b)
    d_logits = 0.5 * ((p - eye) + (q - eye)) / b
    temp_grad = np.array([scale * float(np.sum(d_logits * sims))])
    d_a_hat = scale * (d_logits @ b_hat)
    d_b_hat = scale * (d_logits.T @ a_hat)
    d_ea = (d_a_hat - (d_a_hat * a_hat).sum(axis=1, keepdims=True) * a_hat) / a_norm
    d_eb = (d_b_hat - (d_b_hat * b_hat).sum(axis=1, keepdims=True) * b_hat) / b_norm
    g_a, _ = net_a.backward(d_ea, cache_a)
    g_b, _ = net_b.backward(d_eb, cache_b)
    return loss, {a_k: g_a, b_k: g_b}, temp_grad


def train_contrastive(
    encoders: ContrastiveEncoder,
    dataset: Dataset,
    *,
    epochs: int = 30,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
) -> ContrastiveEncoder:
    rng = child_rng(seed, "contrastive-train")
    opts = [Adam(lr, net.n_params) for net in encoders.nets]
    opt_temp = Adam(lr, 1)
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n - 1, batch_size):
            rows = order[start : start + batch_size]
            if rows.size < 2:
                continue
            batches = [m[rows].astype(np.float64) for m in dataset.modalities]
            _, grads, temp_grad = contrastive_loss(encoders, batches, rng)
            for k, g in grads.items():
                opts[k].step(encoders.nets[k].params, g)
            opt_temp.step(encoders.log_inv_temp, temp_grad)
    return encoders


def condition_embedding(
    encoders: ContrastiveEncoder,
    observed: dict,
    n_modalities: Optional[int] = None,
) -> np.ndarray:
    """Pooled conditioning vector from the observed modalities.

    `observed` maps modality index -> observation array ((d_k,) or (B, d_k)).
    The embeddings are averaged and the mean L2-normalized, so the result is
    invariant to the order of the observed set. Unconditional sampling passes
    a zero vector instead of calling this.
    """
    if not observed:
        raise ConfigError("condition embedding needs at least one observed modality")
    embs = []
    for k in sorted(observed):
        embs.append(np.atleast_2d(encoders.embed(np.asarray(observed[k], dtype=np.float64), k)))
    mean = np.mean(embs, axis=0)
    out, _ = _l2_normalize(mean)
    return out[0] if np.asarray(observed[min(observed)]).ndim == 1 else out
