"""Run configuration: TOML parsing, strict validation, canonical hashing.

A run is described by one TOML file with nested tables (dataset,
autoencoder, schedule, score, sampler, guidance, eval, finetune). Unknown
keys are rejected outright; a typo that silently fell back to a default
would invalidate a multi-stage run in ways that surface hours later. Every
artifact a run writes carries `config_hash`, the first 12 hex digits of the
sha256 of the canonically serialized config, so stages refuse to mix
artifacts from different configurations.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError


@dataclass
class DatasetSection:
    kind: str = "gaussian"            # gaussian | toy_digits
    n_modalities: int = 2
    dim: int = 1                      # gaussian: per-modality dimension
    correlation: float = 0.8
    observation_noise: float = 0.0
    side: int = 12                    # toy_digits: image side length
    n_classes: int = 10
    jitter: float = 1.0
    n_train: int = 50000
    n_val: int = 2000
    n_test: int = 2000

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian", "toy_digits"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")


@dataclass
class AutoencoderSection:
    kind: str = "vae"                 # vae | rae
    latent_dim: int = 8
    hidden: list = field(default_factory=lambda: [256, 128])
    beta: float = 0.1
    prior_std: float = 1.0
    likelihood: str = "gaussian"
    latent_penalty: float = 1e-5      # rae
    decoder_noise_std: float = 0.1    # rae
    encode_mode: str = "sample"       # latents fed to the score model
    epochs: int = 60
    batch_size: int = 256
    lr: float = 1e-3

    def __post_init__(self) -> None:
        if self.kind not in ("vae", "rae"):
            raise ConfigError(f"unknown autoencoder kind {self.kind!r}")
        if self.encode_mode not in ("sample", "mean"):
            raise ConfigError(f"unknown encode mode {self.encode_mode!r}")


@dataclass
class ScheduleSection:
    beta_min: float = 0.1
    beta_max: float = 5.0
    n_steps: int = 100


@dataclass
class ScoreSection:
    hidden: list = field(default_factory=lambda: [256, 256, 256])
    time_dim: int = 32
    epochs: int = 300
    batch_size: int = 512
    lr: float = 6e-4
    lr_decay: float = 0.995
    ema_decay: float = 0.999
    t_min: float = 0.01
    val_fraction: float = 0.1
    standardize: bool = False
    mask_fraction: float = 0.0        # simulate incomplete data: P(modality missing)
    conditioned: bool = False         # feed the contrastive embedding to the net
    cond_dropout: float = 0.1

    def __post_init__(self) -> None:
        if not (0.0 <= self.mask_fraction < 1.0):
            raise ConfigError("mask_fraction must lie in [0, 1)")


@dataclass
class SamplerSection:
    n_steps: int = 0                  # 0: use the schedule's discretization
    corrector_steps: int = 2
    snr: float = 0.3
    guidance_scale: float = 1000.0
    guidance_mode: str = "none"
    hold_clean: bool = False


@dataclass
class GuidanceSection:
    energy_hidden: list = field(default_factory=lambda: [128, 128])
    energy_epochs: int = 40
    energy_batch_size: int = 128
    energy_lr: float = 1e-3
    per_pair: bool = False
    embed_dim: int = 16
    contrastive_hidden: list = field(default_factory=lambda: [128, 64])
    contrastive_epochs: int = 40
    contrastive_batch_size: int = 64
    contrastive_lr: float = 1e-3


@dataclass
class EvalSection:
    classifier_hidden: list = field(default_factory=lambda: [128, 64])
    classifier_epochs: int = 12
    n_conditional: int = 500
    n_unconditional: int = 10000
    coherence_seeds: int = 3
    guidance_steps: list = field(default_factory=lambda: [100, 1000])
    oracle_grid: list = field(default_factory=lambda: [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5])
    oracle_draws: int = 20000


@dataclass
class FinetuneSection:
    enabled: bool = False
    drop_prob: float = 0.5
    n_latent_samples: int = 1
    lr: float = 1e-4
    n_batches: int = 20
    batch_size: int = 32


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    score: ScoreSection = field(default_factory=ScoreSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    eval: EvalSection = field(default_factory=EvalSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "out_dir": self.out_dir}
        for name in ("dataset", "autoencoder", "schedule", "score", "sampler",
                     "guidance", "eval", "finetune"):
            section = getattr(self, name)
            out[name] = {f.name: getattr(section, f.name) for f in fields(section)}
        return out

    @property
    def config_hash(self) -> str:
        payload = self.to_dict()
        payload.pop("out_dir")  # where a run lives does not change what it computes
        canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


_SECTIONS = {
    "dataset": DatasetSection,
    "autoencoder": AutoencoderSection,
    "schedule": ScheduleSection,
    "score": ScoreSection,
    "sampler": SamplerSection,
    "guidance": GuidanceSection,
    "eval": EvalSection,
    "finetune": FinetuneSection,
}


def _build_section(cls, table: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {sorted(unknown)}")
    return cls(**table)


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    top_known = {"seed", "out_dir"} | set(_SECTIONS)
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs = {}
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    if "out_dir" in raw:
        kwargs["out_dir"] = str(raw["out_dir"])
    for name, cls in _SECTIONS.items():
        table = raw.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = _build_section(cls, table, name)
    return RunConfig(**kwargs)


def load_config(path, *, seed: Optional[int] = None, out_dir: Optional[str] = None) -> RunConfig:
    """Parse and validate a TOML run config; optional CLI overrides."""
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    cfg = config_from_dict(raw)
    if seed is not None:
        cfg.seed = int(seed)
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    return cfg


def write_config(cfg: RunConfig, path) -> None:
    """Serialize back to TOML (used to snapshot the effective config in a run)."""
    lines = [f"seed = {cfg.seed}", f'out_dir = "{cfg.out_dir}"', ""]
    for name in _SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, bool):
                rendered = "true" if value else "false"
            elif isinstance(value, str):
                rendered = f'"{value}"'
            elif isinstance(value, list):
                rendered = "[" + ", ".join(str(v) for v in value) + "]"
            else:
                rendered = repr(value)
            lines.append(f"{f.name} = {rendered}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
