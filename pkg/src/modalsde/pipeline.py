"""Stage orchestration: data -> autoencoders -> score -> guidance -> samples
-> metrics -> report, all under one run directory.

Every stage writes its artifacts plus a `<stage>.done.json` marker holding
the config hash; a stage whose marker matches is skipped (`force=True`
reruns it), and a marker with a different hash aborts the run rather than
mixing incompatible artifacts. Stages never run their upstreams implicitly:
a missing prerequisite is an error naming the stage to run first.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .autoencoders import (
    FinetuneConfig,
    ModalityRAE,
    ModalityVAE,
    decode,
    encode,
    encode_dataset,
    finetune_decoders,
    train_autoencoder,
)
from .config import RunConfig, write_config
from .data import (
    Dataset,
    GaussianJointSpec,
    SplitDatasets,
    ToyDigitSpec,
    gen_gaussian_joint,
    gen_toy_digits,
    read_dataset,
    write_dataset,
)
from .errors import ConfigError, FormatError
from .guidance import (
    ContrastiveEncoder,
    EnergyNetwork,
    condition_embedding,
    ebm_margin,
    train_contrastive,
    train_ebm,
)
from .metrics import (
    EvalClassifier,
    MetricReport,
    conditional_coherence,
    frechet_distance,
    mode_coverage,
    train_classifier,
    unconditional_coherence,
)
from .rng import child_rng, child_seed
from .sampler import ModalityMask, SamplerConfig, pc_sample_batch
from .score import DSMConfig, ScoreNetwork, train_score
from .sde import BlockLayout, VPSDESchedule

STAGES = ("gen-data", "train-ae", "train-score", "train-guidance", "sample", "eval", "report")

_STAGE_PREREQS = {
    "gen-data": (),
    "train-ae": ("gen-data",),
    "train-score": ("train-ae",),
    "train-guidance": ("train-ae",),
    "sample": ("train-score",),
    "eval": ("sample",),
    "report": ("eval",),
}


# ----------------------------------------------------------- run bookkeeping


def _marker_path(run_dir: Path, stage: str) -> Path:
    return run_dir / f"{stage}.done.json"


def _write_marker(run_dir: Path, stage: str, cfg: RunConfig, artifacts: list) -> None:
    payload = {"stage": stage, "config_hash": cfg.config_hash, "artifacts": sorted(artifacts)}
    _marker_path(run_dir, stage).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_sidecar(path: Path, cfg: RunConfig, stage: str) -> None:
    meta = {"config_hash": cfg.config_hash, "stage": stage, "seed": cfg.seed}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def check_stage(run_dir: Path, stage: str, cfg: RunConfig) -> str:
    """'missing', 'match', or raise on a config-hash conflict."""
    marker = _marker_path(run_dir, stage)
    if not marker.exists():
        return "missing"
    recorded = json.loads(marker.read_text()).get("config_hash")
    if recorded != cfg.config_hash:
        raise ConfigError(
            f"{run_dir} holds artifacts of config {recorded}, current config is "
            f"{cfg.config_hash}; refusing to mix runs (use a fresh directory)"
        )
    return "match"


def _require(run_dir: Path, cfg: RunConfig, stage: str) -> None:
    for upstream in _STAGE_PREREQS[stage]:
        if check_stage(run_dir, upstream, cfg) == "missing":
            raise ConfigError(f"stage {stage!r} needs artifacts from {upstream!r}: run {upstream} first")


# ------------------------------------------------------------ model plumbing


def _dataset_spec(cfg: RunConfig):
    ds = cfg.dataset
    if ds.kind == "gaussian":
        return GaussianJointSpec(ds.n_modalities, ds.dim, ds.correlation, ds.observation_noise)
    return ToyDigitSpec(
        n_modalities=ds.n_modalities, side=ds.side, n_classes=ds.n_classes,
        n_train=ds.n_train, n_val=ds.n_val, n_test=ds.n_test, jitter=ds.jitter,
    )


def _schedule(cfg: RunConfig) -> VPSDESchedule:
    s = cfg.schedule
    return VPSDESchedule(s.beta_min, s.beta_max, s.n_steps)


def _sampler_config(cfg: RunConfig, **overrides) -> SamplerConfig:
    s = cfg.sampler
    kwargs = dict(
        n_steps=s.n_steps or None, corrector_steps=s.corrector_steps, snr=s.snr,
        guidance_scale=s.guidance_scale, guidance_mode=s.guidance_mode, hold_clean=s.hold_clean,
    )
    kwargs.update(overrides)
    return SamplerConfig(**kwargs)


def load_splits(run_dir: Path) -> SplitDatasets:
    return SplitDatasets(
        train=read_dataset(run_dir / "data_train.sbmd"),
        val=read_dataset(run_dir / "data_val.sbmd"),
        test=read_dataset(run_dir / "data_test.sbmd"),
    )


def _build_autoencoder(cfg: RunConfig, data_dim: int, seed: int):
    ae = cfg.autoencoder
    if ae.kind == "vae":
        return ModalityVAE.create(
            data_dim, ae.latent_dim, ae.hidden, seed,
            beta=ae.beta, prior_std=ae.prior_std, likelihood=ae.likelihood,
        )
    return ModalityRAE.create(
        data_dim, ae.latent_dim, ae.hidden, seed,
        latent_penalty=ae.latent_penalty, decoder_noise_std=ae.decoder_noise_std,
    )


def save_autoencoders(path, cfg: RunConfig, models: list) -> None:
    nets, extra = {}, {}
    for k, model in enumerate(models):
        nets[f"enc_{k}"] = model.encoder
        nets[f"dec_{k}"] = model.decoder
    meta = {
        "kind": cfg.autoencoder.kind,
        "latent_dim": cfg.autoencoder.latent_dim,
        "beta": cfg.autoencoder.beta,
        "prior_std": cfg.autoencoder.prior_std,
        "likelihood": cfg.autoencoder.likelihood,
        "latent_penalty": cfg.autoencoder.latent_penalty,
        "decoder_noise_std": cfg.autoencoder.decoder_noise_std,
        "n_modalities": len(models),
    }
    extra["meta"] = json.dumps(meta, sort_keys=True).encode()
    extra["config_hash"] = cfg.config_hash.encode()
    ckpt.write_checkpoint(path, nets, extra=extra)


def load_autoencoders(path) -> list:
    sections = ckpt.read_sections(path)
    meta = json.loads(sections["meta"].decode())
    models = []
    for k in range(meta["n_modalities"]):
        enc = ckpt.net_from_sections(sections, f"enc_{k}")
        dec = ckpt.net_from_sections(sections, f"dec_{k}")
        if meta["kind"] == "vae":
            models.append(ModalityVAE(enc, dec, meta["latent_dim"], beta=meta["beta"],
                                      prior_std=meta["prior_std"], likelihood=meta["likelihood"]))
        else:
            models.append(ModalityRAE(enc, dec, meta["latent_dim"],
                                      latent_penalty=meta["latent_penalty"],
                                      decoder_noise_std=meta["decoder_noise_std"]))
    return models


def save_score(path, cfg: RunConfig, score: ScoreNetwork) -> None:
    header = struct.pack("<ddI", score.schedule.beta_min, score.schedule.beta_max,
                         score.schedule.n_steps)
    meta = {"latent_dim": score.latent_dim, "time_dim": score.time_dim, "cond_dim": score.cond_dim}
    blob_path = Path(path)
    tmp = blob_path.with_suffix(".body")
    ckpt.write_checkpoint(
        tmp, {"score": score.net},
        extra={"meta": json.dumps(meta, sort_keys=True).encode(),
               "config_hash": cfg.config_hash.encode()},
    )
    blob_path.write_bytes(header + tmp.read_bytes())
    tmp.unlink()


def load_score(path) -> ScoreNetwork:
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise FormatError(f"{path}: truncated score checkpoint")
    beta_min, beta_max, n_steps = struct.unpack_from("<ddI", data, 0)
    tmp = Path(path).with_suffix(".body_read")
    tmp.write_bytes(data[20:])
    try:
        sections = ckpt.read_sections(tmp)
    finally:
        tmp.unlink()
    meta = json.loads(sections["meta"].decode())
    net = ckpt.net_from_sections(sections, "score")
    return ScoreNetwork(net, meta["latent_dim"], VPSDESchedule(beta_min, beta_max, n_steps),
                        meta["time_dim"], meta["cond_dim"])


def save_classifier(path, cfg: RunConfig, clf: EvalClassifier) -> None:
    ckpt.write_checkpoint(
        path, {"classifier": clf.net},
        extra={
            "meta": json.dumps({"n_classes": clf.n_classes,
                                "held_out_accuracy": clf.held_out_accuracy}).encode(),
            "config_hash": cfg.config_hash.encode(),
        },
    )


def load_classifier(path) -> EvalClassifier:
    sections = ckpt.read_sections(path)
    meta = json.loads(sections["meta"].decode())
    clf = EvalClassifier(ckpt.net_from_sections(sections, "classifier"), meta["n_classes"])
    clf.held_out_accuracy = meta["held_out_accuracy"]
    return clf


def save_guidance(path, cfg: RunConfig, energy: EnergyNetwork,
                  contrastive: ContrastiveEncoder) -> None:
    nets = dict(energy.all_nets())
    for k, net in enumerate(contrastive.nets):
        nets[f"contrastive_{k}"] = net
    meta = {
        "latent_dim": energy.latent_dim,
        "n_modalities": energy.n_modalities,
        "per_pair": energy.per_pair,
        "embed_dim": contrastive.embed_dim,
        "log_inv_temp": float(contrastive.log_inv_temp[0]),
    }
    ckpt.write_checkpoint(path, nets, extra={
        "meta": json.dumps(meta, sort_keys=True).encode(),
        "config_hash": cfg.config_hash.encode(),
    })


def load_guidance(path):
    sections = ckpt.read_sections(path)
    meta = json.loads(sections["meta"].decode())
    m = meta["n_modalities"]
    if meta["per_pair"]:
        pair_nets = {}
        for o in range(m):
            for u in range(m):
                if o != u:
                    pair_nets[(o, u)] = ckpt.net_from_sections(sections, f"energy_{o}_{u}")
        energy = EnergyNetwork(meta["latent_dim"], m, pair_nets=pair_nets)
    else:
        energy = EnergyNetwork(meta["latent_dim"], m, net=ckpt.net_from_sections(sections, "energy"))
    nets = [ckpt.net_from_sections(sections, f"contrastive_{k}") for k in range(m)]
    contrastive = ContrastiveEncoder(nets=nets, embed_dim=meta["embed_dim"],
                                     log_inv_temp=np.array([meta["log_inv_temp"]]))
    return energy, contrastive


# ------------------------------------------------------------------- stages


def stage_gen_data(cfg: RunConfig, run_dir: Path) -> list:
    spec = _dataset_spec(cfg)
    if isinstance(spec, GaussianJointSpec):
        ds = cfg.dataset
        splits = SplitDatasets(
            train=gen_gaussian_joint(spec, ds.n_train, child_seed(cfg.seed, "data-train")),
            val=gen_gaussian_joint(spec, ds.n_val, child_seed(cfg.seed, "data-val")),
            test=gen_gaussian_joint(spec, ds.n_test, child_seed(cfg.seed, "data-test")),
        )
    else:
        splits = gen_toy_digits(spec, child_seed(cfg.seed, "data"))
    out = []
    for name, dataset in (("train", splits.train), ("val", splits.val), ("test", splits.test)):
        path = run_dir / f"data_{name}.sbmd"
        write_dataset(dataset, path)
        _write_sidecar(path, cfg, "gen-data")
        out.append(path.name)
    return out


def stage_train_ae(cfg: RunConfig, run_dir: Path) -> list:
    splits = load_splits(run_dir)
    models = []
    curve_path = run_dir / "ae_curves.csv"
    if curve_path.exists():
        curve_path.unlink()
    for k in range(splits.train.n_modalities):
        model = _build_autoencoder(cfg, splits.train.dims[k], child_seed(cfg.seed, f"ae-init-{k}"))
        train_autoencoder(
            model, splits.train.modalities[k], splits.val.modalities[k],
            epochs=cfg.autoencoder.epochs, batch_size=cfg.autoencoder.batch_size,
            lr=cfg.autoencoder.lr, seed=child_seed(cfg.seed, f"ae-train-{k}"),
            curve_path=curve_path,
        )
        models.append(model)
    ae_path = run_dir / "ae.sbmc"
    save_autoencoders(ae_path, cfg, models)
    _write_sidecar(ae_path, cfg, "train-ae")
    artifacts = [ae_path.name, curve_path.name]
    if cfg.dataset.kind == "toy_digits":
        clf = EvalClassifier.create(splits.train.dims[0], cfg.dataset.n_classes,
                                    cfg.eval.classifier_hidden, child_seed(cfg.seed, "clf-init"))
        clf = train_classifier(clf, splits.train, splits.val,
                               epochs=cfg.eval.classifier_epochs,
                               seed=child_seed(cfg.seed, "clf-train"))
        clf_path = run_dir / "classifier.sbmc"
        save_classifier(clf_path, cfg, clf)
        _write_sidecar(clf_path, cfg, "train-ae")
        artifacts.append(clf_path.name)
    return artifacts


def materialize_latents(cfg: RunConfig, run_dir: Path, split: str = "train"):
    splits = load_splits(run_dir)
    models = load_autoencoders(run_dir / "ae.sbmc")
    dataset = getattr(splits, split)
    latents, layout = encode_dataset(models, dataset, cfg.autoencoder.encode_mode,
                                     child_seed(cfg.seed, f"encode-{split}"))
    return latents, layout, dataset, models


def stage_train_score(cfg: RunConfig, run_dir: Path) -> list:
    latents, layout, dataset, models = materialize_latents(cfg, run_dir)
    schedule = _schedule(cfg)
    sc = cfg.score
    mask_stream = None
    if sc.mask_fraction > 0.0:
        mask_rng = child_rng(cfg.seed, "score-mask-stream")
        mask_stream = mask_rng.random((latents.shape[0], layout.n_modalities)) >= sc.mask_fraction
        all_missing = ~mask_stream.any(axis=1)
        mask_stream[all_missing, 0] = True  # keep every row at least partly informative
    cond = None
    cond_dim = 0
    if sc.conditioned:
        guid_path = run_dir / "guidance.sbmc"
        if not guid_path.exists():
            raise ConfigError("conditioned score training needs guidance artifacts: run train-guidance first")
        _, contrastive = load_guidance(guid_path)
        cond_dim = contrastive.embed_dim
        cond = condition_embedding(
            contrastive, {k: dataset.modalities[k] for k in range(dataset.n_modalities)},
        )
    if sc.standardize:
        mu = latents.mean(axis=0)
        sd = latents.std(axis=0)
        latents = (latents - mu) / np.maximum(sd, 1e-8)
    score = ScoreNetwork.create(
        layout.total_dim, sc.hidden, child_seed(cfg.seed, "score-init"),
        schedule=schedule, time_dim=sc.time_dim, cond_dim=cond_dim,
    )
    curve_path = run_dir / "score_curves.csv"
    if curve_path.exists():
        curve_path.unlink()
    dsm_cfg = DSMConfig(
        batch_size=sc.batch_size, epochs=sc.epochs, lr=sc.lr, lr_decay=sc.lr_decay,
        ema_decay=sc.ema_decay, t_min=sc.t_min, val_fraction=sc.val_fraction,
        cond_dropout=sc.cond_dropout,
    )
    train_score(score, schedule, latents, dsm_cfg, child_seed(cfg.seed, "score-train"),
                mask_stream=mask_stream, layout=layout, cond=cond, curve_path=curve_path)
    path = run_dir / "score.sbmc"
    save_score(path, cfg, score)
    _write_sidecar(path, cfg, "train-score")
    return [path.name, curve_path.name]


def stage_train_guidance(cfg: RunConfig, run_dir: Path) -> list:
    latents, layout, dataset, models = materialize_latents(cfg, run_dir)
    schedule = _schedule(cfg)
    g = cfg.guidance
    energy = EnergyNetwork.create(layout.dims[0], layout.n_modalities, g.energy_hidden,
                                  child_seed(cfg.seed, "energy-init"), per_pair=g.per_pair)
    train_ebm(energy, latents, dataset.labels, layout, schedule,
              epochs=g.energy_epochs, batch_size=g.energy_batch_size, lr=g.energy_lr,
              seed=child_seed(cfg.seed, "energy-train"))
    contrastive = ContrastiveEncoder.create(dataset.dims, g.embed_dim, g.contrastive_hidden,
                                            child_seed(cfg.seed, "contrastive-init"))
    train_contrastive(contrastive, dataset, epochs=g.contrastive_epochs,
                      batch_size=g.contrastive_batch_size, lr=g.contrastive_lr,
                      seed=child_seed(cfg.seed, "contrastive-train"))
    path = run_dir / "guidance.sbmc"
    save_guidance(path, cfg, energy, contrastive)
    _write_sidecar(path, cfg, "train-guidance")
    return [path.name]


def _decode_block(models, layout: BlockLayout, z: np.ndarray) -> list:
    return [decode(models[k], z[:, layout.slice_of(k)]) for k in range(layout.n_modalities)]


def _write_samples(run_dir: Path, cfg: RunConfig, name: str, models, layout,
                   z: np.ndarray, labels: np.ndarray, n_classes: int) -> list:
    decoded = _decode_block(models, layout, z)
    dataset = Dataset(
        modalities=[np.asarray(d, dtype=np.float32) for d in decoded],
        labels=labels, n_classes=n_classes,
    )
    path = run_dir / f"{name}.sbmd"
    write_dataset(dataset, path)
    _write_sidecar(path, cfg, "sample")
    latent_ds = Dataset(modalities=[np.asarray(z, dtype=np.float32)], labels=labels,
                        n_classes=n_classes)
    lat_path = run_dir / f"{name}.latents.sbmd"
    write_dataset(latent_ds, lat_path)
    return [path.name, lat_path.name]


def stage_sample(cfg: RunConfig, run_dir: Path) -> list:
    splits = load_splits(run_dir)
    models = load_autoencoders(run_dir / "ae.sbmc")
    score = load_score(run_dir / "score.sbmc")
    schedule = _schedule(cfg)
    layout = BlockLayout(tuple(m.latent_dim for m in models))
    n_mod = layout.n_modalities
    artifacts = []

    energy = contrastive = None
    guid_path = run_dir / "guidance.sbmc"
    if guid_path.exists():
        energy, contrastive = load_guidance(guid_path)

    # unconditional draws
    n_uncond = cfg.eval.n_unconditional
    mask = ModalityMask((False,) * n_mod)
    z = pc_sample_batch(score, schedule, _sampler_config(cfg, guidance_mode="none"),
                        mask, layout, seed=child_seed(cfg.seed, "sample-uncond"), n=n_uncond)
    labels = np.zeros(n_uncond, dtype=np.int64)
    artifacts += _write_samples(run_dir, cfg, "samples_uncond", models, layout, z,
                                labels, splits.train.n_classes)

    if cfg.dataset.kind == "toy_digits":
        test = splits.test
        n_eval = min(cfg.eval.n_conditional, len(test))
        for n_obs in range(1, n_mod):
            cond_mask = ModalityMask(tuple([True] * n_obs + [False] * (n_mod - n_obs)))
            obs = np.zeros((n_eval, layout.total_dim))
            for j in range(n_obs):
                obs[:, layout.slice_of(j)] = encode(models[j], test.modalities[j][:n_eval], "mean")
            for s in range(cfg.eval.coherence_seeds):
                zc = pc_sample_batch(
                    score, schedule, _sampler_config(cfg, guidance_mode="none"),
                    cond_mask, layout, observed_latents=obs,
                    seed=child_seed(cfg.seed, f"sample-cond-{n_obs}-{s}"), n=n_eval,
                )
                artifacts += _write_samples(run_dir, cfg, f"samples_cond_obs{n_obs}_seed{s}",
                                            models, layout, zc, test.labels[:n_eval],
                                            test.n_classes)
        # guidance / step-count study on the 1-observed case
        if energy is not None:
            cond_mask = ModalityMask(tuple([True] + [False] * (n_mod - 1)))
            obs = np.zeros((n_eval, layout.total_dim))
            obs[:, layout.slice_of(0)] = encode(models[0], test.modalities[0][:n_eval], "mean")
            for steps in cfg.eval.guidance_steps:
                for guided in (False, True):
                    scfg = _sampler_config(
                        cfg, n_steps=steps,
                        guidance_mode="energy" if guided else "none",
                    )
                    for s in range(cfg.eval.coherence_seeds):
                        zg = pc_sample_batch(
                            score, schedule, scfg, cond_mask, layout, observed_latents=obs,
                            energy_net=energy if guided else None,
                            seed=child_seed(cfg.seed, f"sample-guid-{steps}-{guided}-{s}"),
                            n=n_eval,
                        )
                        tag = f"samples_guid_steps{steps}_{'on' if guided else 'off'}_seed{s}"
                        artifacts += _write_samples(run_dir, cfg, tag, models, layout, zg,
                                                    test.labels[:n_eval], test.n_classes)
    else:
        # oracle conditional draws over the conditioning grid
        test = splits.test
        n_draws = cfg.eval.oracle_draws
        per_point = max(1, n_draws // len(cfg.eval.oracle_grid))
        cond_mask = ModalityMask(tuple([True] + [False] * (n_mod - 1)))
        for gi, g_val in enumerate(cfg.eval.oracle_grid):
            obs_x = np.full((per_point, splits.train.dims[0]), g_val)
            obs = np.zeros((per_point, layout.total_dim))
            obs[:, layout.slice_of(0)] = encode(models[0], obs_x, "mean")
            zc = pc_sample_batch(
                score, schedule, _sampler_config(cfg, guidance_mode="none"), cond_mask, layout,
                observed_latents=obs, seed=child_seed(cfg.seed, f"sample-grid-{gi}"),
                n=per_point,
            )
            artifacts += _write_samples(run_dir, cfg, f"samples_grid_{gi}", models, layout,
                                        zc, np.zeros(per_point, dtype=np.int64), 1)
    return artifacts


def stage_eval(cfg: RunConfig, run_dir: Path) -> list:
    values: dict = {}
    counts: dict = {}
    if cfg.dataset.kind == "toy_digits":
        splits = load_splits(run_dir)
        clf = load_classifier(run_dir / "classifier.sbmc")
        n_mod = splits.train.n_modalities
        values["classifier_accuracy"] = clf.held_out_accuracy

        uncond = read_dataset(run_dir / "samples_uncond.sbmd")
        hist, all_m = unconditional_coherence(clf, uncond.modalities)
        for i, h in enumerate(hist, start=1):
            values[f"uncond_hist_{i}"] = float(h)
        values["uncond_all_match"] = all_m
        counts["uncond_all_match"] = len(uncond)
        cov_counts, lo, hi = mode_coverage(clf, uncond.modalities[0])
        for c, cnt in enumerate(cov_counts):
            values[f"mode_count_{c}"] = float(cnt)
        values["mode_share_min"] = lo
        values["mode_share_max"] = hi

        for n_obs in range(1, n_mod):
            cohs = []
            for s in range(cfg.eval.coherence_seeds):
                gen = read_dataset(run_dir / f"samples_cond_obs{n_obs}_seed{s}.sbmd")
                cohs.append(conditional_coherence(clf, gen.modalities[n_mod - 1], gen.labels))
            values[f"cond_coherence_obs{n_obs}"] = float(np.mean(cohs))
            values[f"cond_coherence_obs{n_obs}_se"] = float(np.std(cohs) / np.sqrt(len(cohs)))
            counts[f"cond_coherence_obs{n_obs}"] = len(gen) * len(cohs)

        if (run_dir / "guidance.sbmc").exists():
            for steps in cfg.eval.guidance_steps:
                for guided in ("off", "on"):
                    cohs = []
                    for s in range(cfg.eval.coherence_seeds):
                        name = run_dir / f"samples_guid_steps{steps}_{guided}_seed{s}.sbmd"
                        gen = read_dataset(name)
                        cohs.append(conditional_coherence(clf, gen.modalities[n_mod - 1], gen.labels))
                    values[f"guid_coherence_steps{steps}_{guided}"] = float(np.mean(cohs))
                    values[f"guid_coherence_steps{steps}_{guided}_se"] = float(
                        np.std(cohs) / np.sqrt(len(cohs)))

        # generative quality of the last modality, conditioned on all others
        models = load_autoencoders(run_dir / "ae.sbmc")
        layout = BlockLayout(tuple(m.latent_dim for m in models))
        gen = read_dataset(run_dir / f"samples_cond_obs{n_mod - 1}_seed0.sbmd")
        real_feats = clf.features(splits.test.modalities[n_mod - 1][: len(gen)])
        gen_feats = clf.features(gen.modalities[n_mod - 1])
        values["frechet_last_modality"] = frechet_distance(real_feats, gen_feats)
        counts["frechet_last_modality"] = len(gen)

        # latent recovery: cosine between true encodings and conditional draws
        from .metrics import latent_cosine_similarity

        true_lat, _ = encode_dataset(models, splits.test.subset(np.arange(len(gen))), "mean",
                                     child_seed(cfg.seed, "eval-encode"))
        rec_lat = read_dataset(run_dir / f"samples_cond_obs{n_mod - 1}_seed0.latents.sbmd")
        per_mod, overall, _ = latent_cosine_similarity(true_lat, rec_lat.modalities[0], layout)
        values["latent_cosine_last"] = per_mod[n_mod - 1]
        values["latent_cosine_avg"] = overall
    else:
        splits = load_splits(run_dir)
        models = load_autoencoders(run_dir / "ae.sbmc")
        layout = BlockLayout(tuple(m.latent_dim for m in models))
        rho = cfg.dataset.correlation
        worst_mean = worst_var = 0.0
        for gi, g_val in enumerate(cfg.eval.oracle_grid):
            gen = read_dataset(run_dir / f"samples_grid_{gi}.sbmd")
            x_u = gen.modalities[1][:, 0].astype(np.float64)
            mean_err = abs(float(x_u.mean()) - rho * g_val)
            var_err = abs(float(x_u.var()) - (1.0 - rho * rho))
            values[f"oracle_mean_g{gi}"] = float(x_u.mean())
            values[f"oracle_var_g{gi}"] = float(x_u.var())
            worst_mean = max(worst_mean, mean_err)
            worst_var = max(worst_var, var_err)
            counts[f"oracle_mean_g{gi}"] = len(gen)
        values["oracle_worst_mean_err"] = worst_mean
        values["oracle_worst_var_err"] = worst_var
        uncond = read_dataset(run_dir / "samples_uncond.latents.sbmd")
        lat = uncond.modalities[0].astype(np.float64)
        cov = np.cov(lat.T)
        for i in range(min(2, cov.shape[0])):
            for j in range(min(2, cov.shape[0])):
                values[f"uncond_cov_{i}{j}"] = float(cov[i, j])

    report = MetricReport(values=values, sample_counts=counts, seed=cfg.seed,
                          config_hash=cfg.config_hash)
    csv_path = run_dir / "eval_report.csv"
    report.write_csv(csv_path)
    report.write_json(run_dir / "eval_report.json")
    _write_sidecar(csv_path, cfg, "eval")
    return [csv_path.name, "eval_report.json"]


def stage_report(cfg: RunConfig, run_dir: Path) -> list:
    """Merge eval output into plot-ready (x, y, series) tables."""
    report = json.loads((run_dir / "eval_report.json").read_text())
    values = report["values"]
    out_dir = run_dir / "report"
    out_dir.mkdir(exist_ok=True)
    artifacts = []

    def write_table(name: str, header: str, rows: list) -> None:
        path = out_dir / name
        path.write_text("\n".join([header] + rows) + "\n" if rows else header + "\n")
        artifacts.append(f"report/{name}")

    if cfg.dataset.kind == "toy_digits":
        n_mod = cfg.dataset.n_modalities
        rows = []
        for n_obs in range(1, n_mod):
            key = f"cond_coherence_obs{n_obs}"
            if key in values:
                rows.append(f"{n_obs},{values[key]:.6f},{values[key + '_se']:.6f}")
        write_table("coherence_vs_observed.csv", "observed,coherence,se", rows)

        rows = []
        for steps in cfg.eval.guidance_steps:
            for guided in ("off", "on"):
                key = f"guid_coherence_steps{steps}_{guided}"
                if key in values:
                    rows.append(f"{steps},{guided},{values[key]:.6f},{values[key + '_se']:.6f}")
        if rows:
            write_table("coherence_vs_guidance.csv", "steps,guidance,coherence,se", rows)
        else:
            write_table("coherence_vs_guidance.csv", "steps,guidance,coherence,se  # guidance stage absent", [])

        rows = [f"{i},{values[f'uncond_hist_{i}']:.6f}" for i in range(1, n_mod + 1)
                if f"uncond_hist_{i}" in values]
        write_table("unconditional_coherence_hist.csv", "agreeing_modalities,fraction", rows)

        rows = [f"{c},{int(values[f'mode_count_{c}'])}" for c in range(cfg.dataset.n_classes)
                if f"mode_count_{c}" in values]
        write_table("mode_coverage.csv", "class,count", rows)
    else:
        rows = []
        for gi, g_val in enumerate(cfg.eval.oracle_grid):
            if f"oracle_mean_g{gi}" in values:
                rows.append(f"{g_val},{values[f'oracle_mean_g{gi}']:.6f},{values[f'oracle_var_g{gi}']:.6f}")
        write_table("oracle_conditional_moments.csv", "observed_value,mean,variance", rows)
    return artifacts


_STAGE_FNS = {
    "gen-data": stage_gen_data,
    "train-ae": stage_train_ae,
    "train-score": stage_train_score,
    "train-guidance": stage_train_guidance,
    "sample": stage_sample,
    "eval": stage_eval,
    "report": stage_report,
}


def run_stage(stage: str, cfg: RunConfig, *, force: bool = False) -> Path:
    """Run one pipeline stage under the config's output directory.

    Skips the stage when its marker matches the config hash (idempotent);
    `force` reruns it. Raises ConfigError on missing upstream artifacts or a
    config-hash conflict.
    """
    if stage not in _STAGE_FNS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = run_dir / "config.toml"
    if not snapshot.exists():
        write_config(cfg, snapshot)
    state = check_stage(run_dir, stage, cfg)
    if state == "match" and not force:
        return run_dir
    _require(run_dir, cfg, stage)
    artifacts = _STAGE_FNS[stage](cfg, run_dir)
    _write_marker(run_dir, stage, cfg, artifacts)
    return run_dir


def run_pipeline(cfg: RunConfig, *, force: bool = False, through: str = "report") -> Path:
    """Run stages in order up to and including `through`."""
    idx = STAGES.index(through)
    for stage in STAGES[: idx + 1]:
        if stage == "train-guidance" and cfg.dataset.kind != "toy_digits":
            continue
        run_stage(stage, cfg, force=force)
    return Path(cfg.out_dir)


# ------------------------------------------------------------ verify-oracle


@dataclass
class OracleCheck:
    name: str
    measured: float
    expected: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return abs(self.measured - self.expected) < self.tolerance


def verify_oracle(cfg: RunConfig, *, force: bool = False, stage_only: bool = False) -> list:
    """Train the Gaussian-oracle pipeline end to end and check the conditional
    moments against the closed-form bivariate conditioning.

    Returns the list of `OracleCheck`s (the CLI renders them and sets the
    exit status). With `stage_only`, no stages are run; existing artifacts
    are evaluated as-is.
    """
    if cfg.dataset.kind != "gaussian":
        raise ConfigError("verify-oracle needs a gaussian dataset config")
    if not stage_only:
        for stage in ("gen-data", "train-ae", "train-score", "sample", "eval"):
            run_stage(stage, cfg, force=force)
    run_dir = Path(cfg.out_dir)
    report = json.loads((run_dir / "eval_report.json").read_text())
    values = report["values"]
    rho = cfg.dataset.correlation
    scale = 2.0 if cfg.score.mask_fraction > 0.0 else 1.0
    checks = []
    for gi, g_val in enumerate(cfg.eval.oracle_grid):
        checks.append(OracleCheck(f"E[x_u | x_o={g_val}]", values[f"oracle_mean_g{gi}"],
                                  rho * g_val, 0.1 * scale))
        checks.append(OracleCheck(f"Var[x_u | x_o={g_val}]", values[f"oracle_var_g{gi}"],
                                  1.0 - rho * rho, 0.1 * scale))
    return checks
