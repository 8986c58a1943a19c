"""End-to-end commands over a resolved run config: dataset, training stages,
bundle assembly, evaluation, and robustness sweeps. The CLI, the experiment
scripts, and the acceptance suite all drive these functions."""

from __future__ import annotations

import dataclasses
import logging
import time
import zlib
from pathlib import Path

import numpy as np
import torch

from .checkpoints import load_checkpoint, load_module_arrays, save_module
from .configs import config_hash
from .embedder import EmbedderConfig, EmbeddingModel, train_fgsbir
from .evaluation import (
    EvalReport,
    compute_stats,
    embedder_feature_fn,
    fid,
    retrieval_acc,
    robustness_sweep,
    write_reports_jsonl,
    write_sweep_csv,
)
from .gan import (
    Discriminator,
    GanTrainConfig,
    GanTrainState,
    Generator,
    GeneratorConfig,
    gan_train_step,
)
from .imageops import photo_to_input, raster_to_input
from .losses import DiscriminatorPerceptual, LossWeights
from .mapper import AutoregressiveMapper, MapperConfig, TeacherMapper
from .pipeline import GenerateRequest, PipelineBundle, generate, synthesize_from_code
from .procgen import DatasetSpec, PairedExample, make_dataset, save_dataset
from .sketches import add_noise_strokes, partial_schedule, rasterize
from .training import (
    MapperTrainConfig,
    MapperTrainState,
    train_mapper,
    train_teacher,
)

logger = logging.getLogger("sketchgen")

__all__ = [
    "dataset_from_config",
    "run_make_dataset",
    "run_train_gan",
    "run_train_embedder",
    "run_train_teacher",
    "run_train_mapper",
    "load_bundle_from_workdir",
    "corrupted_generate",
    "run_evaluate",
    "run_sweep",
    "fresh_mapper",
]


def _workdir(cfg: dict) -> Path:
    wd = Path(cfg["workdir"])
    (wd / "checkpoints").mkdir(parents=True, exist_ok=True)
    (wd / "reports").mkdir(parents=True, exist_ok=True)
    (wd / "logs").mkdir(parents=True, exist_ok=True)
    return wd


def dataset_spec_from_config(cfg: dict) -> DatasetSpec:
    d = cfg["dataset"]
    return DatasetSpec(resolution=d["resolution"], train_count=d["train_count"],
                       test_count=d["test_count"], seed=d["seed"], deformation=d["deformation"])


def dataset_from_config(cfg: dict) -> tuple[list[PairedExample], list[PairedExample]]:
    """Deterministic in-memory dataset; commands re-synthesize instead of reloading PNGs."""
    return make_dataset(dataset_spec_from_config(cfg))


def run_make_dataset(cfg: dict) -> Path:
    wd = _workdir(cfg)
    train, test = dataset_from_config(cfg)
    save_dataset(train, wd / "dataset" / "train")
    manifest = save_dataset(test, wd / "dataset" / "test")
    logger.info("dataset written under %s", wd / "dataset")
    return manifest


def generator_config_from(cfg: dict) -> GeneratorConfig:
    g = dict(cfg["generator"])
    g["resolution"] = cfg["dataset"]["resolution"]
    return GeneratorConfig(**g)


def run_train_gan(cfg: dict, progress_every: int = 0) -> tuple[Path, Path]:
    """Adversarial pre-training on photos only; saves generator and discriminator."""
    wd = _workdir(cfg)
    train, _ = dataset_from_config(cfg)
    photos = torch.cat([photo_to_input(p.photo.pixels) for p in train])
    gan_cfg = cfg["gan"]
    state = GanTrainState.create(
        generator_config := generator_config_from(cfg),
        GanTrainConfig(lr=gan_cfg["lr"], betas=tuple(gan_cfg["betas"]),
                       r1_gamma=gan_cfg["r1_gamma"], batch_size=gan_cfg["batch_size"]),
        seed=gan_cfg["seed"],
    )
    n = photos.shape[0]
    t0 = time.monotonic()
    for step in range(gan_cfg["steps"]):
        idx = torch.randint(n, (gan_cfg["batch_size"],), generator=state.rng)
        state, losses = gan_train_step(photos[idx], state)
        if progress_every and (step + 1) % progress_every == 0:
            logger.info("gan step %d/%d d=%.3f g=%.3f r1=%.4f (%.1fs)",
                        step + 1, gan_cfg["steps"], losses["d_loss"], losses["g_loss"],
                        losses["r1"], time.monotonic() - t0)
    state.generator.freeze()
    g_path = save_module(wd / "checkpoints" / "generator.ckpt", "generator",
                         dataclasses.asdict(generator_config), state.generator)
    d_path = save_module(wd / "checkpoints" / "discriminator.ckpt", "discriminator",
                         dataclasses.asdict(generator_config), state.discriminator)
    logger.info("gan training done in %.1fs", time.monotonic() - t0)
    return g_path, d_path


def load_generator(path: str | Path) -> Generator:
    _, g_cfg, arrays, _ = load_checkpoint(path, "generator")
    gen = Generator(GeneratorConfig(**g_cfg))
    load_module_arrays(gen, arrays)
    gen.freeze()
    return gen


def load_discriminator(path: str | Path) -> Discriminator:
    _, g_cfg, arrays, _ = load_checkpoint(path, "discriminator")
    disc = Discriminator(GeneratorConfig(**g_cfg))
    load_module_arrays(disc, arrays)
    return disc


def run_train_embedder(cfg: dict) -> Path:
    wd = _workdir(cfg)
    train, _ = dataset_from_config(cfg)
    e = cfg["embedder"]
    config = EmbedderConfig(resolution=cfg["dataset"]["resolution"], embed_dim=e["embed_dim"],
                            channels=e["channels"], share_branches=e["share_branches"],
                            margin=e["margin"])
    model = train_fgsbir(train, epochs=e["epochs"], seed=e["seed"], config=config,
                         batch_size=e["batch_size"], lr=e["lr"])
    return save_module(wd / "checkpoints" / "embedder.ckpt", "embedder",
                       dataclasses.asdict(config), model, extra={"trained": True})


def load_embedder(path: str | Path) -> EmbeddingModel:
    _, e_cfg, arrays, extra = load_checkpoint(path, "embedder")
    model = EmbeddingModel(EmbedderConfig(**e_cfg))
    load_module_arrays(model, arrays)
    model.trained = bool(extra.get("trained", False))
    model.freeze()
    return model


def run_train_teacher(cfg: dict) -> Path:
    wd = _workdir(cfg)
    train, _ = dataset_from_config(cfg)
    generator = load_generator(wd / "checkpoints" / "generator.ckpt")
    phi = DiscriminatorPerceptual(load_discriminator(wd / "checkpoints" / "discriminator.ckpt"))
    t = cfg["teacher"]
    config = MapperConfig(resolution=cfg["dataset"]["resolution"],
                          latent_dim=cfg["generator"]["latent_dim"],
                          backbone_depth=t["backbone_depth"], in_channels=3)
    teacher = train_teacher([p.photo.pixels for p in train], generator, epochs=t["epochs"],
                            seed=t["seed"], config=config, lr=t["lr"],
                            batch_size=t["batch_size"], phi=phi)
    return save_module(wd / "checkpoints" / "teacher.ckpt", "teacher",
                       dataclasses.asdict(teacher.config), teacher)


def load_teacher(path: str | Path) -> TeacherMapper:
    _, t_cfg, arrays, _ = load_checkpoint(path, "teacher")
    teacher = TeacherMapper(MapperConfig(**t_cfg))
    load_module_arrays(teacher, arrays)
    teacher.freeze()
    return teacher


def mapper_config_from(cfg: dict) -> MapperConfig:
    m = cfg["mapper"]
    return MapperConfig(resolution=cfg["dataset"]["resolution"],
                        latent_dim=cfg["generator"]["latent_dim"],
                        backbone_depth=m["backbone_depth"], in_channels=1,
                        raw_gaussian_rows=m["raw_gaussian_rows"])


def fresh_mapper(cfg: dict, seed: int | None = None) -> AutoregressiveMapper:
    m = cfg["mapper"]
    with torch.random.fork_rng():
        torch.manual_seed(m["seed"] if seed is None else seed)
        return AutoregressiveMapper(mapper_config_from(cfg))


def run_train_mapper(cfg: dict, progress_every: int = 0) -> Path:
    """Sketch-mapper training against all frozen dependencies; assembles the bundle."""
    wd = _workdir(cfg)
    train, _ = dataset_from_config(cfg)
    generator = load_generator(wd / "checkpoints" / "generator.ckpt")
    teacher = load_teacher(wd / "checkpoints" / "teacher.ckpt")
    embedder = load_embedder(wd / "checkpoints" / "embedder.ckpt")
    phi = DiscriminatorPerceptual(load_discriminator(wd / "checkpoints" / "discriminator.ckpt"))
    m = cfg["mapper"]
    mapper = fresh_mapper(cfg)
    state = MapperTrainState.create(
        mapper, generator, teacher, embedder, phi,
        MapperTrainConfig(lr=m["lr"], batch_size=m["batch_size"], lookahead_k=m["lookahead_k"],
                          lookahead_alpha=m["lookahead_alpha"],
                          weights=LossWeights(**m["weights"]), seed=m["seed"],
                          frozen_check_every=m["frozen_check_every"]),
    )
    t0 = time.monotonic()
    train_mapper(train, state, steps=m["steps"],
                 log_every=progress_every, log_path=wd / "logs" / "mapper_train.jsonl")
    logger.info("mapper training done in %.1fs", time.monotonic() - t0)
    save_module(wd / "checkpoints" / "mapper.ckpt", "mapper",
                dataclasses.asdict(mapper.config), mapper)
    bundle = PipelineBundle(generator=generator, mapper=mapper, teacher=teacher,
                            embedder=embedder)
    bundle.save(wd / "bundle")
    return wd / "bundle"


def load_bundle_from_workdir(cfg: dict) -> PipelineBundle:
    return PipelineBundle.load(Path(cfg["workdir"]) / "bundle")


def corrupted_generate(bundle: PipelineBundle, pair: PairedExample, noise_fraction: float,
                       completion: float, seed: int) -> np.ndarray:
    """Generation under input corruption: extra noise strokes and/or partial rendering."""
    sketch = pair.sketch
    if noise_fraction > 0:
        sketch = add_noise_strokes(sketch, noise_fraction, seed)
    m = partial_schedule(completion, bundle.m_max)
    raster = rasterize(sketch, bundle.resolution, completion=completion)
    code = bundle.mapper.predict_latents(raster_to_input(raster), m, rand_seed=seed)
    return synthesize_from_code(bundle, code, seed).image


def pair_generate_fn(bundle: PipelineBundle):
    def fn(pair: PairedExample) -> np.ndarray:
        req = GenerateRequest(sketch=pair.sketch, seed=_pair_seed(pair))
        return generate(bundle, req).image

    return fn


def _pair_seed(pair: PairedExample) -> int:
    return zlib.crc32(pair.id.encode()) & 0x7FFFFFFF


def run_evaluate(cfg: dict) -> list[EvalReport]:
    """FID / FGM / retrieval metrics on the held-out split; writes JSON-lines."""
    wd = _workdir(cfg)
    train, test = dataset_from_config(cfg)
    bundle = load_bundle_from_workdir(cfg)
    seed = cfg["eval"]["seed"]
    chash = cfg.get("config_hash", config_hash(cfg))
    feature_fn = embedder_feature_fn(bundle.embedder)
    gen_fn = pair_generate_fn(bundle)

    train_stats = compute_stats([p.photo.pixels for p in train], feature_fn)
    generations = [gen_fn(p) for p in test]
    gen_stats = compute_stats(generations, feature_fn)
    fid_value = fid(gen_stats, train_stats)

    from .embedder import fgm

    res = bundle.resolution
    fgm_values = [fgm(rasterize(p.sketch, res), g, bundle.embedder)
                  for p, g in zip(test, generations)]

    gallery_size = min(cfg["eval"]["gallery_size"], len(test))
    gallery = [p.photo.pixels for p in test[:gallery_size]]
    sketches = [p.sketch for p in test[:gallery_size]]
    cache = {id(s): g for s, g in zip(sketches, generations[:gallery_size])}
    acc1 = retrieval_acc(sketches, gallery, 1, lambda s: cache[id(s)], feature_fn)
    acc5 = retrieval_acc(sketches, gallery, 5, lambda s: cache[id(s)], feature_fn)

    reports = [
        EvalReport("fid", fid_value, chash, len(test), seed, feature_id="embedder-photo-branch"),
        EvalReport("fgm", float(np.mean(fgm_values)), chash, len(test), seed,
                   feature_id="embedder-photo-branch"),
        EvalReport("retrieval_acc@1", acc1, chash, gallery_size, seed,
                   feature_id="embedder-photo-branch"),
        EvalReport("retrieval_acc@5", acc5, chash, gallery_size, seed,
                   feature_id="embedder-photo-branch"),
    ]
    write_reports_jsonl(reports, wd / "reports" / "metrics.jsonl")
    logger.info("evaluation written to %s", wd / "reports" / "metrics.jsonl")
    return reports


def run_sweep(cfg: dict) -> list[EvalReport]:
    wd = _workdir(cfg)
    train, test = dataset_from_config(cfg)
    bundle = load_bundle_from_workdir(cfg)
    feature_fn = embedder_feature_fn(bundle.embedder)
    train_stats = compute_stats([p.photo.pixels for p in train], feature_fn)
    reports = robustness_sweep(
        test,
        noise_fractions=cfg["eval"]["noise_fractions"],
        completions=cfg["eval"]["completions"],
        generate_fn=lambda pair, nf, c, s: corrupted_generate(bundle, pair, nf, c, s),
        embedder=bundle.embedder,
        reference_stats=train_stats,
        feature_fn=feature_fn,
        config_hash=cfg.get("config_hash", config_hash(cfg)),
        seed=cfg["eval"]["seed"],
    )
    write_reports_jsonl(reports, wd / "reports" / "sweep.jsonl")
    write_sweep_csv(reports, wd / "reports" / "sweep.csv")
    logger.info("sweep written to %s", wd / "reports" / "sweep.csv")
    return reports
