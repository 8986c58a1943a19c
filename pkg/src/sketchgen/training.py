"""Teacher and sketch-mapper training: partial-aware augmentation, four-term
objective, rectified-Adam-with-lookahead optimizer, exact resume, and a
finite-difference gradient check harness."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .embedder import EmbeddingModel, EmbedderConfig
from .gan import Generator, GeneratorConfig, TrainingError, weights_checksum
from .imageops import photo_to_input, raster_to_input
from .losses import (
    DiscriminatorPerceptual,
    LossWeights,
    PerceptualEncoder,
    loss_disc,
    loss_kd,
    loss_lpips,
    loss_rec,
    total_loss,
)
from .mapper import AutoregressiveMapper, MapperConfig, TeacherMapper
from .procgen import PairedExample
from .sketches import partial_schedule, rasterize

__all__ = [
    "COMPLETION_GRID",
    "MapperTrainConfig",
    "MapperTrainState",
    "Lookahead",
    "make_optimizer",
    "train_teacher",
    "train_mapper_step",
    "train_mapper",
    "grad_check",
]

# training-time completion grid: 30..100% at 10% intervals
COMPLETION_GRID = tuple(round(0.3 + 0.1 * i, 10) for i in range(8))


class Lookahead:
    """Slow-weights averaging wrapped around an inner optimizer.

    Every `k` inner steps the slow copy moves `alpha` of the way toward the fast
    weights and the fast weights are reset onto it. Duck-typed to the optimizer
    surface the trainers use (step / zero_grad / state_dict).
    """

    def __init__(self, inner: torch.optim.Optimizer, k: int = 5, alpha: float = 0.5):
        if not 0.0 < alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if k < 1:
            raise ValueError("k must be >= 1")
        self.inner = inner
        self.k = k
        self.alpha = alpha
        self._step_count = 0
        self.param_groups = inner.param_groups
        self._slow = [
            [p.detach().clone() for p in group["params"]] for group in inner.param_groups
        ]

    def step(self, closure=None):
        loss = self.inner.step(closure)
        self._step_count += 1
        if self._step_count % self.k == 0:
            with torch.no_grad():
                for group, slow_group in zip(self.inner.param_groups, self._slow):
                    for p, slow in zip(group["params"], slow_group):
                        slow.add_(p.detach() - slow, alpha=self.alpha)
                        p.copy_(slow)
        return loss

    def zero_grad(self, set_to_none: bool = True):
        self.inner.zero_grad(set_to_none=set_to_none)

    def state_dict(self):
        return {
            "inner": self.inner.state_dict(),
            "step_count": self._step_count,
            "slow": [[t.clone() for t in group] for group in self._slow],
            "k": self.k,
            "alpha": self.alpha,
        }

    def load_state_dict(self, state):
        self.inner.load_state_dict(state["inner"])
        self._step_count = state["step_count"]
        self.k = state["k"]
        self.alpha = state["alpha"]
        with torch.no_grad():
            for group, saved in zip(self._slow, state["slow"]):
                for t, s in zip(group, saved):
                    t.copy_(s)


def make_optimizer(params, lr: float, lookahead_k: int = 5, lookahead_alpha: float = 0.5):
    """Rectified Adam wrapped in Lookahead, the mapper-training recipe."""
    return Lookahead(torch.optim.RAdam(list(params), lr=lr), k=lookahead_k, alpha=lookahead_alpha)


@dataclass(frozen=True)
class MapperTrainConfig:
    lr: float = 1e-3  # reference setup uses 1e-5 at 5M iterations; desk scale runs hotter
    batch_size: int = 4
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    frozen_check_every: int = 1  # verify frozen checksums every N steps; 0 disables


@dataclass
class MapperTrainState:
    mapper: AutoregressiveMapper
    generator: Generator
    teacher: TeacherMapper
    embedder: EmbeddingModel
    phi: PerceptualEncoder
    optimizer: Lookahead
    rng: torch.Generator
    config: MapperTrainConfig
    step: int = 0
    history: list = field(default_factory=list)
    frozen_checksums: dict = field(default_factory=dict)

    @classmethod
    def create(cls, mapper: AutoregressiveMapper, generator: Generator, teacher: TeacherMapper,
               embedder: EmbeddingModel, phi: PerceptualEncoder | None = None,
               config: MapperTrainConfig | None = None) -> "MapperTrainState":
        config = config or MapperTrainConfig()
        for name, model in (("generator", generator), ("teacher", teacher)):
            if not getattr(model, "frozen", False):
                model.freeze()
        embedder.freeze()
        if phi is None:
            raise ValueError("a perceptual encoder is required (DiscriminatorPerceptual at desk scale)")
        mapper.latent_sampler = generator.sample_w_rows
        state = cls(
            mapper=mapper,
            generator=generator,
            teacher=teacher,
            embedder=embedder,
            phi=phi,
            optimizer=make_optimizer(mapper.parameters(), config.lr,
                                     config.lookahead_k, config.lookahead_alpha),
            rng=torch.Generator().manual_seed(config.seed),
            config=config,
        )
        state.frozen_checksums = state._current_frozen_checksums()
        return state

    def _current_frozen_checksums(self) -> dict:
        sums = {
            "generator": weights_checksum(self.generator),
            "teacher": weights_checksum(self.teacher),
            "embedder": weights_checksum(self.embedder),
        }
        phi_mod = self.phi.checksum_module()
        if phi_mod is not None:
            sums["phi"] = weights_checksum(phi_mod)
        return sums

    def verify_frozen(self) -> None:
        current = self._current_frozen_checksums()
        for name, expect in self.frozen_checksums.items():
            if current[name] != expect:
                raise TrainingError(f"frozen model '{name}' changed during mapper training")

    # --- exact resume ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        payload = {
            "format": 1,
            "step": self.step,
            "history": self.history,
            "mapper": self.mapper.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.get_state(),
            "frozen_checksums": self.frozen_checksums,
            "config": asdict(self.config),
        }
        torch.save(payload, Path(path))

    def restore(self, path: str | Path) -> None:
        payload = torch.load(Path(path), weights_only=False)
        self.step = payload["step"]
        self.history = payload["history"]
        self.mapper.load_state_dict(payload["mapper"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.rng.set_state(payload["rng"])
        self.frozen_checksums = payload["frozen_checksums"]


def _assemble_codes(state: MapperTrainState, predicted: torch.Tensor,
                    ms: list[int]) -> tuple[torch.Tensor, torch.Tensor]:
    """Mix predicted prefix rows with sampled rows; returns (codes (B,k,d), mask (B,k))."""
    k = state.mapper.config.k
    b = predicted.shape[0]
    codes = []
    mask = torch.zeros(b, k, dtype=torch.bool)
    for i, m in enumerate(ms):
        with torch.no_grad():
            rand_rows = state.mapper.sample_random_rows(k - m, state.rng)
        rand_rows = rand_rows.to(predicted.dtype)
        codes.append(torch.cat([predicted[i, :m], rand_rows], dim=0))
        mask[i, :m] = True
    return torch.stack(codes), mask


def train_mapper_step(batch: list[PairedExample], state: MapperTrainState
                      ) -> tuple[MapperTrainState, dict]:
    """One optimizer step of partial-aware mapper training.

    Per example: draw a completion from the training grid, rasterize the sketch at
    that completion, predict the first m = schedule(completion) latent rows, pad
    with sampled rows, synthesize, and score against the full ground-truth photo.
    Only mapper parameters move; every frozen dependency is checksum-guarded.
    """
    cfg = state.config
    mapper_cfg = state.mapper.config
    res = mapper_cfg.resolution

    grid_idx = torch.randint(len(COMPLETION_GRID), (len(batch),), generator=state.rng)
    completions = [COMPLETION_GRID[int(i)] for i in grid_idx]
    ms = [partial_schedule(c, mapper_cfg.m_max) for c in completions]

    rasters = torch.cat([
        raster_to_input(rasterize(ex.sketch, res, completion=c))
        for ex, c in zip(batch, completions)
    ])
    photos = torch.cat([photo_to_input(ex.photo.pixels) for ex in batch])

    predicted = state.mapper.predict_rows(rasters, max(ms))
    codes, mask = _assemble_codes(state, predicted, ms)
    generated = state.generator.synthesize_batch(codes, state.rng)

    with torch.no_grad():
        teacher_codes = state.teacher.predict_all(photos)

    terms = {
        "rec": loss_rec(photos, generated),
        "lpips": loss_lpips(photos, generated, state.phi),
        "disc": loss_disc(rasters, generated, state.embedder),
        "kd": loss_kd(codes, teacher_codes, mask),
    }
    loss, components = total_loss(terms, cfg.weights)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite mapper loss at step {state.step}: {components}")

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()

    if cfg.frozen_check_every and state.step % cfg.frozen_check_every == 0:
        state.verify_frozen()

    record = dict(components, step=state.step)
    state.step += 1
    state.history.append(record)
    return state, record


def train_mapper(pairs: list[PairedExample], state: MapperTrainState, steps: int,
                 log_every: int = 0, log_path: str | Path | None = None) -> MapperTrainState:
    log_file = open(log_path, "a") if log_path else None
    try:
        for _ in range(steps):
            idx = torch.randint(len(pairs), (state.config.batch_size,), generator=state.rng)
            batch = [pairs[int(i)] for i in idx]
            state, record = train_mapper_step(batch, state)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
            if log_every and state.step % log_every == 0:
                print(f"mapper step {state.step}: total {record['total']:.4f} "
                      f"rec {record['rec']:.4f} kd {record['kd']:.4f}")
    finally:
        if log_file:
            log_file.close()
    return state


def train_teacher(photos: list[np.ndarray], generator: Generator, epochs: int = 10,
                  seed: int = 0, config: MapperConfig | None = None, lr: float = 1e-3,
                  batch_size: int = 8, phi: PerceptualEncoder | None = None,
                  weights: LossWeights | None = None, log_every: int = 0) -> TeacherMapper:
    """Photo-to-photo inversion training: rec + lpips only, generator frozen."""
    generator.freeze()
    weights = weights or LossWeights()
    config = config or MapperConfig(resolution=generator.config.resolution,
                                    latent_dim=generator.config.latent_dim, in_channels=3)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        teacher = TeacherMapper(config)
    opt = make_optimizer(teacher.parameters(), lr)
    rng = torch.Generator().manual_seed(seed)
    stack = torch.cat([photo_to_input(p) for p in photos])
    gen_before = weights_checksum(generator)
    n = stack.shape[0]
    for epoch in range(epochs):
        order = torch.randperm(n, generator=rng)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            real = stack[idx]
            codes = teacher.predict_all(real)
            recon = generator.synthesize_batch(codes, rng)
            terms = {"rec": loss_rec(real, recon)}
            if phi is not None:
                terms["lpips"] = loss_lpips(real, recon, phi)
            loss, components = total_loss(terms, weights)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite teacher loss: {components}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        if log_every and (epoch + 1) % log_every == 0:
            print(f"teacher epoch {epoch + 1}/{epochs} loss {float(loss):.4f}")
    if weights_checksum(generator) != gen_before:
        raise TrainingError("generator changed during teacher training")
    teacher.freeze()
    return teacher


# --- finite-difference verification ---------------------------------------------


def _tiny_setup(seed: int):
    """d=8, M=8 full pipeline at float64 for gradient verification."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            gen_cfg = GeneratorConfig(resolution=8, latent_dim=8, mapping_depth=2,
                                      base_channels=8, max_channels=8)
            generator = Generator(gen_cfg)
            generator.freeze()
            map_cfg = MapperConfig(resolution=8, latent_dim=8, backbone_depth=1)
            mapper = AutoregressiveMapper(map_cfg, latent_sampler=generator.sample_w_rows)
            teacher = TeacherMapper(MapperConfig(resolution=8, latent_dim=8,
                                                 backbone_depth=1, in_channels=3))
            teacher.freeze()
            embedder = EmbeddingModel(EmbedderConfig(resolution=8, embed_dim=8, channels=8))
            embedder.freeze()
            from .gan import Discriminator

            phi = DiscriminatorPerceptual(Discriminator(gen_cfg))
            rng = np.random.default_rng(seed)
            raster = rng.uniform(0.0, 1.0, size=(8, 8))
            photo = rng.uniform(-1.0, 1.0, size=(8, 8, 3))
    finally:
        torch.set_default_dtype(prev)
    return generator, mapper, teacher, embedder, phi, raster, photo


def _tiny_loss(mapper, generator, teacher, embedder, phi, raster, photo, seed: int) -> torch.Tensor:
    m = mapper.config.m_max
    k = mapper.config.k
    x = raster_to_input(raster).double()
    real = photo_to_input(photo).double()
    predicted = mapper.predict_rows(x, m)
    rng = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        rand_rows = mapper.sample_random_rows(k - m, rng).double()
    codes = torch.cat([predicted[0], rand_rows], dim=0).unsqueeze(0)
    mask = torch.zeros(1, k, dtype=torch.bool)
    mask[0, :m] = True
    noise_gen = torch.Generator().manual_seed(seed + 1)
    generated = generator.synthesize_batch(codes, noise_gen)
    with torch.no_grad():
        teacher_codes = teacher.predict_all(real)
    terms = {
        "rec": loss_rec(real, generated),
        "lpips": loss_lpips(real, generated, phi),
        "disc": loss_disc(x, generated, embedder),
        "kd": loss_kd(codes, teacher_codes, mask),
    }
    loss, _ = total_loss(terms, LossWeights())
    return loss


def grad_check(seed: int = 0, n_params: int = 24, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs the full four-term objective on a d=8, M=8 float64 pipeline and probes a
    seeded sample of mapper parameters.
    """
    generator, mapper, teacher, embedder, phi, raster, photo = _tiny_setup(seed)

    def closure():
        return _tiny_loss(mapper, generator, teacher, embedder, phi, raster, photo, seed)

    loss = closure()
    params = [p for p in mapper.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params)

    flat_sizes = [p.numel() for p in params]
    total = sum(flat_sizes)
    rng = np.random.default_rng(seed + 99)
    picks = rng.choice(total, size=min(n_params, total), replace=False)

    max_rel = 0.0
    for flat_idx in sorted(int(i) for i in picks):
        p_idx = 0
        while flat_idx >= flat_sizes[p_idx]:
            flat_idx -= flat_sizes[p_idx]
            p_idx += 1
        param = params[p_idx]
        analytic = float(grads[p_idx].flatten()[flat_idx])
        flat = param.data.view(-1)
        with torch.no_grad():
            orig = float(flat[flat_idx])
            h = eps * max(1.0, abs(orig))
            flat[flat_idx] = orig + h
            up = float(closure())
            flat[flat_idx] = orig - h
            down = float(closure())
            flat[flat_idx] = orig
        fd = (up - down) / (2.0 * h)
        denom = max(abs(analytic), abs(fd), 1e-8)
        if abs(analytic) < 1e-10 and abs(fd) < 1e-10:
            continue
        max_rel = max(max_rel, abs(analytic - fd) / denom)
    return max_rel
