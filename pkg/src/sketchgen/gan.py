"""Toy style-based generator/discriminator pair, pre-trained on photos then frozen.

The synthesis path follows the conv3x3 -> AdaIN -> conv3x3 -> AdaIN block layout
with per-stage noise injection, a mapping MLP from z to w, and an extended latent
code with one w row per AdaIN stage. Latent row j modulates stage (j % 2) of
level (j // 2), lowest resolution first; this assignment is frozen into the
checkpoint format.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "GeneratorConfig",
    "GanTrainConfig",
    "LatentCode",
    "StyleParams",
    "Generator",
    "Discriminator",
    "GanTrainState",
    "TrainingError",
    "num_latent_slots",
    "adain",
    "weights_checksum",
    "gan_train_step",
]

ADAIN_EPS = 1e-8


class TrainingError(RuntimeError):
    """Non-finite loss or another unrecoverable condition during training."""


def num_latent_slots(resolution: int) -> int:
    """k = 2*log2(M) - 2: two AdaIN stages per resolution level from 4x4 up to MxM."""
    if resolution < 8 or (resolution & (resolution - 1)) != 0:
        raise ValueError(f"resolution must be a power of two >= 8, got {resolution}")
    return 2 * int(math.log2(resolution)) - 2


@dataclass(frozen=True)
class GeneratorConfig:
    resolution: int = 64
    latent_dim: int = 64
    mapping_depth: int = 4  # reference setup uses 8; 4 is the desk-scale default
    base_channels: int = 16
    max_channels: int = 128

    def __post_init__(self):
        num_latent_slots(self.resolution)  # validates the resolution
        if self.latent_dim < 8:
            raise ValueError("latent_dim must be >= 8")

    @property
    def k(self) -> int:
        return num_latent_slots(self.resolution)

    @property
    def num_levels(self) -> int:
        return int(math.log2(self.resolution)) - 1

    def channels(self, level: int) -> int:
        return min(self.max_channels, self.base_channels * 2 ** (self.num_levels - 1 - level))


@dataclass(frozen=True)
class GanTrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.0, 0.99)
    r1_gamma: float = 2.0  # R1 weight; applied as (gamma / 2) * E||grad D(real)||^2
    batch_size: int = 8


@dataclass
class LatentCode:
    """k x d matrix of per-stage style vectors plus a predicted/random row mask."""

    codes: torch.Tensor  # (k, d)
    mask: np.ndarray  # (k,) bool; True = predicted/specified, False = randomly sampled

    def __post_init__(self):
        self.codes = torch.as_tensor(self.codes, dtype=torch.get_default_dtype()).detach()
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.codes.ndim != 2:
            raise ValueError(f"codes must be 2-D (k, d), got shape {tuple(self.codes.shape)}")
        if self.mask.shape != (self.codes.shape[0],):
            raise ValueError("mask length must equal the number of latent rows")
        if not torch.isfinite(self.codes).all():
            raise ValueError("latent codes must be finite")

    @property
    def k(self) -> int:
        return self.codes.shape[0]

    @property
    def d(self) -> int:
        return self.codes.shape[1]

    def clone(self) -> "LatentCode":
        return LatentCode(codes=self.codes.clone(), mask=self.mask.copy())

    def to_json(self) -> dict:
        return {"codes": self.codes.tolist(), "mask": self.mask.tolist()}

    @classmethod
    def from_json(cls, obj) -> "LatentCode":
        if isinstance(obj, (str, bytes)):
            obj = json.loads(obj)
        return cls(codes=torch.tensor(obj["codes"], dtype=torch.get_default_dtype()),
                   mask=np.asarray(obj["mask"], dtype=bool))


@dataclass(frozen=True)
class StyleParams:
    y_s: torch.Tensor  # (B, ch) per-channel scale
    y_b: torch.Tensor  # (B, ch) per-channel bias


def adain(x_f: torch.Tensor, y: StyleParams, eps: float = ADAIN_EPS) -> torch.Tensor:
    """y_s * (x - mu) / sigma + y_b with per-channel stats over spatial dims."""
    if y.y_s.shape[-1] != x_f.shape[1]:
        raise ValueError(f"style has {y.y_s.shape[-1]} channels, feature map has {x_f.shape[1]}")
    mu = x_f.mean(dim=(2, 3), keepdim=True)
    var = x_f.var(dim=(2, 3), keepdim=True, unbiased=False)
    x_norm = (x_f - mu) / torch.sqrt(var + eps)
    return y.y_s.unsqueeze(-1).unsqueeze(-1) * x_norm + y.y_b.unsqueeze(-1).unsqueeze(-1)


class StyleAffine(nn.Module):
    """A(w) -> (y_s, y_b); y_s biased toward 1 so styles start near identity."""

    def __init__(self, latent_dim: int, channels: int):
        super().__init__()
        self.channels = channels
        self.affine = nn.Linear(latent_dim, 2 * channels)
        with torch.no_grad():
            self.affine.bias[: channels] = 1.0
            self.affine.bias[channels:] = 0.0

    def forward(self, w: torch.Tensor) -> StyleParams:
        y = self.affine(w)
        return StyleParams(y_s=y[:, : self.channels], y_b=y[:, self.channels :])


class NoiseInjection(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.scale = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        return x + self.scale.view(1, -1, 1, 1) * noise


class SynthesisBlock(nn.Module):
    """conv3x3 -> (+noise) -> lrelu -> AdaIN, twice; consumes two latent rows."""

    def __init__(self, in_ch: int, out_ch: int, latent_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.out_ch = out_ch
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.noise1 = NoiseInjection(out_ch)
        self.style1 = StyleAffine(latent_dim, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.noise2 = NoiseInjection(out_ch)
        self.style2 = StyleAffine(latent_dim, out_ch)

    def forward(self, x, w_a, w_b, noise_pair, stats: list | None = None):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        for conv, noise_mod, style, w, nz in (
            (self.conv1, self.noise1, self.style1, w_a, noise_pair[0]),
            (self.conv2, self.noise2, self.style2, w_b, noise_pair[1]),
        ):
            x = conv(x)
            if nz is not None:
                x = noise_mod(x, nz)
            x = F.leaky_relu(x, 0.2)
            y = style(w)
            x = adain(x, y)
            if stats is not None:
                stats.append((y, x))
        return x


class MappingNetwork(nn.Module):
    """Pixel-normalized z followed by `depth` Linear+LeakyReLU layers."""

    def __init__(self, latent_dim: int, depth: int):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(latent_dim, latent_dim) for _ in range(depth))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        w = z / torch.sqrt(z.square().mean(dim=-1, keepdim=True) + 1e-8)
        for layer in self.layers:
            w = F.leaky_relu(layer(w), 0.2)
        return w


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.mapping = MappingNetwork(config.latent_dim, config.mapping_depth)
        self.constant = nn.Parameter(torch.randn(1, config.latent_dim, 4, 4))
        blocks = []
        in_ch = config.latent_dim
        for level in range(config.num_levels):
            out_ch = config.channels(level)
            blocks.append(SynthesisBlock(in_ch, out_ch, config.latent_dim, upsample=level > 0))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.Conv2d(in_ch, 3, 1)
        self.frozen = False

    @property
    def k(self) -> int:
        return self.config.k

    def map_z_to_w(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(torch.atleast_2d(z))

    def _stage_noise(self, batch, resolution, generator, device, dtype):
        return torch.randn(batch, 1, resolution, resolution, generator=generator,
                           device=device, dtype=dtype)

    def synthesize_batch(self, codes: torch.Tensor, noise_generator: torch.Generator | None,
                         noise_enabled: bool = True, stats: list | None = None) -> torch.Tensor:
        """codes: (B, k, d); returns (B, 3, M, M) images in [-1, 1].

        Noise images are drawn from `noise_generator` in a fixed stage order so the
        output is deterministic given (codes, generator state, weights).
        """
        if codes.ndim != 3 or codes.shape[1] != self.k:
            raise ValueError(f"expected codes of shape (B, {self.k}, d), got {tuple(codes.shape)}")
        b = codes.shape[0]
        dtype = self.constant.dtype
        codes = codes.to(dtype)
        x = self.constant.expand(b, -1, -1, -1)
        res = 4
        for level, block in enumerate(self.blocks):
            if block.upsample:
                res *= 2
            if noise_enabled:
                noise_pair = (
                    self._stage_noise(b, res, noise_generator, codes.device, dtype),
                    self._stage_noise(b, res, noise_generator, codes.device, dtype),
                )
            else:
                noise_pair = (None, None)
            x = block(x, codes[:, 2 * level], codes[:, 2 * level + 1], noise_pair, stats=stats)
        return torch.tanh(self.to_rgb(x))

    def synthesize(self, code: LatentCode, noise_seed: int, noise_enabled: bool = True) -> np.ndarray:
        """Single-code inference; returns (M, M, 3) float32 in [-1, 1]."""
        if code.k != self.k:
            raise ValueError(f"latent code has {code.k} rows, generator needs {self.k}")
        gen = torch.Generator().manual_seed(int(noise_seed))
        with torch.no_grad():
            img = self.synthesize_batch(code.codes.unsqueeze(0), gen, noise_enabled=noise_enabled)
        return img[0].permute(1, 2, 0).numpy().astype(np.float32)

    def broadcast_w(self, w: torch.Tensor) -> torch.Tensor:
        """One w vector for every AdaIN stage: the single-latent path."""
        w = torch.atleast_2d(w)
        return w.unsqueeze(1).expand(-1, self.k, -1)

    def sample_w_rows(self, n_rows: int, generator: torch.Generator) -> torch.Tensor:
        """Rows for unpredicted latent slots: z ~ N(0,1) mapped through the mapping net."""
        z = torch.randn(n_rows, self.config.latent_dim, generator=generator,
                        dtype=self.constant.dtype)
        with torch.no_grad():
            return self.mapping(z)

    def sample_photos(self, n: int, seed: int) -> np.ndarray:
        """n deterministic samples, (n, M, M, 3) float32 in [-1, 1]."""
        gen = torch.Generator().manual_seed(int(seed))
        z = torch.randn(n, self.config.latent_dim, generator=gen, dtype=self.constant.dtype)
        with torch.no_grad():
            w = self.mapping(z)
            imgs = self.synthesize_batch(self.broadcast_w(w), gen)
        return imgs.permute(0, 2, 3, 1).numpy().astype(np.float32)

    def freeze(self) -> None:
        self.requires_grad_(False)
        self.eval()
        self.frozen = True


class Discriminator(nn.Module):
    """Mirror of the generator's resolution ladder ending in a single logit."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        levels = config.num_levels
        self.from_rgb = nn.Conv2d(3, config.channels(levels - 1), 1)
        downs = []
        for level in range(levels - 1, 0, -1):
            downs.append(nn.Conv2d(config.channels(level), config.channels(level - 1), 3, padding=1))
        self.downs = nn.ModuleList(downs)
        self.final_conv = nn.Conv2d(config.channels(0), config.channels(0), 3, padding=1)
        self.final_fc = nn.Linear(config.channels(0) * 16, 1)

    def forward(self, img: torch.Tensor, features: list | None = None) -> torch.Tensor:
        x = F.leaky_relu(self.from_rgb(img), 0.2)
        if features is not None:
            features.append(x)
        for conv in self.downs:
            x = F.leaky_relu(conv(x), 0.2)
            x = F.avg_pool2d(x, 2)
            if features is not None:
                features.append(x)
        x = F.leaky_relu(self.final_conv(x), 0.2)
        return self.final_fc(x.flatten(1))


# --- adversarial pre-training ---------------------------------------------------


@dataclass
class GanTrainState:
    generator: Generator
    discriminator: Discriminator
    g_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer
    rng: torch.Generator
    config: GanTrainConfig
    step: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, gen_config: GeneratorConfig, train_config: GanTrainConfig | None = None,
               seed: int = 0) -> "GanTrainState":
        train_config = train_config or GanTrainConfig()
        init_gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            g = Generator(gen_config)
            d = Discriminator(gen_config)
        return cls(
            generator=g,
            discriminator=d,
            g_opt=torch.optim.Adam(g.parameters(), lr=train_config.lr, betas=train_config.betas),
            d_opt=torch.optim.Adam(d.parameters(), lr=train_config.lr, betas=train_config.betas),
            rng=torch.Generator().manual_seed(seed + 1),
            config=train_config,
        )


def _check_finite(name: str, value: torch.Tensor, step: int) -> None:
    if not torch.isfinite(value).all():
        raise TrainingError(f"non-finite {name} at step {step}: {value}")


def gan_train_step(photos: torch.Tensor, state: GanTrainState) -> tuple[GanTrainState, dict]:
    """One discriminator update (non-saturating loss + R1 on reals) and one generator update."""
    if photos.ndim != 4 or photos.shape[0] < 2:
        raise ValueError("need a (B>=2, 3, M, M) photo batch")
    if photos.abs().max() > 1.0 + 1e-5:
        raise ValueError("photos must lie in [-1, 1]")
    g, d = state.generator, state.discriminator
    cfg = state.config
    b = photos.shape[0]

    def make_fake():
        z = torch.randn(b, g.config.latent_dim, generator=state.rng, dtype=photos.dtype)
        w = g.mapping(z)
        return g.synthesize_batch(g.broadcast_w(w), state.rng)

    # discriminator step
    with torch.no_grad():
        fake = make_fake()
    real = photos.detach().clone().requires_grad_(True)
    d_real = d(real)
    d_fake = d(fake)
    d_loss = F.softplus(d_fake).mean() + F.softplus(-d_real).mean()
    (grad_real,) = torch.autograd.grad(d_real.sum(), real, create_graph=True)
    r1 = grad_real.square().sum(dim=(1, 2, 3)).mean()
    d_total = d_loss + (cfg.r1_gamma / 2.0) * r1
    _check_finite("discriminator loss", d_total, state.step)
    state.d_opt.zero_grad(set_to_none=True)
    d_total.backward()
    state.d_opt.step()

    # generator step
    fake = make_fake()
    g_loss = F.softplus(-d(fake)).mean()
    _check_finite("generator loss", g_loss, state.step)
    state.g_opt.zero_grad(set_to_none=True)
    g_loss.backward()
    state.g_opt.step()

    losses = {
        "step": state.step,
        "d_loss": float(d_loss.detach()),
        "r1": float(r1.detach()),
        "g_loss": float(g_loss.detach()),
    }
    state.step += 1
    state.history.append(losses)
    return state, losses


# --- weight identity ------------------------------------------------------------


def weights_checksum(module: nn.Module) -> str:
    """sha256 over the state dict in sorted key order; detects any weight drift."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
