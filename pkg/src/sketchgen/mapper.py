"""Sketch-to-latent mappers for the frozen generator's extended latent space.

Three variants share one residual feature backbone: a baseline with k
independent latent heads, an autoregressive mapper that unrolls a gated
recurrent cell so each predicted row conditions the next, and a photo-input
teacher (architecturally the baseline) used for distillation.

Step convention for the autoregressive recurrence: h_0 comes from the pooled
backbone feature; at step j = 1..m the shared output head reads the previous
hidden state (w_j = W_o h_{j-1} + b_o) and the hidden state then absorbs w_j
through the fusion network (h_j = f_seq(h_{j-1}, eta(f_s, w_j))), so every
predicted latent conditions the next hidden state exactly once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .gan import LatentCode, num_latent_slots
from .imageops import raster_to_input
from .sketches import round_half_up

__all__ = [
    "MapperConfig",
    "FeatureBackbone",
    "BaselineMapper",
    "TeacherMapper",
    "AutoregressiveMapper",
    "m_max_for",
]


def _as_batch(x) -> torch.Tensor:
    """Accept a raw (H, W) raster, a (C, H, W) tensor, or a ready (B, C, H, W) batch."""
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return raster_to_input(x)
    t = torch.as_tensor(x, dtype=torch.get_default_dtype())
    if t.ndim == 2:
        return raster_to_input(t)
    if t.ndim == 3:
        return t.unsqueeze(0)
    return t


def m_max_for(k: int) -> int:
    """Largest number of predicted rows, keeping the 10-of-14 predicted/random ratio."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return max(1, round_half_up(k * 10.0 / 14.0))


@dataclass(frozen=True)
class MapperConfig:
    resolution: int = 64
    latent_dim: int = 64
    backbone_depth: int = 4  # stride-2 residual blocks; desk-scale stand-in for a deep resnet
    in_channels: int = 1  # 1 for sketch rasters, 3 for the photo teacher
    raw_gaussian_rows: bool = False  # sample unpredicted rows as raw N(0,1) instead of mapped w

    def __post_init__(self):
        max_depth = int(math.log2(self.resolution)) - 1
        if not 1 <= self.backbone_depth <= max_depth:
            raise ValueError(f"backbone_depth must be in [1, {max_depth}] for resolution {self.resolution}")

    @property
    def k(self) -> int:
        return num_latent_slots(self.resolution)

    @property
    def m_max(self) -> int:
        return m_max_for(self.k)

    @property
    def feature_size(self) -> int:
        return self.resolution // (2**self.backbone_depth)


class _ResidualDown(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        y = F.leaky_relu(self.conv1(x), 0.2)
        y = self.conv2(y)
        return F.leaky_relu(y + F.avg_pool2d(x, 2), 0.2)


class FeatureBackbone(nn.Module):
    """Residual conv encoder producing the spatial feature map and its pooled vector."""

    def __init__(self, config: MapperConfig):
        super().__init__()
        self.config = config
        self.stem = nn.Conv2d(config.in_channels, config.latent_dim, 3, padding=1)
        self.blocks = nn.ModuleList(_ResidualDown(config.latent_dim) for _ in range(config.backbone_depth))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[-1] != self.config.resolution:
            raise ValueError(
                f"input resolution {x.shape[-1]} does not match backbone resolution "
                f"{self.config.resolution}"
            )
        x = F.leaky_relu(self.stem(x), 0.2)
        for block in self.blocks:
            x = block(x)
        return x, x.mean(dim=(2, 3))


def _strided_reducer(ch: int, spatial: int) -> nn.ModuleList:
    if spatial < 1 or (spatial & (spatial - 1)) != 0:
        raise ValueError(f"feature map side must be a power of two, got {spatial}")
    return nn.ModuleList(nn.Conv2d(ch, ch, 3, stride=2, padding=1) for _ in range(int(math.log2(spatial))))


def _run_reducer(convs: nn.ModuleList, x: torch.Tensor) -> torch.Tensor:
    for conv in convs:
        x = F.leaky_relu(conv(x), 0.2)
    return x.flatten(1)


class LatentHead(nn.Module):
    """Stride-two convs with LeakyReLU collapsing the feature map to one d-vector."""

    def __init__(self, config: MapperConfig):
        super().__init__()
        self.convs = _strided_reducer(config.latent_dim, config.feature_size)

    def forward(self, f_s: torch.Tensor) -> torch.Tensor:
        return _run_reducer(self.convs, f_s)


class BaselineMapper(nn.Module):
    """One-shot mapper: k individual (not weight-shared) latent heads over f_s."""

    def __init__(self, config: MapperConfig):
        super().__init__()
        self.config = config
        self.backbone = FeatureBackbone(config)
        self.heads = nn.ModuleList(LatentHead(config) for _ in range(config.k))
        self.frozen = False

    def predict_all(self, x: torch.Tensor) -> torch.Tensor:
        f_s, _ = self.backbone(x)
        return torch.stack([head(f_s) for head in self.heads], dim=1)  # (B, k, d)

    def predict_latents(self, raster_input) -> LatentCode:
        with torch.no_grad():
            codes = self.predict_all(_as_batch(raster_input))
        return LatentCode(codes=codes[0], mask=np.ones(self.config.k, dtype=bool))

    def freeze(self) -> None:
        self.requires_grad_(False)
        self.eval()
        self.frozen = True


class TeacherMapper(BaselineMapper):
    """Photo-to-photo mapper; identical to the baseline but photo-input.

    All k rows are predicted; distillation later restricts itself to the
    student's predicted rows.
    """

    def __init__(self, config: MapperConfig):
        if config.in_channels != 3:
            config = MapperConfig(
                resolution=config.resolution,
                latent_dim=config.latent_dim,
                backbone_depth=config.backbone_depth,
                in_channels=3,
                raw_gaussian_rows=config.raw_gaussian_rows,
            )
        super().__init__(config)

    def teacher_predict(self, photo_input: torch.Tensor) -> LatentCode:
        return self.predict_latents(photo_input)


class FusionNet(nn.Module):
    """eta: Hadamard product of f_s with a broadcast latent row, reduced to a d-vector."""

    def __init__(self, config: MapperConfig):
        super().__init__()
        self.convs = _strided_reducer(config.latent_dim, config.feature_size)

    def forward(self, f_s: torch.Tensor, w_prev: torch.Tensor) -> torch.Tensor:
        if w_prev.shape[-1] != f_s.shape[1]:
            raise ValueError(f"latent width {w_prev.shape[-1]} != feature channels {f_s.shape[1]}")
        fused = f_s * w_prev.unsqueeze(-1).unsqueeze(-1)
        return _run_reducer(self.convs, fused)


class AutoregressiveMapper(nn.Module):
    def __init__(self, config: MapperConfig,
                 latent_sampler: Callable[[int, torch.Generator], torch.Tensor] | None = None):
        super().__init__()
        self.config = config
        d = config.latent_dim
        self.backbone = FeatureBackbone(config)
        self.init_fc = nn.Linear(d, d)  # W_h, b_h
        self.cell = nn.GRUCell(d, d)  # f_seq
        self.fusion = FusionNet(config)  # eta
        self.out_fc = nn.Linear(d, d)  # shared W_o, b_o across all steps
        self.latent_sampler = latent_sampler
        self.frozen = False

    def extract_features(self, x) -> tuple[torch.Tensor, torch.Tensor]:
        return self.backbone(_as_batch(x))

    def init_hidden(self, v_h: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.init_fc(v_h))

    def fuse(self, f_s: torch.Tensor, w_prev: torch.Tensor) -> torch.Tensor:
        return self.fusion(f_s, w_prev)

    def predict_rows(self, x: torch.Tensor, m: int,
                     debug_step_hook: Callable[[int, torch.Tensor], torch.Tensor] | None = None
                     ) -> torch.Tensor:
        """Unroll m steps; returns (B, m, d) with gradients attached.

        `debug_step_hook(j, h_j)` may replace the hidden state after step j; it
        exists for causality tests only.
        """
        if not 1 <= m <= self.config.m_max:
            raise ValueError(f"m must be in [1, {self.config.m_max}], got {m}")
        f_s, v_h = self.backbone(x)
        h = self.init_hidden(v_h)
        rows = []
        for j in range(1, m + 1):
            w_j = self.out_fc(h)
            rows.append(w_j)
            h = self.cell(self.fuse(f_s, w_j), h)
            if debug_step_hook is not None:
                h = debug_step_hook(j, h)
        return torch.stack(rows, dim=1)

    def sample_random_rows(self, n_rows: int, generator: torch.Generator) -> torch.Tensor:
        """Rows for unpredicted slots: mapped w rows by default, raw Gaussians on request."""
        if n_rows == 0:
            return torch.zeros(0, self.config.latent_dim)
        if self.latent_sampler is not None and not self.config.raw_gaussian_rows:
            return self.latent_sampler(n_rows, generator)
        return torch.randn(n_rows, self.config.latent_dim, generator=generator)

    def predict_latents(self, raster_input, m: int, rand_seed: int,
                        debug_step_hook=None) -> LatentCode:
        """Rows 1..m from the recurrence, rows m+1..k sampled per rand_seed."""
        x = _as_batch(raster_input)
        with torch.no_grad():
            predicted = self.predict_rows(x, m, debug_step_hook=debug_step_hook)[0]
        gen = torch.Generator().manual_seed(int(rand_seed))
        random_rows = self.sample_random_rows(self.config.k - m, gen).to(predicted.dtype)
        codes = torch.cat([predicted, random_rows], dim=0)
        mask = np.zeros(self.config.k, dtype=bool)
        mask[:m] = True
        return LatentCode(codes=codes, mask=mask)

    def freeze(self) -> None:
        self.requires_grad_(False)
        self.eval()
        self.frozen = True
