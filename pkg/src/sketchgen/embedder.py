"""Fine-grained sketch/photo joint embedding trained with a cosine triplet loss.

One model serves both the discriminative training signal and the fine-grained
similarity metric between an input sketch and a generated photo.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imageops import photo_to_input, raster_to_input
from .procgen import PairedExample
from .sketches import rasterize

__all__ = [
    "EmbedderConfig",
    "EmbeddingModel",
    "Triplet",
    "cosine_similarity",
    "triplet_loss",
    "train_fgsbir",
    "fgm",
]


@dataclass(frozen=True)
class EmbedderConfig:
    resolution: int = 64
    embed_dim: int = 64
    channels: int = 32
    share_branches: bool = False  # shared branch sees sketches broadcast to 3 channels
    margin: float = 0.2

    def __post_init__(self):
        if self.embed_dim < 8:
            raise ValueError("embed_dim must be >= 8")


class _Branch(nn.Module):
    def __init__(self, in_ch: int, config: EmbedderConfig):
        super().__init__()
        c = config.channels
        downs = max(1, int(math.log2(config.resolution)) - 2)
        self.stem = nn.Conv2d(in_ch, c, 3, padding=1)
        self.downs = nn.ModuleList(nn.Conv2d(c, c, 3, stride=2, padding=1) for _ in range(downs))
        self.head = nn.Linear(c, config.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.leaky_relu(self.stem(x), 0.2)
        for conv in self.downs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.head(x.mean(dim=(2, 3)))


class EmbeddingModel(nn.Module):
    """Two-branch (optionally shared) encoder into a joint e-dimensional space."""

    def __init__(self, config: EmbedderConfig):
        super().__init__()
        self.config = config
        if config.share_branches:
            shared = _Branch(3, config)
            self.sketch_branch = shared
            self.photo_branch = shared
        else:
            self.sketch_branch = _Branch(1, config)
            self.photo_branch = _Branch(3, config)
        self.trained = False

    def _check_resolution(self, x: torch.Tensor) -> None:
        if x.shape[-1] != self.config.resolution or x.shape[-2] != self.config.resolution:
            raise ValueError(
                f"input resolution {tuple(x.shape[-2:])} does not match model "
                f"resolution {self.config.resolution}"
            )

    def embed_sketch(self, raster) -> torch.Tensor:
        x = raster_to_input(raster) if not isinstance(raster, torch.Tensor) or raster.ndim < 4 else raster
        self._check_resolution(x)
        if self.config.share_branches and x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return self.sketch_branch(x)

    def embed_photo(self, photo) -> torch.Tensor:
        x = photo_to_input(photo) if not isinstance(photo, torch.Tensor) or photo.ndim < 4 else photo
        self._check_resolution(x)
        return self.photo_branch(x)

    def embed(self, image, branch: str) -> torch.Tensor:
        if branch == "sketch":
            return self.embed_sketch(image)
        if branch == "photo":
            return self.embed_photo(image)
        raise ValueError(f"unknown branch {branch!r}")

    def freeze(self) -> None:
        self.requires_grad_(False)
        self.eval()


@dataclass(frozen=True)
class Triplet:
    anchor: PairedExample  # sketch comes from here
    positive: PairedExample  # same id as anchor
    negative: PairedExample  # different id

    def __post_init__(self):
        if self.anchor.id != self.positive.id:
            raise ValueError("positive must be the anchor's paired photo")
        if self.anchor.id == self.negative.id:
            raise ValueError("negative must come from a different pair")


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batch-safe cosine similarity; rejects zero vectors."""
    a = torch.atleast_2d(a)
    b = torch.atleast_2d(b)
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine similarity is undefined for zero vectors")
    return (a * b).sum(dim=-1) / (na * nb)


def triplet_loss(anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor,
                 margin: float = 0.2) -> torch.Tensor:
    """max(0, cosdist(a, p) - cosdist(a, n) + margin), cosdist = 1 - cosine."""
    if margin <= 0:
        raise ValueError("margin must be > 0")
    d_pos = 1.0 - cosine_similarity(anchor, positive)
    d_neg = 1.0 - cosine_similarity(anchor, negative)
    return F.relu(d_pos - d_neg + margin).mean()


def _prepare_tensors(pairs: list[PairedExample], resolution: int):
    sketches = torch.cat([raster_to_input(rasterize(p.sketch, resolution)) for p in pairs])
    photos = torch.cat([photo_to_input(p.photo.pixels) for p in pairs])
    return sketches, photos


def train_fgsbir(pairs: list[PairedExample], epochs: int = 10, seed: int = 0,
                 config: EmbedderConfig | None = None, batch_size: int = 16,
                 lr: float = 1e-3, log_every: int = 0) -> EmbeddingModel:
    """Triplet training with random in-batch negatives."""
    config = config or EmbedderConfig(resolution=pairs[0].photo.resolution)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = EmbeddingModel(config)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = torch.Generator().manual_seed(seed)
    sketches, photos = _prepare_tensors(pairs, config.resolution)
    n = len(pairs)
    for epoch in range(epochs):
        order = torch.randperm(n, generator=rng)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            # random in-batch negative, guaranteed != anchor by offset
            offs = torch.randint(1, len(idx), (len(idx),), generator=rng)
            neg_idx = idx[(torch.arange(len(idx)) + offs) % len(idx)]
            a = model.embed_sketch(sketches[idx])
            p = model.embed_photo(photos[idx])
            ng = model.embed_photo(photos[neg_idx])
            loss = triplet_loss(a, p, ng, margin=config.margin)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        if log_every and (epoch + 1) % log_every == 0:
            print(f"fgsbir epoch {epoch + 1}/{epochs} loss {float(loss):.4f}")
    model.trained = True
    model.eval()
    return model


def fgm(sketch_raster, photo, model: EmbeddingModel) -> float:
    """Cosine similarity between the sketch embedding and the photo embedding."""
    if not model.trained:
        warnings.warn("fgm computed with an untrained embedding model", stacklevel=2)
    with torch.no_grad():
        a = model.embed_sketch(sketch_raster)
        b = model.embed_photo(photo)
        return float(cosine_similarity(a, b)[0])
