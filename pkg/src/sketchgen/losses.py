"""The four-term mapper objective and the perceptual feature encoder behind it."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .embedder import EmbeddingModel, cosine_similarity
from .gan import Discriminator, LatentCode

__all__ = [
    "LossWeights",
    "PerceptualEncoder",
    "DiscriminatorPerceptual",
    "IdentityPerceptual",
    "loss_rec",
    "loss_lpips",
    "loss_disc",
    "loss_kd",
    "total_loss",
]


@dataclass(frozen=True)
class LossWeights:
    rec: float = 1.0
    lpips: float = 0.8
    disc: float = 0.5
    kd: float = 0.6

    def __post_init__(self):
        for name, v in (("rec", self.rec), ("lpips", self.lpips), ("disc", self.disc), ("kd", self.kd)):
            if v < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {v}")


class PerceptualEncoder:
    """Fixed feature extractor with tap layers and per-layer weights.

    Implementations expose `taps(images) -> list[Tensor]` aligned with
    `layer_weights`; the extractor must stay frozen during mapper training.
    """

    layer_weights: list[float]

    def taps(self, images: torch.Tensor) -> list[torch.Tensor]:
        raise NotImplementedError

    def checksum_module(self) -> nn.Module | None:
        return None


class IdentityPerceptual(PerceptualEncoder):
    """Single tap returning the image itself; collapses loss_lpips onto loss_rec."""

    def __init__(self):
        self.layer_weights = [1.0]

    def taps(self, images: torch.Tensor) -> list[torch.Tensor]:
        return [images]


class DiscriminatorPerceptual(PerceptualEncoder):
    """Tap layers of the trained GAN discriminator, equal layer weights.

    Desk-scale stand-in for an externally pre-trained perceptual network: the
    discriminator features are the strongest in-domain features available.
    """

    def __init__(self, discriminator: Discriminator):
        self.net = copy.deepcopy(discriminator)
        self.net.requires_grad_(False)
        self.net.eval()
        self.layer_weights = [1.0] * (len(self.net.downs) + 1)

    def taps(self, images: torch.Tensor) -> list[torch.Tensor]:
        features: list[torch.Tensor] = []
        self.net(images, features=features)
        return features

    def checksum_module(self) -> nn.Module:
        return self.net


def _per_example_norm(diff: torch.Tensor) -> torch.Tensor:
    return diff.flatten(1).norm(dim=1)


def loss_rec(r: torch.Tensor, r_hat: torch.Tensor, reduction: str = "norm") -> torch.Tensor:
    """Pixel-level l2 reconstruction loss ||r - r_hat||_2 (norm, not squared).

    Batched inputs average the per-example norms; `reduction="mean"` divides each
    norm by sqrt(#pixels) for a scale-free variant.
    """
    if r.shape != r_hat.shape:
        raise ValueError(f"shape mismatch {tuple(r.shape)} vs {tuple(r_hat.shape)}")
    a, b = torch.atleast_3d(r), torch.atleast_3d(r_hat)
    if a.ndim == 3:  # single example
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    norms = _per_example_norm(a - b)
    if reduction == "mean":
        norms = norms / (a[0].numel() ** 0.5)
    elif reduction != "norm":
        raise ValueError(f"unknown reduction {reduction!r}")
    return norms.mean()


def loss_lpips(r: torch.Tensor, r_hat: torch.Tensor, phi: PerceptualEncoder) -> torch.Tensor:
    """||phi(r) - phi(r_hat)||_2 summed over tap layers with the encoder's weights."""
    taps_r = phi.taps(r)
    taps_hat = phi.taps(r_hat)
    total = None
    for w, fr, fh in zip(phi.layer_weights, taps_r, taps_hat):
        term = w * _per_example_norm(torch.atleast_2d(fr - fh)).mean()
        total = term if total is None else total + term
    return total


def loss_disc(sketch_input: torch.Tensor, r_hat: torch.Tensor, f_g: EmbeddingModel) -> torch.Tensor:
    """1 - cos(F_g(s), F_g(r_hat)); zero iff the embeddings are positively parallel."""
    a = f_g.embed_sketch(sketch_input)
    b = f_g.embed_photo(r_hat)
    return (1.0 - cosine_similarity(a, b)).mean()


def _kd_tensor(student: torch.Tensor, teacher: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    diff = (student - teacher) * mask.unsqueeze(-1).to(student.dtype)
    return diff.flatten(-2).norm(dim=-1)


def loss_kd(student, teacher, mask=None) -> torch.Tensor:
    """l2 between student and teacher codes over the student's predicted rows only.

    Accepts LatentCode pairs (mask from the student) or (B, k, d) tensors with an
    explicit (B, k) boolean mask. Unpredicted rows contribute exactly zero.
    """
    if isinstance(student, LatentCode):
        mask_t = torch.as_tensor(student.mask)
        s, t = student.codes, teacher.codes
        if s.shape != t.shape:
            raise ValueError("student and teacher codes must share (k, d)")
        return _kd_tensor(s, t, mask_t)
    if mask is None:
        raise ValueError("tensor form of loss_kd needs an explicit mask")
    if student.shape != teacher.shape:
        raise ValueError("student and teacher codes must share (B, k, d)")
    return _kd_tensor(student, teacher, torch.as_tensor(mask)).mean()


def total_loss(terms: dict[str, torch.Tensor], weights: LossWeights) -> tuple[torch.Tensor, dict]:
    """Weighted sum of the four components; returns (scalar, per-component floats)."""
    zero = torch.zeros(())
    rec = terms.get("rec", zero)
    lpips = terms.get("lpips", zero)
    disc = terms.get("disc", zero)
    kd = terms.get("kd", zero)
    total = weights.rec * rec + weights.lpips * lpips + weights.disc * disc + weights.kd * kd

    def as_float(t):
        return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)

    components = {
        "rec": as_float(rec),
        "lpips": as_float(lpips),
        "disc": as_float(disc),
        "kd": as_float(kd),
        "total": as_float(total),
    }
    return total, components
