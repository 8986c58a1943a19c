"""Small conversions between numpy images and model input tensors."""

from __future__ import annotations

import numpy as np
import torch

__all__ = ["raster_to_input", "photo_to_input", "tensor_to_photo", "avg_pool_image"]


def raster_to_input(raster: np.ndarray | torch.Tensor) -> torch.Tensor:
    """(H, W) ink coverage in [0, 1] -> (1, 1, H, W) tensor in [-1, 1]."""
    t = torch.as_tensor(raster, dtype=torch.get_default_dtype())
    if t.ndim == 2:
        t = t.unsqueeze(0).unsqueeze(0)
    elif t.ndim == 3:
        t = t.unsqueeze(1)
    return t * 2.0 - 1.0


def photo_to_input(photo: np.ndarray | torch.Tensor) -> torch.Tensor:
    """(H, W, 3) image in [-1, 1] -> (1, 3, H, W) tensor; batches pass through."""
    t = torch.as_tensor(photo, dtype=torch.get_default_dtype())
    if t.ndim == 3:
        t = t.permute(2, 0, 1).unsqueeze(0)
    elif t.ndim == 4 and t.shape[-1] == 3:
        t = t.permute(0, 3, 1, 2)
    return t


def tensor_to_photo(img: torch.Tensor) -> np.ndarray:
    """(3, H, W) or (1, 3, H, W) tensor -> (H, W, 3) float32 array."""
    if img.ndim == 4:
        img = img[0]
    return img.detach().permute(1, 2, 0).cpu().numpy().astype(np.float32)


def avg_pool_image(photo: np.ndarray, out_size: int) -> np.ndarray:
    """Box-downsample an (H, W, C) or (H, W) image to out_size x out_size."""
    h = photo.shape[0]
    if h % out_size != 0:
        raise ValueError(f"size {h} not divisible by {out_size}")
    f = h // out_size
    if photo.ndim == 2:
        return photo.reshape(out_size, f, out_size, f).mean(axis=(1, 3))
    return photo.reshape(out_size, f, out_size, f, -1).mean(axis=(1, 3))
