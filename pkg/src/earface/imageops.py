"""Helpers for H x W x C float images in [0, 1].

Images are plain ``numpy.ndarray`` objects of dtype float32. Every operator
in the package takes and returns that layout; conversion to the N x C x H x W
layout torch expects happens only at the model boundary (:func:`to_chw_batch`).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError

ImageTensor = np.ndarray

VALID_CHANNELS = (3, 6)


def check_image(img: ImageTensor, name: str = "image") -> ImageTensor:
    if not isinstance(img, np.ndarray) or img.ndim != 3:
        raise DimensionError(f"{name} must be an H x W x C array, got {getattr(img, 'shape', type(img))}")
    h, w, c = img.shape
    if h <= 0 or w <= 0:
        raise DimensionError(f"{name} has empty spatial extent {img.shape}")
    if c not in VALID_CHANNELS:
        raise DimensionError(f"{name} must have 3 or 6 channels, got {c}")
    return img


def resize_bilinear(img: ImageTensor, size: tuple[int, int]) -> ImageTensor:
    """Resize ``img`` to ``size`` = (H, W) with bilinear interpolation.

    Uses half-pixel centres (``align_corners=False``) and a triangle
    antialiasing filter when shrinking. Every output pixel is a convex
    combination of input pixels, so the [0, 1] range is preserved. Equal
    sizes return an exact copy.
    """
    h, w = int(size[0]), int(size[1])
    if h <= 0 or w <= 0:
        raise DimensionError(f"target size must be positive, got {size}")
    if img.shape[:2] == (h, w):
        return np.array(img, dtype=np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
    out = out[0].permute(1, 2, 0).numpy()
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def to_chw_batch(images: list[ImageTensor] | np.ndarray) -> torch.Tensor:
    """Stack H x W x C images into a float32 N x C x H x W tensor."""
    arr = np.stack(list(images)) if not isinstance(images, np.ndarray) else images
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


# Per-channel statistics the pretrained VGG/ResNet weights expect.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def standardize(batch: torch.Tensor) -> torch.Tensor:
    """Per-channel ``(x - mean) / std`` on an N x C x H x W batch; 6-channel inputs reuse the RGB stats per half."""
    c = batch.shape[1]
    if c not in VALID_CHANNELS:
        raise DimensionError(f"batch must have 3 or 6 channels, got {c}")
    reps = c // 3
    mean = torch.tensor(IMAGENET_MEAN * reps, dtype=batch.dtype).view(1, c, 1, 1)
    std = torch.tensor(IMAGENET_STD * reps, dtype=batch.dtype).view(1, c, 1, 1)
    return (batch - mean) / std
