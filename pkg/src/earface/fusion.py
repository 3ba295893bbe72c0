"""Data-level fusion of a profile image and an ear image into one input tensor."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError
from .imageops import ImageTensor, check_image, resize_bilinear

DATA_FUSION_MODES = ("intensity", "spatial", "channel")


def _same_rgb_shape(profile: ImageTensor, ear: ImageTensor) -> None:
    check_image(profile, "profile")
    check_image(ear, "ear")
    if profile.shape != ear.shape:
        raise DimensionError(f"shape mismatch: profile {profile.shape} vs ear {ear.shape}")
    if profile.shape[2] != 3:
        raise DimensionError(f"expected 3-channel inputs, got {profile.shape[2]}")


def intensity_fuse(profile: ImageTensor, ear: ImageTensor) -> ImageTensor:
    """Pixel-wise mean of the two images."""
    _same_rgb_shape(profile, ear)
    # (a + b) / 2 in float64 is exact for float32 inputs and symmetric in its arguments.
    out = (profile.astype(np.float64) + ear.astype(np.float64)) * 0.5
    return out.astype(np.float32)


def spatial_fuse(profile: ImageTensor, ear: ImageTensor, out_size: tuple[int, int] = (224, 224)) -> ImageTensor:
    """Side-by-side image: profile in the left half, ear in the right half.

    Each modality is resized independently to ``H x W/2`` and the halves are
    concatenated along the width, so no output pixel mixes the modalities.
    """
    check_image(profile, "profile")
    check_image(ear, "ear")
    if profile.shape[2] != 3 or ear.shape[2] != 3:
        raise DimensionError("spatial fusion expects 3-channel inputs")
    h, w = int(out_size[0]), int(out_size[1])
    if w % 2:
        raise ConfigError(f"spatial fusion needs an even output width, got {w}")
    half = (h, w // 2)
    return np.concatenate([resize_bilinear(profile, half), resize_bilinear(ear, half)], axis=1)


def channel_fuse(profile: ImageTensor, ear: ImageTensor) -> ImageTensor:
    """Stack along channels: 0-2 hold the profile, 3-5 the ear."""
    _same_rgb_shape(profile, ear)
    return np.concatenate([profile, ear], axis=2).astype(np.float32, copy=False)


def fuse(mode: str, profile: ImageTensor, ear: ImageTensor) -> ImageTensor:
    """Dispatch on a data-fusion mode name; spatial output keeps the input size."""
    if mode == "intensity":
        return intensity_fuse(profile, ear)
    if mode == "spatial":
        return spatial_fuse(profile, ear, profile.shape[:2])
    if mode == "channel":
        return channel_fuse(profile, ear)
    raise ConfigError(f"unknown data fusion mode {mode!r}; expected one of {DATA_FUSION_MODES}")
