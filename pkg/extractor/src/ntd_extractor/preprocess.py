"""Image preprocessing: bilinear resize, exact center crop, normalization.

The resize and crop stages work on PIL images and are exposed separately
from tensor conversion so pixel-level behavior can be checked without a
model in the loop. Sizes are (width, height) pairs throughout, matching
PIL's convention.
"""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image


def resize_and_crop(
    image: Image.Image, resize: tuple[int, int], crop: tuple[int, int]
) -> Image.Image:
    """Resize to `resize`, then cut the centered `crop` window.

    A resize to the image's own size is skipped entirely, so it is an exact
    identity. The crop window is anchored at floor((resize - crop) / 2) per
    axis, i.e. the window the central slice notation array[top:top+h,
    left:left+w] would select.
    """
    rw, rh = resize
    cw, ch = crop
    if cw > rw or ch > rh:
        raise ValueError(f"crop {crop} exceeds resize {resize}")
    if image.size != (rw, rh):
        image = image.resize((rw, rh), Image.Resampling.BILINEAR)
    left = (rw - cw) // 2
    top = (rh - ch) // 2
    return image.crop((left, top, left + cw, top + ch))


def to_model_tensor(
    image: Image.Image,
    mean: tuple[float, float, float],
    std: tuple[float, float, float],
) -> torch.Tensor:
    """RGB image to a normalized float32 CHW tensor."""
    array = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    array = (array - np.asarray(mean, dtype=np.float32)) / np.asarray(
        std, dtype=np.float32
    )
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1)))
