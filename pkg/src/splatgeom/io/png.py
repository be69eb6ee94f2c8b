"""PNG helpers for 8/16-bit visualization and mask outputs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)


def write_png8(path, values: np.ndarray) -> None:
    """Save [0, 1] data as 8-bit grayscale (H, W) or RGB (H, W, 3)."""
    arr = _to_uint8(np.asarray(values, dtype=np.float64))
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(Path(path))


def write_png16(path, values: np.ndarray) -> None:
    """Save [0, 1] grayscale data as 16-bit PNG."""
    arr = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 65535.0), 0, 65535)
    Image.fromarray(arr.astype(np.uint16), mode="I;16").save(Path(path))


def write_mask_png(path, mask: np.ndarray) -> None:
    write_png8(path, np.asarray(mask, dtype=np.float64))


def write_normal_png(path, normals: np.ndarray) -> None:
    """Map unit normals from [-1, 1] to [0, 255] per channel."""
    write_png8(path, (np.asarray(normals, dtype=np.float64) + 1.0) / 2.0)


def write_heatmap_png(path, values: np.ndarray, cmap: str = "viridis") -> None:
    """False-color rendering of a scalar map, normalized over finite values."""
    import matplotlib.cm as cm

    arr = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(arr)
    lo = arr[finite].min() if finite.any() else 0.0
    hi = arr[finite].max() if finite.any() else 1.0
    span = hi - lo if hi > lo else 1.0
    norm = np.where(finite, (arr - lo) / span, 0.0)
    rgba = cm.get_cmap(cmap)(norm)
    write_png8(path, rgba[..., :3])


def read_png(path) -> np.ndarray:
    """Load a PNG as float64 in [0, 1]; grayscale (H, W) or color (H, W, 3)."""
    img = Image.open(Path(path))
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        out = arr.astype(np.float64) / 255.0
    elif arr.dtype in (np.uint16, np.int32):
        out = arr.astype(np.float64) / 65535.0
    else:
        out = arr.astype(np.float64)
    if out.ndim == 3 and out.shape[2] == 4:
        out = out[..., :3]
    return out


def read_mask_png(path) -> np.ndarray:
    return read_png(path) > 0.5
