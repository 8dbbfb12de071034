"""Low-level image utilities: value-range mapping, BT.601 color conversion, PNG I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Map float values in [-1, 1] to uint8 [0, 255] (round half away from zero)."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.floor((x + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def from_uint8(u: np.ndarray) -> np.ndarray:
    """Map uint8 [0, 255] back to float32 in [-1, 1]."""
    return (np.asarray(u, dtype=np.float32) / 127.5) - 1.0


# BT.601 full-range coefficients.
_KR, _KG, _KB = 0.299, 0.587, 0.114


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """RGB (float, 0..255 range) -> YCbCr float array of the same shape."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = _KR * r + _KG * g + _KB * b
    cb = 128.0 + (b - y) * (0.5 / (1.0 - _KB))
    cr = 128.0 + (r - y) * (0.5 / (1.0 - _KR))
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycbcr: np.ndarray) -> np.ndarray:
    """YCbCr float -> RGB float, clipped to [0, 255]."""
    ycbcr = np.asarray(ycbcr, dtype=np.float64)
    y, cb, cr = ycbcr[..., 0], ycbcr[..., 1] - 128.0, ycbcr[..., 2] - 128.0
    r = y + 2.0 * (1.0 - _KR) * cr
    b = y + 2.0 * (1.0 - _KB) * cb
    g = (y - _KR * r - _KB * b) / _KG
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 255.0)


def luma(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma of an RGB image (float, same value range as the input)."""
    return rgb_to_ycbcr(np.asarray(rgb, dtype=np.float64))[..., 0]


def composite_from_arrays(vis_u8: np.ndarray, nir_u8: np.ndarray) -> np.ndarray:
    """Replace the luma plane of a uint8 RGB image by a uint8 NIR plane.

    Returns the recombined RGB image as uint8. Chroma is carried over from the
    VIS input; clipping back to the RGB gamut is what surfaces misalignment as
    color artifacts.
    """
    if vis_u8.ndim != 3 or vis_u8.shape[2] != 3:
        raise ValueError("vis image must be HxWx3")
    nir = np.asarray(nir_u8, dtype=np.float64)
    if nir.ndim == 3:
        nir = nir[..., 0]
    if nir.shape != vis_u8.shape[:2]:
        raise ValueError("vis and nir spatial dims differ")
    ycbcr = rgb_to_ycbcr(vis_u8.astype(np.float64))
    ycbcr[..., 0] = nir
    rgb = ycbcr_to_rgb(ycbcr)
    return np.floor(rgb + 0.5).astype(np.uint8)


def save_png(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 array as PNG: HxW -> grayscale, HxWx3 -> RGB."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("save_png expects uint8 data")
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(Path(path), format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    """Read a PNG into a uint8 array (HxW for grayscale, HxWx3 for RGB)."""
    with Image.open(Path(path)) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        return np.asarray(im, dtype=np.uint8)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def nearest_by_mse(query: np.ndarray, candidates) -> tuple[int, float]:
    """Index and value of the minimum pixel-wise MSE over `candidates`.

    Ties resolve to the lowest index.
    """
    best_idx, best = -1, np.inf
    n = 0
    for i, cand in enumerate(candidates):
        d = mse(query, cand)
        if d < best:
            best_idx, best = i, d
        n += 1
    if n == 0:
        raise ValueError("candidate set is empty")
    return best_idx, best
