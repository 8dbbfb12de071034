"""Segmentation metrics, the alignment-artifact score, and a perceptual-distance proxy."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .generator import BimodalPair
from .imaging import luma, rgb_to_ycbcr


@dataclass
class SegMetrics:
    iou: float
    f1: float
    pixel_error: float
    per_class: dict[int, dict[str, Optional[float]]] = field(default_factory=dict)


def segmentation_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                         include_background: bool = True) -> SegMetrics:
    """Per-class IoU and F1 with unweighted means, plus the global pixel error.

    Classes absent from both prediction and ground truth are excluded from the
    aggregates and flagged None in the per-class breakdown. Background (class
    0) participates unless `include_background` is False; the pixel error is
    always global.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.max(initial=0) >= num_classes or gt.max(initial=0) >= num_classes:
        raise ValueError("class ids exceed num_classes")

    per_class: dict[int, dict[str, Optional[float]]] = {}
    ious, f1s = [], []
    for cls in range(num_classes):
        p = pred == cls
        g = gt == cls
        inter = int(np.count_nonzero(p & g))
        p_count = int(np.count_nonzero(p))
        g_count = int(np.count_nonzero(g))
        union = p_count + g_count - inter
        if union == 0:
            per_class[cls] = {"iou": None, "f1": None}
            continue
        iou = inter / union
        f1 = 2.0 * inter / (p_count + g_count)
        per_class[cls] = {"iou": iou, "f1": f1}
        if include_background or cls != 0:
            ious.append(iou)
            f1s.append(f1)

    pixel_error = float(np.count_nonzero(pred != gt)) / pred.size
    mean_iou = float(np.mean(ious)) if ious else float("nan")
    mean_f1 = float(np.mean(f1s)) if f1s else float("nan")
    return SegMetrics(iou=mean_iou, f1=mean_f1, pixel_error=pixel_error, per_class=per_class)


def summarize_metrics(rows: list[SegMetrics]) -> dict[str, tuple[float, float]]:
    """Mean and standard deviation per metric across images."""
    out = {}
    for name in ("iou", "f1", "pixel_error"):
        vals = np.array([getattr(r, name) for r in rows], dtype=np.float64)
        out[name] = (float(vals.mean()), float(vals.std()))
    return out


def write_metrics_csv(path, rows: list[SegMetrics], ids=None) -> Path:
    """One CSV row per image plus mean/std summary rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary = summarize_metrics(rows)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "iou", "f1", "pixel_error"])
        for i, row in enumerate(rows):
            rid = ids[i] if ids is not None else str(i)
            writer.writerow([rid, f"{row.iou:.6f}", f"{row.f1:.6f}", f"{row.pixel_error:.6f}"])
        writer.writerow(["mean"] + [f"{summary[k][0]:.6f}" for k in ("iou", "f1", "pixel_error")])
        writer.writerow(["std"] + [f"{summary[k][1]:.6f}" for k in ("iou", "f1", "pixel_error")])
    return path


def alignment_score(pair: BimodalPair) -> float:
    """Mean absolute chroma deviation between the pair's luma-replacement
    composite and the self-composite (NIR := luma(VIS)), in [0, 1] units.

    Identical chroma planes score 0; misalignment surfaces through gamut
    clipping when out-of-place NIR luma meets the VIS chroma.
    """
    from .imaging import composite_from_arrays

    vis_u8 = pair.vis_uint8()
    nir_u8 = pair.nir_uint8()
    self_luma = np.floor(luma(vis_u8) + 0.5).astype(np.uint8)
    comp = composite_from_arrays(vis_u8, nir_u8).astype(np.float64)
    ref = composite_from_arrays(vis_u8, self_luma).astype(np.float64)
    chroma_comp = rgb_to_ycbcr(comp)[..., 1:]
    chroma_ref = rgb_to_ycbcr(ref)[..., 1:]
    return float(np.mean(np.abs(chroma_comp - chroma_ref))) / 255.0


def _pyramid_distance(a: np.ndarray, b: np.ndarray, levels: int = 3) -> float:
    """Mean over pyramid levels of the RMS difference between standardized images."""

    def standardize(x):
        x = x.astype(np.float64)
        return (x - x.mean()) / (x.std() + 1e-8)

    def downsample(x):
        h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
        x = x[:h, :w]
        return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if b.ndim == 2:
        b = b[..., None]
    dists = []
    for _ in range(levels):
        level = [
            math.sqrt(np.mean((standardize(a[..., c]) - standardize(b[..., c])) ** 2))
            for c in range(a.shape[-1])
        ]
        dists.append(float(np.mean(level)))
        if min(a.shape[0], a.shape[1]) < 4:
            break
        a = np.stack([downsample(a[..., c]) for c in range(a.shape[-1])], axis=-1)
        b = np.stack([downsample(b[..., c]) for c in range(b.shape[-1])], axis=-1)
    return float(np.mean(dists))


_DISTANCE_BACKENDS: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    "pyramid": _pyramid_distance,
}


def register_distance_backend(name: str, fn: Callable[[np.ndarray, np.ndarray], float]) -> None:
    _DISTANCE_BACKENDS[name] = fn


def perceptual_distance(a: np.ndarray, b: np.ndarray, backend: str = "pyramid") -> float:
    """Pluggable perceptual-distance proxy; the default is a 3-level pyramid
    of normalized L2 distances. Non-negative, symmetric, and zero at equality.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _DISTANCE_BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown distance backend {backend!r}") from None
    return float(fn(a, b))
