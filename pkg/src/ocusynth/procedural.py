"""Deterministic synthetic bimodal ocular renderer with exact ground-truth masks.

Scenes are layered ellipses in a normalized [-1, 1]^2 frame: skin background,
a lens-shaped eye opening (sclera) formed by two intersecting circles, an
iris disk and a concentric pupil, plus an optional specular highlight that
affects the images only. VIS and NIR are rendered over identical geometry
with independent appearance parameters, so masks are modality-independent
and pixel-exact. NIR gray levels are drawn from disjoint per-class intervals,
which lets an intensity-threshold annotator stand in for a human when
labeling generated images.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .generator import BimodalPair

PALETTE_4 = (
    (0, "background", "#3b2f2f"),
    (1, "sclera", "#e8e6e1"),
    (2, "iris", "#3b6ea5"),
    (3, "pupil", "#101010"),
)

PALETTE_10 = (
    (0, "background", "#3b2f2f"),
    (1, "sclera", "#e8e6e1"),
    (2, "iris", "#3b6ea5"),
    (3, "pupil", "#101010"),
    (4, "pupil_boundary", "#5c5c8a"),
    (5, "iris_boundary", "#7aa5d2"),
    (6, "upper_eyelid", "#a9746e"),
    (7, "lower_eyelid", "#c09287"),
    (8, "inner_lower_eyelid", "#d9b8a8"),
    (9, "caruncle", "#c76b6b"),
)

# NIR gray levels per class, drawn from these disjoint [0, 1] intervals.
NIR_LEVELS = {
    "pupil": (0.03, 0.10),
    "iris": (0.25, 0.45),
    "skin": (0.55, 0.72),
    "sclera": (0.82, 0.95),
}


@dataclass
class OcularParams:
    eye_openness: float  # (0, 1]: vertical extent of the eye opening
    iris_radius: float  # fraction of image width
    pupil_ratio: float  # fraction of iris radius, in (0, 1)
    gaze_offset: tuple[float, float]  # (dx, dy) as fractions of width/height
    iris_hue: tuple[float, float, float]  # VIS color, [0, 1] channels
    nir_iris_level: float
    skin_tone: tuple[float, float, float]
    nir_skin_level: float
    sclera_tone: tuple[float, float, float]
    nir_sclera_level: float
    specular: Optional[tuple[tuple[float, float], float]] = None  # (center, radius) in frame units

    def __post_init__(self) -> None:
        if not (0.0 < self.eye_openness <= 1.0):
            raise ValueError("eye_openness must lie in (0, 1]")
        if not (0.0 < self.pupil_ratio < 1.0):
            raise ValueError("pupil must be strictly inside the iris")
        a, b = _lens_axes(self.eye_openness)
        cx, cy = 2.0 * self.gaze_offset[0], 2.0 * self.gaze_offset[1]
        if (cx / a) ** 2 + (cy / b) ** 2 >= 1.0:
            raise ValueError("iris center must fall inside the eye opening")


def _lens_axes(eye_openness: float) -> tuple[float, float]:
    # half-width / half-height of the eye opening in frame units
    return 0.82, 0.58 * eye_openness


def _lens_circles(eye_openness: float) -> tuple[float, float]:
    # two circles centered at (0, +-c) with radius r intersect in a pointy lens
    # with half-width a and half-height b
    a, b = _lens_axes(eye_openness)
    r = 0.5 * (b + a * a / b)
    c = 0.5 * (a * a / b - b)
    return r, c


def sample_params(rng: np.random.Generator) -> OcularParams:
    """Draw parameters from the documented uniform ranges; deterministic per rng state."""
    skin_base = rng.uniform(0.45, 0.85)
    specular = None
    if rng.random() < 0.5:
        specular = (
            (float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.05, 0.05))),
            float(rng.uniform(0.03, 0.07)),
        )
    return OcularParams(
        eye_openness=float(rng.uniform(0.60, 0.95)),
        iris_radius=float(rng.uniform(0.22, 0.32)),
        pupil_ratio=float(rng.uniform(0.35, 0.60)),
        gaze_offset=(float(rng.uniform(-0.12, 0.12)), float(rng.uniform(-0.05, 0.05))),
        iris_hue=tuple(rng.uniform(0.10, 0.80, size=3).tolist()),
        nir_iris_level=float(rng.uniform(*NIR_LEVELS["iris"])),
        skin_tone=(skin_base, skin_base * 0.82, skin_base * 0.72),
        nir_skin_level=float(rng.uniform(*NIR_LEVELS["skin"])),
        sclera_tone=tuple(rng.uniform(0.88, 0.97, size=3).tolist()),
        nir_sclera_level=float(rng.uniform(*NIR_LEVELS["sclera"])),
        specular=specular,
    )


_PUPIL_VIS = (0.05, 0.05, 0.06)
_PUPIL_NIR = 0.06
_SPECULAR_LEVEL = 0.97


class DegenerateGeometry(ValueError):
    """A class would occupy too little area at this resolution; redraw the parameters."""


def _box_blur(img: np.ndarray) -> np.ndarray:
    # 3x3 box blur with edge replication; images only, never masks
    padded = np.pad(img, [(1, 1), (1, 1)] + [(0, 0)] * (img.ndim - 2), mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += padded[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return (out / 9.0).astype(img.dtype)


def render_sample(params: OcularParams, resolution: int, num_classes: int = 4,
                  smooth: bool = False, min_class_fraction: float = 0.0):
    """Render one (BimodalPair, mask) at `resolution`; a pure function of its arguments.

    Masks carry hard class boundaries; `smooth` optionally applies a 1-px blur
    to the images only. Raises DegenerateGeometry when any class covers less
    than `min_class_fraction` of the pixels.
    """
    if num_classes not in (4, 10):
        raise ValueError("num_classes must be 4 or 10")
    n = resolution
    ys, xs = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, n), indexing="ij")

    r, c = _lens_circles(params.eye_openness)
    in_lens = (xs**2 + (ys - c) ** 2 <= r**2) & (xs**2 + (ys + c) ** 2 <= r**2)

    cx, cy = 2.0 * params.gaze_offset[0], 2.0 * params.gaze_offset[1]
    iris_r = 2.0 * params.iris_radius
    dist2 = (xs - cx) ** 2 + (ys - cy) ** 2
    in_iris = dist2 <= iris_r**2
    in_pupil = dist2 <= (iris_r * params.pupil_ratio) ** 2

    mask = np.zeros((n, n), dtype=np.uint8)
    mask[in_lens] = 1
    mask[in_lens & in_iris] = 2
    mask[in_lens & in_pupil] = 3

    if num_classes == 10:
        band = 2.0 / n  # one-pixel boundary rings and eyelid bands
        ring_pupil = in_lens & (np.abs(np.sqrt(dist2) - iris_r * params.pupil_ratio) <= band)
        ring_iris = in_lens & (np.abs(np.sqrt(dist2) - iris_r) <= band) & ~in_pupil
        upper = ~in_lens & (ys < 0) & (xs**2 + (ys + c) ** 2 <= (r + 3 * band) ** 2)
        lower = ~in_lens & (ys >= 0) & (xs**2 + (ys - c) ** 2 <= (r + 3 * band) ** 2)
        inner_lower = ~in_lens & (ys >= 0) & (xs**2 + (ys - c) ** 2 <= (r + band) ** 2)
        caruncle = (xs + 0.80) ** 2 + ys**2 <= 0.10**2
        mask[upper] = 6
        mask[lower] = 7
        mask[inner_lower] = 8
        mask[ring_iris] = 5
        mask[ring_pupil] = 4
        mask[caruncle] = 9

    if min_class_fraction > 0.0:
        need = {0, 1, 2, 3}
        counts = np.bincount(mask.ravel(), minlength=num_classes)
        for cls in need:
            if counts[cls] < min_class_fraction * n * n:
                raise DegenerateGeometry(f"class {cls} covers {counts[cls]} px")

    vis = np.empty((n, n, 3), dtype=np.float64)
    nir = np.empty((n, n), dtype=np.float64)
    layers_vis = {0: params.skin_tone, 1: params.sclera_tone, 2: params.iris_hue, 3: _PUPIL_VIS}
    layers_nir = {
        0: params.nir_skin_level,
        1: params.nir_sclera_level,
        2: params.nir_iris_level,
        3: _PUPIL_NIR,
    }
    base = np.zeros_like(mask)
    base[in_lens] = 1
    base[in_lens & in_iris] = 2
    base[in_lens & in_pupil] = 3
    for cls, color in layers_vis.items():
        vis[base == cls] = color
    for cls, level in layers_nir.items():
        nir[base == cls] = level

    if params.specular is not None:
        (sx, sy), sr = params.specular
        spec = (xs - (cx + sx)) ** 2 + (ys - (cy + sy)) ** 2 <= sr**2
        vis[spec] = _SPECULAR_LEVEL
        nir[spec] = _SPECULAR_LEVEL

    if smooth:
        vis = _box_blur(vis)
        nir = _box_blur(nir)

    pair = BimodalPair(
        vis=torch.from_numpy((vis * 2.0 - 1.0).transpose(2, 0, 1).astype(np.float32)),
        nir=torch.from_numpy((nir * 2.0 - 1.0).astype(np.float32)).unsqueeze(0),
    )
    return pair, mask


def render_dataset(n: int, seed: int, resolution: int, num_classes: int = 4,
                   smooth: bool = False, min_class_fraction: float = 0.01):
    """Render `n` samples; degenerate draws are discarded and redrawn.

    Returns (vis, nir, masks) arrays of shape (n, 3, R, R), (n, 1, R, R) in
    [-1, 1] and (n, R, R) uint8. Deterministic in (n, seed, resolution).
    """
    rng = np.random.default_rng(seed)
    vis = np.empty((n, 3, resolution, resolution), dtype=np.float32)
    nir = np.empty((n, 1, resolution, resolution), dtype=np.float32)
    masks = np.empty((n, resolution, resolution), dtype=np.uint8)
    i = 0
    while i < n:
        params = sample_params(rng)
        try:
            pair, mask = render_sample(params, resolution, num_classes, smooth,
                                       min_class_fraction=min_class_fraction)
        except DegenerateGeometry:
            continue
        vis[i] = pair.vis.numpy()
        nir[i] = pair.nir.numpy()
        masks[i] = mask
        i += 1
    return vis, nir, masks


def annotate_by_intensity(pair: BimodalPair) -> np.ndarray:
    """Scripted 4-class annotation of a generated pair from its NIR intensities.

    Assigns each pixel the class whose canonical NIR gray interval is nearest,
    then relabels bright blobs fully enclosed by iris/pupil to their modal
    neighbor class (a human labels a specular reflection on the iris as iris).
    Stands in for the manual annotation of well-converged generated samples.
    """
    from scipy import ndimage

    nir = (pair.nir.detach().cpu().numpy()[0] + 1.0) / 2.0
    centers = {
        3: np.mean(NIR_LEVELS["pupil"]),
        2: np.mean(NIR_LEVELS["iris"]),
        0: np.mean(NIR_LEVELS["skin"]),
        1: np.mean(NIR_LEVELS["sclera"]),
    }
    classes = np.array(sorted(centers), dtype=np.uint8)
    levels = np.array([centers[c] for c in classes])
    dist = np.abs(nir[..., None] - levels[None, None, :])
    mask = classes[np.argmin(dist, axis=-1)]

    labeled, count = ndimage.label(mask == 1)
    for comp in range(1, count + 1):
        region = labeled == comp
        ring = ndimage.binary_dilation(region) & ~region
        neighbors = mask[ring]
        if neighbors.size and np.isin(neighbors, (2, 3)).all():
            values, freq = np.unique(neighbors, return_counts=True)
            mask[region] = values[np.argmax(freq)]
    return mask
