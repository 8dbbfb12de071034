"""Encoder-decoder segmenter trained on generated triplets.

A four-level U-Net-style network (~1M parameters at 32x32) trained with
cross-entropy on one modality of the triplets. The learning rate divides by
`lr_decay_factor` when the validation loss stagnates for `patience_decay`
epochs and training stops after `patience_stop` stagnant epochs in a row,
returning the best-validation weights.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import SegTrainConfig
from .metrics import SegMetrics, segmentation_metrics, summarize_metrics

MODALITY_CHANNELS = {"VIS": 3, "NIR": 1}


def _double_conv(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, in_channels, num_classes, base_channels=32):
        super().__init__()
        c = base_channels
        self.enc1 = _double_conv(in_channels, c)
        self.enc2 = _double_conv(c, 2 * c)
        self.enc3 = _double_conv(2 * c, 3 * c)
        self.bottom = _double_conv(3 * c, 4 * c)
        self.up3 = nn.ConvTranspose2d(4 * c, 3 * c, 2, stride=2)
        self.dec3 = _double_conv(6 * c, 3 * c)
        self.up2 = nn.ConvTranspose2d(3 * c, 2 * c, 2, stride=2)
        self.dec2 = _double_conv(4 * c, 2 * c)
        self.up1 = nn.ConvTranspose2d(2 * c, c, 2, stride=2)
        self.dec1 = _double_conv(2 * c, c)
        self.head = nn.Conv2d(c, num_classes, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        b = self.bottom(F.max_pool2d(e3, 2))
        d3 = self.dec3(torch.cat([self.up3(b), e3], dim=1))
        d2 = self.dec2(torch.cat([self.up2(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.head(d1)


class PlateauController:
    """Validation-loss plateau schedule: divide lr after `patience_decay`
    stagnant epochs, request a stop after `patience_stop` in a row."""

    def __init__(self, lr, factor, patience_decay, patience_stop, tol=1e-6):
        self.lr = lr
        self.factor = factor
        self.patience_decay = patience_decay
        self.patience_stop = patience_stop
        self.tol = tol
        self.best = float("inf")
        self.stagnant = 0

    def update(self, val_loss: float) -> tuple[float, bool]:
        """Feed one epoch's validation loss; returns (lr, should_stop)."""
        if val_loss < self.best - self.tol:
            self.best = val_loss
            self.stagnant = 0
        else:
            self.stagnant += 1
            if self.stagnant % self.patience_decay == 0:
                self.lr /= self.factor
        return self.lr, self.stagnant >= self.patience_stop


@dataclass
class SegmenterModel:
    net: UNet
    modality: str
    num_classes: int
    palette: tuple
    config: SegTrainConfig
    history: list[dict]

    def predict(self, images: torch.Tensor) -> np.ndarray:
        self.net.eval()
        with torch.no_grad():
            logits = self.net(images)
        return logits.argmax(dim=1).numpy().astype(np.uint8)


def _select_modality(vis, nir, modality):
    if modality not in MODALITY_CHANNELS:
        raise ValueError(f"unknown modality {modality!r}")
    arr = vis if modality == "VIS" else nir
    return torch.as_tensor(arr, dtype=torch.float32)


def _epoch_loss(net, images, labels, batch_size):
    net.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            xb = images[start : start + batch_size]
            yb = labels[start : start + batch_size]
            total += float(F.cross_entropy(net(xb), yb, reduction="sum")) / yb[0].numel()
            n += xb.shape[0]
    return total / n


def train_segmenter(train_data, val_data, modality: str, config: SegTrainConfig,
                    palette=(), num_classes: Optional[int] = None) -> SegmenterModel:
    """Cross-entropy training on one modality of labeled triplets.

    `train_data` / `val_data` are (vis, nir, masks) array triples as produced
    by `dataset.load_triplet_arrays`. Returns the best-validation checkpoint
    with the per-epoch history (loss and lr trace) attached.
    """
    t_vis, t_nir, t_masks = train_data[:3]
    v_vis, v_nir, v_masks = val_data[:3]
    if t_masks.size == 0 or v_masks.size == 0:
        raise ValueError("empty manifest")
    num_classes = num_classes or int(max(t_masks.max(), v_masks.max())) + 1

    torch.manual_seed(config.seed)
    images = _select_modality(t_vis, t_nir, modality)
    labels = torch.as_tensor(t_masks, dtype=torch.long)
    val_images = _select_modality(v_vis, v_nir, modality)
    val_labels = torch.as_tensor(v_masks, dtype=torch.long)

    net = UNet(MODALITY_CHANNELS[modality], num_classes, config.base_channels)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    controller = PlateauController(
        config.learning_rate, config.lr_decay_factor, config.patience_decay, config.patience_stop
    )
    order_rng = np.random.default_rng(config.seed)

    best_state = copy.deepcopy(net.state_dict())
    best_val = float("inf")
    history = []
    n = images.shape[0]
    for epoch in range(config.max_epochs):
        net.train()
        order = order_rng.permutation(n)
        epoch_loss, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = images[idx], labels[idx]
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(net(xb), yb)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * xb.shape[0]
            seen += xb.shape[0]

        val_loss = _epoch_loss(net, val_images, val_labels, config.batch_size)
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(net.state_dict())
        lr, stop = controller.update(val_loss)
        for group in opt.param_groups:
            group["lr"] = lr
        history.append(
            {"epoch": epoch, "train_loss": epoch_loss / seen, "val_loss": val_loss, "lr": lr}
        )
        if stop:
            break

    net.load_state_dict(best_state)
    net.eval()
    return SegmenterModel(
        net=net, modality=modality, num_classes=num_classes,
        palette=tuple(palette), config=config, history=history,
    )


def _center_crop_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return img[..., top : top + side, left : left + side]


def _resize_to(images: torch.Tensor, size: int, mode: str) -> torch.Tensor:
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    return F.interpolate(images, size=(size, size), mode=mode)


def evaluate_segmenter(model: SegmenterModel, test_data, batch_size: int = 16,
                       include_background: bool = True):
    """Per-image metrics plus a mean/std summary on labeled test triplets.

    Inputs whose resolution differs from the training resolution are
    center-cropped to a square and bilinearly resized (masks: nearest).
    """
    vis, nir, masks = test_data[:3]
    images = _select_modality(vis, nir, model.modality)
    masks = np.asarray(masks)
    if int(masks.max()) >= model.num_classes:
        raise ValueError("test masks hold more classes than the model predicts")

    # resize policy: center-crop to square, then bilinear-resize to a
    # network-compatible side (a multiple of 8); masks follow with nearest
    if images.shape[-2] != images.shape[-1]:
        images = torch.as_tensor(_center_crop_square(images.numpy()))
        masks = _center_crop_square(masks)
    side = images.shape[-1]
    if side % 8 != 0:
        target = max(int(round(side / 8)) * 8, 16)
        images = _resize_to(images, target, "bilinear")
        mask_t = torch.as_tensor(masks, dtype=torch.float32).unsqueeze(1)
        masks = _resize_to(mask_t, target, "nearest").squeeze(1).numpy().astype(masks.dtype)

    rows: list[SegMetrics] = []
    for start in range(0, images.shape[0], batch_size):
        xb = images[start : start + batch_size]
        preds = model.predict(xb)
        for j in range(preds.shape[0]):
            rows.append(
                segmentation_metrics(
                    preds[j], masks[start + j], model.num_classes,
                    include_background=include_background,
                )
            )
    return rows, summarize_metrics(rows)


def save_segmenter(path, model: SegmenterModel) -> None:
    torch.save(
        {
            "weights": model.net.state_dict(),
            "modality": model.modality,
            "num_classes": model.num_classes,
            "palette": model.palette,
            "config": model.config.__dict__,
            "history": model.history,
        },
        path,
    )


def load_segmenter(path) -> SegmenterModel:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    config = SegTrainConfig(**payload["config"])
    net = UNet(MODALITY_CHANNELS[payload["modality"]], payload["num_classes"],
               config.base_channels)
    net.load_state_dict(payload["weights"])
    net.eval()
    return SegmenterModel(
        net=net, modality=payload["modality"], num_classes=payload["num_classes"],
        palette=tuple(tuple(p) for p in payload["palette"]), config=config,
        history=payload["history"],
    )
