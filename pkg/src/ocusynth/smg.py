"""Semantic mask generation from synthesis feature taps.

Every tap of a synthesis pass is bilinearly upsampled to the output
resolution and concatenated per pixel into a d-dimensional hypercolumn. An
ensemble of small MLP classifiers, trained on the hypercolumns of a handful
of annotated samples, predicts a class per pixel; the mask takes the modal
class over the ensemble votes (ties break to the lowest class index).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import SMGConfig
from .generator import FeatureStack


class FingerprintMismatch(RuntimeError):
    """Feature taps come from a different generator than the model was trained on."""


def extract_hypercolumns(stack: FeatureStack, out_resolution: int) -> torch.Tensor:
    """Upsample all taps to `out_resolution` and concatenate: (B, d, H, W)."""
    if not stack.taps:
        raise ValueError("feature stack is empty")
    planes = []
    for tap in stack.taps:
        if tap.shape[-1] == out_resolution:
            planes.append(tap)
        else:
            planes.append(
                F.interpolate(tap, size=(out_resolution, out_resolution),
                              mode="bilinear", align_corners=False)
            )
    return torch.cat(planes, dim=1)


def majority_vote(votes: np.ndarray) -> np.ndarray:
    """Modal class over axis 0 of an (M, ...) int array; ties -> lowest class index."""
    votes = np.asarray(votes)
    num_classes = int(votes.max()) + 1
    counts = np.zeros((num_classes,) + votes.shape[1:], dtype=np.int64)
    for cls in range(num_classes):
        counts[cls] = (votes == cls).sum(axis=0)
    return counts.argmax(axis=0)


@dataclass
class AnnotatedSample:
    """Hypercolumns of one synthesized image paired with a manual mask."""

    seed: int
    hypercolumns: torch.Tensor  # (d, H, W)
    mask: np.ndarray  # (H, W) int
    num_classes: int

    def __post_init__(self) -> None:
        if self.hypercolumns.shape[-2:] != self.mask.shape:
            raise ValueError("mask dims must equal the hypercolumn resolution")
        if self.mask.min() < 0 or self.mask.max() >= self.num_classes:
            raise ValueError("mask contains class ids outside [0, num_classes)")


class PixelClassifier(nn.Module):
    """Three-layer MLP over a single hypercolumn."""

    def __init__(self, in_features, num_classes, hidden1=128, hidden2=32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_features, hidden1),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden1, hidden2),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden2, num_classes),
        )

    def forward(self, x):
        return self.net(x)


@dataclass
class SMGModel:
    members: list[PixelClassifier]
    feature_mean: torch.Tensor  # (d,)
    feature_std: torch.Tensor  # (d,)
    class_palette: tuple
    tap_fingerprint: str
    num_classes: int

    @property
    def feature_dim(self) -> int:
        return int(self.feature_mean.shape[0])


def _member_argmax(member, features):
    with torch.no_grad():
        return member(features).argmax(dim=1).numpy()


def _train_member(features, labels, num_classes, cfg: SMGConfig, seed: int,
                  hidden1: int, hidden2: int):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    member = PixelClassifier(features.shape[1], num_classes, hidden1, hidden2)
    opt = torch.optim.Adam(member.parameters(), lr=cfg.learning_rate)
    n = features.shape[0]
    batches_per_epoch = max(n // cfg.batch_size, 1)

    recent: list[float] = []
    best = float("inf")
    stall = 0
    for epoch in range(cfg.max_epochs):
        order = torch.randperm(n, generator=gen)
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(member(features[idx]), labels[idx])
            loss.backward()
            opt.step()

            recent.append(float(loss.detach()))
            if len(recent) > cfg.patience_batches:
                recent.pop(0)
            if epoch >= cfg.min_epochs and len(recent) == cfg.patience_batches:
                running = sum(recent) / len(recent)
                if running < best - cfg.improve_tol:
                    best = running
                    stall = 0
                else:
                    stall += 1
                    if stall >= cfg.patience_batches:
                        member.eval()
                        return member
    member.eval()
    return member


def train_smg(samples: list[AnnotatedSample], config: SMGConfig,
              tap_fingerprint: str, class_palette) -> SMGModel:
    """Train the MLP ensemble on pixel batches drawn from all annotated pixels.

    Members differ only by their initialization and batch-order seeds. Each
    stops once its running training loss fails to improve for
    `patience_batches` consecutive batches after `min_epochs` full passes.
    """
    if not samples:
        raise ValueError("need at least one annotated sample")
    num_classes = samples[0].num_classes
    d = samples[0].hypercolumns.shape[0]
    for s in samples:
        if s.num_classes != num_classes or s.hypercolumns.shape[0] != d:
            raise ValueError("annotated samples disagree on class count or feature dim")

    features = torch.cat(
        [s.hypercolumns.reshape(d, -1).T.to(torch.float32) for s in samples], dim=0
    )
    labels = torch.from_numpy(
        np.concatenate([s.mask.astype(np.int64).ravel() for s in samples])
    )

    present = np.bincount(labels.numpy(), minlength=num_classes)
    for cls in np.nonzero(present == 0)[0]:
        warnings.warn(
            f"class {cls} has no annotated pixels; it can only win a vote if predicted",
            stacklevel=2,
        )

    mean = features.mean(dim=0)
    std = features.std(dim=0).clamp_min(1e-6)
    features = (features - mean) / std

    members = [
        _train_member(features, labels, num_classes, config, config.seed + m,
                      config.hidden1, config.hidden2)
        for m in range(config.members)
    ]
    return SMGModel(
        members=members,
        feature_mean=mean,
        feature_std=std,
        class_palette=tuple(class_palette),
        tap_fingerprint=tap_fingerprint,
        num_classes=num_classes,
    )


def predict_mask(stack: FeatureStack, model: SMGModel, out_resolution: int,
                 tap_fingerprint: str) -> np.ndarray:
    """Majority-vote mask for each sample in the stack: (B, H, W) uint8."""
    if tap_fingerprint != model.tap_fingerprint:
        raise FingerprintMismatch(
            "feature taps do not match the generator this model was trained with"
        )
    cols = extract_hypercolumns(stack, out_resolution)
    batch, d, h, w = cols.shape
    if d != model.feature_dim:
        raise FingerprintMismatch(f"hypercolumn dim {d} != model dim {model.feature_dim}")
    flat = cols.detach().reshape(batch, d, -1).permute(0, 2, 1).reshape(-1, d)
    flat = (flat - model.feature_mean) / model.feature_std
    votes = np.stack([_member_argmax(m, flat) for m in model.members])
    modal = majority_vote(votes)
    return modal.reshape(batch, h, w).astype(np.uint8)


def save_smg(path, model: SMGModel) -> None:
    torch.save(
        {
            "members": [m.state_dict() for m in model.members],
            "feature_stats": {"mean": model.feature_mean, "std": model.feature_std},
            "class_palette": model.class_palette,
            "tap_fingerprint": model.tap_fingerprint,
            "C": model.num_classes,
        },
        path,
    )


def load_smg(path) -> SMGModel:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    mean = payload["feature_stats"]["mean"]
    members = []
    for state in payload["members"]:
        # hidden widths are implicit in the stored layer shapes
        h1 = state["net.0.weight"].shape[0]
        h2 = state["net.2.weight"].shape[0]
        member = PixelClassifier(mean.shape[0], payload["C"], h1, h2)
        member.load_state_dict(state)
        member.eval()
        members.append(member)
    return SMGModel(
        members=members,
        feature_mean=mean,
        feature_std=payload["feature_stats"]["std"],
        class_palette=tuple(tuple(p) for p in payload["class_palette"]),
        tap_fingerprint=payload["tap_fingerprint"],
        num_classes=payload["C"],
    )
