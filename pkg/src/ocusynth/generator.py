"""Dual-branch style-based generator.

A mapping network turns latent vectors into intermediate style vectors; a
synthesis network built from style-modulated convolutions grows a shared
feature trunk from a learned 4x4 constant and renders it into pixel-aligned
VIS (RGB) and NIR (grayscale) images through per-resolution 1x1 output heads
accumulated over upsampled skips. Post-activation trunk outputs are exposed
as feature taps for downstream per-pixel classification.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, SynthesisConfig
from .imaging import to_uint8


@dataclass
class BimodalPair:
    """One aligned VIS/NIR image pair, CHW float tensors nominally in [-1, 1].

    Raw network outputs are linear and may exceed the range during training;
    values are clamped into range only when exported to 8-bit images.
    """

    vis: torch.Tensor  # (3, H, W)
    nir: torch.Tensor  # (1, H, W)

    def __post_init__(self) -> None:
        if self.vis.shape[-2:] != self.nir.shape[-2:]:
            raise ValueError("vis and nir spatial dims differ")

    def vis_uint8(self) -> np.ndarray:
        return to_uint8(self.vis.detach().cpu().numpy().transpose(1, 2, 0))

    def nir_uint8(self) -> np.ndarray:
        return to_uint8(self.nir.detach().cpu().numpy()[0])


@dataclass
class FeatureStack:
    """Post-activation trunk outputs of one synthesis pass, in layer order."""

    taps: list[torch.Tensor]  # each (B, C_i, H_i, W_i)
    tap_ids: list[str]
    resolutions: list[int]

    @property
    def channels(self) -> list[int]:
        return [t.shape[1] for t in self.taps]

    @property
    def total_channels(self) -> int:
        return sum(self.channels)


class EqualizedLinear(nn.Module):
    """Fully connected layer with runtime weight scaling (equalized learning rate)."""

    def __init__(self, in_features, out_features, lr_mul=1.0, bias_init=0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init)))
        self.weight_gain = lr_mul / math.sqrt(in_features)
        self.bias_gain = lr_mul

    def forward(self, x):
        return F.linear(x, self.weight * self.weight_gain, self.bias * self.bias_gain)


def modulated_conv2d(x, weight, style_scales, demodulate=True, eps=1e-8):
    """Convolution with per-sample input-channel weight modulation.

    Weights are scaled per input channel by `style_scales`; with `demodulate`
    each output channel's scaled kernel is renormalized to unit L2 norm (up to
    `eps`), mimicking instance normalization. Implemented as one grouped
    convolution over the batch.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    batch, in_ch, h, w = x.shape
    out_ch, w_in_ch, kh, kw = weight.shape
    if w_in_ch != in_ch:
        raise ConfigError(f"weight expects {w_in_ch} input channels, got {in_ch}")
    if style_scales.shape != (batch, in_ch):
        raise ConfigError(
            f"style_scales must be ({batch}, {in_ch}), got {tuple(style_scales.shape)}"
        )
    wmod = weight.unsqueeze(0) * style_scales[:, None, :, None, None]
    if demodulate:
        decoef = torch.rsqrt(wmod.square().sum(dim=[2, 3, 4]) + eps)
        wmod = wmod * decoef[:, :, None, None, None]
    out = F.conv2d(
        x.reshape(1, batch * in_ch, h, w),
        wmod.reshape(batch * out_ch, in_ch, kh, kw),
        padding=kh // 2,
        groups=batch,
    )
    return out.reshape(batch, out_ch, h, w)


class ModulatedConv2d(nn.Module):
    """Style-modulated convolution: an affine map of w produces the channel scales."""

    def __init__(self, in_channels, out_channels, kernel_size, style_dim, demodulate=True):
        super().__init__()
        self.affine = EqualizedLinear(style_dim, in_channels, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.weight_gain = 1.0 / math.sqrt(in_channels * kernel_size**2)
        self.demodulate = demodulate

    def forward(self, x, w):
        scales = self.affine(w)
        return modulated_conv2d(x, self.weight * self.weight_gain, scales, self.demodulate)


def _upsample2(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class _NoiseSource:
    """Yields per-layer noise maps in a fixed order so fixed-mode runs replay exactly."""

    def __init__(self, mode, seed, device, dtype):
        if mode not in ("random", "fixed", "zero"):
            raise ConfigError(f"unknown noise_mode {mode!r}")
        self.mode = mode
        self.device = device
        self.dtype = dtype
        self.generator = None
        if mode == "fixed":
            self.generator = torch.Generator(device="cpu").manual_seed(int(seed or 0))

    def __call__(self, like):
        if self.mode == "zero":
            return None
        b, _, h, w = like.shape
        noise = torch.randn((b, 1, h, w), generator=self.generator, dtype=self.dtype)
        return noise.to(self.device)


class StyleConv(nn.Module):
    """Modulated 3x3 convolution + noise injection + bias + leaky ReLU (slope 0.2)."""

    def __init__(self, in_channels, out_channels, style_dim, upsample=False):
        super().__init__()
        self.conv = ModulatedConv2d(in_channels, out_channels, 3, style_dim)
        self.noise_strength = nn.Parameter(torch.zeros(()))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.upsample = upsample

    def forward(self, x, w, noise_source):
        if self.upsample:
            x = _upsample2(x)
        x = self.conv(x, w)
        noise = noise_source(x)
        if noise is not None:
            x = x + self.noise_strength * noise
        return F.leaky_relu(x + self.bias.view(1, -1, 1, 1), 0.2)


class OutputConv(nn.Module):
    """Linear 1x1 modulated conv (no demodulation) rendering trunk features to a domain."""

    def __init__(self, in_channels, out_channels, style_dim):
        super().__init__()
        self.conv = ModulatedConv2d(in_channels, out_channels, 1, style_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x, w):
        return self.conv(x, w) + self.bias.view(1, -1, 1, 1)


class SynthesisBlock(nn.Module):
    """One resolution-doubling block: two style convs plus VIS/NIR output heads."""

    def __init__(self, in_channels, out_channels, style_dim, resolution):
        super().__init__()
        self.resolution = resolution
        self.conv0 = StyleConv(in_channels, out_channels, style_dim, upsample=True)
        self.conv1 = StyleConv(out_channels, out_channels, style_dim)
        self.to_vis = OutputConv(out_channels, 3, style_dim)
        self.to_nir = OutputConv(out_channels, 1, style_dim)


class SynthesisNetwork(nn.Module):
    def __init__(self, config: SynthesisConfig):
        super().__init__()
        self.config = config
        ch = config.channel_schedule
        d = config.latent_dim
        self.const = nn.Parameter(torch.randn(ch[4], 4, 4))
        self.conv_in = StyleConv(ch[4], ch[4], d)
        self.to_vis_in = OutputConv(ch[4], 3, d)
        self.to_nir_in = OutputConv(ch[4], 1, d)
        self.blocks = nn.ModuleList(
            SynthesisBlock(ch[r // 2], ch[r], d, r) for r in config.resolutions[1:]
        )

    def forward(self, ws, noise_mode=None, noise_seed=None):
        """ws: (B, num_style_inputs, latent_dim). Returns (vis, nir, FeatureStack)."""
        cfg = self.config
        if ws.ndim != 3 or ws.shape[1] != cfg.num_style_inputs or ws.shape[2] != cfg.latent_dim:
            raise ConfigError(
                f"expected styles of shape (B, {cfg.num_style_inputs}, {cfg.latent_dim}), "
                f"got {tuple(ws.shape)}"
            )
        mode = noise_mode or cfg.noise_mode
        noise = _NoiseSource(mode, noise_seed, ws.device, ws.dtype)

        batch = ws.shape[0]
        x = self.const.to(ws.dtype).unsqueeze(0).expand(batch, -1, -1, -1)
        x = self.conv_in(x, ws[:, 0], noise)
        taps, tap_ids, resolutions = [x], ["b4.conv"], [4]
        vis = self.to_vis_in(x, ws[:, 0])
        nir = self.to_nir_in(x, ws[:, 0])

        w_idx = 1
        for block in self.blocks:
            x = block.conv0(x, ws[:, w_idx], noise)
            taps.append(x)
            tap_ids.append(f"b{block.resolution}.conv0")
            resolutions.append(block.resolution)
            x = block.conv1(x, ws[:, w_idx + 1], noise)
            taps.append(x)
            tap_ids.append(f"b{block.resolution}.conv1")
            resolutions.append(block.resolution)
            vis = _upsample2(vis) + block.to_vis(x, ws[:, w_idx + 1])
            nir = _upsample2(nir) + block.to_nir(x, ws[:, w_idx + 1])
            w_idx += 2

        return vis, nir, FeatureStack(taps, tap_ids, resolutions)


class MappingNetwork(nn.Module):
    """Fully connected stack turning latent z into intermediate style w.

    The input is first rescaled to norm sqrt(latent_dim); each layer is an
    equalized linear followed by leaky ReLU.
    """

    def __init__(self, latent_dim, num_layers=8, lr_mul=0.01):
        super().__init__()
        self.latent_dim = latent_dim
        self.layers = nn.ModuleList(
            EqualizedLinear(latent_dim, latent_dim, lr_mul=lr_mul) for _ in range(num_layers)
        )

    def forward(self, z):
        if z.shape[-1] != self.latent_dim:
            raise ConfigError(f"latent has {z.shape[-1]} entries, expected {self.latent_dim}")
        x = z * torch.rsqrt(z.square().mean(dim=-1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2)
        return x


def style_slot_resolutions(config: SynthesisConfig) -> list[int]:
    """Block resolution attached to each style input slot, in slot order."""
    slots = [4]
    for r in config.resolutions[1:]:
        slots.extend([r, r])
    return slots


def style_mix(w_a, w_b, crossover_resolution, config: SynthesisConfig):
    """Per-slot style assignment for mixing two style vectors.

    Slots belonging to blocks with resolution <= `crossover_resolution` take
    `w_a`, the rest `w_b`. The sentinels "all-a" / "all-b" (or, equivalently,
    a crossover at or above the output resolution / below 4) cover the
    degenerate mixes.
    """
    if isinstance(crossover_resolution, str):
        if crossover_resolution == "all-a":
            crossover = config.output_resolution
        elif crossover_resolution == "all-b":
            crossover = 0
        else:
            raise ConfigError(f"unknown crossover sentinel {crossover_resolution!r}")
    else:
        crossover = int(crossover_resolution)
    if w_a.shape != w_b.shape:
        raise ConfigError("style vectors must share a shape")
    slots = style_slot_resolutions(config)
    picks = [w_a if res <= crossover else w_b for res in slots]
    return torch.stack(picks, dim=-2)


class DualBranchGenerator(nn.Module):
    def __init__(self, config: SynthesisConfig):
        super().__init__()
        self.config = config
        self.mapping = MappingNetwork(config.latent_dim, config.mapping_layers)
        self.synthesis = SynthesisNetwork(config)

    def map_latent(self, z):
        return self.mapping(z)

    def broadcast_styles(self, styles):
        """Accept a single w (B, d), a stacked (B, k, d), or a length-k list of (B, d)."""
        k = self.config.num_style_inputs
        if isinstance(styles, (list, tuple)):
            if len(styles) != k:
                raise ConfigError(f"expected {k} per-layer styles, got {len(styles)}")
            return torch.stack(list(styles), dim=1)
        if styles.ndim == 2:
            return styles.unsqueeze(1).expand(-1, k, -1)
        if styles.ndim == 3:
            if styles.shape[1] != k:
                raise ConfigError(f"expected {k} per-layer styles, got {styles.shape[1]}")
            return styles
        raise ConfigError(f"cannot interpret styles of shape {tuple(styles.shape)}")

    def synthesize(self, styles, noise_mode=None, noise_seed=None):
        ws = self.broadcast_styles(styles)
        return self.synthesis(ws, noise_mode=noise_mode, noise_seed=noise_seed)

    def forward(self, z, noise_mode=None, noise_seed=None):
        w = self.map_latent(z)
        return self.synthesize(w, noise_mode=noise_mode, noise_seed=noise_seed)


def tap_signature(config: SynthesisConfig) -> list[tuple[str, int, int]]:
    """(tap_id, resolution, channels) for every trunk tap, derivable from config alone."""
    ch = config.channel_schedule
    sig = [("b4.conv", 4, ch[4])]
    for r in config.resolutions[1:]:
        sig.append((f"b{r}.conv0", r, ch[r]))
        sig.append((f"b{r}.conv1", r, ch[r]))
    return sig


def weights_fingerprint(module_or_state) -> str:
    """SHA-256 over a state dict's sorted keys and tensor bytes."""
    state = module_or_state
    if isinstance(module_or_state, nn.Module):
        state = module_or_state.state_dict()
    h = hashlib.sha256()
    for key in sorted(state):
        h.update(key.encode())
        tensor = state[key]
        h.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def tap_fingerprint(config: SynthesisConfig, generator_fingerprint: str) -> str:
    """Identity of the feature-tap source: tap layout plus generator weights."""
    payload = json.dumps({"taps": tap_signature(config), "weights": generator_fingerprint})
    return hashlib.sha256(payload.encode()).hexdigest()
