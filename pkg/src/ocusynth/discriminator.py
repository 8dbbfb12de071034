"""Per-domain discriminators and the R1 gradient penalty.

Both domains use the same residual downsampling architecture: a 1x1
from-domain convolution, residual blocks halving the resolution down to 4x4,
and a dense head producing one unbounded logit. VIS and NIR instances never
share parameters.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, SynthesisConfig

DOMAIN_CHANNELS = {"VIS": 3, "NIR": 1}


class EqualizedConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.weight_gain = 1.0 / math.sqrt(in_channels * kernel_size**2)
        self.padding = kernel_size // 2

    def forward(self, x):
        return F.conv2d(x, self.weight * self.weight_gain, self.bias, padding=self.padding)


class EqualizedLinearHead(nn.Module):
    def __init__(self, in_features, out_features):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        self.weight_gain = 1.0 / math.sqrt(in_features)

    def forward(self, x):
        return F.linear(x, self.weight * self.weight_gain, self.bias)


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions plus a 1x1 skip, average-pool downsampling by 2."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv0 = EqualizedConv2d(in_channels, in_channels, 3)
        self.conv1 = EqualizedConv2d(in_channels, out_channels, 3)
        self.skip = EqualizedConv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x):
        y = F.leaky_relu(self.conv0(x), 0.2)
        y = F.leaky_relu(self.conv1(y), 0.2)
        y = F.avg_pool2d(y, 2)
        return (y + self.skip(F.avg_pool2d(x, 2))) * (1.0 / math.sqrt(2.0))


class Discriminator(nn.Module):
    def __init__(self, config: SynthesisConfig, domain: str):
        super().__init__()
        if domain not in DOMAIN_CHANNELS:
            raise ConfigError(f"unknown domain {domain!r}")
        self.domain = domain
        self.resolution = config.output_resolution
        self.in_channels = DOMAIN_CHANNELS[domain]
        ch = config.channel_schedule
        self.from_domain = EqualizedConv2d(self.in_channels, ch[self.resolution], 1)
        blocks = []
        r = self.resolution
        while r > 4:
            blocks.append(ResidualBlock(ch[r], ch[r // 2]))
            r //= 2
        self.blocks = nn.ModuleList(blocks)
        self.final_conv = EqualizedConv2d(ch[4], ch[4], 3)
        self.fc = EqualizedLinearHead(ch[4] * 16, ch[4])
        self.out = EqualizedLinearHead(ch[4], 1)

    def forward(self, img):
        if img.ndim != 4:
            raise ValueError(f"expected a batched NCHW image, got ndim={img.ndim}")
        if img.shape[1] != self.in_channels:
            raise ValueError(
                f"{self.domain} discriminator expects {self.in_channels} channels, "
                f"got {img.shape[1]}"
            )
        if img.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(
                f"expected {self.resolution}x{self.resolution} input, got {tuple(img.shape[-2:])}"
            )
        x = F.leaky_relu(self.from_domain(img), 0.2)
        for block in self.blocks:
            x = block(x)
        x = F.leaky_relu(self.final_conv(x), 0.2)
        x = F.leaky_relu(self.fc(x.flatten(1)), 0.2)
        return self.out(x).squeeze(1)


def r1_penalty(discriminator, real_batch, gamma1):
    """gamma1/2 times the batch-mean squared norm of d(logit)/d(input) on real images.

    A constant discriminator has zero input gradient and yields 0; a logit
    that does not require grad at all (broken graph) raises loudly.
    """
    real = real_batch.detach().requires_grad_(True)
    logits = discriminator(real)
    if not logits.requires_grad:
        raise RuntimeError("discriminator output is disconnected from the autograd graph")
    grads = torch.autograd.grad(logits.sum(), real, create_graph=True, allow_unused=True)[0]
    if grads is None:  # output provably independent of the input: gradient is zero
        return real.new_zeros(())
    sq_norms = grads.reshape(grads.shape[0], -1).square().sum(dim=1)
    return 0.5 * gamma1 * sq_norms.mean()
