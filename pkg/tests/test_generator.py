import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from ocusynth.config import ConfigError, SynthesisConfig
from ocusynth.generator import (
    DualBranchGenerator,
    MappingNetwork,
    modulated_conv2d,
    style_mix,
    style_slot_resolutions,
    tap_signature,
)


class TestMapLatent:
    def test_deterministic(self, tiny_config):
        g = DualBranchGenerator(tiny_config)
        z = torch.randn(3, tiny_config.latent_dim)
        w1 = g.map_latent(z)
        w2 = g.map_latent(z)
        assert torch.equal(w1, w2)

    def test_output_length_matches_latent_dim(self):
        cfg = SynthesisConfig(latent_dim=64, output_resolution=8, channel_schedule={4: 8, 8: 8})
        g = DualBranchGenerator(cfg)
        w = g.map_latent(torch.randn(2, 64))
        assert w.shape == (2, 64)

    def test_dimension_mismatch_rejected(self, tiny_config):
        g = DualBranchGenerator(tiny_config)
        with pytest.raises(ConfigError):
            g.map_latent(torch.randn(2, tiny_config.latent_dim + 1))

    def test_identity_layers_expose_input_normalization(self):
        # with every layer an effective identity, the network reduces to the
        # input rescaling: z = c*e1 (c > 0) maps to sqrt(latent_dim)*e1
        d = 16
        mapping = MappingNetwork(d, num_layers=8)
        for layer in mapping.layers:
            layer.weight.data = torch.eye(d) / layer.weight_gain
            layer.bias.data.zero_()
        z = torch.zeros(1, d)
        z[0, 0] = 3.7
        w = mapping(z)
        expected = torch.zeros(1, d)
        expected[0, 0] = math.sqrt(d)
        assert torch.allclose(w, expected, atol=1e-4)


class TestSynthesize:
    def test_output_shapes_at_32(self, r32_config):
        g = DualBranchGenerator(r32_config)
        vis, nir, _ = g(torch.randn(2, 16), noise_mode="zero")
        assert vis.shape == (2, 3, 32, 32)
        assert nir.shape == (2, 1, 32, 32)

    def test_deterministic_with_fixed_noise(self, tiny_config):
        g = DualBranchGenerator(tiny_config)
        w = g.map_latent(torch.randn(2, 16))
        a = g.synthesize(w, noise_mode="fixed", noise_seed=7)
        b = g.synthesize(w, noise_mode="fixed", noise_seed=7)
        assert torch.equal(a[0], b[0])
        assert torch.equal(a[1], b[1])
        for ta, tb in zip(a[2].taps, b[2].taps):
            assert torch.equal(ta, tb)

    def test_tap_count_at_32(self, r32_config):
        g = DualBranchGenerator(r32_config)
        _, _, stack = g(torch.randn(1, 16), noise_mode="zero")
        # one tap for the 4x4 block plus two per block at 8, 16, 32
        assert len(stack.taps) == 7
        assert stack.resolutions == [4, 8, 8, 16, 16, 32, 32]
        assert [s[0] for s in tap_signature(r32_config)] == stack.tap_ids

    def test_styles_length_mismatch_rejected(self, tiny_config):
        g = DualBranchGenerator(tiny_config)
        w = g.map_latent(torch.randn(1, 16))
        with pytest.raises(ConfigError):
            g.synthesize([w, w], noise_mode="zero")  # needs 5 styles at R=16

    def test_broadcast_equivalence(self, tiny_config):
        g = DualBranchGenerator(tiny_config)
        w = g.map_latent(torch.randn(2, 16))
        single = g.synthesize(w, noise_mode="fixed", noise_seed=3)
        listed = g.synthesize([w] * tiny_config.num_style_inputs, noise_mode="fixed", noise_seed=3)
        assert torch.equal(single[0], listed[0])
        assert torch.equal(single[1], listed[1])

    def test_branches_read_the_recorded_taps(self, tiny_config):
        # the images must be reconstructible from the taps alone: both output
        # branches consume the exact trunk activations the stack records
        g = DualBranchGenerator(tiny_config)
        w = g.map_latent(torch.randn(2, 16))
        vis, nir, stack = g.synthesize(w, noise_mode="zero")

        def up(x):
            return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

        with torch.no_grad():
            acc_vis = g.synthesis.to_vis_in(stack.taps[0], w)
            acc_nir = g.synthesis.to_nir_in(stack.taps[0], w)
            for i, block in enumerate(g.synthesis.blocks):
                trunk = stack.taps[2 + 2 * i]  # the block's conv1 activation
                acc_vis = up(acc_vis) + block.to_vis(trunk, w)
                acc_nir = up(acc_nir) + block.to_nir(trunk, w)
        assert torch.allclose(acc_vis, vis, atol=1e-6)
        assert torch.allclose(acc_nir, nir, atol=1e-6)


class TestModulatedConv:
    def test_identity_styles_equal_plain_convolution(self):
        x = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        weight = torch.randn(6, 4, 3, 3, dtype=torch.float64)
        scales = torch.ones(2, 4, dtype=torch.float64)
        out = modulated_conv2d(x, weight, scales, demodulate=False)
        ref = F.conv2d(x, weight, padding=1)
        assert torch.allclose(out, ref, atol=1e-12)

    def test_single_channel_demodulation_formula(self):
        # 1x1 kernel, one in/out channel: effective weight is s*v/sqrt(s^2 v^2 + eps)
        v, s, eps = 0.73, 2.1, 1e-8
        x = torch.randn(1, 1, 5, 5, dtype=torch.float64)
        weight = torch.full((1, 1, 1, 1), v, dtype=torch.float64)
        scales = torch.full((1, 1), s, dtype=torch.float64)
        out = modulated_conv2d(x, weight, scales, demodulate=True, eps=eps)
        effective = s * v / math.sqrt(s * s * v * v + eps)
        assert torch.allclose(out, x * effective, atol=1e-12)
        assert abs(effective - math.copysign(1.0, v * s)) < 1e-6  # eps << s^2 v^2

    def test_zero_styles_guarded_by_eps(self):
        x = torch.randn(2, 3, 6, 6)
        weight = torch.randn(4, 3, 3, 3)
        scales = torch.zeros(2, 3)
        out = modulated_conv2d(x, weight, scales, demodulate=True, eps=1e-8)
        assert torch.isfinite(out).all()
        assert torch.allclose(out, torch.zeros_like(out))  # scaled weights are all zero

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            modulated_conv2d(
                torch.randn(1, 3, 4, 4), torch.randn(2, 3, 1, 1), torch.ones(1, 2)
            )

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_demodulated_weight_norms_in_unit_ball(self, seed):
        gen = torch.Generator().manual_seed(seed)
        weight = torch.randn(5, 3, 3, 3, generator=gen, dtype=torch.float64)
        scales = torch.randn(2, 3, generator=gen, dtype=torch.float64).exp()  # nonzero
        wmod = weight.unsqueeze(0) * scales[:, None, :, None, None]
        decoef = torch.rsqrt(wmod.square().sum(dim=[2, 3, 4]) + 1e-8)
        norms = (wmod * decoef[:, :, None, None, None]).square().sum(dim=[2, 3, 4]).sqrt()
        assert ((norms > 0) & (norms <= 1.0 + 1e-9)).all()


class TestStyleMix:
    def test_crossover_16_assigns_blocks_4_8_16_to_a(self, r32_config):
        w_a = torch.ones(1, 16)
        w_b = torch.zeros(1, 16)
        mixed = style_mix(w_a, w_b, 16, r32_config)
        slots = style_slot_resolutions(r32_config)
        assert slots == [4, 8, 8, 16, 16, 32, 32]
        for i, res in enumerate(slots):
            expected = w_a if res <= 16 else w_b
            assert torch.equal(mixed[:, i], expected)

    def test_all_a_sentinel_matches_plain_synthesis(self, tiny_config):
        g = DualBranchGenerator(tiny_config)
        w_a = g.map_latent(torch.randn(1, 16))
        w_b = g.map_latent(torch.randn(1, 16))
        mixed = style_mix(w_a, w_b, "all-a", tiny_config)
        out_mix = g.synthesize(mixed, noise_mode="fixed", noise_seed=5)
        out_plain = g.synthesize(w_a, noise_mode="fixed", noise_seed=5)
        assert torch.equal(out_mix[0], out_plain[0])
        assert torch.equal(out_mix[1], out_plain[1])

    def test_equal_inputs_equal_unmixed_output(self, tiny_config):
        g = DualBranchGenerator(tiny_config)
        w = g.map_latent(torch.randn(1, 16))
        mixed = style_mix(w, w, 8, tiny_config)
        out_mix = g.synthesize(mixed, noise_mode="fixed", noise_seed=2)
        out_plain = g.synthesize(w, noise_mode="fixed", noise_seed=2)
        assert torch.equal(out_mix[0], out_plain[0])
        assert torch.equal(out_mix[1], out_plain[1])
