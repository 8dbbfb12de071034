import json

import numpy as np
import pytest
import torch

from ocusynth.config import SynthesisConfig
from ocusynth.dataset import (
    composite_alignment_image,
    generate_triplets,
    load_triplet_arrays,
    nearest_training_sample,
    read_manifest,
    write_procedural_dataset,
)
from ocusynth.generator import BimodalPair, DualBranchGenerator
from ocusynth.imaging import load_png, luma, rgb_to_ycbcr, ycbcr_to_rgb
from ocusynth.procedural import PALETTE_4, render_dataset
from ocusynth.smg import AnnotatedSample, extract_hypercolumns, train_smg
from ocusynth.config import SMGConfig
from ocusynth.generator import tap_fingerprint, weights_fingerprint


class TestColorConversion:
    def test_round_trip_error_at_most_one(self):
        rng = np.random.default_rng(0)
        rgb = rng.integers(0, 256, size=(64, 64, 3)).astype(np.uint8)
        back = ycbcr_to_rgb(rgb_to_ycbcr(rgb.astype(np.float64)))
        err = np.abs(back - rgb.astype(np.float64)).max()
        assert err <= 1.0

    def test_neutral_chroma_for_grayscale(self):
        gray = np.repeat(np.arange(0, 256, 8, dtype=np.uint8).reshape(-1, 1), 3, axis=1)
        gray = gray.reshape(-1, 1, 3).astype(np.float64)
        ycbcr = rgb_to_ycbcr(gray)
        assert np.allclose(ycbcr[..., 1], 128.0, atol=1e-9)
        assert np.allclose(ycbcr[..., 2], 128.0, atol=1e-9)


def _pair_from_uint8(vis_u8, nir_u8):
    vis = torch.from_numpy((vis_u8.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1))
    nir = torch.from_numpy(nir_u8.astype(np.float32) / 127.5 - 1.0).unsqueeze(0)
    return BimodalPair(vis=vis, nir=nir)


class TestComposite:
    def test_identity_when_nir_equals_vis_luma(self):
        rng = np.random.default_rng(1)
        vis_u8 = rng.integers(30, 220, size=(16, 16, 3)).astype(np.uint8)
        nir_u8 = np.floor(luma(vis_u8) + 0.5).astype(np.uint8)
        comp = composite_alignment_image(_pair_from_uint8(vis_u8, nir_u8))
        assert np.abs(comp.astype(int) - vis_u8.astype(int)).max() <= 1

    def test_grayscale_vis_replicates_nir(self):
        rng = np.random.default_rng(2)
        g = rng.integers(0, 256, size=(8, 8), dtype=np.uint8)
        vis_u8 = np.stack([g, g, g], axis=-1)
        nir_u8 = rng.integers(0, 256, size=(8, 8), dtype=np.uint8)
        comp = composite_alignment_image(_pair_from_uint8(vis_u8, nir_u8))
        for c in range(3):
            assert np.abs(comp[..., c].astype(int) - nir_u8.astype(int)).max() <= 1

    def test_idempotent_up_to_rounding(self):
        rng = np.random.default_rng(3)
        vis_u8 = rng.integers(0, 256, size=(12, 12, 3)).astype(np.uint8)
        nir_u8 = np.floor(luma(vis_u8) + 0.5).astype(np.uint8)
        pair = _pair_from_uint8(vis_u8, nir_u8)
        once = composite_alignment_image(pair)
        twice = composite_alignment_image(_pair_from_uint8(once, nir_u8))
        assert np.abs(once.astype(int) - twice.astype(int)).max() <= 1


class TestNearestSample:
    def test_exact_match_returns_zero(self):
        rng = np.random.default_rng(0)
        images = [rng.normal(size=(4, 4)) for _ in range(10)]
        idx, d = nearest_training_sample(images[7], images)
        assert idx == 7 and d == 0.0

    def test_hand_computed_mses(self):
        query = np.zeros((2, 2))
        a = np.full((2, 2), 0.5)  # mse 0.25
        b = np.full((2, 2), np.sqrt(0.5))  # mse 0.5
        idx, d = nearest_training_sample(query, [b, a])
        assert idx == 1 and d == pytest.approx(0.25)

    def test_tie_breaks_to_lowest_index(self):
        query = np.zeros((2, 2))
        same = np.ones((2, 2))
        idx, _ = nearest_training_sample(query, [same, same, same])
        assert idx == 0

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            nearest_training_sample(np.zeros((2, 2)), [])


@pytest.fixture(scope="module")
def tiny_generator():
    torch.manual_seed(0)
    cfg = SynthesisConfig(latent_dim=8, output_resolution=16, channel_schedule={4: 8, 8: 8, 16: 8})
    g = DualBranchGenerator(cfg)
    g.eval()
    for p in g.parameters():
        p.requires_grad_(False)
    return g


@pytest.fixture(scope="module")
def tiny_smg(tiny_generator):
    g = tiny_generator
    fp = tap_fingerprint(g.config, weights_fingerprint(g))
    samples = []
    for seed in range(2):
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn(1, 8, generator=gen)
        with torch.no_grad():
            w = g.map_latent(z)
            _, _, stack = g.synthesize(w, noise_mode="fixed", noise_seed=seed)
        cols = extract_hypercolumns(stack, 16)[0]
        rng = np.random.default_rng(seed)
        mask = rng.integers(0, 4, size=(16, 16)).astype(np.uint8)
        samples.append(AnnotatedSample(seed=seed, hypercolumns=cols, mask=mask, num_classes=4))
    return train_smg(samples, SMGConfig(members=2, max_epochs=2, seed=0), fp, PALETTE_4)


class TestGenerateTriplets:
    def test_deterministic_manifest_hash(self, tiny_generator, tiny_smg, tmp_path):
        m1 = generate_triplets(tiny_generator, tiny_smg, 3, 5, tmp_path / "a", PALETTE_4)
        m2 = generate_triplets(tiny_generator, tiny_smg, 3, 5, tmp_path / "b", PALETTE_4)
        assert m1.content_hash == m2.content_hash

    def test_empty_dataset_is_valid(self, tiny_generator, tiny_smg, tmp_path):
        manifest = generate_triplets(tiny_generator, tiny_smg, 0, 0, tmp_path / "e", PALETTE_4)
        assert manifest.records == []
        assert read_manifest(tmp_path / "e").content_hash == manifest.content_hash

    def test_all_triplet_files_share_dims(self, tiny_generator, tiny_smg, tmp_path):
        root = tmp_path / "c"
        manifest = generate_triplets(tiny_generator, tiny_smg, 2, 0, root, PALETTE_4)
        for rec in manifest.records:
            vis = load_png(root / rec.vis)
            nir = load_png(root / rec.nir)
            mask = load_png(root / rec.mask)
            assert vis.shape[:2] == nir.shape[:2] == mask.shape[:2]
            assert mask.max() < 4

    def test_hash_changes_when_any_record_byte_changes(self, tiny_generator, tiny_smg, tmp_path):
        from ocusynth.dataset import compute_content_hash

        root = tmp_path / "d"
        manifest = generate_triplets(tiny_generator, tiny_smg, 2, 0, root, PALETTE_4)
        target = root / manifest.records[0].mask
        data = bytearray(target.read_bytes())
        data[-1] ^= 0xFF
        target.write_bytes(bytes(data))
        assert compute_content_hash(root, manifest.records) != manifest.content_hash

    def test_unlabeled_generation_for_annotation(self, tiny_generator, tmp_path):
        manifest = generate_triplets(tiny_generator, None, 2, 0, tmp_path / "u", PALETTE_4)
        assert all(rec.mask is None for rec in manifest.records)
        assert all(rec.smg_fingerprint is None for rec in manifest.records)

    def test_smg_fingerprint_mismatch_rejected(self, tiny_smg, tmp_path):
        torch.manual_seed(99)
        cfg = SynthesisConfig(latent_dim=8, output_resolution=16,
                              channel_schedule={4: 8, 8: 8, 16: 8})
        other = DualBranchGenerator(cfg)
        with pytest.raises(RuntimeError, match="fingerprint"):
            generate_triplets(other, tiny_smg, 1, 0, tmp_path / "f", PALETTE_4)


class TestProceduralDatasetLayout:
    def test_write_and_reload(self, tmp_path):
        vis, nir, masks = render_dataset(4, 0, 16)
        root = tmp_path / "proc"
        manifest = write_procedural_dataset(root, vis, nir, masks, PALETTE_4)
        assert manifest.config_snapshot["source"] == "procedural"
        lvis, lnir, lmasks, loaded = load_triplet_arrays(root)
        assert lvis.shape == vis.shape
        assert np.array_equal(lmasks, masks)
        # 8-bit quantization bounds the reload error
        assert np.abs(lvis - vis).max() <= 1.0 / 127.5
        assert loaded.content_hash == manifest.content_hash

    def test_manifest_json_schema(self, tmp_path):
        vis, nir, masks = render_dataset(1, 0, 16)
        write_procedural_dataset(tmp_path / "p", vis, nir, masks, PALETTE_4)
        data = json.loads((tmp_path / "p" / "manifest.json").read_text())
        assert set(data.keys()) == {"records", "palette", "config_snapshot", "content_hash"}
        rec = data["records"][0]
        assert set(rec.keys()) == {
            "id", "seed", "vis", "nir", "mask", "checkpoint_fingerprint", "smg_fingerprint"
        }
        assert {p["class_id"] for p in data["palette"]} == {0, 1, 2, 3}
