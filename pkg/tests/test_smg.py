import copy

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ocusynth.config import SMGConfig
from ocusynth.generator import FeatureStack
from ocusynth.smg import (
    AnnotatedSample,
    FingerprintMismatch,
    extract_hypercolumns,
    load_smg,
    majority_vote,
    predict_mask,
    save_smg,
    train_smg,
)

PALETTE = [(0, "a", "#000000"), (1, "b", "#111111"), (2, "c", "#222222"), (3, "d", "#333333")]


def _stack(taps, res):
    return FeatureStack(taps=taps, tap_ids=[f"t{i}" for i in range(len(taps))],
                        resolutions=[t.shape[-1] for t in taps]) if res is None else FeatureStack(
        taps=taps, tap_ids=[f"t{i}" for i in range(len(taps))], resolutions=res)


def bilinear_oracle(src: np.ndarray, out: int) -> np.ndarray:
    """Brute-force bilinear interpolation, align_corners=False semantics."""
    h, w = src.shape
    dst = np.zeros((out, out))
    for i in range(out):
        for j in range(out):
            y = (i + 0.5) * h / out - 0.5
            x = (j + 0.5) * w / out - 0.5
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            dy, dx = y - y0, x - x0
            y0c, y1c = np.clip([y0, y0 + 1], 0, h - 1)
            x0c, x1c = np.clip([x0, x0 + 1], 0, w - 1)
            dst[i, j] = (
                src[y0c, x0c] * (1 - dy) * (1 - dx)
                + src[y0c, x1c] * (1 - dy) * dx
                + src[y1c, x0c] * dy * (1 - dx)
                + src[y1c, x1c] * dy * dx
            )
    return dst


class TestHypercolumns:
    def test_channel_count_sums_taps(self):
        taps = [torch.randn(1, 2, 4, 4), torch.randn(1, 3, 8, 8)]
        cols = extract_hypercolumns(_stack(taps, [4, 8]), 8)
        assert cols.shape == (1, 5, 8, 8)

    def test_constant_tap_stays_constant(self):
        taps = [torch.full((1, 1, 2, 2), 0.37)]
        cols = extract_hypercolumns(_stack(taps, [2]), 8)
        assert torch.allclose(cols, torch.full_like(cols, 0.37))

    def test_bilinear_against_brute_force_oracle(self):
        src = np.array([[0.0, 0.0], [1.0, 1.0]])
        taps = [torch.tensor(src, dtype=torch.float32).reshape(1, 1, 2, 2)]
        cols = extract_hypercolumns(_stack(taps, [2]), 4)[0, 0].numpy()
        expected = bilinear_oracle(src, 4)
        # column-constant, rows interpolating 0 -> 1
        assert np.allclose(cols, expected, atol=1e-6)
        assert np.allclose(cols, cols[:, :1])
        assert np.allclose(cols[:, 0], [0.0, 0.25, 0.75, 1.0])

    def test_random_taps_match_oracle(self):
        rng = np.random.default_rng(0)
        src = rng.normal(size=(3, 3))
        taps = [torch.tensor(src, dtype=torch.float64).reshape(1, 1, 3, 3)]
        cols = extract_hypercolumns(_stack(taps, [3]), 7)[0, 0].numpy()
        assert np.allclose(cols, bilinear_oracle(src, 7), atol=1e-9)

    def test_empty_stack_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            extract_hypercolumns(_stack([], []), 8)


class TestMajorityVote:
    def test_clear_majority(self):
        votes = np.array([2] * 6 + [0] * 4).reshape(10, 1)
        assert majority_vote(votes)[0] == 2

    def test_tie_breaks_to_lowest_class(self):
        votes = np.array([1] * 5 + [3] * 5).reshape(10, 1)
        assert majority_vote(votes)[0] == 1

    def test_matches_brute_force_mode(self):
        rng = np.random.default_rng(1)
        votes = rng.integers(0, 5, size=(10, 4000))
        ours = majority_vote(votes)
        for j in range(votes.shape[1]):
            counts = np.bincount(votes[:, j], minlength=5)
            assert ours[j] == int(np.flatnonzero(counts == counts.max())[0])

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_mode_property(self, seed):
        rng = np.random.default_rng(seed)
        votes = rng.integers(0, 4, size=(10, 16))
        ours = majority_vote(votes)
        for j in range(16):
            counts = np.bincount(votes[:, j], minlength=4)
            assert counts[ours[j]] == counts.max()
            assert not (counts[: ours[j]] == counts.max()).any()


def _one_hot_sample(size=8, classes=4, seed=0):
    rng = np.random.default_rng(seed)
    mask = rng.integers(0, classes, size=(size, size)).astype(np.uint8)
    onehot = np.eye(classes, dtype=np.float32)[mask]
    cols = torch.from_numpy(onehot.transpose(2, 0, 1))
    return AnnotatedSample(seed=seed, hypercolumns=cols, mask=mask, num_classes=classes)


class TestTrainSMG:
    def test_one_hot_features_reach_perfect_accuracy(self):
        sample = _one_hot_sample()
        cfg = SMGConfig(members=10, max_epochs=40, seed=0)
        model = train_smg([sample], cfg, "fp", PALETTE)
        flat = sample.hypercolumns.reshape(4, -1).T
        flat = (flat - model.feature_mean) / model.feature_std
        for member in model.members:
            with torch.no_grad():
                pred = member(flat).argmax(dim=1).numpy()
            assert (pred == sample.mask.ravel()).mean() == 1.0
        stack = _stack([sample.hypercolumns.unsqueeze(0)], [8])
        ensemble = predict_mask(stack, model, 8, "fp")[0]
        assert (ensemble == sample.mask).mean() == 1.0

    def test_protocol_configurations_train(self):
        # 8 samples / 4 classes and 2 samples / 10 classes
        cfg = SMGConfig(members=2, max_epochs=4, seed=0)
        for n_samples, classes in ((8, 4), (2, 10)):
            samples = [_one_hot_sample(size=6, classes=classes, seed=s) for s in range(n_samples)]
            palette = [(i, f"c{i}", "#000000") for i in range(classes)]
            model = train_smg(samples, cfg, "fp", palette)
            assert len(model.members) == 2
            assert model.num_classes == classes

    def test_unannotated_class_warns_and_proceeds(self):
        sample = _one_hot_sample()
        sample.mask[sample.mask == 3] = 0  # class 3 now has zero annotated pixels
        cfg = SMGConfig(members=1, max_epochs=4, seed=0)
        with pytest.warns(UserWarning, match="class 3"):
            model = train_smg([sample], cfg, "fp", PALETTE)
        assert model.num_classes == 4

    def test_requires_at_least_one_sample(self):
        with pytest.raises(ValueError):
            train_smg([], SMGConfig(), "fp", PALETTE)


class TestPredictMask:
    def _trained(self, members=3):
        sample = _one_hot_sample()
        cfg = SMGConfig(members=members, max_epochs=10, seed=0)
        model = train_smg([sample], cfg, "fp", PALETTE)
        stack = _stack([sample.hypercolumns.unsqueeze(0)], [8])
        return model, stack, sample

    def test_fingerprint_mismatch_is_hard_error(self):
        model, stack, _ = self._trained()
        with pytest.raises(FingerprintMismatch):
            predict_mask(stack, model, 8, "other-fp")

    def test_member_order_invariance(self):
        model, stack, _ = self._trained()
        base = predict_mask(stack, model, 8, "fp")
        shuffled = copy.copy(model)
        shuffled.members = list(reversed(model.members))
        assert np.array_equal(base, predict_mask(stack, shuffled, 8, "fp"))

    def test_degenerate_ensemble_equals_single_member(self):
        model, stack, sample = self._trained(members=1)
        clones = copy.copy(model)
        clones.members = [model.members[0]] * 10
        ensemble = predict_mask(stack, clones, 8, "fp")[0]
        flat = sample.hypercolumns.reshape(4, -1).T
        flat = (flat - model.feature_mean) / model.feature_std
        with torch.no_grad():
            single = model.members[0](flat).argmax(dim=1).numpy().reshape(8, 8)
        assert np.array_equal(ensemble, single)

    def test_member_argmax_invariant_to_positive_logit_scaling(self):
        model, _, sample = self._trained(members=1)
        member = model.members[0]
        scaled = copy.deepcopy(member)
        with torch.no_grad():
            scaled.net[-1].weight.mul_(3.7)
            scaled.net[-1].bias.mul_(3.7)
        flat = sample.hypercolumns.reshape(4, -1).T
        with torch.no_grad():
            assert np.array_equal(
                member(flat).argmax(dim=1).numpy(), scaled(flat).argmax(dim=1).numpy()
            )

    def test_save_load_roundtrip(self, tmp_path):
        model, stack, _ = self._trained()
        save_smg(tmp_path / "smg.pt", model)
        loaded = load_smg(tmp_path / "smg.pt")
        assert loaded.tap_fingerprint == model.tap_fingerprint
        assert loaded.num_classes == model.num_classes
        assert np.array_equal(
            predict_mask(stack, model, 8, "fp"), predict_mask(stack, loaded, 8, "fp")
        )
