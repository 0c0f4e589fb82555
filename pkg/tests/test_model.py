"""Assembled model: variant wiring, gradient coverage, and cross-variant
weight compatibility."""

import numpy as np
import pytest

import helpers
from tsgseg.model import ModelConfig, build_model, copy_matching_parameters
from tsgseg.segbench import make_baseline
from tsgseg.tensor import ShapeError, Tensor, cross_entropy


def run_image(seed=0):
    return np.random.default_rng(seed).uniform(size=(16, 16, 3))


class TestConfig:
    def test_stage_grids(self):
        cfg = helpers.tiny_model_config()
        assert cfg.stage_grids() == [(4, 4), (2, 2), (1, 1)]
        assert cfg.num_stages == 3

    def test_stage_list_alignment(self):
        with pytest.raises(ValueError):
            helpers.tiny_model_config(stage_heads=(2, 2))


class TestForward:
    def test_shapes_and_gates(self):
        model = build_model(helpers.tiny_model_config(), seed=0)
        out = model(Tensor(run_image()))
        assert out.logits.p.shape == (16, 4)
        assert out.logits.spatial == (4, 4)
        assert out.scores.shape == (16, 4)
        np.testing.assert_allclose(out.logits.p.data.sum(axis=1), np.ones(16),
                                   atol=1e-9)
        # two encoder merge steps, decoder blocks 2 and 3 gated
        assert [g.gates.shape for g in out.encoder_gates] == [(4, 2), (16, 2)]
        assert [g.gates.shape for g in out.decoder_gates] == [(16, 3), (16, 3)]

    def test_fresh_model_predicts_uniform_classes(self):
        # Identical (zero-initialized) queries stay identical through every
        # block, so each patch scores all classes equally.
        model = build_model(helpers.tiny_model_config(), seed=1)
        out = model(Tensor(run_image(1)))
        spread = out.scores.data.max(axis=1) - out.scores.data.min(axis=1)
        np.testing.assert_allclose(spread, np.zeros(16), atol=1e-12)
        np.testing.assert_allclose(out.logits.p.data, 0.25, atol=1e-12)

    def test_every_parameter_receives_gradient(self):
        rng = np.random.default_rng(2)
        for variant in ("tsg", "fpn_sum", "plain_sum", "single_scale(2)"):
            cfg = helpers.tiny_model_config(**make_baseline(variant))
            model = build_model(cfg, seed=3)
            helpers.randomize_gate_mlps(model, rng)
            out = model(Tensor(run_image(2)))
            labels = rng.integers(0, 4, size=16)
            cross_entropy(out.scores, labels).backward()
            missing = [n for n, p in model.named_parameters() if p.grad is None]
            assert missing == [], f"{variant}: no gradient for {missing}"

    def test_deterministic_build(self):
        cfg = helpers.tiny_model_config()
        a = build_model(cfg, seed=7)
        b = build_model(cfg, seed=7)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)


class TestVariants:
    def test_single_scale_keeps_prefix_stages(self):
        cfg = helpers.tiny_model_config(**make_baseline("single_scale(2)"))
        model = build_model(cfg, seed=4)
        assert len(model.backbone.stages) == 2
        out = model(Tensor(run_image(4)))
        assert out.encoder_gates == [] and out.decoder_gates == []
        assert out.logits.p.shape == (16, 4)

    def test_single_scale_features_match_full_backbone(self):
        # The hierarchy is feed-forward: truncating stages must not change
        # the features of the stages that remain.
        full = build_model(helpers.tiny_model_config(), seed=5)
        cfg = helpers.tiny_model_config(**make_baseline("single_scale(2)"))
        small = build_model(cfg, seed=99)
        copy_matching_parameters(full.backbone, small.backbone)
        img = Tensor(run_image(5))
        feats_full, _ = full.backbone(img)
        feats_small, _ = small.backbone(img)
        assert len(feats_small) == 2
        for a, b in zip(feats_full[:2], feats_small):
            np.testing.assert_allclose(a.data.data, b.data.data, atol=1e-12)

    def test_plain_sum_has_no_gate_parameters(self):
        cfg = helpers.tiny_model_config(**make_baseline("plain_sum"))
        model = build_model(cfg, seed=6)
        names = [n for n, _ in model.named_parameters()]
        assert not any("head" in n or "integrator" in n for n in names)

    def test_shared_tsg_reduces_parameter_count(self):
        base = build_model(helpers.tiny_model_config(), seed=8)
        shared = build_model(helpers.tiny_model_config(shared_tsg=True), seed=8)
        assert len(shared.named_parameters()) < len(base.named_parameters())
        out = shared(Tensor(run_image(8)))
        assert [g.gates.shape for g in out.encoder_gates] == [(4, 2), (16, 2)]

    def test_single_requires_stage(self):
        with pytest.raises(ValueError):
            build_model(helpers.tiny_model_config(encoder_fusion="single"),
                        seed=9)


class TestWeightTransfer:
    def test_copy_into_subset_model(self):
        src = build_model(helpers.tiny_model_config(), seed=10)
        dst_cfg = helpers.tiny_model_config(**make_baseline("fpn_sum"))
        dst = build_model(dst_cfg, seed=11)
        copied = copy_matching_parameters(src, dst)
        assert len(copied) == len(dst.named_parameters())
        src_params = dict(src.named_parameters())
        for name, p in dst.named_parameters():
            np.testing.assert_array_equal(p.data, src_params[name].data)

    def test_copy_is_by_value(self):
        src = build_model(helpers.tiny_model_config(), seed=12)
        dst = build_model(helpers.tiny_model_config(), seed=13)
        copy_matching_parameters(src, dst)
        name, p = dst.named_parameters()[0]
        p.data = p.data + 1.0
        assert not np.array_equal(p.data, dict(src.named_parameters())[name].data)

    def test_missing_name_rejected(self):
        small = build_model(
            helpers.tiny_model_config(**make_baseline("plain_sum")), seed=14)
        full = build_model(helpers.tiny_model_config(), seed=15)
        with pytest.raises(KeyError):
            copy_matching_parameters(small, full)

    def test_shape_mismatch_rejected(self):
        a = build_model(helpers.tiny_model_config(), seed=16)
        b = build_model(helpers.tiny_model_config(d_f=6, d_a=6), seed=17)
        with pytest.raises(ShapeError):
            copy_matching_parameters(a, b)
