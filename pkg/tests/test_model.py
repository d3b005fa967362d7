import numpy as np
import pytest

from minispot.model import (AdamW, GtInstance, SpotterConfig, SpotterModel,
                            brute_force_match, build_point_char_targets,
                            compute_loss, hungarian_match, matching_cost,
                            train_step, transcribe)
from minispot.scenes import ALPHABET
from minispot.splines import sample_curve
from minispot.tensor import Tensor


def tiny_config(**overrides) -> SpotterConfig:
    base = dict(channels=16, encoder_depth=1, decoder_depth=1,
                num_proposals=6, points_per_curve=4, image_size=32,
                backbone_stem=8)
    base.update(overrides)
    return SpotterConfig(**base)


def make_gt(seed=0, num=1, n=4):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(num):
        x0, y0 = rng.uniform(0.2, 0.5, size=2)
        cp = np.stack([[x0 + 0.1 * k, y0 + 0.02 * k] for k in range(4)])
        chars = rng.integers(0, 96, size=int(rng.integers(1, 4)))
        bbox = np.array([x0 + 0.15, y0 + 0.03, 0.36, 0.1])
        out.append(GtInstance(cp, chars, bbox))
    return out


class TestBackbone:
    def test_stride_arithmetic(self):
        model = SpotterModel(tiny_config(image_size=64), seed=0)
        f3, f4, f5 = model.backbone(Tensor(np.zeros((64, 64), dtype=np.float32)))
        assert f3.shape[:2] == (8, 8)
        assert f4.shape[:2] == (4, 4)
        assert f5.shape[:2] == (2, 2)

    def test_zero_image_zero_bias_gives_zero_maps(self):
        model = SpotterModel(tiny_config(), seed=0)
        for conv in model.backbone.convs:
            conv.bias.data = np.zeros_like(conv.bias.data)
        f3, _, _ = model.backbone(Tensor(np.zeros((32, 32), dtype=np.float32)))
        assert np.allclose(f3.data, 0.0)

    def test_indivisible_extents_rejected(self):
        model = SpotterModel(tiny_config(), seed=0)
        with pytest.raises(ValueError):
            model.backbone(Tensor(np.zeros((30, 30), dtype=np.float32)))


class TestForward:
    @pytest.mark.parametrize("k,n,c", [(4, 3, 16), (6, 4, 16), (2, 5, 32)])
    def test_shapes_across_configs(self, k, n, c):
        cfg = tiny_config(num_proposals=k, points_per_curve=n, channels=c)
        model = SpotterModel(cfg, seed=1)
        img = np.random.default_rng(0).uniform(size=(32, 32)).astype(np.float32)
        out = model.forward(img)
        assert out.instance_logits.shape == (k,)
        assert out.char_logits.shape == (k, n, cfg.num_classes + 1)
        assert out.center_points.shape == (k, n, 2)
        assert out.bbox.shape == (k, 4)
        for t in (out.instance_logits, out.char_logits, out.center_points, out.bbox):
            assert np.all(np.isfinite(t.data))

    def test_outputs_bounded(self):
        model = SpotterModel(tiny_config(), seed=2)
        img = np.random.default_rng(1).uniform(size=(32, 32)).astype(np.float32)
        out = model.forward(img)
        assert np.all((out.center_points.data >= 0) & (out.center_points.data <= 1))
        assert np.all((out.bbox.data >= 0) & (out.bbox.data <= 1))
        assert np.all((out.proposals.sampled_points >= 0)
                      & (out.proposals.sampled_points <= 1))

    def test_char_head_default_class_count(self):
        cfg = SpotterConfig()
        assert cfg.num_proposals == 100
        assert cfg.points_per_curve == 25
        assert cfg.num_classes == 96
        model = SpotterModel(tiny_config(num_proposals=3), seed=0)
        img = np.zeros((32, 32), dtype=np.float32)
        assert model.forward(img).char_logits.shape[-1] == 97


class TestDecoder:
    def test_depth_zero_is_identity(self):
        cfg = tiny_config(decoder_depth=0)
        model = SpotterModel(cfg, seed=0)
        img = np.random.default_rng(2).uniform(size=(32, 32)).astype(np.float32)
        out = model.forward(img)
        # with no decoder layers, decoded features equal positional queries
        f3, f4, f5 = model.backbone(Tensor(img))
        memory = model.encoder(model.tokenizer(f3, f4, f5))
        q = Tensor(np.zeros((2, 3, cfg.channels), dtype=np.float32))
        assert model.decoder_forward(q, memory) is q

    def test_group_permutation_equivariance(self):
        cfg = tiny_config(decoder_depth=2)
        model = SpotterModel(cfg, seed=3)
        rng = np.random.default_rng(4)
        img = rng.uniform(size=(32, 32)).astype(np.float32)
        f3, f4, f5 = model.backbone(Tensor(img))
        memory = model.encoder(model.tokenizer(f3, f4, f5))
        q = rng.normal(size=(5, 3, cfg.channels)).astype(np.float32)
        perm = rng.permutation(5)
        out = model.decoder_forward(Tensor(q), memory).data
        out_p = model.decoder_forward(Tensor(q[perm]), memory).data
        assert np.abs(out_p - out[perm]).max() < 1e-5


class TestPredictionHeads:
    def test_zero_weights_give_half_scores(self):
        model = SpotterModel(tiny_config(), seed=0)
        for lin in (model.heads.instance, model.heads.bbox):
            lin.weight.data = np.zeros_like(lin.weight.data)
            lin.bias.data = np.zeros_like(lin.bias.data)
        img = np.random.default_rng(5).uniform(size=(32, 32)).astype(np.float32)
        out = model.forward(img)
        assert np.allclose(1.0 / (1.0 + np.exp(-out.instance_logits.data)), 0.5)
        assert np.allclose(out.bbox.data, 0.5)

    def test_zero_point_offsets_keep_sampled_points(self):
        model = SpotterModel(tiny_config(), seed=0)
        model.heads.point_offset.weight.data = np.zeros_like(
            model.heads.point_offset.weight.data)
        model.heads.point_offset.bias.data = np.zeros_like(
            model.heads.point_offset.bias.data)
        img = np.random.default_rng(6).uniform(size=(32, 32)).astype(np.float32)
        out = model.forward(img)
        assert np.abs(out.center_points.data
                      - out.proposals.sampled_points).max() < 1e-5


class TestTranscribe:
    def test_collapse_rule(self):
        blank = 96
        ids = [10, 10, blank, 11]  # "A", "A", blank, "B"
        logits = np.zeros((4, 97))
        logits[np.arange(4), ids] = 5.0
        assert transcribe(logits, ALPHABET) == "AB"

    def test_all_blank_empty(self):
        logits = np.zeros((5, 97))
        logits[:, 96] = 5.0
        assert transcribe(logits, ALPHABET) == ""

    def test_repeat_collapse_with_blank_separator(self):
        blank = 96
        ids = [1, 1, 1, blank, 1]  # "1" repeated then blank then "1"
        logits = np.zeros((5, 97))
        logits[np.arange(5), ids] = 5.0
        assert transcribe(logits, ALPHABET) == "11"

    def test_char_targets_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            length = int(rng.integers(1, 7))
            chars = rng.integers(0, 96, size=length)
            targets = build_point_char_targets(chars, 25, 96)
            logits = np.zeros((25, 97))
            logits[np.arange(25), targets] = 5.0
            expected = "".join(ALPHABET[c] for c in chars)
            assert transcribe(logits, ALPHABET) == expected


class TestMatching:
    def test_hungarian_equals_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            k = int(rng.integers(1, 7))
            g = int(rng.integers(1, min(k, 3) + 1))
            cost = rng.normal(size=(k, g))
            got = hungarian_match(cost)
            oracle = brute_force_match(cost)
            assert abs(sum(cost[r, c] for r, c in got)
                       - sum(cost[r, c] for r, c in oracle)) < 1e-12

    def test_matching_cost_shape(self):
        cfg = tiny_config()
        model = SpotterModel(cfg, seed=0)
        out = model.forward(np.zeros((32, 32), dtype=np.float32))
        cost = matching_cost(out, make_gt(num=2), cfg.points_per_curve, cfg.tau)
        assert cost.shape == (cfg.num_proposals, 2)


class TestLoss:
    def test_empty_truth_background_only(self):
        cfg = tiny_config()
        model = SpotterModel(cfg, seed=0)
        out = model.forward(np.zeros((32, 32), dtype=np.float32))
        loss, bd = compute_loss(out, [], cfg)
        assert bd["char"] == 0.0
        assert bd["points"] == 0.0
        assert bd["bbox"] == 0.0
        assert bd["total"] > 0.0

    def test_permutation_invariant_to_gt_order(self):
        cfg = tiny_config()
        model = SpotterModel(cfg, seed=1)
        img = np.random.default_rng(7).uniform(size=(32, 32)).astype(np.float32)
        truths = make_gt(seed=1, num=2)
        _, bd1 = compute_loss(model.forward(img), truths, cfg)
        _, bd2 = compute_loss(model.forward(img), truths[::-1], cfg)
        assert bd1["total"] == pytest.approx(bd2["total"], abs=1e-6)

    def test_perfect_outputs_zero_geometry_terms(self):
        cfg = tiny_config(num_proposals=2)
        model = SpotterModel(cfg, seed=2)
        gt = make_gt(seed=2, num=1)[0]
        out = model.forward(np.zeros((32, 32), dtype=np.float32))
        pts = sample_curve(gt.control_points, cfg.points_per_curve, cfg.tau)
        out.center_points.data = np.stack([pts, pts]).astype(np.float32)
        out.bbox.data = np.stack([gt.bbox, gt.bbox]).astype(np.float32)
        _, bd = compute_loss(out, [gt], cfg)
        assert bd["points"] < 2e-5
        assert bd["bbox"] < 2e-5


class TestTrainStep:
    def test_zero_lr_leaves_params_unchanged(self):
        cfg = tiny_config()
        model = SpotterModel(cfg, seed=0)
        before = {k: v.data.copy() for k, v in model.params().items()}
        opt = AdamW(model.params(), lr=0.0)
        img = np.random.default_rng(8).uniform(size=(32, 32)).astype(np.float32)
        train_step(model, opt, [img], [make_gt()])
        for k, v in model.params().items():
            assert np.array_equal(v.data, before[k]), k

    def test_loss_decreases_on_fixed_batch(self):
        cfg = tiny_config()
        model = SpotterModel(cfg, seed=0)
        opt = AdamW(model.params(), lr=2e-3)
        rng = np.random.default_rng(9)
        imgs = [rng.uniform(size=(32, 32)).astype(np.float32) for _ in range(4)]
        truths = [make_gt(seed=s, num=1) for s in range(4)]
        losses = [train_step(model, opt, imgs, truths)["total"]
                  for _ in range(200)]
        assert losses[199] < 0.5 * losses[9]

    def test_seeded_rerun_bit_identical(self):
        cfg = tiny_config()
        rng = np.random.default_rng(10)
        img = rng.uniform(size=(32, 32)).astype(np.float32)
        truths = [make_gt(seed=3, num=1)]

        def run():
            model = SpotterModel(cfg, seed=4)
            opt = AdamW(model.params(), lr=1e-3)
            return [train_step(model, opt, [img], truths)["total"]
                    for _ in range(5)]

        assert run() == run()
