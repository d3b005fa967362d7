"""End-to-end acceptance suite.

Each test here is one externally checkable claim about the package:
gradient correctness, mixer equivariance and linear scaling, spline
geometry, matcher optimality, desk-scale training quality, ablation
ordering, metric identities, and bit-level determinism. Budgets are
asserted where a claim includes one.
"""

import json
import time

import numpy as np
import pytest

from minispot.bench import run_benchmark, slopes_by_mechanism
from minispot.cli import main as cli_main
from minispot.encoder import EfficientMixer, EMTBlock, LevelSpan, TokenFeatures
from minispot.metrics import end_to_end_metrics, iou, GroundTruth, Prediction
from minispot.model import (AdamW, GtInstance, SpotterConfig, SpotterModel,
                            brute_force_match, compute_loss, hungarian_match)
from minispot.runner import evaluate, train
from minispot.scenes import generate_dataset, overfit_config
from minispot.splines import (catrom_basis, chained_sample_weights, logit,
                              sample_curve)
from minispot.tensor import (Linear, Tensor, conv2d, gelu, gradient_check,
                             layer_norm, log_softmax, mlp, relu, softmax)


def _spans(n: int) -> list[LevelSpan]:
    return [LevelSpan(level=3, start=0, length=n, height=1, width=n)]


class TestGradientSuite:
    """Claim: every differentiable op and the full model agree with
    central finite differences (f64, eps=1e-5; < 1e-3 per op, < 1e-2 for
    20 full-model probes) in under two minutes."""

    def test_per_op_and_full_model(self):
        start = time.time()
        rng = np.random.default_rng(0)

        def linear_op(shape_in, shape_out, seed):
            lin = Linear(shape_in, shape_out, np.random.default_rng(seed),
                         dtype=np.float64)
            return lin

        point_m = rng.normal(size=(5, 4))
        other = Tensor(rng.normal(size=(5, 4)))
        mat = Tensor(rng.normal(size=(4, 3)))
        batched = Tensor(rng.normal(size=(2, 4, 3)))
        vec = Tensor(rng.normal(size=4))
        lin = linear_op(4, 6, 1)
        lin2 = linear_op(6, 4, 2)
        mixer = EfficientMixer(4, np.random.default_rng(3), dtype=np.float64)
        block = EMTBlock(4, np.random.default_rng(4), dtype=np.float64)
        kernel = Tensor(rng.normal(size=(3, 3, 2, 3)) * 0.3)
        kbias = Tensor(rng.normal(size=3) * 0.1)
        img_pt = rng.normal(size=(6, 6, 2))
        w_spline = chained_sample_weights(7, 0.5)

        ops = {
            "add": lambda x: x + other,
            "mul": lambda x: x * other,
            "div": lambda x: x / (other * other + 1.0),
            "pow": lambda x: (x * x + 1.0) ** 0.5,
            "matmul": lambda x: x.matmul(mat),
            "matmul_batched": lambda x: x.matmul(batched),
            "matmul_vec": lambda x: x.matmul(vec),
            "exp": lambda x: (x * 0.3).exp(),
            "log": lambda x: (x * x + 1.0).log(),
            "sqrt": lambda x: (x * x + 1.0).sqrt(),
            "sigmoid": lambda x: x.sigmoid(),
            "tanh": lambda x: x.tanh(),
            "relu_offset": lambda x: relu(x + 0.05),
            "gelu": lambda x: gelu(x),
            "softmax": lambda x: softmax(x, axis=-1),
            "log_softmax": lambda x: log_softmax(x, axis=-1),
            "layer_norm": lambda x: layer_norm(x, Tensor(np.ones(4)),
                                               Tensor(np.zeros(4))),
            "sum": lambda x: x.sum(axis=0),
            "mean": lambda x: x.mean(axis=1),
            "take": lambda x: x.take(np.array([0, 2, 2, 4]), axis=0),
            "reshape_swap": lambda x: x.reshape(4, 5).swapaxes(0, 1),
            "concat": lambda x: Tensor.concat([x, x * 2.0], axis=0),
            "linear_mlp": lambda x: mlp(x, [lin, lin2], gelu),
            "mixer": lambda x: mixer(x, check_finite=False)[0],
            "emt_block": lambda x: block(
                TokenFeatures(tokens=x, level_spans=_spans(5))).tokens,
            "spline_sample": lambda x: Tensor(w_spline).matmul(
                x.reshape(5, 4).take(np.array([0, 1, 2, 3]), axis=0)),
        }
        failures = {}
        for name, op in sorted(ops.items()):
            point = img_pt if name == "conv" else point_m
            res = gradient_check(op, point, epsilon=1e-5, tolerance=1e-3)
            if not res["passed"]:
                failures[name] = res["max_rel_error"]

        res = gradient_check(
            lambda x: conv2d(x, kernel, kbias, stride=2, padding=1),
            img_pt, epsilon=1e-5, tolerance=1e-3)
        if not res["passed"]:
            failures["conv2d"] = res["max_rel_error"]
        assert not failures, f"per-op gradient failures: {failures}"

        # full model: finite-difference probes of the training loss
        cfg = SpotterConfig(channels=16, encoder_depth=1, decoder_depth=1,
                            num_proposals=4, points_per_curve=4,
                            image_size=32, backbone_stem=8)
        model = SpotterModel(cfg, seed=0, dtype=np.float64)
        image = np.random.default_rng(5).uniform(size=(32, 32))
        truths = [GtInstance(np.array([[0.3, 0.4], [0.4, 0.42],
                                       [0.5, 0.44], [0.6, 0.46]]),
                             np.array([1, 2]),
                             np.array([0.45, 0.43, 0.35, 0.10]))]

        def loss_value() -> float:
            loss, _ = compute_loss(model.forward(image), truths, cfg)
            return float(loss.data)

        params = model.params()
        for p in params.values():
            p.grad = None
        loss, _ = compute_loss(model.forward(image), truths, cfg)
        loss.backward()

        names = sorted(params)
        prng = np.random.default_rng(6)
        eps = 1e-5
        worst = 0.0
        for _ in range(20):
            pname = names[int(prng.integers(len(names)))]
            tensor = params[pname]
            flat = tensor.data.reshape(-1)
            i = int(prng.integers(flat.size))
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_value()
            flat[i] = orig - eps
            lo = loss_value()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            analytic = tensor.grad.reshape(-1)[i]
            denom = max(abs(numeric), abs(analytic), 1e-8)
            rel = abs(numeric - analytic) / denom
            worst = max(worst, rel)
            assert rel < 1e-2, f"full-model probe {pname}[{i}]: rel={rel:.2e}"
        assert time.time() - start < 120.0


class TestMixerEquivariance:
    """Claim: permuting tokens permutes mixer outputs, within 1e-6,
    on 100 seeded random cases."""

    def test_hundred_seeds(self):
        c = 8
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(2, 40))
            mixer = EfficientMixer(c, rng, dtype=np.float64)
            x = rng.normal(size=(n, c))
            perm = rng.permutation(n)
            out, _ = mixer(Tensor(x))
            out_p, _ = mixer(Tensor(x[perm]))
            assert np.abs(out_p.data - out.data[perm]).max() < 1e-6, seed


class TestLinearComplexity:
    """Claim: over N in {1k, 2k, 4k, 8k} at C=64 the mixer's log-log
    runtime slope is in [0.8, 1.3] and softmax attention's in [1.7, 2.3];
    the mixer allocates no N x N intermediate. Budget: five minutes."""

    def test_scaling_and_structure(self):
        start = time.time()
        records = run_benchmark(["em", "softmax"], [1024, 2048, 4096, 8192],
                                channels=64, reps=30, seed=0)
        slopes = slopes_by_mechanism(records)
        assert 0.8 <= slopes["em"] <= 1.3, slopes
        assert 1.7 <= slopes["softmax"] <= 2.3, slopes

        n, c = 2048, 64
        mixer = EfficientMixer(c, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(n, c)).astype(np.float32)
        _, trace = mixer(Tensor(x))
        assert int(np.prod(trace.largest_intermediate)) <= n * c
        assert time.time() - start < 300.0


class TestSplineSuite:
    """Claim: partition of unity (1e-12), interpolation through the
    control points (1e-9), C1 joins (1e-6), affine equivariance (1e-9),
    and the zero-offset identity for predicted control points (1e-12)."""

    def test_partition_of_unity(self):
        for tau in (0.3, 0.5, 0.8):
            basis = np.stack([catrom_basis(u, tau)
                              for u in np.linspace(0.0, 1.0, 2001)])
            assert np.abs(basis.sum(axis=-1) - 1.0).max() < 1e-12

    def test_interpolation_hits_control_points(self):
        rng = np.random.default_rng(0)
        cp = rng.uniform(0.1, 0.9, size=(4, 2))
        n = 25
        pts = sample_curve(cp, n)
        # chained parameterization visits the four controls at these indices
        for frac, ctrl in ((0.0, 0), (1.0 / 3.0, 1), (2.0 / 3.0, 2), (1.0, 3)):
            i = int(round(frac * (n - 1)))
            assert np.abs(pts[i] - cp[ctrl]).max() < 1e-9

    def test_c1_continuity_at_joins(self):
        tau = 0.5
        rng = np.random.default_rng(1)
        cp = rng.uniform(size=(4, 2))
        # analytic one-sided derivatives on both sides of each segment join
        from minispot.splines import catrom_matrix, _SEGMENT_INDEX
        m = catrom_matrix(tau)

        def deriv(seg: int, u: float) -> np.ndarray:
            du = np.array([0.0, 1.0, 2.0 * u, 3.0 * u * u])
            return du @ m @ cp[list(_SEGMENT_INDEX[seg])]

        for join in (0, 1):
            left = deriv(join, 1.0)
            right = deriv(join + 1, 0.0)
            assert np.abs(left - right).max() < 1e-6

    def test_affine_equivariance(self):
        rng = np.random.default_rng(2)
        cp = rng.uniform(size=(4, 2))
        a = np.array([[1.3, -0.4], [0.2, 0.9]])
        b = np.array([0.05, -0.1])
        direct = sample_curve(cp @ a.T + b, 25)
        mapped = sample_curve(cp, 25) @ a.T + b
        assert np.abs(direct - mapped).max() < 1e-9

    def test_zero_offset_identity(self):
        rng = np.random.default_rng(3)
        p_hat = rng.uniform(0.05, 0.95, size=(7, 2))
        crp = 1.0 / (1.0 + np.exp(-(0.0 + logit(p_hat))))
        assert np.abs(crp - p_hat).max() < 1e-12


class TestMatcherOracle:
    """Claim: the Hungarian matcher attains the brute-force optimal
    assignment cost on 1,000 random instances (<= 6 proposals, <= 3 targets)."""

    def test_thousand_instances(self):
        rng = np.random.default_rng(0)
        for case in range(1000):
            k = int(rng.integers(1, 7))
            g = int(rng.integers(1, 4))
            cost = rng.normal(size=(k, g)) * float(rng.uniform(0.5, 5.0))
            if g > k:
                cost = cost[:, :k]
            got = hungarian_match(cost)
            ref = brute_force_match(cost)
            got_total = sum(cost[r, c] for r, c in got)
            ref_total = sum(cost[r, c] for r, c in ref)
            assert got_total == pytest.approx(ref_total, abs=1e-12), case


class TestDeskScaleTraining:
    """Claim: defaults (100 proposals, 25 points, 96 classes) trained
    for 2k steps on 8 synthetic scenes reach final loss < 10% of the
    step-10 loss, detection F1 >= 0.90, and end-to-end H >= 0.60, in
    under 30 minutes."""

    def test_overfit_run(self):
        start = time.time()
        cfg = SpotterConfig()
        assert cfg.num_proposals == 100
        assert cfg.points_per_curve == 25
        assert cfg.num_classes == 96
        scenes = generate_dataset(overfit_config(), 8, base_seed=100)
        model = SpotterModel(cfg, seed=0)
        lines = train(model, scenes, steps=2000, seed=0, batch_size=2, lr=2e-3)
        assert lines[-1]["total"] < 0.10 * lines[10]["total"]
        result = evaluate(model, scenes)
        assert result.detection_f1 >= 0.90, result.to_dict()
        assert result.recognition_h >= 0.60, result.to_dict()
        assert time.time() - start < 1800.0


class TestAblationOrdering:
    """Claim: on a fixed 50-scene set with a fixed training budget,
    detection F1 orders full model >= curve-query-only >= baseline, for a
    majority of 3 seeds.

    The comparison is paired: per seed, all three variants start from the
    same weights and see the same batch sequence, so the only difference
    is which mechanism is enabled. Scenes are strongly curved and span a
    wide glyph-size range, the regimes the two mechanisms target."""

    VARIANTS = (
        ("baseline", dict(mix_features=False, curve_queries=False)),
        ("fscrs", dict(mix_features=False, curve_queries=True)),
        ("full", dict(mix_features=True, curve_queries=True)),
    )

    @staticmethod
    def _config(**flags) -> SpotterConfig:
        return SpotterConfig(channels=24, encoder_depth=2, decoder_depth=1,
                             num_proposals=30, points_per_curve=12,
                             image_size=128, backbone_stem=8, **flags)

    def test_majority_ordering(self):
        from minispot.scenes import SceneConfig

        scene_cfg = SceneConfig(image_size=128, instance_range=(2, 4),
                                glyph_height_range=(6.0, 22.0),
                                text_length_range=(4, 6), spacing=2.0,
                                max_bow=0.22, max_place_tries=500)
        scenes = generate_dataset(scene_cfg, 50, base_seed=500)
        ordered = 0
        for seed in (0, 1, 2):
            init = {name: p.data.copy()
                    for name, p in SpotterModel(self._config(),
                                                seed=seed).params().items()}
            scores = {}
            for name, flags in self.VARIANTS:
                model = SpotterModel(self._config(**flags), seed=seed)
                for pname, p in model.params().items():
                    p.data = init[pname].copy()
                train(model, scenes, steps=4000, seed=seed, batch_size=2,
                      lr=2e-3)
                scores[name] = evaluate(model, scenes).detection_f1
            if scores["full"] >= scores["fscrs"] >= scores["baseline"]:
                ordered += 1
        assert ordered >= 2, f"ordering held in only {ordered}/3 seeds"


class TestMetricIdentities:
    """Claim: F1 = 2PR/(P+R) including P=0.8, R=0.5 -> 0.6154, and
    IoU([0,0,2,2],[1,1,3,3]) = 1/7."""

    def test_f1_hand_value(self):
        preds = [Prediction(np.array([j * 10.0, 0.0, j * 10 + 1.0, 1.0]), 0.9)
                 for j in range(5)]
        gts = [GroundTruth(np.array([j * 10.0, 0.0, j * 10 + 1.0, 1.0]))
               for j in range(4)] + \
              [GroundTruth(np.array([900.0 + j, 900.0, 901.0 + j, 901.0]))
               for j in range(4)]
        res = end_to_end_metrics([(preds, gts)])
        assert res.detection_precision == pytest.approx(0.8, abs=1e-12)
        assert res.detection_recall == pytest.approx(0.5, abs=1e-12)
        assert res.detection_f1 == pytest.approx(0.6154, abs=1e-4)

    def test_iou_hand_value(self):
        v = iou(np.array([0.0, 0.0, 2.0, 2.0]), np.array([1.0, 1.0, 3.0, 3.0]))
        assert v == pytest.approx(1.0 / 7.0, abs=1e-12)


class TestDeterminism:
    """Claim: generate / train / eval rerun with identical flags and
    seed produce byte-identical datasets, loss logs, and metric JSON."""

    FAST = ["--channels", "16", "--encoder-depth", "1", "--decoder-depth", "1",
            "--proposals", "8", "--points", "4", "--batch-size", "2"]

    def test_byte_identical_pipeline(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("MINISPOT_OUT", str(tmp_path))
        for run_name in ("a", "b"):
            assert cli_main(["generate", "--count", "4", "--seed", "9",
                             "--preset", "overfit",
                             "--out", f"{run_name}/ds"]) == 0
            assert cli_main(["train", "--dataset", f"{run_name}/ds",
                             "--out", f"{run_name}/m.ckpt", "--steps", "5",
                             "--seed", "9", *self.FAST]) == 0
            assert cli_main(["eval", "--dataset", f"{run_name}/ds",
                             "--checkpoint", f"{run_name}/m.ckpt",
                             "--out", f"{run_name}/metrics.json"]) == 0
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "ds" / "annotations.jsonl").read_bytes() \
            == (b / "ds" / "annotations.jsonl").read_bytes()
        for pa in sorted((a / "ds" / "images").glob("*.pgm")):
            assert pa.read_bytes() == (b / "ds" / "images" / pa.name).read_bytes()
        assert (a / "m.log.jsonl").read_bytes() == (b / "m.log.jsonl").read_bytes()
        assert (a / "m.ckpt").read_bytes() == (b / "m.ckpt").read_bytes()
        assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
