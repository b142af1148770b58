"""Optimizer behavior, schedule shape, loop contracts, evaluation, suites."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from dcat.configio import ConfigError
from dcat.model import DcatConfig, DcatModel
from dcat.synth import (
    DataError,
    Dataset,
    SynthSpec,
    generate_dataset,
    samples_to_dataset,
)
from dcat.tensor import Tensor
from dcat.train import (
    AdamW,
    DivergenceError,
    TrainConfig,
    evaluate,
    format_metrics_csv,
    load_run_config,
    lr_at,
    run_ablation_suite,
    suite_csv,
    suite_presets,
    train,
)

# Smallest generator geometry: 3x3 cells fit 1 real box + 5..6 distractors.
SPEC36 = dict(side=36, distractors_lo=5, distractors_hi=6)


def tiny_config(**over):
    base = dict(global_side=36, mip_side=16, patch_mip=8, d_global=16,
                d_mip=8, heads_global=2, heads_mip=2, depth_global=1,
                depth_mip=1, cpa_rounds=1, layers=1, mlp_ratio=2,
                precision="f64", seed=0)
    base.update(over)
    return DcatConfig(**base)


def manual_dataset(labels, side=36, seed=0):
    rng = np.random.default_rng(seed)
    n = len(labels)
    return Dataset(images=rng.integers(0, 256, (n, 3, side, side), dtype=np.uint8),
                   boxes=np.tile(np.array([4, 4, 8, 8], dtype=np.int64), (n, 1)),
                   labels=np.asarray(labels, dtype=np.int64),
                   ids=[f"{i:06d}" for i in range(n)])


@pytest.fixture(scope="module")
def data36():
    return samples_to_dataset(generate_dataset(SynthSpec(seed=11, **SPEC36), 48))


class TestSchedule:
    def test_warmup_is_linear_and_reaches_base(self):
        tc = TrainConfig(epochs=20, warmup_epochs=4, base_lr=0.8)
        for e in range(4):
            assert lr_at(tc, e) == pytest.approx(0.8 * (e + 1) / 4)
        assert lr_at(tc, 3) == pytest.approx(0.8)
        assert lr_at(tc, 4) == pytest.approx(0.8)  # cosine starts at the peak

    def test_monotone_up_then_down(self):
        tc = TrainConfig(epochs=30, warmup_epochs=5, base_lr=1e-3)
        lrs = [lr_at(tc, e) for e in range(30)]
        assert all(b > a for a, b in zip(lrs[:4], lrs[1:5]))
        # epoch warmup repeats the peak (cosine progress 0), then decays
        assert lrs[5] == lrs[4]
        assert all(b < a for a, b in zip(lrs[5:-1], lrs[6:]))

    def test_decays_toward_zero(self):
        tc = TrainConfig(epochs=40, warmup_epochs=4, base_lr=1.0)
        final = lr_at(tc, 39)
        assert 0.0 < final < 0.01 * tc.base_lr

    def test_cosine_value_matches_formula(self):
        tc = TrainConfig(epochs=16, warmup_epochs=4, base_lr=0.5)
        e = 10
        expect = 0.5 * 0.5 * (1 + math.cos(math.pi * (e - 4) / 12))
        assert lr_at(tc, e) == pytest.approx(expect, rel=1e-12)

    @pytest.mark.parametrize("bad", [
        dict(epochs=0),
        dict(epochs=5, warmup_epochs=5),
        dict(warmup_epochs=-1),
        dict(batch_size=0),
        dict(base_lr=-1e-3),
        dict(weight_decay=-0.1),
        dict(precision="f16"),
    ])
    def test_config_validation(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


class TestAdamW:
    def test_minimizes_quadratic(self):
        p = Tensor(np.array([0.0]), trainable=True)
        opt = AdamW({"x.w": p}, weight_decay=0.0)
        for _ in range(300):
            p.grad = 2.0 * (p.data - 3.0)
            opt.step(0.1)
        npt.assert_allclose(p.data, [3.0], atol=1e-3)

    def test_decay_rule_names(self):
        assert AdamW.decays("blocks.0.wq")
        assert AdamW.decays("head.w")
        assert AdamW.decays("fuse.0.g2m.q.w")
        assert not AdamW.decays("blocks.0.bq")
        assert not AdamW.decays("embed.cls")
        assert not AdamW.decays("embed.pos")
        assert not AdamW.decays("blocks.0.ln1.g")

    def test_decay_touches_weight_matrices_only(self):
        names = ["a.wq", "a.mlp.w2", "a.bq", "a.ln.g", "cls", "pos"]
        params = {n: Tensor(np.ones(3), trainable=True) for n in names}
        opt = AdamW(params, weight_decay=0.5)
        for p in params.values():
            p.grad = np.zeros(3)
        opt.step(0.1)
        # zero grads keep both moments at zero, so only decay moves weights
        npt.assert_array_equal(params["a.wq"].data, np.full(3, 0.95))
        npt.assert_array_equal(params["a.mlp.w2"].data, np.full(3, 0.95))
        for n in names[2:]:
            npt.assert_array_equal(params[n].data, np.ones(3))

    def test_grad_none_is_skipped(self):
        p = Tensor(np.eye(3), trainable=True)
        q = Tensor(np.ones((3, 3)), trainable=True)
        opt = AdamW({"rank.wq": p, "live.w": q}, weight_decay=0.5)
        for _ in range(5):
            q.grad = np.ones((3, 3))
            opt.step(0.1)
        npt.assert_array_equal(p.data, np.eye(3))  # bitwise untouched
        assert "rank.wq" not in opt._m
        assert not np.array_equal(q.data, np.ones((3, 3)))

    def test_zero_grad_clears(self):
        p = Tensor(np.ones(2), trainable=True)
        opt = AdamW({"x.w": p})
        p.grad = np.ones(2)
        opt.zero_grad()
        assert p.grad is None


class TestTrainLoop:
    def test_precision_mismatch_rejected(self, data36):
        model = DcatModel(tiny_config(precision="f32"))
        with pytest.raises(ConfigError, match="precision"):
            train(model, data36, TrainConfig(epochs=2, warmup_epochs=1,
                                             precision="f64"))

    def test_wrong_image_side_rejected(self):
        model = DcatModel(tiny_config())
        with pytest.raises(DataError, match="48px"):
            train(model, manual_dataset([0, 1], side=48),
                  TrainConfig(epochs=2, warmup_epochs=1, precision="f64"))

    def test_label_out_of_range_rejected(self):
        model = DcatModel(tiny_config())
        with pytest.raises(DataError, match="label 5"):
            train(model, manual_dataset([0, 5]),
                  TrainConfig(epochs=2, warmup_epochs=1, precision="f64"))

    def test_lr_zero_is_flat(self, data36):
        model = DcatModel(tiny_config())
        before = {k: v.data.copy() for k, v in model.parameters().items()}
        tc = TrainConfig(epochs=3, warmup_epochs=1, base_lr=0.0,
                         batch_size=16, precision="f64")
        result = train(model, data36, tc, augment=False)
        losses = [r[2] for r in result.rows if r[1] == "train"]
        assert len(losses) == 3
        npt.assert_allclose(losses, losses[0], rtol=1e-12)
        for k, v in model.parameters().items():
            npt.assert_array_equal(v.data, before[k])

    def test_rank_projections_stay_identity_while_training(self, data36):
        model = DcatModel(tiny_config())
        tc = TrainConfig(epochs=2, warmup_epochs=1, batch_size=16,
                         precision="f64")
        live_before = model.parameters()["head.w"].data.copy()
        train(model, data36, tc)
        rank = {k: v for k, v in model.parameters().items() if ".rank.w" in k}
        assert rank, "expected ranking projections in the full model"
        assert not np.array_equal(model.parameters()["head.w"].data, live_before)
        for k, v in rank.items():
            npt.assert_array_equal(v.data, np.eye(v.data.shape[0]))

    def test_training_moves_weights_and_logs_both_splits(self, data36):
        model = DcatModel(tiny_config())
        w_before = model.parameters()["head.w"].data.copy()
        tc = TrainConfig(epochs=2, warmup_epochs=1, batch_size=16,
                         precision="f64")
        result = train(model, data36, tc, eval_dataset=data36)
        assert [(r[0], r[1]) for r in result.rows] == [
            (0, "train"), (0, "test"), (1, "train"), (1, "test")]
        assert not np.array_equal(model.parameters()["head.w"].data, w_before)
        last = result.final("test")
        assert 0.0 <= last[3] <= 1.0

    def test_overfits_64_clean_samples(self):
        spec = SynthSpec(seed=3, p_scene=1.0, p_mip=1.0, noise=0.0, **SPEC36)
        ds = samples_to_dataset(generate_dataset(spec, 64))
        model = DcatModel(tiny_config(seed=1))
        tc = TrainConfig(epochs=200, warmup_epochs=5, batch_size=32,
                         base_lr=2e-3, precision="f64")
        result = train(model, ds, tc, augment=False)
        best = max(r[3] for r in result.rows)
        assert best == 1.0
        assert evaluate(model, ds).metric >= 0.95

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_divergence_raises(self, data36):
        model = DcatModel(tiny_config())
        # push the patch projection past overflow: the first forward matmul
        # goes non-finite, which must surface as a divergence failure
        model.parameters()["global.embed.proj.w"].data[:] = 1e307
        tc = TrainConfig(epochs=3, warmup_epochs=1, batch_size=16,
                         precision="f64")
        with pytest.raises(DivergenceError, match=r"epoch \d+"):
            train(model, data36, tc)

    def test_repeat_runs_are_byte_identical(self, data36, tmp_path):
        outs = []
        for tag in ("a", "b"):
            model = DcatModel(tiny_config())
            tc = TrainConfig(epochs=2, warmup_epochs=1, batch_size=16,
                             precision="f64")
            log = tmp_path / f"{tag}.csv"
            ckpt = tmp_path / f"{tag}.dct"
            train(model, data36, tc, eval_dataset=data36,
                  log_path=str(log), ckpt_path=str(ckpt))
            outs.append((log.read_bytes(), ckpt.read_bytes()))
        assert outs[0][0] == outs[1][0]
        assert outs[0][1] == outs[1][1]

    def test_csv_floats_round_trip(self):
        rows = [(0, "train", 1.0986122886681098, 0.3333333333333333)]
        text = format_metrics_csv(rows)
        lines = text.splitlines()
        assert lines[0] == "epoch,split,loss,metric"
        _, _, loss, metric = lines[1].split(",")
        assert float(loss) == rows[0][2] and float(metric) == rows[0][3]


class TestEvaluate:
    def test_accuracy_is_confusion_trace(self, data36):
        model = DcatModel(tiny_config(seed=4))
        ev = evaluate(model, data36, batch_size=17)
        assert ev.metric_name == "accuracy"
        assert ev.n == len(data36)
        assert ev.confusion.shape == (3, 3)
        assert ev.confusion.sum() == ev.n
        assert ev.metric == pytest.approx(np.trace(ev.confusion) / ev.n)
        counts = np.bincount(data36.labels, minlength=3)
        npt.assert_array_equal(ev.confusion.sum(axis=1), counts)

    def test_constant_predictor_hits_class_rate(self, data36):
        model = DcatModel(tiny_config())
        model.parameters()["head.w"].data[:] = 0.0
        model.parameters()["head.b"].data[:] = 0.0
        ev = evaluate(model, data36)
        assert ev.metric == pytest.approx(np.mean(data36.labels == 0))
        assert ev.loss == pytest.approx(math.log(3.0), abs=1e-12)

    def test_regression_bias_preset_gives_zero_mse(self):
        ds = manual_dataset([2, 2, 2, 2])
        model = DcatModel(tiny_config(regression=True))
        model.parameters()["head.w"].data[:] = 0.0
        model.parameters()["head.b"].data[:] = 2.0
        ev = evaluate(model, ds)
        assert ev.metric_name == "mse"
        assert ev.confusion is None
        assert ev.metric == 0.0

    def test_regression_constant_mean_mse_is_label_variance(self):
        labels = [0, 1, 2, 1, 0, 2]
        ds = manual_dataset(labels)
        model = DcatModel(tiny_config(regression=True))
        model.parameters()["head.w"].data[:] = 0.0
        model.parameters()["head.b"].data[:] = float(np.mean(labels))
        ev = evaluate(model, ds)
        assert ev.metric == pytest.approx(np.var(labels), abs=1e-12)

    def test_empty_dataset_rejected(self):
        empty = Dataset(images=np.zeros((0, 3, 36, 36), dtype=np.uint8),
                        boxes=np.zeros((0, 4), dtype=np.int64),
                        labels=np.zeros(0, dtype=np.int64), ids=[])
        with pytest.raises(DataError, match="empty"):
            evaluate(DcatModel(tiny_config()), empty)


class TestRunConfig:
    def test_keys_split_between_model_and_train(self):
        text = ("epochs=8\nwarmup_epochs=2\nbatch_size=4\n"
                "d_global=16\nheads_global=2\nseed=7\nprecision=f64\n")
        cfg, tc = load_run_config(text)
        assert (cfg.d_global, cfg.heads_global) == (16, 2)
        assert (tc.epochs, tc.warmup_epochs, tc.batch_size) == (8, 2, 4)
        # shared keys feed both sides
        assert cfg.seed == tc.seed == 7
        assert cfg.precision == tc.precision == "f64"

    def test_stray_key_rejected(self):
        with pytest.raises(ConfigError, match="bogus"):
            load_run_config("epochs=8\nwarmup_epochs=2\nbogus=1\n")


class TestSuites:
    def test_named_tables(self):
        t5 = [n for n, _ in suite_presets("table5")]
        t6 = [n for n, _ in suite_presets("table6")]
        t7 = [n for n, _ in suite_presets("table7")]
        f3 = [n for n, _ in suite_presets("fig3")]
        assert t5 == ["global-only", "dual-cca", "dual-cpa", "dual-cpa-ranking"]
        assert t6 == ["global-only", "mip-only", "dual"]
        assert t7 == ["dual-cca", "dual-cpa-ranking"]
        assert f3 == ["alpha-0.25", "alpha-0.5", "alpha-0.75", "alpha-1"]
        assert len(suite_presets("all")) == 9

    def test_unknown_suite_rejected(self):
        with pytest.raises(ConfigError, match="table9"):
            suite_presets("table9")

    def test_ladder_configs_are_distinct_and_diffable(self):
        texts = [cfg.to_text() for _, cfg in suite_presets("table5", tiny_config())]
        assert len(set(texts)) == 4

    def test_preset_flags(self):
        by_name = dict(suite_presets("all", tiny_config()))
        g = by_name["global-only"]
        assert (g.dual_input, g.single_branch, g.cpa_enabled) == (False, "global", False)
        m = by_name["mip-only"]
        assert (m.dual_input, m.single_branch) == (False, "mip")
        cca = by_name["dual-cca"]
        assert cca.cca_mode and not cca.ranking_enabled
        cpa = by_name["dual-cpa"]
        assert cpa.cpa_enabled and not cpa.cca_mode and not cpa.ranking_enabled
        assert cpa.alpha_global == 1.0  # ranking off keeps every patch
        full = by_name["dual-cpa-ranking"]
        assert full.ranking_enabled and full.alpha_global == 0.5
        assert by_name["alpha-1"].alpha_global == 1.0

    def test_alpha_sweep_only_varies_keep_ratio(self):
        presets = dict(suite_presets("fig3", tiny_config()))
        a, b = presets["alpha-0.25"], presets["alpha-0.75"]
        assert (a.alpha_global, a.alpha_mip) == (0.25, 0.25)
        assert (b.alpha_global, b.alpha_mip) == (0.75, 0.75)
        import dataclasses
        assert dataclasses.replace(a, alpha_global=0.75, alpha_mip=0.75) == b

    def test_needs_three_seeds(self, data36):
        presets = suite_presets("table7", tiny_config())
        tc = TrainConfig(epochs=1, warmup_epochs=0, precision="f64")
        with pytest.raises(ConfigError, match="seeds"):
            run_ablation_suite(presets, data36, data36, tc, seeds=(0, 1))

    def test_runs_every_preset_across_seeds(self, data36):
        presets = suite_presets("table7", tiny_config())
        tc = TrainConfig(epochs=1, warmup_epochs=0, batch_size=16,
                         precision="f64")
        calls = []
        outs = run_ablation_suite(presets, data36, data36, tc,
                                  keep_models=True,
                                  progress=lambda *a: calls.append(a))
        assert [o.name for o in outs] == ["dual-cca", "dual-cpa-ranking"]
        assert len(calls) == 6
        for o in outs:
            assert len(o.accuracies) == 3 and len(o.models) == 3
            assert o.mean == pytest.approx(np.mean(o.accuracies))
            assert o.std == pytest.approx(np.std(o.accuracies))
            assert [m.config.seed for m in o.models] == [0, 1, 2]
            assert all(0.0 <= a <= 1.0 for a in o.accuracies)

    def test_suite_csv_shape(self):
        presets = suite_presets("table7", tiny_config())
        outs = []
        from dcat.train import PresetOutcome
        for name, cfg in presets:
            outs.append(PresetOutcome(name=name, config=cfg,
                                      accuracies=[0.5, 0.625, 0.75],
                                      mean=0.625, std=np.std([0.5, 0.625, 0.75])))
        text = suite_csv(outs)
        lines = text.splitlines()
        assert lines[0] == "preset,mean_accuracy,std_accuracy,seed_accuracies"
        assert len(lines) == 3
        name, mean, _, per_seed = lines[1].split(",")
        assert name == "dual-cca" and float(mean) == 0.625
        assert [float(v) for v in per_seed.split(";")] == [0.5, 0.625, 0.75]
