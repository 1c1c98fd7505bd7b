import math

import numpy as np
import pytest

from lumvit import autodiff as ad
from lumvit import checkpoint as ckpt_io
from lumvit import schedule
from lumvit.autodiff import Tensor
from lumvit.config import RunConfig
from lumvit.embed import BINARIZED, FULL_PRECISION
from lumvit.errors import FormatError, NumericError, PipelineError, ValidationError
from lumvit.model import Model, ModelConfig
from lumvit.train import (AdamW, decays, deployment_report, evaluate, evaluate_predictions, load_checkpoint,
                          lr_schedule, model_checkpoint, prepare_data, read_metrics, restore, run_pipeline,
                          run_stage, single_stage_config, stage_config, stages_for, train_step)

TINY_MODEL = {"embed_dim": 12, "depth": 1, "heads": 2, "mlp_ratio": 2, "drop_path": 0.0}


def tiny_cfg(**kw):
    base = dict(seed=0, batch_size=16, data={"synthetic": {"classes": 3, "bands": 6, "size": 24, "seed": 1}},
                model=TINY_MODEL, stage_overrides={1: {"epochs": 2}, 2: {"epochs": 1}, 3: {"epochs": 1}},
                d_tar=0.3)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    modes = []
    masks = []

    def on_step(model, stage, epoch, step):
        modes.append((stage.stage_id, model.embed_mode))
        if model.mask is not None:
            masks.append((stage.stage_id, model.mask.z.data.tobytes(), model.mask.lin_w.data.tobytes()))

    res = run_pipeline(tiny_cfg(), out_dir=str(out), on_step=on_step)
    return res, modes, masks, out


class TestSchedule:
    def test_warmup_end_and_total(self):
        assert lr_schedule(10, 100, 10, 0.01) == 0.01
        assert abs(lr_schedule(100, 100, 10, 0.01)) < 1e-12

    def test_cosine_midpoint(self):
        assert lr_schedule(55, 100, 10, 0.01) == pytest.approx(0.005, abs=1e-15)

    def test_warmup_strictly_increasing(self):
        lrs = [lr_schedule(s, 100, 20, 1.0) for s in range(21)]
        assert all(b > a for a, b in zip(lrs, lrs[1:]))

    def test_decay_non_increasing(self):
        lrs = [lr_schedule(s, 50, 5, 1.0) for s in range(5, 51)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_bad_warmup(self):
        with pytest.raises(ValidationError):
            lr_schedule(0, 10, 11, 1.0)


class TestAdamW:
    def test_one_step_matches_hand_formula(self):
        p = Tensor(np.array([0.7]), requires_grad=True, name="w")
        p.grad = np.array([0.3])
        lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.0
        AdamW(eps).step({"w": p}, lr, (b1, b2), wd)
        m_hat = (1 - b1) * 0.3 / (1 - b1)
        v_hat = (1 - b2) * 0.09 / (1 - b2)
        expect = 0.7 - lr * m_hat / (math.sqrt(v_hat) + eps)
        assert abs(p.data[0] - expect) < 1e-12

    def test_two_steps_match_hand_formula(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True, name="w")
        grads = [np.array([0.5, -1.0]), np.array([-0.2, 0.4])]
        lr, b1, b2, eps, wd = 0.1, 0.6, 0.9999, 1e-8, 0.03
        w = p.data.copy()
        m = np.zeros(2)
        v = np.zeros(2)
        opt = AdamW(eps)
        for t, g in enumerate(grads, 1):
            p.grad = g
            opt.step({"w": p}, lr, (b1, b2), wd)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w * (1 - lr * wd) - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        np.testing.assert_allclose(p.data, w, rtol=0, atol=1e-12)

    def test_zero_grad_no_decay_is_noop(self):
        p = Tensor(np.array([[1.5, -0.5]]), requires_grad=True, name="w")
        p.grad = np.zeros((1, 2))
        AdamW().step({"w": p}, 0.1, weight_decay=0.0)
        np.testing.assert_array_equal(p.data, [[1.5, -0.5]])

    def test_pure_decay(self):
        p = Tensor(np.array([[2.0, -4.0]]), requires_grad=True, name="w")
        p.grad = np.zeros((1, 2))
        AdamW().step({"w": p}, 0.1, weight_decay=0.5)
        np.testing.assert_allclose(p.data, [[2.0 * 0.95, -4.0 * 0.95]], rtol=1e-15)

    def test_frozen_skipped_entirely(self):
        p = Tensor(np.ones((2, 2)), requires_grad=True, name="a")
        p.grad = np.ones((2, 2))
        opt = AdamW()
        opt.step({"a": p}, 0.1, weight_decay=0.1, frozen={"a"})
        np.testing.assert_array_equal(p.data, 1.0)
        assert "a" not in opt.m

    def test_nan_gradient_names_parameter(self):
        p = Tensor(np.ones(2), requires_grad=True, name="vit.head.b")
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(NumericError, match="vit.head.b"):
            AdamW().step({"vit.head.b": p}, 0.1)

    def test_decay_exemptions(self):
        assert decays("embed.W", Tensor(np.zeros((2, 3, 3))))
        assert not decays("vit.head.b", Tensor(np.zeros(3)))
        assert not decays("vit.pos", Tensor(np.zeros((2, 3))))
        assert not decays("mask.z", Tensor(np.zeros((2, 3, 2))))


class TestEvaluate:
    def test_perfect(self):
        rep = evaluate_predictions(np.array([0, 1, 2, 1]), np.array([0, 1, 2, 1]), 3)
        assert rep.oa == 1.0
        np.testing.assert_array_equal(rep.per_class, 1.0)

    def test_constant_predictor_is_majority_frequency(self):
        labels = np.array([0, 0, 0, 1, 2])
        assert evaluate_predictions(np.zeros(5), labels, 3).oa == pytest.approx(0.6)

    def test_oa_is_trace_over_total(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 4, 50)
        pred = rng.integers(0, 4, 50)
        rep = evaluate_predictions(pred, labels, 4)
        assert rep.oa == np.trace(rep.confusion) / rep.confusion.sum()
        assert rep.total == 50

    def test_empty(self):
        with pytest.raises(ValidationError):
            evaluate_predictions(np.array([]), np.array([]), 3)


class TestStageConfigs:
    def test_table_structure(self):
        s1, s2, s3 = (stage_config(s, multiplier=1.0) for s in (1, 2, 3))
        assert (s1.epochs, s2.epochs, s3.epochs) == (50, 20, 80)
        assert (s1.warmup_epochs, s2.warmup_epochs, s3.warmup_epochs) == (5, 2, 8)
        assert s1.frozen_sets == () and s2.frozen_sets == ("mask",)
        assert set(s3.frozen_sets) == {"mask", "bi-conv-kernels"}
        assert s1.betas == s3.betas == (0.9, 0.999) and s2.betas == (0.6, 0.9999)
        assert s1.embed_mode == FULL_PRECISION and s2.embed_mode == s3.embed_mode == BINARIZED

    def test_hsi_recipe_values(self):
        s = single_stage_config()
        assert (s.epochs, s.batch_size, s.base_lr, s.weight_decay) == (100, 64, 0.01, 1e-3)

    def test_default_multiplier_halves(self):
        assert [s.epochs for s in stages_for(RunConfig(seed=0))] == [25, 10, 40]

    def test_imagenet_preset(self):
        s = stage_config(2, "imagenet")
        assert (s.base_lr, s.weight_decay) == (1e-4, 5e-5)

    def test_unknown_frozen_set(self):
        with pytest.raises(ValidationError):
            stage_config(1, frozen_sets=("nope",))


class TestRunStage:
    def test_stage_order_enforced(self):
        cfg = tiny_cfg()
        ds = prepare_data(cfg)
        model = Model(cfg.model_config(ds.bands, ds.num_classes), np.random.default_rng(0))
        with pytest.raises(PipelineError):
            run_stage(model, ds, stages_for(cfg)[1], np.random.default_rng(0), cfg)
        model.completed_stage = 1
        with pytest.raises(PipelineError):
            run_stage(model, ds, stages_for(cfg)[2], np.random.default_rng(0), cfg)

    def test_fixed_baseline_needs_mask(self):
        cfg = tiny_cfg(baseline="random")
        ds = prepare_data(cfg)
        model = Model(cfg.model_config(ds.bands, ds.num_classes), np.random.default_rng(0))
        model.completed_stage = 1
        with pytest.raises(PipelineError):
            run_stage(model, ds, stages_for(cfg)[1], np.random.default_rng(0), cfg)

    def test_mode_flip_logged(self, pipeline):
        res, modes, _, _ = pipeline
        assert {m for s, m in modes if s == 1} == {FULL_PRECISION}
        first2 = next(m for s, m in modes if s == 2)
        assert first2 == BINARIZED
        assert {m for s, m in modes if s >= 2} == {BINARIZED}
        assert [r["embed_mode"] for r in res.histories[1]] == [BINARIZED]

    def test_mask_bytes_stable_after_stage_one(self, pipeline):
        _, _, masks, _ = pipeline
        end1 = [m for m in masks if m[0] == 1][-1]
        later = [m for m in masks if m[0] >= 2]
        assert later and all(m[1:] == end1[1:] for m in later)

    def test_kernels_stable_in_stage_three(self, tmp_path):
        cfg = tiny_cfg()
        seen = []
        run_pipeline(cfg, out_dir=str(tmp_path),
                     on_step=lambda m, s, e, t: seen.append((s.stage_id, m.embed.W.data.tobytes())))
        s2_end = [w for s, w in seen if s == 2][-1]
        assert all(w == s2_end for s, w in seen if s == 3)

    def test_outputs_written(self, pipeline):
        res, _, _, out = pipeline
        for k in (1, 2, 3):
            rows = read_metrics(out / f"metrics_stage{k}.csv")
            assert len(rows) == len(res.histories[k - 1])
            assert (out / f"stage{k}.ckpt").exists()
        assert (out / "model.ckpt").exists()
        assert (out / "metrics_stage1.csv").read_text().startswith("# LUMMETRICS1\nepoch,train_loss,val_oa,mean_d_ops,lr\n")

    def test_frozen_mask_reports_nominal_rate(self, pipeline):
        res, _, _, _ = pipeline
        want = res.model.export_mask().rate
        assert all(r["mean_d_ops"] == want for r in res.histories[1])


class TestCheckpoint:
    def test_save_load_save_identical(self, pipeline, tmp_path):
        res, _, _, out = pipeline
        raw = (out / "stage2.ckpt").read_bytes()
        again = ckpt_io.dumps(model_checkpoint_from(restore(ckpt_io.loads(raw))))
        assert again == raw

    def test_resume_next_step_loss_bit_identical(self, tmp_path):
        cfg = tiny_cfg()
        ds = prepare_data(cfg)
        model = Model(cfg.model_config(ds.bands, ds.num_classes), np.random.default_rng(3))
        rng = np.random.default_rng(11)
        opt = AdamW()
        st1 = stage_config(1, epochs=1, batch_size=16)
        run_stage(model, ds, st1, rng, cfg, optimizer=opt)
        path = tmp_path / "mid.ckpt"
        ckpt_io.save(path, model_checkpoint(model, run=cfg, norm=ds.norm, optimizer=opt, rng=rng, stage=1, epoch=1))
        loaded = load_checkpoint(path)
        idx = np.arange(16)
        imgs = ds.images("train", idx).astype(np.float32)
        y = ds.train.labels[idx]
        a, _ = train_step(model, imgs, y, rng, cfg)
        b, _ = train_step(loaded.model, imgs, y, loaded.rng, loaded.run)
        assert a.item() == b.item()
        assert loaded.optimizer.t == opt.t
        np.testing.assert_array_equal(loaded.norm.mean, ds.norm.mean)

    def test_truncated_checkpoint(self, pipeline):
        _, _, _, out = pipeline
        raw = (out / "model.ckpt").read_bytes()
        with pytest.raises(FormatError):
            ckpt_io.loads(raw[:-3])
        with pytest.raises(FormatError):
            ckpt_io.loads(b"X" + raw[1:])


def model_checkpoint_from(lc):
    return model_checkpoint(lc.model, run=lc.run, norm=lc.norm, optimizer=lc.optimizer, rng=lc.rng,
                            stage=lc.meta["stage"], epoch=lc.meta["epoch"])


class TestDeployment:
    def test_schedule_round_trip(self, pipeline, tmp_path):
        res, _, _, _ = pipeline
        sched = schedule.schedule_from_model(res.model)
        raw = schedule.dumps(sched)
        back = schedule.loads(raw)
        assert schedule.dumps(back) == raw
        np.testing.assert_array_equal(back.mask.D, res.model.export_mask().D)
        np.testing.assert_array_equal(back.bank.bits, res.model.kernel_bank().bits)
        with pytest.raises(FormatError):
            schedule.loads(raw[:-1])

    def test_schedule_header_and_size(self, pipeline):
        res, _, _, _ = pipeline
        raw = schedule.dumps(schedule.schedule_from_model(res.model))
        C, ch, K, N = 12, 6, 9, 9
        head = f"DMDSCHED1 {K} {C} {ch} {N}\n".encode()
        assert raw.startswith(head)
        assert len(raw) == len(head) + C * (11 + 8 + 8 * ch) + (N * C + 7) // 8 + 8 * C

    def test_dmd_path_equals_fixed_mask_path(self, pipeline):
        res, _, _, _ = pipeline
        m64 = res.model.astype(np.float64)
        fm = m64.export_mask()
        a, la = evaluate(m64, res.dataset, mode="fixed", fixed=fm, return_logits=True)
        b, lb = evaluate(m64, res.dataset, fixed=fm, dmd=True, return_logits=True)
        np.testing.assert_allclose(la, lb, rtol=1e-9, atol=1e-9)
        assert a.oa == b.oa

    def test_deployment_report_rate(self, pipeline):
        res, _, _, _ = pipeline
        rep = deployment_report(res.model, res.dataset)
        assert rep["fixed"].retained == int(np.floor(0.3 * 9 * 12 + 0.5))
        assert 0 <= rep["after"].oa <= 1 and 0 <= rep["before"].oa <= 1


class TestExportedVsSampled:
    def test_export_accuracy_close_to_stochastic(self):
        """A toy model trained at d_tar=0.3 until the retain probabilities
        polarize classifies about as well with its exported top-k mask as
        with freshly sampled masks."""
        cfg = tiny_cfg(stage_overrides={1: {"epochs": 40}},
                       data={"synthetic": {"classes": 3, "bands": 6, "size": 32, "seed": 2}})
        ds = prepare_data(cfg)
        model = Model(cfg.model_config(ds.bands, ds.num_classes), np.random.default_rng(0))
        run_stage(model, ds, stages_for(cfg)[0], np.random.default_rng(1), cfg)
        fixed = evaluate(model, ds, mode="fixed").oa
        rng = np.random.default_rng(5)
        images = ds.images("val", np.arange(len(ds.val))).astype(np.float32)
        sampled = []
        for _ in range(10):
            with ad.no_grad():
                logits, _ = model.forward(images, train=False, rng=rng, mask_mode="sample")
            sampled.append(np.mean(logits.data.argmax(1) == ds.val.labels))
        assert abs(fixed - np.mean(sampled)) <= 0.01 + 1e-12


class TestConfig:
    def test_seed_required(self):
        with pytest.raises(ValidationError):
            RunConfig().validate()

    def test_flags_win(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"seed": 1, "d_tar": 0.2}')
        cfg = RunConfig.load(p, {"d_tar": 0.05, "seed": None})
        assert cfg.d_tar == 0.05 and cfg.seed == 1

    def test_unknown_key(self):
        with pytest.raises(ValidationError):
            RunConfig.from_dict({"sede": 1})

    @pytest.mark.parametrize("d", [0.0, 1.01])
    def test_rate_range(self, d):
        with pytest.raises(ValidationError):
            RunConfig(seed=0, d_tar=d)

    def test_model_config_passes_geometry(self):
        mc = tiny_cfg().model_config(6, 3)
        assert isinstance(mc, ModelConfig) and mc.num_tokens == 9 and mc.embed_dim == 12
