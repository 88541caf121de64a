import copy

import numpy as np
import pytest

from hamkit.matcore import ParameterError, ShapeError, make_rng
from hamkit.trainer import (
    Checkpoint,
    MetricsTrace,
    ModelConfig,
    SegModel,
    SyntheticTaskSpec,
    TrainConfig,
    confusion_matrix,
    evaluate,
    gradient_norm_spread,
    load_dataset,
    make_synthetic_task,
    poly_lr,
    save_dataset,
    scores,
    sgd_poly_step,
    train,
)

SMALL = dict(height=8, width=8, n_train=24, n_val=8, n_test=8)


def small_task(**kw):
    return make_synthetic_task(SyntheticTaskSpec(**{**SMALL, **kw}))


def ham_model(mode="one-step", kind="nmf"):
    return ModelConfig(block="hamburger", d_z=8, ham={"model": kind, "d": 8, "r": 2, "K": 3, "grad_mode": mode})


class TestSyntheticTask:
    def test_deterministic(self):
        a, b = small_task(), small_task()
        for name in ("train", "val", "test"):
            assert np.array_equal(a[name].x, b[name].x) and np.array_equal(a[name].y, b[name].y)

    def test_splits_differ(self):
        ds = small_task()
        assert not np.array_equal(ds["train"].x[:8], ds["val"].x)

    def test_noise_free_rank(self):
        spec = SyntheticTaskSpec(noise_sigma=0.0, n_train=20, n_val=0, n_test=0)
        for x in make_synthetic_task(spec)["train"].x:
            s = np.linalg.svd(x, compute_uv=False)
            assert np.sum(s > 1e-10 * s[0]) <= spec.r_true * spec.regions

    def test_label_histogram(self):
        spec = SyntheticTaskSpec()
        y = make_synthetic_task(spec)["train"].y
        freq = np.bincount(y.ravel(), minlength=spec.k) / y.size
        assert np.all(freq >= 0.5 / spec.k)

    def test_pixels_do_not_identify_texture(self):
        ds = make_synthetic_task(SyntheticTaskSpec(n_train=1, n_val=0, n_test=0))
        owners = [set(np.flatnonzero((ds.textures == a).any(axis=1))) for a in range(ds.atoms.shape[1])]
        assert any(len(o) > 1 for o in owners)

    @pytest.mark.parametrize("kw", [{"r_true": 20}, {"k": 9}, {"regions": 5}, {"noise_sigma": -1.0}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ParameterError):
            make_synthetic_task(SyntheticTaskSpec(**{**SMALL, **kw}))

    def test_round_trip(self, tmp_path):
        ds = small_task()
        save_dataset(ds, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert np.array_equal(back["val"].x, ds["val"].x) and np.array_equal(back["val"].y, ds["val"].y)
        with pytest.raises(FileExistsError):
            save_dataset(ds, tmp_path / "d")
        with pytest.raises(FileNotFoundError, match="missing"):
            save_dataset(ds, tmp_path / "missing" / "d")

    def test_byte_identical_files(self, tmp_path):
        save_dataset(small_task(), tmp_path / "a")
        save_dataset(small_task(), tmp_path / "b")
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


class TestOptimizer:
    def test_default_lr(self):
        assert poly_lr(0, TrainConfig()) == 0.009

    def test_schedule_closed_form(self):
        cfg = TrainConfig(iters_max=300)
        for i in range(301):
            assert abs(poly_lr(i, cfg) - 0.009 * (1 - i / 300) ** 0.9) <= 1e-15
        assert poly_lr(300, cfg) == 0.0

    def test_zero_gradient_is_noop(self, rng):
        p = {"w": rng.normal(size=(3, 2))}
        out = sgd_poly_step(p, {"w": np.zeros((3, 2))}, {}, 0, TrainConfig(weight_decay=0.0))
        assert np.array_equal(out["w"], p["w"])

    def test_momentum_update(self, rng):
        cfg = TrainConfig(lr0=0.1, iters_max=10)
        p, g = {"w": rng.normal(size=3)}, {"w": rng.normal(size=3)}
        vel = {}
        p1 = sgd_poly_step(p, g, vel, 0, cfg)
        v0 = g["w"] + 1e-4 * p["w"]
        np.testing.assert_allclose(p1["w"], p["w"] - 0.1 * v0)
        p2 = sgd_poly_step(p1, g, vel, 1, cfg)
        v1 = 0.9 * v0 + g["w"] + 1e-4 * p1["w"]
        np.testing.assert_allclose(p2["w"], p1["w"] - poly_lr(1, cfg) * v1)

    def test_past_end(self):
        with pytest.raises(ParameterError):
            sgd_poly_step({}, {}, {}, 5, TrainConfig(iters_max=5))


class TestMetrics:
    def test_perfect(self):
        y = np.array([0, 1, 2, 2])
        acc, miou, _ = scores(y, y, 3)
        assert acc == 1.0 and miou == 1.0

    def test_constant_prediction(self):
        truth = np.array([0] * 6 + [1] * 6)
        pred = np.zeros(12, dtype=np.int64)
        cm = confusion_matrix(pred, truth, 2)
        assert cm.tolist() == [[6, 0], [6, 0]]
        acc, miou, iou = scores(pred, truth, 2)
        # class 0: TP=6, FP=6, FN=0; class 1: TP=0
        assert acc == 0.5 and iou.tolist() == [0.5, 0.0] and miou == 0.25

    def test_empty_class_skipped(self):
        acc, miou, iou = scores(np.array([0, 1, 1]), np.array([0, 1, 0]), 3)
        assert np.isnan(iou[2])
        assert miou == pytest.approx((0.5 + 0.5) / 2)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            confusion_matrix(np.zeros(3, dtype=int), np.zeros(4, dtype=int), 2)

    def test_trace_csv(self):
        tr = MetricsTrace()
        tr.log_loss(0, 1.5)
        tr.log_loss(1, 1.25)
        tr.log_eval(2, 0.5, 0.25)
        assert tr.to_csv().splitlines() == ["iter,loss,acc,miou", "0,1.5,,", "1,1.25,0.5,0.25"]
        assert MetricsTrace.from_dict(tr.to_dict()) == tr


class TestTrain:
    def test_single_class_task(self):
        ds = small_task(k=1, regions=1)
        ck = train(ModelConfig(block="none", d_z=8), ds, TrainConfig(iters_max=200, eval_interval=50))
        assert ck.trace.losses[-1] < 1e-6
        assert ck.trace.final[1] == 1.0

    @pytest.mark.parametrize("block", ["none", "attention", "hamburger"])
    def test_deterministic(self, block):
        ds = small_task()
        mc = ham_model() if block == "hamburger" else ModelConfig(block=block, d_z=8)
        tc = TrainConfig(lr0=0.05, iters_max=6, eval_interval=3, seed=4)
        a, b = train(mc, ds, tc), train(mc, ds, tc)
        assert a.trace == b.trace
        assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)
        assert np.all(np.isfinite(a.trace.losses))

    def test_nan_is_flagged_not_raised(self):
        ds = small_task()
        tc = TrainConfig(lr0=1e40, iters_max=20, eval_interval=10)
        with np.errstate(all="ignore"):
            ck = train(ModelConfig(block="none", d_z=8), ds, tc)
        assert ck.trace.nan and ck.iteration < 20

    def test_resume_matches_uninterrupted(self, tmp_path):
        ds = small_task()
        mc = ham_model(kind="nmf")
        mc.ham["init"] = "warm_online"
        tc = TrainConfig(lr0=0.05, iters_max=8, eval_interval=4, seed=2)
        full = train(mc, ds, tc)
        part = train(mc, ds, tc, stop_after=3)
        part.save(tmp_path / "ck")
        resumed = train(mc, ds, tc, resume=Checkpoint.load(tmp_path / "ck"))
        assert resumed.trace == full.trace
        for k in full.model.params:
            assert np.array_equal(resumed.model.params[k], full.model.params[k])
        assert np.array_equal(resumed.model.bn.running_var, full.model.bn.running_var)

    def test_update_bookkeeping(self):
        """One step's parameter delta equals -lr * (g + wd p) with g recomputed by finite differences."""
        ds = small_task()
        mc = ham_model(mode="bptt", kind="vq")
        tc = TrainConfig(lr0=0.05, iters_max=5, batch=4, seed=9)
        model0 = SegModel(mc, ds.spec.c_in, ds.spec.k, tc.seed)
        after = train(mc, ds, tc, stop_after=1).model
        r = make_rng(0)
        from hamkit.matcore import derive_seed, tape

        rng_seed = derive_seed(tc.seed, "iter", 0)
        idx = make_rng(rng_seed).choice(len(ds["train"]), size=4, replace=False)
        x, y = ds["train"].x[idx], ds["train"].y[idx]

        def loss(params):
            m = copy.deepcopy(model0)
            m.params = params
            rng = make_rng(rng_seed)
            rng.choice(len(ds["train"]), size=4, replace=False)
            logits, _ = m.forward(x, rng)
            return float(tape.softmax_cross_entropy(logits, y).value)

        for name in ("cls_W", "W_u", "W_l", "enc_W"):
            p = model0.params[name]
            for _ in range(3):
                idx_ = tuple(int(r.integers(s)) for s in p.shape)
                up = {k: v.copy() for k, v in model0.params.items()}
                dn = {k: v.copy() for k, v in model0.params.items()}
                up[name][idx_] += 1e-6
                dn[name][idx_] -= 1e-6
                g = (loss(up) - loss(dn)) / 2e-6
                expected = p[idx_] - tc.lr0 * (g + tc.weight_decay * p[idx_])
                assert after.params[name][idx_] == pytest.approx(expected, rel=1e-6, abs=1e-10)

    def test_evaluate_shape_check(self):
        ds = small_task()
        model = SegModel(ModelConfig(block="none", d_z=8), 5, ds.spec.k, 0)
        with pytest.raises(ShapeError):
            evaluate(model, ds["val"])

    def test_evaluate_is_deterministic_and_restores_mode(self):
        ds = small_task()
        ck = train(ham_model(), ds, TrainConfig(iters_max=2, eval_interval=2))
        a = evaluate(ck.model, ds["val"])
        b = evaluate(ck.model, ds["val"])
        assert a[:2] == b[:2] and ck.model.bn.mode == "train"
        assert 0.0 <= a[1] <= 1.0


class TestGradientNormSpread:
    def test_deterministic_and_side_effect_free(self):
        task = small_task()
        model = SegModel(ham_model("bptt"), task.spec.c_in, task.spec.k, seed=1)
        before = {k: v.copy() for k, v in model.params.items()}
        running = model.bn.running_mean.copy()
        a = gradient_norm_spread(model, task["train"], n_batches=4)
        b = gradient_norm_spread(model, task["train"], n_batches=4)
        assert a == b
        assert a["mean"] > 0 and a["cv"] >= 0
        assert all(np.array_equal(before[k], model.params[k]) for k in before)
        assert np.array_equal(running, model.bn.running_mean)

    def test_single_batch_has_no_spread(self):
        task = small_task()
        model = SegModel(ModelConfig(block="none", d_z=8), task.spec.c_in, task.spec.k, seed=0)
        assert gradient_norm_spread(model, task["train"], n_batches=1)["cv"] == 0.0
