"""Tests for the AdamW step, schedule, and the training loop."""

import math

import numpy as np
import pytest

from octafreq import tensor as T
from octafreq.exceptions import ConfigError, DomainError
from octafreq.model import ModelConfig, build_model, named_parameters
from octafreq.tensor import Parameter, Tensor
from octafreq.training import (
    OptimizerState,
    PairDataset,
    TrainConfig,
    adamw_step,
    evaluate,
    lr_for_epoch,
    train,
    write_curve,
)


def make_pairs(n, side=16, seed=0, noise=40.0):
    """Pairs of (noisy, clean) planes on the [0, 255] scale."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        clean = rng.random((side, side)).astype(np.float32) * 200.0 + 20.0
        noisy = clean + rng.normal(0.0, noise, clean.shape).astype(np.float32)
        pairs.append((np.clip(noisy, 0, 255).astype(np.float32), clean))
    return pairs


class FakeModel:
    """Single-parameter stand-in so the optimizer can be driven by hand."""

    def __init__(self, value, decay_exempt=False):
        self.w = Parameter(np.asarray(value, np.float32), decay_exempt=decay_exempt)

    def params(self):
        return [("w", self.w)]

    def state(self):
        return OptimizerState(0, {"w": np.zeros_like(self.w.data)},
                              {"w": np.zeros_like(self.w.data)})


class TestL1Loss:
    def test_equal_inputs_give_zero(self):
        x = Tensor(np.ones((4, 4)))
        assert float(T.l1_loss(x, x).data) == 0.0

    def test_constant_offset(self):
        x = Tensor(np.zeros((3, 5)))
        y = Tensor(np.full((3, 5), 2.0))
        assert float(T.l1_loss(x, y).data) == pytest.approx(2.0)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(7)
        a, b = rng.random((9, 9)), rng.random((9, 9))
        want = float(np.sum(np.abs(a - b)) / a.size)
        got = float(T.l1_loss(Tensor(a), Tensor(b)).data)
        assert abs(got - want) < 1e-7


class TestAdamWStep:
    def test_first_step_magnitude_is_lr(self):
        fm = FakeModel(np.zeros(5))
        fm.w.grad = np.full(5, 3.0, np.float32)
        cfg = TrainConfig(weight_decay=0.0)
        adamw_step(fm.params(), fm.state(), cfg, lr=0.01)
        # bias-corrected m/sqrt(v) equals sign(g) up to eps on step one
        assert np.allclose(fm.w.data, -0.01, rtol=1e-4)

    def test_zero_gradient_keeps_parameter(self):
        fm = FakeModel([1.5, -2.0])
        fm.w.grad = np.zeros(2, np.float32)
        adamw_step(fm.params(), fm.state(), TrainConfig(weight_decay=0.0), lr=0.1)
        assert np.array_equal(fm.w.data, np.asarray([1.5, -2.0], np.float32))

    def test_decay_is_decoupled(self):
        # zero gradient leaves the moments at zero, so the only movement is
        # the multiplicative (1 - lr*wd) of decoupled decay
        fm = FakeModel([2.0])
        fm.w.grad = np.zeros(1, np.float32)
        cfg = TrainConfig(weight_decay=0.1)
        adamw_step(fm.params(), fm.state(), cfg, lr=0.5)
        assert fm.w.data[0] == pytest.approx(2.0 * (1.0 - 0.5 * 0.1))

    def test_exempt_parameter_skips_decay(self):
        fm = FakeModel([2.0], decay_exempt=True)
        fm.w.grad = np.zeros(1, np.float32)
        adamw_step(fm.params(), fm.state(), TrainConfig(weight_decay=0.1), lr=0.5)
        assert fm.w.data[0] == 2.0

    def test_quadratic_converges_and_matches_recurrence(self):
        cfg = TrainConfig(weight_decay=0.0)
        fm = FakeModel([1.0])
        state = fm.state()
        # independent recurrence in float64
        w, m, v = 1.0, 0.0, 0.0
        for t in range(1, 201):
            g = 2.0 * float(fm.w.data[0])
            fm.w.grad = np.asarray([g], np.float32)
            adamw_step(fm.params(), state, cfg, lr=0.1)
            gm = 2.0 * w
            m = cfg.beta1 * m + (1 - cfg.beta1) * gm
            v = cfg.beta2 * v + (1 - cfg.beta2) * gm * gm
            w -= 0.1 * (m / (1 - cfg.beta1 ** t)) / (
                math.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.eps)
            assert fm.w.data[0] == pytest.approx(w, abs=2e-5), t
        assert abs(fm.w.data[0]) < 1e-2

    def test_rejects_non_finite_gradient(self):
        fm = FakeModel([1.0])
        fm.w.grad = np.asarray([np.nan], np.float32)
        with pytest.raises(DomainError, match="w"):
            adamw_step(fm.params(), fm.state(), TrainConfig(), lr=0.1)

    def test_moment_shapes_match_parameters(self):
        model = build_model(ModelConfig.preset("tiny"))
        state = OptimizerState.fresh(model)
        for name, p in named_parameters(model):
            assert state.m[name].shape == p.data.shape
            assert state.v[name].shape == p.data.shape


class TestSchedule:
    def test_halves_every_twenty_epochs(self):
        cfg = TrainConfig()
        assert lr_for_epoch(cfg, 0) == pytest.approx(1e-4)
        assert lr_for_epoch(cfg, 19) == pytest.approx(1e-4)
        assert lr_for_epoch(cfg, 20) == pytest.approx(5e-5)
        assert lr_for_epoch(cfg, 39) == pytest.approx(5e-5)
        assert lr_for_epoch(cfg, 40) == pytest.approx(2.5e-5)


class TestConfigValidation:
    @pytest.mark.parametrize("kw", [
        {"lr0": 0.0},
        {"beta1": 1.0},
        {"beta2": -0.1},
        {"weight_decay": -1e-4},
        {"batch": 2},
        {"total_iters": -1},
        {"halve_every_epochs": 0},
        {"drop_path": 1.0},
        {"eval_every": 0},
    ])
    def test_bad_values_rejected(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="momentum"):
            TrainConfig.from_dict({"momentum": 0.9})


class TestTrainLoop:
    def make(self, seed=5):
        return build_model(ModelConfig.preset("tiny"), seed=seed)

    def test_zero_iterations_keeps_initialisation(self):
        model = self.make()
        ref = dict(named_parameters(self.make()))
        ds = PairDataset(train=make_pairs(3), val=make_pairs(2, seed=1))
        out = train(model, ds, TrainConfig(total_iters=0), verbose=False)
        for name, p in named_parameters(out.model):
            assert np.array_equal(p.data, ref[name].data), name
        assert out.optimizer.step == 0
        assert len(out.curve) == 1 and out.curve[0][0] == 0

    def test_same_seed_is_bit_identical(self):
        ds = PairDataset(train=make_pairs(4), val=make_pairs(2, seed=1))
        cfg = TrainConfig(total_iters=20, eval_every=10, seed=3)
        a = train(self.make(), ds, cfg, verbose=False)
        b = train(self.make(), ds, cfg, verbose=False)
        for (n, p), (_, q) in zip(named_parameters(a.model),
                                  named_parameters(b.model)):
            assert np.array_equal(p.data, q.data), n
        for ra, rb in zip(a.curve, b.curve):
            assert np.array_equal(ra, rb, equal_nan=True)

    def test_overfits_one_pair_with_nonincreasing_windows(self):
        pair = make_pairs(1, seed=2)[0]
        ds = PairDataset(train=[pair], val=[pair])
        cfg = TrainConfig(total_iters=300, eval_every=100, lr0=1e-3,
                          drop_path=0.0, seed=0)
        out = train(self.make(), ds, cfg, verbose=False)
        train_l1 = [row[1] for row in out.curve[1:]]   # 100-iteration windows
        assert all(b <= a for a, b in zip(train_l1, train_l1[1:]))
        assert out.curve[-1][2] < out.curve[0][2]      # val L1 falls from init

    def test_curve_layout(self):
        ds = PairDataset(train=make_pairs(3), val=make_pairs(2, seed=1))
        cfg = TrainConfig(total_iters=25, eval_every=10, seed=0)
        out = train(self.make(), ds, cfg, verbose=False)
        assert [row[0] for row in out.curve] == [0, 10, 20, 25]
        assert math.isnan(out.curve[0][1])
        for it, train_l1, val_l1, val_psnr in out.curve[1:]:
            assert math.isfinite(train_l1) and math.isfinite(val_l1)
            assert math.isfinite(val_psnr)
        assert out.optimizer.step == 25

    def test_drop_path_rate_is_applied(self):
        model = self.make()
        ds = PairDataset(train=make_pairs(2), val=make_pairs(1, seed=1))
        train(model, ds, TrainConfig(total_iters=1, drop_path=0.25),
              verbose=False)
        assert model.stages[0].config.drop_path == 0.25
        assert model.refine.config.drop_path == 0.25

    def test_empty_sets_rejected(self):
        model = self.make()
        with pytest.raises(ConfigError):
            train(model, PairDataset(train=[], val=make_pairs(1)),
                  TrainConfig(), verbose=False)
        with pytest.raises(ConfigError):
            train(model, PairDataset(train=make_pairs(1), val=[]),
                  TrainConfig(), verbose=False)

    def test_evaluate_on_perfect_pairs(self):
        model = self.make()   # identity at init
        clean = make_pairs(2, seed=3, noise=0.0)
        val_l1, val_psnr = evaluate(model, clean)
        assert val_l1 == pytest.approx(0.0, abs=1e-7)
        assert val_psnr == float("inf")

    def test_write_curve_round_trip(self, tmp_path):
        rows = [(0, float("nan"), 0.5, 10.0), (10, 0.4, 0.3, 12.5)]
        path = tmp_path / "curve.csv"
        write_curve(path, rows)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iter,train_l1,val_l1,val_psnr"
        got = lines[1].split(",")
        assert got[0] == "0" and got[1] == "nan"
        assert float(lines[2].split(",")[3]) == pytest.approx(12.5)
