"""Optimizer, schedule, seeding, and training-loop tests."""

import json
import math

import numpy as np
import pytest

from liifseg import data as dat
from liifseg import loss as lo
from liifseg import model as mo
from liifseg import numerics as nx
from liifseg import train as tr
from liifseg.errors import ConfigError, GraphError, TrainingDiverged

TINY = mo.ModelConfig(
    base_width=8, group_sizes=(1, 1, 1), rcmlp_dims=(16, 8), head_width=16,
    head_depth=2, num_classes=8, input_resolution=32,
)


def adam_oracle(g_seq, lr, beta1=0.9, beta2=0.999, eps=1e-8, x0=0.0):
    """Hand-rolled scalar Adam recurrence."""
    m = v = 0.0
    x = x0
    for t, g in enumerate(g_seq, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        x -= lr * mhat / (math.sqrt(vhat) + eps)
    return x


class TestAdam:
    def test_zero_grads_leave_params_unchanged(self):
        p = nx.tensor(np.array([1.0, -2.0]), requires_grad=True)
        p._grad = np.zeros(2)
        params = {"p": p}
        state = tr.OptimState(params)
        tr.adam_step(params, state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert state.step == 1

    def test_matches_scalar_recurrence(self):
        with nx.precision("float64"):
            p = nx.tensor(np.array([0.0]), requires_grad=True)
            params = {"p": p}
            state = tr.OptimState(params)
            g = 0.3
            for _ in range(25):
                p._grad = np.array([g])
                tr.adam_step(params, state, lr=1e-2)
        expected = adam_oracle([0.3] * 25, 1e-2)
        assert float(p.data[0]) == pytest.approx(expected, abs=1e-12)

    def test_tensors_update_independently(self):
        a = nx.tensor(np.array([1.0]), requires_grad=True)
        b = nx.tensor(np.array([1.0]), requires_grad=True)
        params = {"a": a, "b": b}
        state = tr.OptimState(params)
        a._grad = np.array([1.0])
        b._grad = np.array([0.0])
        tr.adam_step(params, state, lr=0.1)
        assert float(a.data[0]) != 1.0
        assert float(b.data[0]) == 1.0

    def test_missing_grad_is_contract_error(self):
        p = nx.tensor(np.array([1.0]), requires_grad=True)
        params = {"p": p}
        state = tr.OptimState(params)
        with pytest.raises(GraphError) as err:
            tr.adam_step(params, state, lr=0.1)
        assert "p" in str(err.value)

    def test_update_magnitude_invariant_to_loss_scale(self):
        # bias-corrected moments make |dx| scale free; check across loss scales
        for c in (10.0, 1000.0):
            base = nx.tensor(np.array([0.5]), requires_grad=True)
            scaled = nx.tensor(np.array([0.5]), requires_grad=True)
            sb = tr.OptimState({"p": base})
            ss = tr.OptimState({"p": scaled})
            rng = np.random.default_rng(0)
            for _ in range(10):
                g = rng.normal()
                base._grad = np.array([g])
                scaled._grad = np.array([c * g])
                tr.adam_step({"p": base}, sb, lr=1e-3)
                tr.adam_step({"p": scaled}, ss, lr=1e-3)
            assert abs(float(base.data[0]) - float(scaled.data[0])) <= 1e-6


class TestLrSchedule:
    CFG = tr.TrainConfig(initial_lr=5e-4, decay_factor=0.1, decay_every=20, min_lr=1e-7)

    def test_initial(self):
        assert tr.lr_at(0, self.CFG) == pytest.approx(5e-4)

    def test_one_decay_at_twenty(self):
        assert tr.lr_at(19, self.CFG) == pytest.approx(5e-4)
        assert tr.lr_at(20, self.CFG) == pytest.approx(5e-5)

    def test_clamped_at_min(self):
        assert tr.lr_at(200, self.CFG) == pytest.approx(1e-7)

    def test_non_increasing(self):
        vals = [tr.lr_at(e, self.CFG) for e in range(0, 400, 7)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_negative_epoch_rejected(self):
        with pytest.raises(ConfigError):
            tr.lr_at(-1, self.CFG)


class TestSeeding:
    # frozen sha256-derived fixture table; must never change across platforms
    FIXTURES = {
        (0, "init"): 6009762222449970901,
        (7, "init"): 8823696905975556700,
        (7, "shuffle.0"): 91303152004991606,
        (7, "augment.3"): 11210742564138957023,
        (123456789, "shuffle.41"): 2467808754532081384,
    }

    def test_derivation_matches_fixture_table(self):
        for (root, stream), expected in self.FIXTURES.items():
            assert tr.derive_seed(root, stream) == expected

    def test_same_root_same_init(self):
        a = tr.seed_all(9).rng("init").random(4)
        b = tr.seed_all(9).rng("init").random(4)
        np.testing.assert_array_equal(a, b)

    def test_different_streams_differ(self):
        bundle = tr.seed_all(9)
        assert bundle.seed("shuffle.0") != bundle.seed("shuffle.1")
        assert bundle.seed("init") != bundle.seed("augment.0")


def _make_sets(n_train, n_val, res=32):
    train = [dat.synth_face(s, res) for s in range(n_train)]
    val = [dat.synth_face(5000 + s, res) for s in range(n_val)]
    return train, val


class TestFit:
    def test_one_epoch_emits_one_log_line(self, tmp_path):
        train, val = _make_sets(4, 2)
        model = mo.build_model(TINY, seed=0)
        cfg = tr.TrainConfig(epochs=1, batch_size=2, initial_lr=1e-3, seed=0,
                             loss=lo.LossConfig(lam=0.0, tau=0.5))
        result = tr.fit(model, train, val, cfg, out_dir=str(tmp_path))
        assert len(result.log) == 1
        lines = (tmp_path / "train_log.jsonl").read_text().strip().splitlines()
        assert len(lines) == 1
        record = json.loads(lines[0])
        assert set(record) == {"epoch", "lr", "train_loss", "val_mean_f1", "wall_seconds"}
        assert (tmp_path / "best.ckpt").exists()
        assert (tmp_path / "last.ckpt").exists()

    def test_loss_decreases_over_training(self):
        # reduced instance of the training contract: the 30-epoch, 50-sample
        # criterion run lives in the acceptance suite at full scale
        train, _ = _make_sets(16, 0)
        model = mo.build_model(TINY, seed=1)
        cfg = tr.TrainConfig(epochs=8, batch_size=4, initial_lr=1e-3, seed=1,
                             loss=lo.LossConfig(lam=0.0, tau=0.5))
        result = tr.fit(model, train, [], cfg)
        first = result.log[0].train_loss
        last = result.log[-1].train_loss
        assert last < 0.5 * first

    def test_deterministic_same_seed_bitwise(self):
        train, val = _make_sets(6, 2)
        finals = []
        for _ in range(2):
            model = mo.build_model(TINY, seed=tr.derive_seed(3, "init"))
            cfg = tr.TrainConfig(epochs=2, batch_size=3, initial_lr=1e-3, seed=3,
                                 loss=lo.LossConfig(lam=10.0, tau=0.5))
            result = tr.fit(model, train, val, cfg)
            finals.append((result.log[-1].train_loss,
                           {n: p.data.copy() for n, p in model.named_parameters()}))
        assert finals[0][0] == finals[1][0]
        for name in finals[0][1]:
            np.testing.assert_array_equal(finals[0][1][name], finals[1][1][name])

    def test_empty_training_set_rejected(self):
        model = mo.build_model(TINY, seed=0)
        with pytest.raises(ConfigError):
            tr.fit(model, [], [], tr.TrainConfig(epochs=1, batch_size=1))

    def test_non_finite_loss_aborts_with_diagnostic(self):
        train, _ = _make_sets(2, 0)
        model = mo.build_model(TINY, seed=0)
        model.params["enc.stem.weight"].data[:] = np.nan
        cfg = tr.TrainConfig(epochs=1, batch_size=2, initial_lr=1e-3, seed=0,
                             loss=lo.LossConfig(lam=0.0, tau=0.5))
        with pytest.raises(TrainingDiverged) as err:
            tr.fit(model, train, [], cfg)
        assert err.value.epoch == 0
        assert err.value.batch == 0
        assert "nan" in str(err.value).lower()

    def test_augmentation_path_runs(self):
        train, val = _make_sets(4, 2)
        model = mo.build_model(TINY, seed=0)
        cfg = tr.TrainConfig(epochs=1, batch_size=2, initial_lr=1e-3, seed=0,
                             loss=lo.LossConfig(lam=0.0, tau=0.5),
                             augment=dat.AugmentPolicy(crop=None))
        result = tr.fit(model, train, val, cfg)
        assert np.isfinite(result.log[0].train_loss)

    def test_best_checkpoint_tracks_val_f1(self, tmp_path):
        train, val = _make_sets(8, 3)
        model = mo.build_model(TINY, seed=4)
        cfg = tr.TrainConfig(epochs=3, batch_size=4, initial_lr=1e-3, seed=4,
                             loss=lo.LossConfig(lam=0.0, tau=0.5))
        result = tr.fit(model, train, val, cfg, out_dir=str(tmp_path))
        scores = [r.val_mean_f1 for r in result.log]
        assert result.best_val_f1 == pytest.approx(max(scores))
        assert result.best_epoch == int(np.argmax(scores))
        best = mo.load_checkpoint(tmp_path / "best.ckpt")
        for name, p in best.named_parameters():
            np.testing.assert_allclose(p.data, result.best_params[name], atol=1e-7)


class TestTrainConfigValidation:
    def test_rejects_bad_values(self):
        for kwargs in (
            {"epochs": 0},
            {"batch_size": 0},
            {"initial_lr": 0.0},
            {"decay_factor": 0.0},
            {"decay_every": 0},
            {"min_lr": 0.0},
        ):
            cfg = tr.TrainConfig(**kwargs)
            with pytest.raises(ConfigError):
                cfg.validate()
