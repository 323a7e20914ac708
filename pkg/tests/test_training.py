import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpkan.cli import read_spec
from gpkan.data_io import toy_dataset
from gpkan.gaussian_core import GaussianScalar
from gpkan.gp_neuron import DEFAULT_LAMBDA
from gpkan.layers import Network
from gpkan.training import (AdamState, CheckpointIOError, CheckpointSchemaError, CheckpointVersionError, Dataset,
                            TrainConfig, accuracy, adam_step, backward, batch_mse, batch_nll, confusion_matrix,
                            gaussian_nll, load_checkpoint, mse_loss, predict_class, record_forward, save_checkpoint,
                            train)


def softplus(x):
    return np.logaddexp(0.0, x)


TOY = {"input": [2], "layers": [{"fcgp": {"in": 2, "out": 1, "inducing": 10}},
                                {"fcgp": {"in": 1, "out": 1, "inducing": 10}}]}


def toy_sets(n_train=256, n_val=64):
    return toy_dataset(n_train, seed=1).to_dataset(), toy_dataset(n_val, seed=2).to_dataset()


class TestLosses:
    def test_nll_vanishes(self):
        assert gaussian_nll(GaussianScalar(0.7, 1 / (2 * math.pi)), 0.7) == pytest.approx(0.0, abs=1e-15)

    def test_nll_standard_normal(self):
        assert gaussian_nll(GaussianScalar(0, 1), 0.0) == pytest.approx(0.5 * math.log(2 * math.pi), rel=1e-15)
        assert gaussian_nll(GaussianScalar(0, 1), 0.0) == pytest.approx(0.918938533204672, rel=1e-14)

    def test_nll_grows_as_variance_shrinks(self):
        losses = [gaussian_nll(GaussianScalar(0.0, v), 1.0) for v in 10.0 ** -np.arange(1, 12)]
        assert np.all(np.diff(losses) > 0)
        assert losses[-1] > 1e10

    def test_nll_floor(self):
        assert math.isfinite(gaussian_nll(GaussianScalar(0.0, 0.0), 0.0))

    def test_mse(self):
        assert mse_loss(GaussianScalar(2.5, 9.0), 2.5) == 0.0
        assert mse_loss(GaussianScalar(1.0, 0.3), 3.0) == 4.0

    def test_batch_mse_is_mean(self):
        rng = np.random.default_rng(0)
        m, y = rng.normal(size=(5, 1)), rng.normal(size=(5, 1))
        ref = np.mean([mse_loss(GaussianScalar(a, 0.0), b) for a, b in zip(m.ravel(), y.ravel())])
        assert float(batch_mse(m, np.zeros_like(m), y).value) == pytest.approx(ref, rel=1e-14)

    def test_batch_nll_sums_outputs_averages_batch(self):
        rng = np.random.default_rng(1)
        m, v, y = rng.normal(size=(4, 3)), rng.uniform(0.1, 2, (4, 3)), rng.normal(size=(4, 3))
        per = [sum(gaussian_nll(GaussianScalar(m[b, k], v[b, k]), y[b, k]) for k in range(3)) for b in range(4)]
        assert float(batch_nll(m, v, y).value) == pytest.approx(np.mean(per), rel=1e-13)


class TestAdam:
    def config(self, **kw):
        return TrainConfig(**kw)

    def test_zero_gradients(self):
        params = {"w": np.array([1.0, -2.0])}
        new, state = adam_step(params, {"w": np.zeros(2)}, AdamState(), self.config())
        np.testing.assert_array_equal(new["w"], params["w"])
        assert state.step == 1

    def test_first_step_size(self):
        new, _ = adam_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, AdamState(), self.config(learning_rate=1e-3))
        assert float(new["w"]) == pytest.approx(-1e-3, rel=1e-7)

    def test_quadratic_bowl(self):
        cfg = self.config(learning_rate=0.05)
        params, state = {"w": np.array(0.0)}, AdamState()
        for k in range(2000):
            params, state = adam_step(params, {"w": 2 * (params["w"] - 3.0)}, state, cfg)
            if abs(float(params["w"]) - 3.0) < 1e-3:
                break
        assert abs(float(params["w"]) - 3.0) < 1e-3
        assert state.step <= 2000

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), self.config())

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1e-4, 10.0), st.floats(-1e6, 1e6))
    def test_noise_floor_after_step(self, lr, g):
        cfg = self.config(learning_rate=lr)
        raw = np.array([-30.0, 0.0, 5.0])
        new, _ = adam_step({"raw_sn2": raw}, {"raw_sn2": np.full(3, g)}, AdamState(), cfg)
        assert np.all(DEFAULT_LAMBDA + softplus(new["raw_sn2"]) >= DEFAULT_LAMBDA)

    @pytest.mark.parametrize("bad", [dict(learning_rate=0.0), dict(lambda_floor=0.0), dict(batch_size=0),
                                     dict(objective="hinge")])
    def test_config_invariants(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class FixedOutput:
    """Stand-in model whose raw outputs are given directly."""

    input_shape = (1,)

    def __init__(self, means):
        self.means = np.asarray(means, dtype=np.float64)

    def predict(self, x):
        return np.tile(self.means, (len(x), 1)), np.ones((len(x), len(self.means)))


class TestPredictClass:
    def test_argmax(self):
        assert predict_class(FixedOutput([0.1, 0.9, 0.05, 0.0]), np.zeros(1)) == 1

    def test_tie_goes_low(self):
        assert predict_class(FixedOutput([0.2, 0.7, 0.7, 0.1]), np.zeros(1)) == 1

    def test_confusion(self):
        cm = confusion_matrix([0, 1, 1, 2], [0, 1, 2, 2], 3)
        np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 1, 0], [0, 1, 1]])


class TestTrain:
    def test_zero_epochs(self):
        data, val = toy_sets()
        model = Network(TOY, seed=0)
        before = {k: v.copy() for k, v in model.params.items()}
        records = train(model, data, TrainConfig(objective="mse", epochs=0), val=val)
        assert len(records) == 1 and records[0]["step"] == 0 and records[0]["train_loss"] is None
        assert all(np.array_equal(before[k], model.params[k]) for k in before)

    def test_deterministic_curves(self):
        data, val = toy_sets()
        curves = []
        for _ in range(2):
            model = Network(TOY, seed=3)
            train(model, data, TrainConfig(objective="mse", learning_rate=1e-2, batch_size=16, epochs=2, seed=5))
            curves.append(model.loss_curve)
        np.testing.assert_allclose(curves[0], curves[1], rtol=0, atol=1e-10)

    def test_log_records(self, tmp_path):
        data, val = toy_sets(64, 16)
        log = tmp_path / "log.ndjson"
        records = train(Network(TOY, seed=0), data, TrainConfig(objective="mse", batch_size=16, epochs=2), val, log)
        lines = [json.loads(line) for line in log.read_text().splitlines()]
        assert [r["step"] for r in lines] == [0, 4, 8]
        assert set(lines[0]) == {"epoch", "step", "train_loss", "val_metric", "wall_ms"}
        assert [r["val_metric"] for r in lines] == [r["val_metric"] for r in records]

    def test_max_steps(self):
        data, _ = toy_sets(64, 16)
        model = Network(TOY, seed=0)
        records = train(model, data, TrainConfig(objective="mse", batch_size=8, epochs=10, max_steps=11))
        assert model.train_state.step == 11
        assert records[-1]["step"] == 11

    def test_noise_floor_every_step(self):
        data, _ = toy_sets(64, 16)
        model = Network(TOY, seed=0)
        floors = []

        def watch(_):
            floors.append(min(float(np.min(model.lam + softplus(v))) for k, v in model.params.items()
                              if k.endswith("raw_sn2")))

        cfg = TrainConfig(objective="gaussian_nll", learning_rate=0.5, batch_size=8, epochs=3, eval_every=1)
        train(model, data, cfg, on_record=watch)
        assert len(floors) == 25
        assert min(floors) >= model.lam

    def test_learns_toy_quickly(self):
        data, val = toy_sets(512, 128)
        model = Network(TOY, seed=0)
        records = train(model, data, TrainConfig(objective="mse", learning_rate=1e-2, batch_size=32, epochs=6), val)
        assert records[-1]["val_metric"] < 0.5 * records[0]["val_metric"]

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(Network(TOY), Dataset(np.zeros((0, 2)), np.zeros((0, 1))), TrainConfig())


class TestCheckpoint:
    def trained(self):
        data, _ = toy_sets(64, 16)
        model = Network(TOY, seed=0)
        train(model, data, TrainConfig(objective="mse", learning_rate=1e-2, batch_size=16, epochs=1))
        return model

    def test_round_trip_bit_exact(self, tmp_path):
        model = self.trained()
        save_checkpoint(model, tmp_path / "m.json")
        back = load_checkpoint(tmp_path / "m.json")
        for name, arr in model.params.items():
            assert np.array_equal(arr, back.params[name]), name
        assert back.train_state.step == model.train_state.step
        for name, arr in model.train_state.v.items():
            assert np.array_equal(arr, back.train_state.v[name])

    def test_round_trip_predictions(self, tmp_path):
        model = self.trained()
        save_checkpoint(model, tmp_path / "m.json")
        x = toy_dataset(32, seed=9).inputs
        np.testing.assert_array_equal(model.predict(x)[0], load_checkpoint(tmp_path / "m.json").predict(x)[0])

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.json"
        save_checkpoint(Network(TOY), path)
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(CheckpointSchemaError):
            load_checkpoint(path)

    def test_version(self, tmp_path):
        path = tmp_path / "m.json"
        save_checkpoint(Network(TOY), path)
        doc = json.loads(path.read_text())
        doc["version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_missing_parameter(self, tmp_path):
        path = tmp_path / "m.json"
        save_checkpoint(Network(TOY), path)
        doc = json.loads(path.read_text())
        del doc["params"]["1.h"]
        path.write_text(json.dumps(doc))
        with pytest.raises(CheckpointSchemaError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointIOError):
            load_checkpoint(tmp_path / "absent.json")

    def test_errors_are_distinct(self):
        kinds = {CheckpointIOError, CheckpointSchemaError, CheckpointVersionError}
        assert all(not issubclass(a, b) for a in kinds for b in kinds if a is not b)


@pytest.fixture(scope="module")
def reference_model():
    return Network(read_spec("mnist_reference"), seed=0)


class TestReferenceModel:
    def test_parameter_count_near_80k(self, reference_model):
        assert 68000 <= reference_model.n_parameters() <= 92000

    def test_one_image_finite_loss_and_gradients(self, reference_model):
        image = np.random.default_rng(0).uniform(0, 1, (1, 1, 28, 28))
        loss, tape = record_forward(reference_model, (image, np.eye(10)[[3]]), "nll")
        assert np.isfinite(float(loss))
        assert backward(tape).all_finite()

    def test_checkpoint_reproduces_accuracy(self, reference_model, tmp_path):
        rng = np.random.default_rng(1)
        trained = Network(reference_model.spec, seed=0)
        for name, p in trained.params.items():
            trained.params[name] = p + rng.normal(0, 0.01, np.shape(p))
        images, labels = rng.uniform(0, 1, (40, 1, 28, 28)), rng.integers(0, 10, 40)
        save_checkpoint(trained, tmp_path / "m.json")
        again = load_checkpoint(tmp_path / "m.json")
        np.testing.assert_array_equal(again.predict(images)[0], trained.predict(images)[0])
        assert accuracy(again, images, labels) == accuracy(trained, images, labels)
