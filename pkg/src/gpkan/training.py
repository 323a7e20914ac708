"""Objectives, Adam, the training loop and checkpoint files."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .gp_neuron import DEFAULT_LAMBDA
from .layers import Network, SpecError

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-12
CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


class TrainingDiverged(FloatingPointError):
    pass


# ------------------------------------------------------------------- losses

def gaussian_nll(pred, target):
    """Negative log density of ``target`` under N(pred.mean, pred.variance)."""
    var = max(float(pred.variance), VAR_FLOOR)
    d = float(target) - float(pred.mean)
    return 0.5 * math.log(2.0 * math.pi * var) + d * d / (2.0 * var)


def mse_loss(pred, target):
    d = float(pred.mean) - float(target)
    return d * d


def batch_nll(mean, var, targets):
    """Per-sample NLL summed over outputs, averaged over the batch (tape-aware)."""
    v = ad.clamp_min(var, VAR_FLOOR)
    d = ad.sub(targets, mean)
    terms = ad.add(ad.mul(0.5, ad.add(LOG_2PI, ad.log(v))), ad.div(ad.square(d), ad.mul(2.0, v)))
    B = np.shape(ad.value(mean))[0]
    return ad.mul(ad.sum(terms), 1.0 / B)


def batch_mse(mean, var, targets):
    """Mean over all elements of (mean - target)^2; variance is ignored."""
    d = ad.sub(mean, targets)
    return ad.mul(ad.sum(ad.square(d)), 1.0 / np.size(ad.value(mean)))


OBJECTIVES = {"gaussian_nll": batch_nll, "nll": batch_nll, "mse": batch_mse}


# --------------------------------------------------------- forward/backward

@dataclass
class GradientBundle:
    """d loss / d raw parameter, keyed exactly like ``Network.params``."""

    grads: dict

    def __getitem__(self, name):
        return self.grads[name]

    def __iter__(self):
        return iter(self.grads)

    def items(self):
        return self.grads.items()

    def all_finite(self):
        return all(np.all(np.isfinite(g)) for g in self.grads.values())


def record_forward(model: Network, batch, objective="gaussian_nll", params=None):
    """Evaluate the loss of ``batch = (inputs, targets)`` on a fresh tape.

    Returns ``(loss, tape)``; the tape's last output is the loss node.
    """
    x, y = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    params = model.params if params is None else params
    loss_fn = OBJECTIVES[objective]
    with ad.Tape() as tape:
        watched = {name: tape.watch(arr, name) for name, arr in params.items()}
        mean, var = model.forward(x, watched)
        loss = loss_fn(mean, var, np.asarray(y, dtype=np.float64))
    tape.outputs.append(loss)
    return float(ad.value(loss)), tape


def backward(tape: ad.Tape) -> GradientBundle:
    return GradientBundle(tape.gradient(tape.outputs[-1]))


def loss_value(model: Network, batch, objective="gaussian_nll", params=None):
    """Untaped loss, bit-identical to :func:`record_forward`'s value."""
    x, y = batch
    mean, var = model.forward(x, params)
    return float(ad.value(OBJECTIVES[objective](mean, var, np.asarray(y, dtype=np.float64))))


# --------------------------------------------------------------------- Adam

@dataclass
class TrainConfig:
    objective: str = "gaussian_nll"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 1
    max_steps: int | None = None
    lambda_floor: float = DEFAULT_LAMBDA
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int | None = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.lambda_floor > 0:
            raise ValueError("lambda_floor must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update.  Returns new (params, state)."""
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_eps, config.learning_rate
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {np.shape(p)}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        new_params[name] = np.asarray(p - lr * mhat / (np.sqrt(vhat) + eps), dtype=np.float64)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(t, new_m, new_v)


# -------------------------------------------------------------- prediction

def predict_class(model: Network, image):
    """ArgMax of the raw output means; ties go to the lowest index."""
    x = np.asarray(image, dtype=np.float64)
    single = x.shape == model.input_shape
    mean, _ = model.predict(x[None] if single else x)
    labels = np.argmax(mean, axis=1)  # numpy argmax returns the first maximum
    return int(labels[0]) if single else labels


def accuracy(model, images, labels, batch_size=256):
    if len(images) == 0:
        raise ValueError("cannot score an empty set")
    pred = np.concatenate([predict_class(model, images[i:i + batch_size])
                           for i in range(0, len(images), batch_size)])
    return float(np.mean(pred == np.asarray(labels)))


def confusion_matrix(pred, labels, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(pred)), 1)
    return cm


# ------------------------------------------------------------------ training

@dataclass
class Dataset:
    """Inputs with regression/one-hot targets; ``labels`` set for classification."""

    inputs: np.ndarray
    targets: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx):
        return Dataset(self.inputs[idx], self.targets[idx], None if self.labels is None else self.labels[idx])


def validation_metric(model, data: Dataset):
    """Accuracy for labelled data, mean squared error of the means otherwise."""
    if data.labels is not None:
        return accuracy(model, data.inputs, data.labels)
    mean, _ = model.predict(data.inputs)
    return float(np.mean((mean - data.targets) ** 2))


def train(model: Network, dataset: Dataset, config: TrainConfig, val: Dataset | None = None,
          log_path=None, state: AdamState | None = None, on_record=None):
    """Minibatch Adam on ``config.objective``.

    Returns the list of log records (one per epoch, plus every
    ``eval_every`` steps when set).  The first record (step 0) holds the
    initial metrics.  On a non-finite loss the model keeps its last good
    parameters and :class:`TrainingDiverged` is raised.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if model.lam != config.lambda_floor:
        log.info("model lambda %g differs from config lambda %g; model value is used",
                 model.lam, config.lambda_floor)
    rng = np.random.default_rng(config.seed)
    state = state or AdamState()
    records = []
    losses = []
    t0 = time.perf_counter()
    sink = open(log_path, "w") if log_path else None

    def emit(epoch, train_loss):
        rec = {
            "epoch": epoch,
            "step": state.step,
            "train_loss": train_loss,
            "val_metric": validation_metric(model, val) if val is not None else None,
            "wall_ms": round(1000.0 * (time.perf_counter() - t0), 3),
        }
        records.append(rec)
        if sink:
            sink.write(json.dumps(rec) + "\n")
            sink.flush()
        if on_record:
            on_record(rec)
        log.info("epoch %s step %d loss %s val %s", epoch, state.step, train_loss, rec["val_metric"])

    try:
        emit(0, None)
        n = len(dataset)
        done = False
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            epoch_losses = []
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                loss, tape = record_forward(model, (dataset.inputs[idx], dataset.targets[idx]), config.objective)
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss {loss} at step {state.step + 1}")
                grads = backward(tape)
                model.params, state = adam_step(model.params, grads.grads, state, config)
                losses.append(loss)
                epoch_losses.append(loss)
                if config.eval_every and state.step % config.eval_every == 0:
                    emit(epoch, float(np.mean(epoch_losses[-config.eval_every:])))
                if config.max_steps is not None and state.step >= config.max_steps:
                    done = True
                    break
            if records[-1]["step"] != state.step:
                emit(epoch, float(np.mean(epoch_losses)) if epoch_losses else None)
            if done:
                break
    finally:
        if sink:
            sink.close()
    model.train_state = state
    model.loss_curve = losses
    return records


# --------------------------------------------------------------- checkpoints

class CheckpointError(Exception):
    pass


class CheckpointIOError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointSchemaError(CheckpointError):
    pass


def _fmt(v):
    if not math.isfinite(v):
        raise CheckpointSchemaError(f"cannot serialize non-finite value {v}")
    return format(v, ".17g")


def _array_json(a):
    a = np.asarray(a, dtype=np.float64)
    return '{"shape": %s, "values": [%s]}' % (json.dumps(list(a.shape)), ", ".join(_fmt(v) for v in a.ravel()))


def save_checkpoint(model: Network, path, state: AdamState | None = None):
    """Write the model (and optionally optimizer state) as a JSON document.

    Floats are written with 17 significant digits, so loading reproduces
    every parameter bit for bit.
    """
    state = state if state is not None else getattr(model, "train_state", None)
    head = {"format": "gpkan-checkpoint", "version": CHECKPOINT_VERSION, "model": model.describe()}
    parts = [json.dumps(head)[:-1]]
    parts.append(', "params": {' + ", ".join(
        f"{json.dumps(name)}: {_array_json(arr)}" for name, arr in model.params.items()) + "}")
    if state is not None:
        parts.append(', "train_state": {"step": %d, "m": {%s}, "v": {%s}}' % (
            state.step,
            ", ".join(f"{json.dumps(k)}: {_array_json(v)}" for k, v in state.m.items()),
            ", ".join(f"{json.dumps(k)}: {_array_json(v)}" for k, v in state.v.items()),
        ))
    text = "".join(parts) + "}\n"
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise CheckpointIOError(f"cannot write checkpoint {path}: {exc}") from exc


def _read_array(entry, name):
    try:
        shape = tuple(int(d) for d in entry["shape"])
        values = np.array(entry["values"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointSchemaError(f"malformed array {name!r}: {exc}") from None
    if values.size != int(np.prod(shape)):
        raise CheckpointSchemaError(f"array {name!r} has {values.size} values for shape {shape}")
    return values.reshape(shape)


def load_checkpoint(path) -> Network:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointSchemaError(f"checkpoint is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != "gpkan-checkpoint":
        raise CheckpointSchemaError("not a gpkan checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}")
    for key in ("model", "params"):
        if key not in doc:
            raise CheckpointSchemaError(f"checkpoint lacks {key!r}")
    try:
        model = Network(doc["model"])
    except SpecError as exc:
        raise CheckpointSchemaError(f"bad model description: {exc}") from None
    params = {name: _read_array(e, name) for name, e in doc["params"].items()}
    if set(params) != set(model.params):
        raise CheckpointSchemaError(
            f"parameter names differ from the model: {sorted(set(params) ^ set(model.params))}")
    for name, arr in params.items():
        if arr.shape != model.params[name].shape:
            raise CheckpointSchemaError(f"{name} has shape {arr.shape}, model expects {model.params[name].shape}")
    model.params = params
    ts = doc.get("train_state")
    if ts is not None:
        try:
            model.train_state = AdamState(
                int(ts["step"]),
                {k: _read_array(v, k) for k, v in ts["m"].items()},
                {k: _read_array(v, k) for k, v in ts["v"].items()},
            )
        except (KeyError, TypeError) as exc:
            raise CheckpointSchemaError(f"malformed train_state: {exc}") from None
    return model


def config_dict(config: TrainConfig):
    return asdict(config)


def clone(model: Network):
    return copy.deepcopy(model)
