"""Command-line entry point: ``gpkan {train,eval,mc-verify,grad-check}``.

Failures print one line ``error: <category>: <message>`` to stderr and exit
with the category's code (see ``EXIT_CODES``).  ``GPKAN_LOG`` sets the log
level (error, info or debug).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from importlib import resources
from pathlib import Path

import numpy as np

from . import data_io, mc_oracle
from .gradcheck import check_gradients, random_batch
from .layers import Network, SpecError
from .linalg import NotPositiveDefinite
from .training import (CheckpointError, TrainConfig, TrainingDiverged, accuracy, confusion_matrix,
                       load_checkpoint, predict_class, save_checkpoint, train, validation_metric)

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "data": 4,
    "checkpoint": 5,
    "numerical": 6,
    "check-failed": 7,
    "internal": 1,
}

TOY_TRAIN, TOY_VAL = 2048, 512


class CLIError(Exception):
    def __init__(self, category, message):
        super().__init__(message)
        self.category = category


def builtin_specs():
    return sorted(p.name[:-5] for p in resources.files("gpkan.specs").iterdir() if p.name.endswith(".json"))


def read_spec(ref):
    """A model spec from a path, or a shipped spec by name (``toy``, ``mnist_reference``)."""
    path = Path(ref)
    if path.is_file():
        text = path.read_text()
    else:
        name = path.name[:-5] if path.name.endswith(".json") else path.name
        if name not in builtin_specs():
            raise CLIError("config", f"model spec {ref!r} not found")
        text = resources.files("gpkan.specs").joinpath(name + ".json").read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CLIError("config", f"model spec {ref!r} is not valid JSON ({exc})") from None


def build_model(spec, seed, lam=None):
    spec = dict(spec)
    if lam is not None:
        spec["lambda"] = lam
    try:
        return Network(spec, seed=seed)
    except SpecError as exc:
        raise CLIError("config", str(exc)) from None


def _need(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise CLIError("usage", f"missing {flags}")


def load_data(args, with_train):
    """(train, val, test) LabeledImageSets for the MNIST task."""
    try:
        test = None
        if args.test_images is not None:
            _need(args, "test_labels")
            test = data_io.load_mnist(args.test_images, args.test_labels)
        if not with_train:
            return None, None, test
        _need(args, "train_images", "train_labels")
        pool = data_io.load_mnist(args.train_images, args.train_labels)
        n_test = len(test) if test is not None else 0
        train_set, val_set, test = data_io.split(pool, (args.train_size, args.val_size, n_test), args.seed,
                                                 test_set=test)
        return train_set, val_set, test
    except (OSError, data_io.IDXError, data_io.SplitError, ValueError) as exc:
        raise CLIError("data", str(exc)) from None


def toy_sets(seed):
    data = data_io.toy_dataset(TOY_TRAIN + TOY_VAL, seed)
    idx = np.arange(len(data))
    return data.subset(idx[:TOY_TRAIN]).to_dataset(), data.subset(idx[TOY_TRAIN:]).to_dataset()


def cmd_train(args, out):
    spec = read_spec(args.model)
    model = build_model(spec, args.seed, args.lam)
    print(f"parameters {model.n_parameters()}", file=out)
    objective = args.objective or ("mse" if args.task == "toy" else "nll")
    if args.task == "toy":
        train_data, val_data = toy_sets(args.seed)
        test_set = None
    else:
        train_set, val_set, test_set = load_data(args, with_train=True)
        train_data = train_set.to_dataset(model.output_shape[0])
        val_data = val_set.to_dataset(model.output_shape[0]) if len(val_set) else None
    epochs = args.epochs
    if epochs is None:
        per_epoch = -(-len(train_data) // args.batch)
        epochs = -(-args.steps // per_epoch) if args.steps is not None else 1
    config = TrainConfig(objective=objective, learning_rate=args.lr, batch_size=args.batch,
                         epochs=epochs, max_steps=args.steps,
                         lambda_floor=model.lam, seed=args.seed, eval_every=args.eval_every)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        records = train(model, train_data, config, val=val_data, log_path=out_dir / "log.ndjson")
    except (TrainingDiverged, NotPositiveDefinite) as exc:
        save_checkpoint(model, out_dir / "checkpoint.json")
        raise CLIError("numerical", f"{exc}; last good parameters saved") from None
    save_checkpoint(model, out_dir / "checkpoint.json", model.train_state)
    final = records[-1]["val_metric"]
    if final is not None:
        print(f"{'val_mse' if args.task == 'toy' else 'val_accuracy'} {final:.6g}", file=out)
    if test_set is not None and len(test_set):
        print(f"test_accuracy {accuracy(model, test_set.images, test_set.labels):.4f}", file=out)
    print(f"checkpoint {out_dir / 'checkpoint.json'}", file=out)
    return 0


def write_confusion(cm, out):
    k = cm.shape[0]
    print("label," + ",".join(str(j) for j in range(k)), file=out)
    for i in range(k):
        print(f"{i}," + ",".join(str(int(c)) for c in cm[i]), file=out)


def evaluate(model, images, labels, n_classes=10, batch_size=256):
    """(accuracy, confusion matrix) with rows as true labels."""
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty set")
    pred = np.concatenate([np.atleast_1d(predict_class(model, images[i:i + batch_size]))
                           for i in range(0, len(images), batch_size)])
    return float(np.mean(pred == labels)), confusion_matrix(pred, labels, n_classes)


def cmd_eval(args, out):
    _need(args, "checkpoint")
    try:
        model = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise CLIError("checkpoint", f"{type(exc).__name__}: {exc}") from None
    if args.task == "toy":
        _, val = toy_sets(args.seed)
        print(f"val_mse {validation_metric(model, val):.6g}", file=out)
        return 0
    _need(args, "test_images", "test_labels")
    _, _, test = load_data(args, with_train=False)
    if args.limit is not None:
        test = test.subset(np.arange(min(args.limit, len(test))))
    try:
        acc, cm = evaluate(model, test.images, test.labels, model.output_shape[0])
    except ValueError as exc:
        raise CLIError("data", str(exc)) from None
    print(f"accuracy {acc:.4f}", file=out)
    write_confusion(cm, out)
    return 0


def _floats(text):
    return tuple(float(t) for t in text.split(",") if t.strip())


def cmd_mc_verify(args, out):
    try:
        means, variances = _floats(args.means), _floats(args.variances)
    except ValueError as exc:
        raise CLIError("usage", f"bad grid value ({exc})") from None
    if any(v < 0 for v in variances):
        raise CLIError("usage", "input variances must be >= 0")
    try:
        rows = mc_oracle.run_grid(means, variances, n=args.n, n_trials=args.trials, seed=args.seed,
                                  method=args.method)
    except mc_oracle.MCFactorError as exc:
        raise CLIError("numerical", str(exc)) from None
    except ValueError as exc:
        raise CLIError("usage", str(exc)) from None
    with (open(args.csv, "w") if args.csv else nullcontext(out)) as fh:
        mc_oracle.write_csv(rows, fh)
    ok = sum(r["mean_ok"] and r["var_ok"] for r in rows)
    print(f"within 3 se: {ok}/{len(rows)}", file=sys.stderr)
    return 0


def cmd_grad_check(args, out):
    spec = read_spec(args.model)
    model = build_model(spec, args.seed, args.lam)
    objective = args.objective or ("nll" if model.n_classes else "mse")
    batch = random_batch(model, args.batch, args.seed)
    reports = check_gradients(model, batch, objective, step=args.step, max_entries=args.max_entries,
                              seed=args.seed, corrupt=args.corrupt)
    print("block,entries,max_rel,max_abs,status", file=out)
    for r in reports:
        print(f"{r.name},{r.checked},{r.max_rel:.3e},{r.max_abs:.3e},{'pass' if r.passed else 'FAIL'}", file=out)
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise CLIError("check-failed", "gradient mismatch in " + ", ".join(failed))
    print(f"all {len(reports)} blocks pass", file=out)
    return 0


def make_parser():
    parser = argparse.ArgumentParser(prog="gpkan", description="GP-KAN training and verification")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
        p.add_argument("--lambda", dest="lam", type=float, default=None, help="noise floor for sn2")

    def data(p):
        p.add_argument("--task", choices=("mnist", "toy"), default="mnist")
        p.add_argument("--train-images")
        p.add_argument("--train-labels")
        p.add_argument("--test-images")
        p.add_argument("--test-labels")

    p = sub.add_parser("train", help="train a model and write checkpoint + log")
    common(p)
    data(p)
    p.add_argument("--model", required=True, help="spec path or shipped spec name")
    p.add_argument("--objective", choices=("nll", "mse"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--train-size", type=int, default=10000)
    p.add_argument("--val-size", type=int, default=1000)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    common(p)
    data(p)
    p.add_argument("--checkpoint", "--model", dest="checkpoint")
    p.add_argument("--limit", type=int, help="only the first N test images")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mc-verify", help="closed-form vs Monte-Carlo neuron moments as CSV")
    common(p)
    p.add_argument("--means", default=",".join(str(m) for m in mc_oracle.DEFAULT_MEANS))
    p.add_argument("--variances", default=",".join(str(v) for v in mc_oracle.DEFAULT_VARIANCES))
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--trials", type=int, default=20000)
    p.add_argument("--method", choices=tuple(mc_oracle.SAMPLERS), default="marginal")
    p.add_argument("--out", dest="csv", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_mc_verify)

    p = sub.add_parser("grad-check", help="backward pass vs central differences per parameter block")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--objective", choices=("nll", "mse"))
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--max-entries", type=int, default=None)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)
    return parser


def configure_logging():
    level = os.environ.get("GPKAN_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None, out=None):
    out = out or sys.stdout
    configure_logging()
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise CLIError("usage", "--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(args.threads):
                return args.func(args, out)
        return args.func(args, out)
    except CLIError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.category]
    except (TrainingDiverged, NotPositiveDefinite, FloatingPointError) as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return EXIT_CODES["numerical"]
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CODES["internal"]


if __name__ == "__main__":
    sys.exit(main())
