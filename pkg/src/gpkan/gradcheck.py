"""Compare taped gradients with central finite differences, block by block."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Network
from .training import backward, loss_value, record_forward

REL_TOL = 1e-4
ABS_TOL = 1e-7


@dataclass(frozen=True)
class BlockReport:
    """Worst errors of one parameter block.

    An entry passes when it meets either bound; ``max_rel`` is taken over
    entries whose gradient magnitude exceeds ``ABS_TOL``, since relative
    error is noise below that.
    """

    name: str
    checked: int
    max_rel: float
    max_abs: float
    failures: int = 0

    @property
    def passed(self):
        return self.failures == 0


def entry_errors(analytic, numeric):
    """Absolute and relative errors; relative uses the larger magnitude."""
    diff = np.abs(np.asarray(analytic) - np.asarray(numeric))
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)
    return diff, rel


def check_gradients(model: Network, batch, objective="gaussian_nll", step=1e-5, max_entries=None,
                    seed=0, corrupt=None):
    """Per-block worst errors of backward() against central differences.

    ``max_entries`` caps how many entries per block are probed (chosen
    with ``seed``).  ``corrupt`` names a block whose analytic gradient is
    deliberately perturbed, as a negative control.
    """
    _, tape = record_forward(model, batch, objective)
    grads = backward(tape)
    rng = np.random.default_rng(seed)
    reports = []
    for name, p in model.params.items():
        flat = np.asarray(p).ravel()
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        analytic = np.asarray(grads[name]).ravel()[idx].copy()
        if name == corrupt:
            analytic = analytic * 1.1 + 1e-3
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            probe = {key: np.array(val, dtype=np.float64) for key, val in model.params.items()}
            probe[name].reshape(-1)[i] = flat[i] + step
            up = loss_value(model, batch, objective, probe)
            probe[name].reshape(-1)[i] = flat[i] - step
            down = loss_value(model, batch, objective, probe)
            numeric[k] = (up - down) / (2.0 * step)
        diff, rel = entry_errors(analytic, numeric)
        sized = np.maximum(np.abs(analytic), np.abs(numeric)) > ABS_TOL
        bad = (rel > REL_TOL) & (diff > ABS_TOL)
        reports.append(BlockReport(
            name, int(idx.size),
            float(rel[sized].max()) if sized.any() else 0.0,
            float(diff.max()) if diff.size else 0.0,
            int(bad.sum()),
        ))
    return reports


def random_batch(model: Network, size, seed):
    """Inputs in the data range for the model's geometry, with random targets."""
    rng = np.random.default_rng(seed)
    shape = model.input_shape
    if len(shape) == 1:
        x = rng.uniform(-0.5, 0.5, size=(size,) + shape)
    else:
        x = rng.uniform(0.0, 1.0, size=(size,) + shape)
    out = model.output_shape[0]
    if model.n_classes:
        y = np.eye(out)[rng.integers(0, out, size)]
    else:
        y = rng.normal(0.0, 1.0, size=(size, out))
    return x, y
