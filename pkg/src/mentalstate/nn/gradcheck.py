"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int
    worst: str = ""
    errors: dict = field(default_factory=dict)  # per-tensor max relative error

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.2e} "
                f"(tol {self.tolerance:.0e}, {self.n_checked} coords, worst {self.worst})")


def _named_params(obj):
    if hasattr(obj, "named_parameters"):
        return list(obj.named_parameters())
    return list(obj.params.items())


def _named_grads(obj):
    if hasattr(obj, "named_gradients"):
        return dict(obj.named_gradients())
    return dict(obj.grads)


def relative_error(analytic, numeric, floor=1e-5):
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), floor)


class WithLoss:
    """Wrap a model so its forward output is the scalar cross-entropy."""

    def __init__(self, model, labels, dropout_seed=0):
        self.model = model
        self.labels = np.asarray(labels)
        self.dropout_seed = dropout_seed

    def named_parameters(self):
        return self.model.named_parameters()

    def named_gradients(self):
        return self.model.named_gradients()

    def forward(self, x, train=False):
        logits = self.model.forward(x, train=train, dropout_seed=self.dropout_seed)
        loss, self._grad = F.softmax_cross_entropy(logits, self.labels)
        return np.array([loss], dtype=logits.dtype)

    def backward(self, grad_out):
        return self.model.backward(self._grad * grad_out[0])


def grad_check(layer, x, tolerance=1e-4, *, step=1e-6, train=False, seed=0,
               max_coords=None, name=None, floor=1e-5) -> GradCheckReport:
    """Compare ``layer.backward`` against central differences.

    The scalar objective is ``sum(forward(x) * R)`` for a fixed random R,
    so every output coordinate contributes. All parameter coordinates and
    all input coordinates are perturbed unless ``max_coords`` caps the
    number sampled per tensor. Run in float64.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    out = layer.forward(x, train=train)
    upstream = rng.standard_normal(out.shape)
    grad_x = layer.backward(upstream)
    analytic = {"input": np.array(grad_x, dtype=np.float64)}
    grads = _named_grads(layer)
    targets = {"input": x}
    for pname, arr in _named_params(layer):
        targets[pname] = arr
        analytic[pname] = np.array(grads[pname], dtype=np.float64)

    def objective():
        return float(np.sum(layer.forward(x, train=train) * upstream))

    report = GradCheckReport(name or type(layer).__name__, 0.0, tolerance, 0)
    for tname, arr in targets.items():
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        numeric = np.empty(coords.size)
        for i, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            f_plus = objective()
            flat[c] = orig - step
            f_minus = objective()
            flat[c] = orig
            numeric[i] = (f_plus - f_minus) / (2 * step)
        errs = relative_error(analytic[tname].reshape(-1)[coords], numeric, floor)
        worst = float(errs.max()) if errs.size else 0.0
        report.errors[tname] = worst
        report.n_checked += coords.size
        if worst >= report.max_rel_error:
            report.max_rel_error = worst
            report.worst = tname
    return report
