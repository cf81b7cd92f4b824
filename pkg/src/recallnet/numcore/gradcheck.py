from dataclasses import dataclass, field

import numpy as np

from ..errors import GradientCheckError
from .tensor import backward


@dataclass
class GradCheckReport:
    tolerance: float
    deviations: dict = field(default_factory=dict)

    @property
    def failures(self):
        return {k: v for k, v in self.deviations.items() if not v <= self.tolerance}

    @property
    def passed(self):
        return not self.failures

    @property
    def worst(self):
        return max(self.deviations.values(), default=0.0)


def numeric_gradient(fn, param, eps=1e-5):
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_deviation(analytic, numeric, floor=1e-6):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def grad_check(builder, params, tolerance=1e-4, eps=1e-5, raise_on_failure=True):
    """Compare backprop against central differences for every parameter.

    ``builder()`` must rebuild the scalar graph from the current values of
    ``params`` (a name -> Tensor mapping).  Returns a report with the max
    relative deviation per parameter; raises GradientCheckError when any
    exceeds ``tolerance`` unless ``raise_on_failure`` is False.
    """
    for p in params.values():
        p.zero_grad()
    root = builder()
    backward(root)
    report = GradCheckReport(tolerance)
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(builder, p, eps)
        report.deviations[name] = relative_deviation(analytic, numeric)
    for p in params.values():
        p.zero_grad()
    if raise_on_failure and not report.passed:
        raise GradientCheckError(report)
    return report
