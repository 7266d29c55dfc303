"""Central finite-difference gradient checks."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def passed(self, tol):
        return self.max_error < tol

    def __str__(self):
        lines = [f"{name}: {err:.2e}" for name, err in self.errors.items()]
        return "\n".join(lines + [f"max: {self.max_error:.2e}"])


def grad_check(loss_fn, params, eps=1e-6, max_elems=None, rng=None, floor=1e-3):
    """Compare analytic and central-difference gradients of ``loss_fn()``.

    ``params`` is a list of ``(name, Value)`` pairs; ``loss_fn`` rebuilds the
    graph from scratch on every call. The error of one parameter is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over the
    checked elements, i.e. relative to that parameter's gradient scale. The
    scale is floored at ``floor`` so an exactly-zero gradient is not judged
    against finite-difference round-off.
    ``max_elems`` caps how many (randomly chosen) elements are perturbed.
    """
    rng = rng or np.random.default_rng(0)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    report = GradCheckReport()
    for name, p in params:
        p.data = np.ascontiguousarray(p.data)
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = rng.choice(flat.size, size=max_elems, replace=False)
        numeric = np.zeros(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric[n] = (up - down) / (2 * eps)
        a = analytic.reshape(-1)[idx]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        report.errors[name] = float(np.abs(a - numeric).max(initial=0.0) / scale)
    return report
