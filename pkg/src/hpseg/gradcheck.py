"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, UsageError
from .tensor import Parameter, Tensor


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between analytic and numeric gradients."""

    per_param: dict[str, float] = field(default_factory=dict)
    max_rel_error: float = 0.0
    tolerance: float = 1e-4
    checked_elements: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self) -> str:
        if not self.per_param:
            return "(no parameters checked)"
        name = max(self.per_param, key=self.per_param.get)
        return f"{name}: {self.per_param[name]:.3e}"


def finite_diff_check(
    f,
    params,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_elements_per_param: int | None = None,
    seed: int = 0,
    normalize: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    ``f`` re-runs the forward pass from the current parameter values; it is
    evaluated once with backward() for the analytic side, then 2 more times per
    checked element for (f(t+h) - f(t-h)) / 2h. Relative error per element is
    |a - n| / max(|a|, |n|, 1e-8). Parameters must be float64; central
    differences are meaningless at float32 resolution.

    ``max_elements_per_param`` limits the check to a deterministic random
    sample of elements in each parameter tensor (None checks every element).

    ``normalize`` divides the checked function by |f| at the base point, so
    the fixed 1e-8 floor in the relative error keeps its meaning for losses
    of any magnitude (float64 round-off in f scales with |f|).
    """
    params = [p for p in params if isinstance(p, Parameter) and p.learnable]
    if not params:
        raise UsageError("finite_diff_check: no learnable parameters supplied")
    for p in params:
        if p.tensor.dtype != np.float64:
            raise UsageError(
                f"finite_diff_check requires float64 parameters; '{p.name}' is {p.tensor.dtype}"
            )

    for p in params:
        p.zero_grad()
    base = f()
    if not isinstance(base, Tensor):
        raise UsageError("finite_diff_check: f() must return a scalar Tensor")
    if not np.isfinite(base.data).all():
        raise NumericError("finite_diff_check aborted: loss is non-finite at the base point")
    scale = 1.0
    if normalize:
        scale = 1.0 / max(abs(base.item()), 1.0)
        raw_f = f
        f = lambda: raw_f() * scale
    loss = base * scale
    loss.backward()
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for p in params}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_elements_per_param is None or n <= max_elements_per_param:
            indices = np.arange(n)
        else:
            indices = rng.choice(n, size=max_elements_per_param, replace=False)
        a_flat = analytic[p.name].reshape(-1)
        worst = 0.0
        for i in indices:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f().item()
            flat[i] = orig - step
            f_minus = f().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(
                    f"finite_diff_check aborted: non-finite loss while perturbing '{p.name}'"
                )
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = a_flat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
            report.checked_elements += 1
        report.per_param[p.name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
