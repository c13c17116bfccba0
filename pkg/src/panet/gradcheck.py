"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

# Gradients smaller than this are compared in absolute terms.
GRAD_SCALE_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    name: str
    passed: bool
    max_rel_error: float
    n_checked: int
    message: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.2e} over {self.n_checked} entries {self.message}".rstrip()


def _scalar(out) -> float:
    if isinstance(out, Tensor):
        return float(out.data.sum())
    return float(sum(o.data.sum() for o in out))


def _reduce(out) -> Tensor:
    if isinstance(out, Tensor):
        return out.sum()
    total = out[0].sum()
    for o in out[1:]:
        total = total + o.sum()
    return total


def grad_check(
    fn: Callable[..., Tensor | Sequence[Tensor]],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    tol: float = 1e-4,
    max_checks: int | None = None,
    seed: int = 0,
    name: str = "op",
) -> GradCheckReport:
    """Compare d(sum(fn(*inputs)))/d(input) against central differences.

    Inputs with ``requires_grad`` set are perturbed entrywise (a random subset
    of ``max_checks`` entries per input if given).  The relative error of an
    entry is ``|a - n| / max(|a|, |n|, GRAD_SCALE_FLOOR)``.
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if not np.isfinite(_scalar(out)):
        return GradCheckReport(name, False, float("inf"), 0, "non-finite forward output")
    _reduce(out).backward()

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            return GradCheckReport(name, False, float("inf"), checked, "non-finite analytic gradient")
        flat_idx = np.arange(t.data.size)
        if max_checks is not None and t.data.size > max_checks:
            flat_idx = np.sort(rng.choice(t.data.size, size=max_checks, replace=False))
        flat = t.data.reshape(-1)
        for k in flat_idx:
            orig = flat[k]
            with no_grad():
                flat[k] = orig + eps
                fp = _scalar(fn(*inputs))
                flat[k] = orig - eps
                fm = _scalar(fn(*inputs))
            flat[k] = orig
            numeric = (fp - fm) / (2 * eps)
            if not np.isfinite(numeric):
                return GradCheckReport(name, False, float("inf"), checked, "non-finite numeric gradient")
            a = analytic.reshape(-1)[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), GRAD_SCALE_FLOOR)
            worst = max(worst, err)
            checked += 1
    return GradCheckReport(name, worst <= tol, worst, checked)
