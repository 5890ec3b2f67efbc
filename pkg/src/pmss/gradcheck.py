"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor
from .tensor import Tensor, backward, no_grad


@dataclass
class GradEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    rel_tol: float
    entries: list[GradEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e} (tol {self.rel_tol:.1e})"


def gradcheck(fn, inputs: list[Tensor], eps: float = 1e-6, rel_tol: float = 1e-4) -> GradcheckReport:
    """Compare analytic grads of scalar ``fn(*inputs)`` to central differences.

    Checks every tensor in ``inputs`` with ``requires_grad``; the relative
    error uses an absolute floor of 1e-6 so near-zero gradients compare
    sanely. Report-only: never raises on mismatch.
    """
    targets = [(i, t) for i, t in enumerate(inputs) if t.requires_grad]
    for _, t in targets:
        t.grad = None
    out = fn(*inputs)
    if out.ndim != 0:
        raise tensor.ShapeError(f"gradcheck needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = {}
    for i, t in targets:
        analytic[i] = t.grad.copy() if t.grad is not None else None
        t.grad = None

    report = GradcheckReport(rel_tol=rel_tol)
    with no_grad():
        for i, t in targets:
            name = t.name or f"input{i}{t.shape}"
            grad = analytic[i]
            if grad is None:
                report.entries.append(GradEntry(name, float("inf"), False))
                continue
            flat = t.data.reshape(-1)
            gflat = grad.reshape(-1)
            worst = 0.0
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                f_plus = fn(*inputs).item()
                flat[j] = orig - eps
                f_minus = fn(*inputs).item()
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                denom = max(abs(gflat[j]), abs(numeric), 1e-6)
                worst = max(worst, abs(gflat[j] - numeric) / denom)
            report.entries.append(GradEntry(name, worst, worst < rel_tol))
    return report
