"""Finite-difference validation of tape gradients.

Central differences in float64 are the independent oracle for every
backward rule in the package; ``grad_check`` compares them against one
tape replay and reports the worst relative error per parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericsError
from .tensor import GradTape, Tensor

_REL_FLOOR = 1e-6  # denominator floor so near-zero gradients stay comparable


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    passed: bool
    worst_index: tuple = ()


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if not p.passed]

    def summary(self) -> str:
        lines = [
            f"grad_check: {'PASS' if self.passed else 'FAIL'} "
            f"(max relative error {self.max_rel_error:.3e}, tol {self.tolerance:.1e})"
        ]
        for p in sorted(self.params, key=lambda p: -p.max_rel_error):
            status = "ok  " if p.passed else "FAIL"
            lines.append(f"  [{status}] {p.name}: {p.max_rel_error:.3e}")
        return "\n".join(lines)


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor],
               eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of a scalar function against central differences.

    ``f`` must be deterministic, close over ``params``, and return a scalar
    Tensor.  All parameters must be float64; the finite-difference probe
    perturbs each element in place by +/- eps.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise NumericsError(f"grad_check requires float64 params ({name})")

    with GradTape() as tape:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise NumericsError("grad_check: non-finite function value")
        analytic = tape.gradients(loss, params)

    report = GradCheckReport(tolerance=tol)
    for name, p in params.items():
        a = analytic[name]
        n = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = n.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericsError(
                    f"grad_check: non-finite function value probing {name}")
            nflat[i] = (f_plus - f_minus) / (2.0 * eps)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), _REL_FLOOR)
        rel = np.abs(a - n) / denom
        worst = int(np.argmax(rel))
        report.params.append(ParamCheck(
            name=name,
            max_rel_error=float(rel.reshape(-1)[worst]),
            passed=bool(rel.reshape(-1)[worst] <= tol),
            worst_index=np.unravel_index(worst, p.data.shape),
        ))
    return report
