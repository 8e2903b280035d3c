"""Central-difference gradient verification for functions built on the tape."""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .tensorcore import FrozenValues, Tape, Tensor, frozen


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradFailure:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    checked: int = 0
    max_rel_error: float = 0.0
    failures: list[GradFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        state = "PASS" if self.passed else f"FAIL ({len(self.failures)} elements)"
        return f"{state}: {self.checked} elements, max relative error {self.max_rel_error:.3e}"


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` with central differences on every element.

    ``f`` must rebuild its computation from ``params`` on each call, including
    any seeded randomness. Stop-gradient values are held at the base point
    while perturbing. An element fails when
    ``|analytic - numeric| / max(1, |numeric|) > tol``.
    """
    if not 1e-7 < eps < 1e-3:
        raise ValueError(f"eps must lie in (1e-7, 1e-3), got {eps}")

    for p in params.values():
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None

    record = FrozenValues()
    with frozen(record), Tape() as tape:
        loss = f()
    base = float(loss.data)
    tape.backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                for name, p in params.items()}

    def evaluate() -> float:
        record.rewind()
        with frozen(record):
            value = float(f().data)
        if not record.exhausted:
            raise NonDeterministicError("forward pass froze fewer values than recorded")
        return value

    again = evaluate()
    if again != base:
        raise NonDeterministicError(f"f changed between calls at a fixed point: {base!r} vs {again!r}")

    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = evaluate()
            flat[i] = orig - eps
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            rel = abs(grad[i] - numeric) / max(1.0, abs(numeric))
            report.checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
            if rel > tol:
                index = tuple(int(j) for j in np.unravel_index(i, p.shape))
                report.failures.append(GradFailure(name, index, float(grad[i]), numeric, rel))
        p.grad = None
    return report
