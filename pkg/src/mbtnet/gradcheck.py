"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, backward, no_grad, record_branches


@dataclass
class ParamCheck:
    name: str
    checked: int
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    skipped: int = 0


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)
    failure: str | None = None

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def skipped(self) -> int:
        return sum(p.skipped for p in self.params)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_rel_error < self.tolerance

    def summary(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} max_rel_error={self.max_rel_error:.3e} "
                 f"tolerance={self.tolerance:.0e} "
                 f"skipped_at_kinks={self.skipped}"]
        if self.failure:
            lines.append(f"  {self.failure}")
        for p in self.params:
            lines.append(f"  {p.name or '<param>'}: n={p.checked} max_rel={p.max_rel_error:.3e} "
                         f"at {p.worst_index} (analytic {p.analytic:.6e}, numeric {p.numeric:.6e})")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def gradient_check(builder: Callable[[], Tensor], params: Sequence[Parameter],
                   tolerance: float = 1e-4, step: float = 1e-5,
                   max_elements: int | None = None, seed: int = 0,
                   avoid_kinks: bool = False) -> GradCheckReport:
    """Compare backward gradients of ``builder()`` against central differences.

    ``builder`` must rebuild the scalar loss from the current values of
    ``params`` on each call.  With ``max_elements`` set, a random subset of
    that many elements per parameter is probed instead of every element.

    With ``avoid_kinks`` an element whose +/-step probes change the branch
    pattern of any relu or maximum (see :func:`record_branches`) is skipped,
    since a central difference across a kink does not estimate the
    derivative.  Subsampled parameters then draw replacement elements.
    """
    report = GradCheckReport(tolerance=tolerance)
    for p in params:
        if p.dtype != np.float64:
            report.failure = f"parameter {p.name!r} is {p.dtype}; gradient checks need float64"
            return report
        p.zero_grad()
    with record_branches() as base_branches:
        loss = builder()
    if loss.data.size != 1:
        report.failure = f"builder returned non-scalar loss of shape {loss.shape}"
        return report
    if not np.isfinite(loss.data):
        report.failure = "non-finite loss at the unperturbed point"
        return report
    backward(loss)
    rng = np.random.default_rng(seed)

    def evaluate() -> tuple[float, list]:
        with no_grad(), record_branches() as branches:
            value = float(builder().data)
        return value, branches

    for p in params:
        analytic_all = p.grad.copy()
        if not np.all(np.isfinite(analytic_all)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic_all))[0])
            report.failure = f"non-finite analytic gradient in {p.name!r} at {bad}"
            return report
        flat = p.data.reshape(-1)
        budget = flat.size if max_elements is None else min(max_elements, flat.size)
        order = np.arange(flat.size) if budget == flat.size else rng.permutation(flat.size)
        indices, numeric, skipped = [], [], 0
        for i in order:
            if len(indices) == budget:
                break
            original = flat[i]
            flat[i] = original + step
            up, up_branches = evaluate()
            flat[i] = original - step
            down, down_branches = evaluate()
            flat[i] = original
            if not (np.isfinite(up) and np.isfinite(down)):
                where = np.unravel_index(i, p.shape)
                report.failure = f"non-finite loss perturbing {p.name!r} at {where}"
                return report
            if avoid_kinks and not (up_branches == base_branches == down_branches):
                skipped += 1
                continue
            indices.append(int(i))
            numeric.append((up - down) / (2 * step))
        numeric = np.asarray(numeric, dtype=np.float64)
        analytic = analytic_all.reshape(-1)[np.asarray(indices, dtype=np.int64)]
        rel = relative_error(analytic, numeric)
        worst = int(np.argmax(rel)) if len(rel) else 0
        report.params.append(ParamCheck(
            name=p.name, checked=len(indices),
            max_rel_error=float(rel[worst]) if len(rel) else 0.0,
            worst_index=(tuple(int(v) for v in np.unravel_index(indices[worst], p.shape))
                         if indices else ()),
            analytic=float(analytic[worst]) if len(rel) else 0.0,
            numeric=float(numeric[worst]) if len(rel) else 0.0,
            skipped=skipped,
        ))
    return report
