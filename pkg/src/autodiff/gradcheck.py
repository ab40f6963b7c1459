"""
Finite-Difference Gradient Checks

Compares the analytic gradients of the autodiff engine against central
differences (f(x + eps) - f(x - eps)) / (2 eps), entry by entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from src.autodiff.tensor import Tensor, no_grad
from src.errors import GradientCheckError


@dataclass
class GradientReport:
    """
    Outcome of `check_gradients`.

    Attributes
    ----------
    max_relative_error : float
        Largest |analytic - numeric| / max(|analytic| + |numeric|, floor) over
        the checked entries.
    tolerance : float
        Threshold used to flag entries.
    analytic, numeric : list of np.ndarray
        Per-input gradients. Unchecked entries of `numeric` are NaN.
    flagged : list of tuple
        (input index, flat index, analytic, numeric, relative error) for every
        entry above tolerance.
    """
    max_relative_error: float
    tolerance: float
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]
    flagged: list[tuple[int, int, float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.flagged


def _evaluate(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> float:
    with no_grad():
        out = f(*inputs)
    return float(np.asarray(out.data).reshape(()))


def check_gradients(
        f: Callable[..., Tensor],
        inputs: Sequence[Tensor],
        eps: float = 1e-4,
        tol: float = 1e-4,
        reversed_inputs: Iterable[int] = (),
        max_entries: int | None = None,
        floor: float = 1e-3,
        seed: int = 0,
) -> GradientReport:
    """
    Check analytic gradients of a scalar function against central differences.

    Parameters
    ----------
    f : callable
        Maps the input tensors to a single-element Tensor.
    inputs : sequence of Tensor
        Points at which to check; inputs with `requires_grad=False` are skipped.
    eps : float, optional
        Finite-difference step. Must be positive. Default is 1e-4.
    tol : float, optional
        Relative-error threshold for flagging an entry. Default is 1e-4.
    reversed_inputs : iterable of int, optional
        Indices of inputs that reach the output only through a gradient
        reversal; their analytic gradient is compared against the NEGATED
        finite difference of the forward function.
    max_entries : int, optional
        If given, check at most this many randomly chosen entries per input.
    floor : float, optional
        Lower bound on the relative-error denominator, so near-zero gradients
        are compared in absolute terms. Default is 1e-3.
    seed : int, optional
        Seed for the entry subsample. Default is 0.

    Returns
    -------
    report : GradientReport
    """
    if eps <= 0:
        raise GradientCheckError(f"eps must be positive, got {eps}")
    reversed_inputs = set(reversed_inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.zero_grad()

    out = f(*inputs)
    if out.size != 1:
        raise GradientCheckError(f"f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = np.random.default_rng(seed)
    numeric = [np.full(t.shape, np.nan) for t in inputs]
    flagged = []
    worst = 0.0
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        else:
            entries = np.arange(flat.size)
        sign = -1.0 if k in reversed_inputs else 1.0
        for idx in entries:
            original = flat[idx]
            flat[idx] = original + eps
            f_plus = _evaluate(f, inputs)
            flat[idx] = original - eps
            f_minus = _evaluate(f, inputs)
            flat[idx] = original
            estimate = (f_plus - f_minus) / (2.0 * eps)
            numeric[k].flat[idx] = estimate

            expected = sign * estimate
            got = analytic[k].flat[idx]
            rel = abs(got - expected) / max(abs(got) + abs(expected), floor)
            worst = max(worst, rel)
            if rel > tol:
                flagged.append((k, int(idx), float(got), float(expected), float(rel)))

    return GradientReport(
        max_relative_error=worst,
        tolerance=tol,
        analytic=analytic,
        numeric=numeric,
        flagged=flagged,
    )


__all__ = ["GradientReport", "check_gradients"]
