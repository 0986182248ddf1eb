"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, get_precision


@dataclass
class GradcheckReport:
    max_error: float
    checked: int
    skipped: int   # coordinates whose stencil crossed a non-differentiable point


def _scalar(out: Tensor, proj: np.ndarray | None) -> Tensor:
    from . import ops

    if out.size == 1:
        return out
    return ops.sum(ops.mul(out, Tensor(proj, dtype=out.dtype)))


def _coords(size: int, limit: Optional[int], rng: np.random.Generator):
    if limit is None or size <= limit:
        return range(size)
    return np.sort(rng.choice(size, limit, replace=False))


def gradcheck_report(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-3,
                     seed: int = 20240917, max_coords: Optional[int] = None,
                     guard: Optional[Callable[[Tensor], np.ndarray]] = None) -> GradcheckReport:
    """Compare analytic gradients with central differences, coordinate by coordinate.

    ``f`` maps the input tensors to an output tensor. Non-scalar outputs are
    contracted with a fixed random projection so every output coordinate
    contributes. The relative error at a coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.

    ``max_coords`` caps the coordinates drawn (without replacement, seeded)
    from each input. ``guard`` maps an output to a signature, such as the
    sign pattern of every relu input; a coordinate whose +eps or -eps
    evaluation changes the signature straddles a kink, so it is counted as
    skipped instead of compared.
    """
    if get_precision() != "bits64" or any(t.dtype != np.float64 for t in inputs):
        raise ValueError("gradcheck requires 64-bit precision")

    probe = f(*inputs)
    rng = np.random.default_rng(seed)
    proj = None if probe.size == 1 else rng.standard_normal(probe.shape)

    def evaluate():
        out = f(*inputs)
        val = _scalar(out, proj).item()
        if not np.isfinite(val):
            raise FloatingPointError("gradcheck: non-finite output")
        return val, (guard(out) if guard else None)

    for t in inputs:
        t.grad = None
        t.requires_grad = True
    out = f(*inputs)
    base = guard(out) if guard else None
    _scalar(out, proj).backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    checked = skipped = 0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        a_flat = a.reshape(-1)
        for k in _coords(flat.size, max_coords, rng):
            orig = flat[k]
            flat[k] = orig + eps
            fp, sp = evaluate()
            flat[k] = orig - eps
            fm, sm = evaluate()
            flat[k] = orig
            if guard and not (np.array_equal(sp, base) and np.array_equal(sm, base)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * eps)
            err = abs(a_flat[k] - num) / max(1e-8, abs(a_flat[k]) + abs(num))
            worst = max(worst, err)
            checked += 1
    return GradcheckReport(float(worst), checked, skipped)


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-3,
              seed: int = 20240917, **kw) -> float:
    """Max relative error between analytic and numeric gradients (see :func:`gradcheck_report`)."""
    return gradcheck_report(f, inputs, eps, seed, **kw).max_error
