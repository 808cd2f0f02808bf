"""Finite-difference gradient checking against the reverse-mode tape."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_input: int      # which argument
    worst_index: tuple    # flat index within that argument
    rtol: float
    details: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {status}: max relative error {self.max_rel_error:.3e} "
                f"(rtol {self.rtol:.1e}) at input {self.worst_input}, "
                f"index {self.worst_index}")


def grad_check(f, points, step: float = 1e-3, rtol: float = 1e-4,
               atol_floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar-valued `f` with central differences.

    `f` maps a list of Tensors to a scalar Tensor.  `points` is a list of
    ndarrays (evaluated in f64).  The FD step is scaled per coordinate:
    h = step * max(1, |x|).  Relative error uses a small absolute floor so
    near-zero gradients do not blow up the ratio.
    """
    points = [np.asarray(p, dtype=np.float64) for p in points]
    leaves = [Tensor(p.copy(), requires_grad=True) for p in points]
    out = f(leaves)
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(p) if t.grad is None else t.grad.copy()
                for p, t in zip(points, leaves)]

    def eval_at(mats):
        return f([Tensor(m) for m in mats]).item()

    max_err, worst_input, worst_index = 0.0, 0, ()
    for ai, (p, g) in enumerate(zip(points, analytic)):
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        nflat = num.reshape(-1)
        for j in range(flat.size):
            h = step * max(0.1, abs(flat[j]))
            orig = flat[j]
            mats = [q.copy() for q in points]
            mats[ai].reshape(-1)[j] = orig + h
            fp = eval_at(mats)
            mats[ai].reshape(-1)[j] = orig - h
            fm = eval_at(mats)
            nflat[j] = (fp - fm) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), atol_floor)
        rel = np.abs(g - num) / denom
        j = int(np.argmax(rel))
        if rel.reshape(-1)[j] >= max_err:
            max_err = float(rel.reshape(-1)[j])
            worst_input = ai
            worst_index = np.unravel_index(j, p.shape)
    return GradCheckReport(passed=max_err <= rtol, max_rel_error=max_err,
                           worst_input=worst_input, worst_index=worst_index,
                           rtol=rtol)
