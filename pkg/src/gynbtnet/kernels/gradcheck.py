"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import GradTape, Var


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    n_coords: int
    tol: float

    @property
    def passed(self):
        return self.max_rel_err < self.tol

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} max_rel_err={self.max_rel_err:.3e} coords={self.n_coords} tol={self.tol:g}"


def _scalar(out, proj):
    v = np.asarray(out.data, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("non-finite value in op output")
    return float(np.sum(v * proj))


def finite_diff_check(op, inputs, h=1e-3, tol=1e-4, n_coords=50, seed=0, name="op",
                      eligible=None, grad_inputs=None):
    """Compare tape gradients of a projected-sum loss with central differences.

    ``op(tape, *vars)`` must return a ``Var``. The loss is ``sum(P * op(...))``
    for a fixed random projection ``P`` (a scalar output uses ``P = 1``); a
    plain sum would make normalization gradients vanish identically. Up to
    ``n_coords`` coordinates are sampled from every input listed in
    ``grad_inputs`` (default: all), optionally restricted to ``eligible[i]``
    boolean masks. Inputs must be float64.
    """
    # a derived stream, so the projection never coincides with inputs drawn from default_rng(seed)
    rng = np.random.default_rng((seed, 0x6772))
    arrays = [np.array(a, dtype=np.float64, copy=True) for a in inputs]
    which = range(len(arrays)) if grad_inputs is None else grad_inputs
    vars_ = [Var(a, requires_grad=(i in which)) for i, a in enumerate(arrays)]
    tape = GradTape()
    out = op(tape, *vars_)
    shape = np.shape(out.data)
    proj = rng.standard_normal(shape) if shape else np.float64(1.0)
    _scalar(out, proj)
    tape.backward(out, np.array(proj, dtype=np.float64))

    max_err = 0.0
    count = 0
    for i in which:
        grad = vars_[i].grad
        if grad is None:
            grad = np.zeros_like(arrays[i])
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite analytic gradient for input {i}")
        pool = np.arange(arrays[i].size)
        if eligible is not None and eligible.get(i) is not None:
            pool = np.flatnonzero(np.broadcast_to(eligible[i], arrays[i].shape))
        picks = rng.choice(pool, size=min(n_coords, pool.size), replace=False)
        for flat in picks:
            base = [Var(a) for a in arrays]
            target = base[i].data = arrays[i].copy()
            target.flat[flat] += h
            f_plus = _scalar(op(None, *base), proj)
            target.flat[flat] -= 2 * h
            f_minus = _scalar(op(None, *base), proj)
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = float(grad.flat[flat])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            max_err = max(max_err, abs(analytic - numeric) / denom)
            count += 1
    return GradCheckReport(name, max_err, count, tol)
