"""Central finite-difference verification of reverse-mode gradients.

The function under test is a closure over leaf :class:`~octafreq.tensor.Tensor`
objects whose ``data`` arrays are float64; the analytic gradient comes from one
backward pass and the numeric one from central differences computed in 64-bit.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["CheckReport", "grad_check", "grad_check_ladder"]

_REL_FLOOR = 1e-6  # treat both-tiny gradient pairs as matching


@dataclass
class CheckReport:
    """Outcome of one :func:`grad_check` run."""

    tol: float
    eps: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    worst: dict[str, tuple] = field(default_factory=dict)  # name -> (index, analytic, numeric)
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = []
        for name, err in self.max_rel_err.items():
            status = "ok" if name not in self.failures else "FAIL"
            lines.append(f"{status:4s} {name}: max rel err {err:.3e}")
            if name in self.failures:
                idx, a, n = self.worst[name]
                lines.append(f"     worst at {idx}: analytic {a:.6e} vs numeric {n:.6e}")
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    denom = max(abs(a), abs(n))
    if denom < _REL_FLOOR:
        return 0.0
    return abs(a - n) / denom


def _named_pairs(wrt) -> list[tuple[str, Tensor]]:
    named: list[tuple[str, Tensor]] = []
    for i, item in enumerate(wrt):
        if isinstance(item, Tensor):
            named.append((getattr(item, "name", "") or f"arg{i}", item))
        else:
            named.append(item)
    return named


def _run_check(fn: Callable[[], Tensor], wrt, steps: tuple[float, ...],
               tol: float, max_coords: int | None, seed: int) -> CheckReport:
    named = _named_pairs(wrt)

    for name, t in named:
        if t.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 leaves ({name} is {t.data.dtype})")
        t.requires_grad = True
        t.grad = None

    out = fn()
    if out.data.size != 1:
        raise ValueError("grad_check target must be scalar")
    out.backward()

    report = CheckReport(tol=tol, eps=steps[0])

    for name, t in named:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is None or n <= max_coords:
            coords = np.arange(n)
        else:
            # keyed on (seed, name) so the sampled coordinates do not depend
            # on which other tensors are being checked alongside
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            coords = rng.choice(n, size=max_coords, replace=False)
        worst_err, worst = 0.0, (0, 0.0, 0.0)
        for c in coords:
            a = float(analytic.reshape(-1)[c])
            orig = flat[c]
            err, numeric = np.inf, 0.0
            for eps in steps:
                flat[c] = orig + eps
                f_plus = float(fn().data)
                flat[c] = orig - eps
                f_minus = float(fn().data)
                flat[c] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                err = _rel_err(a, numeric)
                if err <= tol:
                    break
            if err > worst_err:
                worst_err = err
                worst = (int(c), a, numeric)
        report.max_rel_err[name] = worst_err
        report.worst[name] = worst
        if worst_err > tol:
            report.failures.append(name)
    return report


def grad_check(fn: Callable[[], Tensor], wrt: Sequence[tuple[str, Tensor]] | Sequence[Tensor],
               *, eps: float = 1e-3, tol: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> CheckReport:
    """Compare analytic and central-difference gradients of ``fn``.

    Parameters
    ----------
    fn : callable
        Zero-argument closure returning a scalar :class:`Tensor`; it must
        re-read the ``wrt`` tensors' ``data`` on every call.
    wrt : sequence
        Tensors (or ``(name, tensor)`` pairs) to differentiate with respect
        to.  Their ``data`` must be float64 for the step size to make sense.
    eps : float
        Central-difference step.
    tol : float
        Maximum allowed relative error per coordinate.
    max_coords : int, optional
        If given, only this many randomly chosen coordinates per tensor are
        probed (used for whole-model checks where exhaustive probing would be
        too slow); ``None`` probes every coordinate.
    """
    return _run_check(fn, wrt, (eps,), tol, max_coords, seed)


def grad_check_ladder(fn: Callable[[], Tensor], wrt, *,
                      steps: Sequence[float] = (1e-3, 1e-5, 1e-6),
                      tol: float = 1e-4, max_coords: int | None = None,
                      seed: int = 0) -> CheckReport:
    """:func:`grad_check` with per-coordinate smaller-step fallbacks.

    A relative error above ``tol`` can be measurement error rather than a
    wrong VJP: the O(eps^2) truncation term of the central difference, or a
    rectifier kink inside the probe interval.  Both collapse as the step
    shrinks (whereas shrinking it for every coordinate up front would invite
    cancellation noise on the well-measured ones), so each coordinate is
    accepted as soon as one step agrees with the analytic value; a genuinely
    wrong gradient disagrees at every step.
    """
    return _run_check(fn, wrt, tuple(steps), tol, max_coords, seed)
