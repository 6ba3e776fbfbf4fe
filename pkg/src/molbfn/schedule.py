"""Accuracy schedules for discrete Bayesian flow.

Two schedule families are supported:

* ``LOG``: ``beta(t) = -(4/K) ln(1 - t + t exp(-K beta_1 / 4))``, whose expected
  input entropy decays roughly linearly in ``t``.
* ``QUADRATIC``: ``beta(t) = t^2 beta_1``.

All functions accept python floats or numpy arrays for ``t``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

# alpha(1) <= ALPHA_CAP_RATIO * beta(1) defines the largest usable beta(1).
ALPHA_CAP_RATIO = 32.0


class ScheduleKind(str, enum.Enum):
    LOG = "log"
    QUADRATIC = "quadratic"


@dataclass(frozen=True)
class ScheduleParams:
    kind: ScheduleKind
    beta_one: float
    k_categories: int
    enforce_beta_cap: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not self.beta_one > 0:
            raise ValueError(f"beta_one must be positive, got {self.beta_one}")
        if self.k_categories < 2:
            raise ValueError(f"k_categories must be >= 2, got {self.k_categories}")
        if self.kind is ScheduleKind.LOG and self.enforce_beta_cap:
            cap = beta_one_max(self.k_categories)
            if self.beta_one > cap * (1 + 1e-9):
                raise ValueError(
                    f"beta_one={self.beta_one} exceeds beta_one_max={cap:.6g} for K={self.k_categories}; "
                    "pass enforce_beta_cap=False to allow it"
                )

    @classmethod
    def at_cap(cls, k_categories: int) -> "ScheduleParams":
        """Log schedule at the accuracy cap."""
        return cls(ScheduleKind.LOG, beta_one_max(k_categories), k_categories)


def _check_t(t):
    arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t!r}")
    return arr


def _ret(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def beta(params: ScheduleParams, t):
    """Cumulative accuracy at time ``t``."""
    tt = _check_t(t)
    if params.kind is ScheduleKind.QUADRATIC:
        return _ret(tt * tt * params.beta_one, t)
    k = params.k_categories
    x = k * params.beta_one / 4.0
    # Two algebraically equal forms; each is cancellation-free on its half.
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        near_zero = -(4.0 / k) * np.log1p(tt * np.expm1(-x))
        near_one = params.beta_one - (4.0 / k) * np.log1p((1.0 - tt) * np.expm1(x))
    out = np.where(tt <= 0.5, near_zero, near_one)
    if not np.all(np.isfinite(out)):
        # expm1(x) overflow for huge uncapped beta_one
        out = np.where(np.isfinite(out), out, near_zero)
    return _ret(out, t)


def alpha(params: ScheduleParams, t):
    """Accuracy rate d(beta)/dt at time ``t``."""
    tt = _check_t(t)
    if params.kind is ScheduleKind.QUADRATIC:
        return _ret(2.0 * tt * params.beta_one, t)
    k = params.k_categories
    x = k * params.beta_one / 4.0
    em = np.expm1(-x)  # e^{-x} - 1, in (-1, 0)
    out = (4.0 / k) * (-em) / (1.0 + tt * em)
    return _ret(out, t)


def beta_one_max(k_categories: int) -> float:
    """Largest beta(1) for the log schedule with alpha(1) <= 32 beta(1).

    With ``u = K beta(1) / 4`` the cap reads ``exp(u) = 1 + 32 u``; the positive
    root is ``u* ~= 5.10135`` so the result is ``4 u* / K ~= 20.4054 / K``.
    """
    if k_categories < 2:
        raise ValueError(f"k_categories must be >= 2, got {k_categories}")
    u_star = _cap_root()
    return 4.0 * u_star / k_categories


def _cap_root(tol: float = 1e-15) -> float:
    def f(u):
        return math.expm1(u) - ALPHA_CAP_RATIO * u

    lo, hi = 1e-6, 64.0
    # f(lo) < 0 < f(hi); bisection to a tight bracket, then Newton.
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * hi:
            break
    u = 0.5 * (lo + hi)
    for _ in range(3):
        u -= f(u) / (math.exp(u) - ALPHA_CAP_RATIO)
    return u


def step_alpha(params: ScheduleParams, i: int, n: int) -> float:
    """Accuracy injected at sampler step ``i`` of ``n``: beta(i/n) - beta((i-1)/n)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 1 <= i <= n:
        raise IndexError(f"step index {i} outside [1, {n}]")
    return max(0.0, beta(params, i / n) - beta(params, (i - 1) / n))
