"""Noise schedules, time grids and the VP <-> VE change of variables.

All schedules describe a variance-exploding process ``dx = g(t) dB`` with
``x_t ~ N(x_0, sigma_t^2 I)``. The ``vp-exponential`` kind additionally
carries a constant contraction rate ``a`` for the process
``dx = -a x dt + g_base(t) dB``; ``sigma``/``g_squared`` then describe the
equivalent VE process ``y_t = exp(A(t)) x_t`` with ``g_y = g_base exp(A)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ArgumentError, DomainError, UnsupportedKindError

KINDS = ("ve-linear", "ve-quadratic", "vp-exponential")
SCHEMES = ("uniform", "sigma-uniform", "geometric")

_TIME_SLACK = 1e-12


def _as_time(t) -> np.ndarray:
    return np.asarray(t, dtype=np.float64)


@dataclass(frozen=True)
class NoiseSchedule:
    """Time axis of every process in the package.

    ``vp_rate`` is only meaningful for ``kind="vp-exponential"``; the base
    diffusion coefficient of the VP process is the VE-linear one,
    ``g_base(t)^2 = 2 sigma_max^2 t``, so ``vp_rate=0`` reduces to VE-linear.
    """

    kind: str = "ve-linear"
    sigma_max: float = 1.0
    t_min: float = 1e-3
    vp_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnsupportedKindError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if not self.sigma_max > 0:
            raise ArgumentError(f"sigma_max must be positive, got {self.sigma_max}")
        if not 0.0 < self.t_min < 1.0:
            raise ArgumentError(f"t_min must lie in (0, 1), got {self.t_min}")
        if self.vp_rate < 0:
            raise ArgumentError(f"vp_rate must be nonnegative, got {self.vp_rate}")
        if self.kind != "vp-exponential" and self.vp_rate != 0.0:
            raise ArgumentError("vp_rate is only valid for kind='vp-exponential'")

    # -- checks -----------------------------------------------------------
    def _check_unit(self, t: np.ndarray) -> None:
        if np.any(~np.isfinite(t)) or np.any(t < -_TIME_SLACK) or np.any(t > 1.0 + _TIME_SLACK):
            raise DomainError(f"time outside [0, 1]: {np.min(t)}..{np.max(t)}")

    def _check_usable(self, t: np.ndarray) -> None:
        self._check_unit(t)
        if np.any(t < self.t_min * (1 - 1e-12)):
            raise DomainError(f"time {np.min(t)} below t_min={self.t_min}")

    # -- core quantities ----------------------------------------------------
    def sigma_squared(self, t) -> np.ndarray:
        t = _as_time(t)
        self._check_unit(t)
        t = np.clip(t, 0.0, 1.0)
        s2 = self.sigma_max**2
        if self.kind == "ve-linear":
            return s2 * t**2
        if self.kind == "ve-quadratic":
            return s2 * t**4
        return s2 * _vp_sigma2_unit(self.vp_rate, t)

    def sigma(self, t) -> np.ndarray:
        """Noise level sigma_t; zero at t=0 and strictly increasing."""
        return np.sqrt(self.sigma_squared(t))

    def g_squared(self, t) -> np.ndarray:
        """Closed-form d(sigma_t^2)/dt, defined on [t_min, 1]."""
        t = _as_time(t)
        self._check_usable(t)
        t = np.clip(t, 0.0, 1.0)
        s2 = self.sigma_max**2
        if self.kind == "ve-linear":
            return 2.0 * s2 * t
        if self.kind == "ve-quadratic":
            return 4.0 * s2 * t**3
        return 2.0 * s2 * t * np.exp(2.0 * self.vp_rate * t)

    def sigma_inverse(self, sigma) -> np.ndarray:
        """Time at which the schedule reaches noise level ``sigma``."""
        sig = np.asarray(sigma, dtype=np.float64)
        top = float(self.sigma(1.0))
        if np.any(sig < 0) or np.any(sig > top * (1 + 1e-12)):
            raise DomainError(f"sigma outside [0, {top}]")
        u = np.clip(sig / self.sigma_max, 0.0, None)
        if self.kind == "ve-linear":
            return np.clip(u, 0.0, 1.0)
        if self.kind == "ve-quadratic":
            return np.clip(np.sqrt(u), 0.0, 1.0)
        return _bisect_increasing(lambda t: np.sqrt(_vp_sigma2_unit(self.vp_rate, t)), u)

    # -- VP change of variables --------------------------------------------
    def log_vp_scale(self, t) -> np.ndarray:
        """A(t) = a t for a constant contraction rate."""
        if self.kind != "vp-exponential":
            raise UnsupportedKindError(f"vp scale undefined for kind {self.kind!r}")
        t = _as_time(t)
        self._check_unit(t)
        return self.vp_rate * t

    def vp_base_g_squared(self, t) -> np.ndarray:
        """g(t)^2 of the VP process itself (before the change of variables)."""
        if self.kind != "vp-exponential":
            raise UnsupportedKindError(f"vp base diffusion undefined for kind {self.kind!r}")
        t = _as_time(t)
        self._check_unit(t)
        return 2.0 * self.sigma_max**2 * t

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma_max": self.sigma_max, "t_min": self.t_min, "vp_rate": self.vp_rate}


def _vp_sigma2_unit(a: float, t: np.ndarray) -> np.ndarray:
    """int_0^t 2u exp(2au) du, i.e. sigma_y^2 for sigma_max = 1.

    Written as 2 t^2 phi(z) with z = 2at and phi(z) = (e^z (z - 1) + 1) / z^2,
    which stays finite as a -> 0 (phi(0) = 1/2).
    """
    z = 2.0 * a * t
    small = np.abs(z) < 1e-3
    z_safe = np.where(small, 1.0, z)
    exact = (np.exp(z_safe) * (z_safe - 1.0) + 1.0) / z_safe**2
    series = 0.5 + z / 3 + z**2 / 8 + z**3 / 30
    return 2.0 * t**2 * np.where(small, series, exact)


def _bisect_increasing(f: Callable[[np.ndarray], np.ndarray], target: np.ndarray) -> np.ndarray:
    lo = np.zeros_like(target)
    hi = np.ones_like(target)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        below = f(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def sigma(schedule: NoiseSchedule, t) -> np.ndarray:
    return schedule.sigma(t)


def g_squared(schedule: NoiseSchedule, t) -> np.ndarray:
    return schedule.g_squared(t)


@dataclass(frozen=True)
class TimeGrid:
    """Strictly decreasing sampling times t_0 > t_1 > ... > t_k."""

    times: np.ndarray
    scheme: str = "uniform"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        if times.ndim != 1 or times.size < 2:
            raise ArgumentError("a time grid needs at least two times")
        if np.any(np.diff(times) >= 0):
            raise ArgumentError("grid times must be strictly decreasing")
        object.__setattr__(self, "times", times)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def __len__(self) -> int:
        return self.times.size


def grid_times(schedule: NoiseSchedule, t_hi, t_lo, n_steps: int, scheme: str = "uniform") -> np.ndarray:
    """Vectorized grid construction; returns an array of shape (n_steps + 1, *shape(t_hi))."""
    if scheme not in SCHEMES:
        raise ArgumentError(f"unknown grid scheme {scheme!r}; expected one of {SCHEMES}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise ArgumentError(f"n_steps must be a positive integer, got {n_steps}")
    t_hi = _as_time(t_hi)
    t_lo = _as_time(t_lo)
    if np.any(t_lo >= t_hi):
        raise ArgumentError("grid needs t_lo < t_hi")
    schedule._check_usable(t_lo)
    schedule._check_usable(t_hi)
    frac = np.linspace(0.0, 1.0, n_steps + 1).reshape((-1,) + (1,) * np.broadcast(t_hi, t_lo).ndim)
    if scheme == "uniform":
        times = t_hi + (t_lo - t_hi) * frac
    elif scheme == "sigma-uniform":
        s_hi, s_lo = schedule.sigma(t_hi), schedule.sigma(t_lo)
        times = schedule.sigma_inverse(s_hi + (s_lo - s_hi) * frac)
    else:
        ls_hi, ls_lo = np.log(schedule.sigma(t_hi)), np.log(schedule.sigma(t_lo))
        times = schedule.sigma_inverse(np.exp(ls_hi + (ls_lo - ls_hi) * frac))
    times = np.array(np.broadcast_to(times, (n_steps + 1,) + np.broadcast(t_hi, t_lo).shape))
    times[0] = t_hi
    times[-1] = t_lo
    return times


def make_grid(schedule: NoiseSchedule, t_hi: float, t_lo: float, n_steps: int, scheme: str = "uniform") -> TimeGrid:
    if np.ndim(t_hi) or np.ndim(t_lo):
        raise ArgumentError("make_grid takes scalar endpoints; use grid_times for batches")
    return TimeGrid(grid_times(schedule, t_hi, t_lo, n_steps, scheme), scheme)


def vp_scale(schedule: NoiseSchedule, t) -> np.ndarray:
    """exp(A(t)), the factor mapping VP states onto the equivalent VE process."""
    return np.exp(schedule.log_vp_scale(t))


def vp_score_from_ve(s_y: Callable, schedule: NoiseSchedule, x, t) -> np.ndarray:
    """Score of the VP marginal from the score ``s_y(y, t)`` of the VE process y = e^A x."""
    x = np.asarray(x, dtype=np.float64)
    scale = vp_scale(schedule, t)
    scale_b = np.asarray(scale)[..., None] if np.ndim(scale) else scale
    out = np.asarray(s_y(scale_b * x, t), dtype=np.float64)
    if out.shape != x.shape:
        raise ArgumentError(f"score returned shape {out.shape} for input shape {x.shape}")
    return scale_b * out
