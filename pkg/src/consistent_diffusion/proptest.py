"""Numerical checks of the consistency theory.

* reverse-martingale violation ||E[h(x_t', t') | x_t = x] - h(x, t)||^2
* consistency sweeps over t' (t fixed) or over t (t' fixed)
* finite-difference residuals of the score PDE and the heat equation
* conservativeness (Jacobian symmetry) and the Tweedie identity
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import oracle
from .errors import ArgumentError, DomainError
from .losses import paired_sq_norm
from .schedule import NoiseSchedule
from .sde import reverse_rollout

SWEEP_MODES = ("fix-t-vary-tprime", "fix-tprime-vary-t")
SWEEP_COLUMNS = ("mode", "t", "t_prime", "value", "std_error")
SWEEP_VERSION = "sweep-v1"


@dataclass
class SweepCurve:
    mode: str
    t: np.ndarray
    t_prime: np.ndarray
    values: np.ndarray
    std_errors: np.ndarray

    @property
    def times(self) -> np.ndarray:
        """The varying time axis."""
        return self.t_prime if self.mode == "fix-t-vary-tprime" else self.t

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {SWEEP_VERSION}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for row in zip(self.t, self.t_prime, self.values, self.std_errors):
            writer.writerow([self.mode, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "mode": self.mode,
            "points": [
                {"t": float(a), "t_prime": float(b), "value": float(c), "std_error": float(d)}
                for a, b, c, d in zip(self.t, self.t_prime, self.values, self.std_errors)
            ],
        })


@dataclass
class ResidualReport:
    max_abs: float
    mean_abs: float
    n_points: int
    fd_step: float
    convergence_ratio: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(t, t_prime, schedule):
    if not t_prime < t:
        raise ArgumentError(f"need t_prime < t, got t={t}, t_prime={t_prime}")
    if t_prime < schedule.t_min or t > 1.0:
        raise DomainError("times must lie in [t_min, 1]")


def martingale_samples(h, schedule: NoiseSchedule, x, t: float, t_prime: float, n_rollouts: int, n_steps: int,
                       rng: np.random.Generator, scheme: str = "uniform") -> np.ndarray:
    """Per-pair products <D_a, D_b>, D = h(x_t', t') - h(x, t), over independent rollout pairs."""
    _check_pair(t, t_prime, schedule)
    if n_rollouts < 2:
        raise ArgumentError("need at least two rollouts to form a pair")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    pairs = n_rollouts // 2
    xs = np.repeat(x, 2 * pairs, axis=0)
    final = reverse_rollout(h, schedule, xs, t, t_prime, n_steps, rng, scheme).final
    diff = h(final, np.full(2 * pairs, t_prime)) - h(x, np.array([t]))
    return paired_sq_norm(diff[0::2], diff[1::2])


def pairwise_estimate(diff: np.ndarray) -> tuple[float, float]:
    """All-pairs U-statistic for ||E D||^2 from m draws of D (shape (m, d)) and its standard error.

    The variance is the exact degree-2 U-statistic variance
    (4 (m - 2) zeta1 + 2 zeta2) / (m (m - 1)) with zeta1 = mu^T Sigma mu and
    zeta2 = tr(M^2) - ||mu||^4, M = E[D D^T]. The plug-in zeta1 is corrected for
    its tr(Sigma^2) / m bias from using the sample mean.
    """
    diff = np.asarray(diff, dtype=np.float64)
    m = diff.shape[0]
    if m < 2:
        raise ArgumentError("need at least two rollouts to form a pair")
    mean = diff.mean(axis=0)
    total = diff.sum(axis=0)
    value = (total @ total - np.sum(diff**2)) / (m * (m - 1))
    second = diff.T @ diff / m
    cov = second - np.outer(mean, mean)
    zeta1 = max(mean @ cov @ mean - np.sum(cov * cov) / m, 0.0)
    zeta2 = max(np.sum(second * second) - value**2, 0.0)
    var = (4 * (m - 2) * zeta1 + 2 * zeta2) / (m * (m - 1))
    return float(value), float(np.sqrt(max(var, 0.0)))


def martingale_violation(h, schedule: NoiseSchedule, x, t: float, t_prime: float, n_rollouts: int, n_steps: int,
                         rng: np.random.Generator, scheme: str = "uniform") -> tuple[float, float]:
    """Unbiased estimate of ||E[h(x_t', t') | x_t = x] - h(x, t)||^2 and its standard error.

    Averages <D_a, D_b> over all pairs of the n_rollouts rollouts; unlike
    disjoint pairs this stays well behaved when rare mode switches dominate.
    """
    _check_pair(t, t_prime, schedule)
    if n_rollouts < 2:
        raise ArgumentError("need at least two rollouts to form a pair")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    final = reverse_rollout(h, schedule, np.repeat(x, n_rollouts, axis=0), t, t_prime, n_steps, rng, scheme).final
    diff = h(final, np.full(n_rollouts, t_prime)) - h(x, np.array([t]))
    return pairwise_estimate(diff)


def resolution_floor(span: float, n_rollouts: int) -> float:
    """Smallest violation that n_rollouts rollouts can resolve.

    If h jumps by up to ``span`` on rare rollouts (a mode switch) and none of
    the m rollouts shows it, a jump probability up to 3/m is still plausible,
    which moves E[D] by up to 3 span / m while the sample spread stays near 0.
    """
    if n_rollouts < 1:
        raise ArgumentError("n_rollouts must be positive")
    return float((3.0 * span / n_rollouts) ** 2)


def mixture_span(mix: oracle.GaussianMixture) -> float:
    """Largest distance between two component means: the size of a mode switch."""
    means = np.asarray(mix.means, dtype=np.float64)
    diff = means[:, None, :] - means[None, :, :]
    return float(np.sqrt(np.max(np.sum(diff**2, axis=-1))))


@dataclass(frozen=True)
class SweepConfig:
    n_points: int = 64
    n_rollouts: int = 256
    steps_per_unit: float = 64.0
    min_steps: int = 4
    t_fixed: float = 1.0
    t_prime_fixed: float | None = None
    scheme: str = "uniform"

    def steps_for(self, t: float, t_prime: float) -> int:
        return max(self.min_steps, int(np.ceil(self.steps_per_unit * (t - t_prime))))


def sweep_grid(schedule: NoiseSchedule, mode: str, n_grid: int, cfg: SweepConfig) -> tuple[np.ndarray, np.ndarray]:
    if mode not in SWEEP_MODES:
        raise ArgumentError(f"unknown sweep mode {mode!r}; expected one of {SWEEP_MODES}")
    if n_grid < 2:
        raise ArgumentError("n_grid must be at least 2")
    if mode == "fix-t-vary-tprime":
        t_fix = cfg.t_fixed
        t_prime = np.linspace(schedule.t_min, t_fix, n_grid + 1)[:-1]
        return np.full(n_grid, t_fix), t_prime
    tp_fix = schedule.t_min if cfg.t_prime_fixed is None else cfg.t_prime_fixed
    t = np.linspace(tp_fix, 1.0, n_grid + 1)[1:]
    return t, np.full(n_grid, tp_fix)


def pairwise_sq_norm(diff: np.ndarray) -> np.ndarray:
    """U-statistic over all rollout pairs: (||sum D||^2 - sum ||D||^2) / (m (m - 1)).

    ``diff`` has shape (n_points, m, d); unbiased for ||E D||^2 per point and
    far less noisy than disjoint pairs for the same number of rollouts.
    """
    m = diff.shape[1]
    total = diff.sum(axis=1)
    return (np.sum(total**2, axis=-1) - np.sum(diff**2, axis=(1, 2))) / (m * (m - 1))


def consistency_sweep(h, schedule: NoiseSchedule, mix: oracle.GaussianMixture, mode: str, n_grid: int,
                      cfg: SweepConfig, rng: np.random.Generator) -> SweepCurve:
    """Martingale violation along a time grid, averaged over x ~ p_t at each grid point.

    Each x gets n_rollouts rollouts; its violation is the all-pairs U-statistic
    and the standard error comes from the spread over x. The number of random
    draws does not depend on h, so two models swept with equal seeds see the
    same x and the same Brownian increments.
    """
    ts, tps = sweep_grid(schedule, mode, n_grid, cfg)
    values = np.empty(n_grid)
    errors = np.empty(n_grid)
    m = cfg.n_rollouts
    if m < 2 or cfg.n_points < 2:
        raise ArgumentError("a sweep needs at least two points and two rollouts per point")
    for k, (t, tp) in enumerate(zip(ts, tps)):
        x = oracle.sample_pt(mix, schedule, rng, cfg.n_points, t)
        xs = np.repeat(x, m, axis=0)
        final = reverse_rollout(h, schedule, xs, t, tp, cfg.steps_for(t, tp), rng, cfg.scheme).final
        anchor = h(x, np.full(cfg.n_points, t))
        diff = h(final, np.full(final.shape[0], tp)).reshape(cfg.n_points, m, -1) - anchor[:, None, :]
        per_x = pairwise_sq_norm(diff)
        values[k] = per_x.mean()
        errors[k] = per_x.std(ddof=1) / np.sqrt(cfg.n_points)
    return SweepCurve(mode, ts, tps, values, errors)


# --------------------------------------------------------- residuals ------
def _fd_check(schedule: NoiseSchedule, t: np.ndarray, fd_h: float) -> None:
    if not fd_h > 0:
        raise ArgumentError("fd_h must be positive")
    if np.any(t - fd_h < schedule.t_min) or np.any(t + fd_h > 1.0):
        raise DomainError(f"t +- fd_h leaves [t_min, 1] (fd_h={fd_h})")


def _pde_residual_once(s: Callable, schedule: NoiseSchedule, x: np.ndarray, t: np.ndarray, fd_h: float) -> np.ndarray:
    n, d = x.shape
    ds_dt = (s(x, t + fd_h) - s(x, t - fd_h)) / (2 * fd_h)
    s0 = s(x, t)
    jac = np.empty((n, d, d))
    lap = np.zeros((n, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = fd_h
        sp, sm = s(x + e, t), s(x - e, t)
        jac[:, :, j] = (sp - sm) / (2 * fd_h)
        lap += (sp - 2 * s0 + sm) / fd_h**2
    rhs = schedule.g_squared(t)[:, None] * (np.einsum("nij,nj->ni", jac, s0) + 0.5 * lap)
    return ds_dt - rhs


def _extrapolate(once: Callable[[float], np.ndarray], fd_h: float, levels: int) -> np.ndarray:
    """Romberg table over steps fd_h, fd_h/2, ...: each level cancels the next even power of h."""
    row = [once(fd_h / 2**k) for k in range(levels + 1)]
    for level in range(1, levels + 1):
        w = 4.0**level
        row = [(w * fine - coarse) / (w - 1) for coarse, fine in zip(row[:-1], row[1:])]
    return row[0]


def pde_residual(s: Callable, schedule: NoiseSchedule, x, t, fd_h: float = 1e-3, richardson: int = 2) -> np.ndarray:
    """ds/dt - g^2 (J_s s + 1/2 Lap s) by central differences.

    ``richardson`` is the number of step-halving extrapolation levels (True
    means one): level k combines steps down to fd_h / 2^k and leaves an
    O(h^(2k+2)) truncation error. Zero gives plain central differences.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    _fd_check(schedule, t, fd_h)
    return _extrapolate(lambda h: _pde_residual_once(s, schedule, x, t, h), fd_h, int(richardson))


def _heat_residual_once(p: Callable, schedule, x, t, fd_h):
    dp_dt = (p(x, t + fd_h) - p(x, t - fd_h)) / (2 * fd_h)
    p0 = p(x, t)
    lap = np.zeros(x.shape[0])
    for j in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[j] = fd_h
        lap += (p(x + e, t) - 2 * p0 + p(x - e, t)) / fd_h**2
    return dp_dt - 0.5 * schedule.g_squared(t) * lap


def heat_residual(mix: oracle.GaussianMixture, schedule: NoiseSchedule, x, t, fd_h: float = 1e-3,
                  richardson: int = 2, density: Callable | None = None) -> np.ndarray:
    """dp/dt - g^2/2 Lap p for the oracle density (or a supplied ``density(x, t)``); extrapolated as pde_residual."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    _fd_check(schedule, t, fd_h)
    p = density or (lambda xx, tt: oracle.density_t(mix, schedule, xx, tt))
    return _extrapolate(lambda h: _heat_residual_once(p, schedule, x, t, h), fd_h, int(richardson))


def residual_report(residuals: np.ndarray, fd_h: float, coarse: np.ndarray | None = None) -> ResidualReport:
    mag = np.abs(np.asarray(residuals)).reshape(len(residuals), -1).max(axis=1)
    ratio = float("nan")
    if coarse is not None:
        denom = np.abs(np.asarray(residuals)).max()
        ratio = float(np.abs(coarse).max() / denom) if denom > 0 else float("inf")
    return ResidualReport(float(mag.max()), float(mag.mean()), int(mag.size), fd_h, ratio)


def score_of(h, schedule: NoiseSchedule) -> Callable:
    """The score implied by a denoiser through Tweedie: (h - x) / sigma_t^2."""

    def s(x, t):
        x = np.asarray(x, dtype=np.float64)
        s2 = np.broadcast_to(schedule.sigma_squared(t), x.shape[:-1])
        return (h(x, t) - x) / s2[..., None]

    return s


def conservativeness_check(h, schedule: NoiseSchedule, x, t, fd_h: float = 1e-4) -> np.ndarray:
    """max_ij |J_s - J_s^T| per point for s = (h - x) / sigma^2.

    Uses ``h.jacobian_x`` when the denoiser provides an exact Jacobian,
    otherwise central differences. For d = 1 the answer is trivially 0.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    if d == 1:
        return np.zeros(n)
    if hasattr(h, "jacobian_x"):
        jac_h = np.asarray(h.jacobian_x(x, t))
    else:
        jac_h = np.empty((n, d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = fd_h
            jac_h[:, :, j] = (h(x + e, t) - h(x - e, t)) / (2 * fd_h)
    jac_s = (jac_h - np.eye(d)) / schedule.sigma_squared(t)[:, None, None]
    return np.abs(jac_s - np.swapaxes(jac_s, 1, 2)).max(axis=(1, 2))


def tweedie_residual(h, s: Callable, schedule: NoiseSchedule, x, t) -> np.ndarray:
    """||s(x, t) - (h(x, t) - x) / sigma_t^2|| per point."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    implied = (h(x, t) - x) / schedule.sigma_squared(t)[:, None]
    return np.linalg.norm(s(x, t) - implied, axis=1)


def drifted_points(mix: oracle.GaussianMixture, schedule: NoiseSchedule, rng: np.random.Generator, n: int,
                   t_lo: float, t_hi: float, max_offset: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
    """x ~ p_t plus a uniform offset of up to ``max_offset`` sigma_t per coordinate."""
    t = rng.uniform(t_lo, t_hi, size=n)
    x = oracle.sample_pt(mix, schedule, rng, n, t)
    offset = rng.uniform(-max_offset, max_offset, size=x.shape) * schedule.sigma(t)[:, None]
    return x + offset, t
