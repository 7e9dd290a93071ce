"""Training objectives and their stochastic gradients.

* DSM: ||h_theta(x_t, t) - x0||^2 on forward-corrupted pairs.
* Consistency: 1/2 ||E_theta[h_theta(x_t', t') | x_t = x] - h_theta(x, t)||^2,
  with the expectation over the model's own reverse SDE.
* One-sided consistency: 1/2 ||x0 - E_theta[h_theta(x_t', t') | x_t]||^2 on true pairs.

Squared norms of expectations are estimated with pairs of independent
rollouts, <a, b> with a, b i.i.d., which is unbiased for ||E a||^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import oracle
from .errors import ArgumentError, UsageError
from .model import BoundDenoiser, DenoiserNet, vjp_params
from .schedule import SCHEMES, NoiseSchedule
from .sde import forward_corrupt, reverse_rollout

ESTIMATORS = ("full", "lazy")
X_SOURCES = ("target-pt", "model")


class DifferentiableDenoiser(Protocol):
    theta: np.ndarray

    def __call__(self, x: np.ndarray, t: np.ndarray) -> np.ndarray: ...

    def vjp(self, x: np.ndarray, t: np.ndarray, u: np.ndarray, per_sample: bool = False) -> np.ndarray: ...


@dataclass(frozen=True)
class ConsistencyConfig:
    """Knobs of the consistency term.

    ``epsilon=None`` means a window of ``epsilon_rel * t``. ``batch_n=None``
    uses every x_t of the DSM batch in ``combined_step``.
    """

    epsilon: float | None = None
    epsilon_rel: float = 0.1
    n_steps: int = 6
    n_mc: int = 2
    estimator: str = "lazy"
    x_source: str = "target-pt"
    batch_n: int | None = None
    scheme: str = "uniform"

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ArgumentError("epsilon must be positive")
        if not self.epsilon_rel > 0:
            raise ArgumentError("epsilon_rel must be positive")
        if self.n_steps < 1 or self.n_mc < 1:
            raise ArgumentError("n_steps and n_mc must be at least 1")
        if self.scheme not in SCHEMES:
            raise ArgumentError(f"scheme must be one of {SCHEMES}")
        if self.batch_n is not None and self.batch_n < 1:
            raise ArgumentError("batch_n must be positive")
        if self.estimator not in ESTIMATORS:
            raise ArgumentError(f"estimator must be one of {ESTIMATORS}")
        if self.x_source not in X_SOURCES:
            raise ArgumentError(f"x_source must be one of {X_SOURCES}")

    def window(self, t: np.ndarray) -> np.ndarray:
        return np.full_like(t, self.epsilon) if self.epsilon is not None else self.epsilon_rel * t

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "epsilon_rel": self.epsilon_rel,
            "n_steps": self.n_steps,
            "n_mc": self.n_mc,
            "estimator": self.estimator,
            "x_source": self.x_source,
            "batch_n": self.batch_n,
            "scheme": self.scheme,
        }


@dataclass
class LossReport:
    value: float
    std_error: float
    n_samples: int
    grad: np.ndarray | None = None
    grad_samples: np.ndarray | None = field(default=None, repr=False)
    parts: dict = field(default_factory=dict)


class NetModel:
    """A DenoiserNet bound to a schedule with the vjp interface losses use."""

    def __init__(self, net: DenoiserNet, schedule: NoiseSchedule):
        self.net = net
        self.bound = BoundDenoiser(net, schedule)
        self.schedule = schedule

    @property
    def theta(self) -> np.ndarray:
        return self.net.theta

    def __call__(self, x, t):
        return self.bound(x, t)

    def vjp(self, x, t, u, per_sample=False):
        return vjp_params(self.net, self.schedule, x, t, u, per_sample)


def as_model(net, schedule: NoiseSchedule):
    if isinstance(net, DenoiserNet):
        return NetModel(net, schedule)
    if not hasattr(net, "vjp"):
        raise UsageError("gradient estimators need a model exposing vjp(x, t, u)")
    return net


def _mean_se(samples: np.ndarray) -> tuple[float, float]:
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.size
    if n < 2:
        return float(samples.mean()), float("nan")
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(n))


def paired_sq_norm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pair <a, b>; unbiased for ||E a||^2 when a, b are independent copies."""
    return np.sum(np.asarray(a) * np.asarray(b), axis=-1)


def uniform_times(schedule: NoiseSchedule) -> Callable:
    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(schedule.t_min, 1.0, size=n)

    return sample


# ---------------------------------------------------------------- DSM ----
def dsm_loss(net, schedule: NoiseSchedule, mix: oracle.GaussianMixture, rng: np.random.Generator,
             batch_n: int, t_sampler: Callable | None = None, t_threshold: float | None = None,
             with_grad: bool = True) -> LossReport:
    """Mean of ||h(x_t, t) - x0||^2; samples with t <= t_threshold are masked out.

    The gradient pulls back u = 2 (h - x0) / batch_n through the network.
    """
    if batch_n < 1:
        raise ArgumentError("batch_n must be at least 1")
    model = as_model(net, schedule) if with_grad else net
    t_sampler = t_sampler or uniform_times(schedule)
    t = np.asarray(t_sampler(rng, batch_n), dtype=np.float64)
    x0 = oracle.sample_p0(mix, rng, batch_n)
    xt = forward_corrupt(x0, schedule, t, rng)
    mask = np.ones(batch_n) if t_threshold is None else (t > t_threshold).astype(np.float64)
    if isinstance(model, DenoiserNet):
        model = NetModel(model, schedule)
    resid = model(xt, t) - x0
    value, se = _mean_se(np.sum(resid**2, axis=1) * mask)
    grad = model.vjp(xt, t, 2.0 * resid * mask[:, None] / batch_n) if with_grad else None
    report = LossReport(value, se, batch_n, grad)
    report.parts = {"xt": xt, "t": t, "x0": x0}
    return report


# ------------------------------------------------------- consistency -----
def _check_times(t, t_prime, n):
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    t_prime = np.broadcast_to(np.asarray(t_prime, dtype=np.float64), (n,))
    if np.any(t_prime >= t):
        raise ArgumentError("consistency needs t_prime < t")
    return t, t_prime


def _rollouts(h, schedule, x, t, t_prime, cfg: ConsistencyConfig, rng, n_mc=None):
    """n_mc independent rollouts per point; arrays ordered (point, replica)."""
    m = cfg.n_mc if n_mc is None else n_mc
    xr = np.repeat(x, m, axis=0)
    tr = np.repeat(t, m)
    tpr = np.repeat(t_prime, m)
    traj = reverse_rollout(h, schedule, xr, tr, tpr, cfg.n_steps, rng, cfg.scheme)
    return traj, xr, tr, tpr


def consistency_loss(h, schedule: NoiseSchedule, x, t, t_prime, cfg: ConsistencyConfig,
                     rng: np.random.Generator) -> LossReport:
    """Value of 1/2 ||E[h(x_t', t') | x_t = x] - h(x, t)||^2, averaged over the points in x."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    t, t_prime = _check_times(t, t_prime, n)
    m = cfg.n_mc
    traj, _, _, tpr = _rollouts(h, schedule, x, t, t_prime, cfg, rng)
    d = x.shape[1]
    diff = h(traj.final, tpr).reshape(n, m, d) - h(x, t)[:, None, :]
    if m == 1:
        # single rollout: biased upward by the conditional variance
        per = 0.5 * np.sum(diff[:, 0] ** 2, axis=-1)
    else:
        pairs = m // 2
        per = 0.5 * paired_sq_norm(diff[:, 0:2 * pairs:2], diff[:, 1:2 * pairs:2]).ravel()
    value, se = _mean_se(per)
    return LossReport(value, se, per.size)


def _consistency_grad(model, schedule, x, t, t_prime, cfg: ConsistencyConfig, rng, full: bool,
                      per_sample: bool = False, target: np.ndarray | None = None) -> LossReport:
    """Shared estimator for the consistency loss (target=None) and the one-sided loss.

    With ``target`` given, h(x, t) is replaced by the fixed vector x0 and
    receives no gradient.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    t, t_prime = _check_times(t, t_prime, n)
    m = max(2, cfg.n_mc - cfg.n_mc % 2)
    pairs = m // 2
    traj, _, _, tpr = _rollouts(model, schedule, x, t, t_prime, cfg, rng, n_mc=m)
    h_final = model(traj.final, tpr).reshape(n, m, d)
    anchor = model(x, t) if target is None else np.atleast_2d(target)
    h_a = h_final[:, 0::2]
    h_b = h_final[:, 1::2]
    delta = h_a - anchor[:, None, :]  # (n, pairs, d)
    value_samples = 0.5 * paired_sq_norm(delta, h_b - anchor[:, None, :]).ravel()
    value, se = _mean_se(value_samples)
    n_draws = n * pairs
    weight = 1.0 / n_draws

    # rows: h(x_B', t') with u = delta, and h(x, t) with u = -sum(delta)
    states_b = traj.final.reshape(n, m, d)[:, 1::2].reshape(-1, d)
    times_b = tpr.reshape(n, m)[:, 1::2].ravel()
    rows_x = [states_b]
    rows_t = [times_b]
    rows_u = [delta.reshape(-1, d)]
    owner = [np.arange(n_draws)]
    if target is None:
        rows_x.append(np.repeat(x, pairs, axis=0))
        rows_t.append(np.repeat(t, pairs))
        rows_u.append(-delta.reshape(-1, d))
        owner.append(np.arange(n_draws))
    lazy_rows = sum(r.shape[0] for r in rows_x)
    if full:
        # score-function term: (delta . h(x_B')) * sum_i c_i (noise_i / g_i^2)^T dh/dtheta(x_{i-1}, t_{i-1})
        w = paired_sq_norm(delta, h_b).ravel()
        k = traj.n_steps
        sel = np.arange(n * m).reshape(n, m)[:, 1::2].ravel()
        starts = traj.states[:-1][:, sel]  # (k, n_draws, d)
        starts_t = traj.times[:-1][:, sel]
        score_u = (traj.drift_coefs[:, sel] / traj.step_noise_vars[:, sel])[..., None] * traj.step_noise[:, sel]
        rows_x.append(starts.reshape(-1, d))
        rows_t.append(starts_t.ravel())
        rows_u.append((w[None, :, None] * score_u).reshape(-1, d))
        owner.append(np.tile(np.arange(n_draws), k))
    all_x = np.concatenate(rows_x)
    all_t = np.concatenate(rows_t)
    all_u = np.concatenate(rows_u)
    all_owner = np.concatenate(owner)
    if per_sample:
        g_rows = model.vjp(all_x, all_t, all_u, per_sample=True)
        samples = np.zeros((n_draws, g_rows.shape[1]))
        np.add.at(samples, all_owner, g_rows)
        lazy_samples = np.zeros_like(samples)
        np.add.at(lazy_samples, all_owner[:lazy_rows], g_rows[:lazy_rows])
        report = LossReport(value, se, n_draws, samples.mean(axis=0), samples)
        report.parts = {"lazy_samples": lazy_samples, "score_samples": samples - lazy_samples}
        return report
    grad = model.vjp(all_x, all_t, all_u * weight)
    return LossReport(value, se, n_draws, grad)


def consistency_grad_full(net, schedule: NoiseSchedule, x, t, t_prime, cfg: ConsistencyConfig,
                          rng: np.random.Generator, per_sample: bool = False) -> LossReport:
    """Unbiased gradient of the (discretized) consistency loss, including the log-density term."""
    return _consistency_grad(as_model(net, schedule), schedule, x, t, t_prime, cfg, rng, True, per_sample)


def consistency_grad_lazy(net, schedule: NoiseSchedule, x, t, t_prime, cfg: ConsistencyConfig,
                          rng: np.random.Generator, per_sample: bool = False) -> LossReport:
    """Gradient with the log-density term dropped: delta_A^T (dh(x_B') - dh(x)).

    Biased for the loss gradient in general, but zero in mean whenever the
    model is consistent.
    """
    return _consistency_grad(as_model(net, schedule), schedule, x, t, t_prime, cfg, rng, False, per_sample)


def consistency_grad(net, schedule, x, t, t_prime, cfg: ConsistencyConfig, rng, per_sample=False):
    fn = consistency_grad_full if cfg.estimator == "full" else consistency_grad_lazy
    return fn(net, schedule, x, t, t_prime, cfg, rng, per_sample)


def one_sided_loss(net, schedule: NoiseSchedule, mix, x0, x_t, t, t_prime, cfg: ConsistencyConfig,
                   rng: np.random.Generator, per_sample: bool = False) -> LossReport:
    """1/2 ||x0 - E_theta[h(x_t', t') | x_t]||^2 on true (x0, x_t) pairs.

    ``mix`` is accepted for interface symmetry; the pairs already carry the target.
    The gradient is lazy unless ``cfg.estimator == "full"``.
    """
    model = as_model(net, schedule)
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    if x0.shape != x_t.shape:
        raise ArgumentError("x0 and x_t must have the same shape")
    return _consistency_grad(model, schedule, x_t, t, t_prime, cfg, rng, cfg.estimator == "full",
                             per_sample, target=x0)


def sample_t_prime(schedule: NoiseSchedule, t: np.ndarray, cfg: ConsistencyConfig,
                   rng: np.random.Generator) -> np.ndarray:
    """t' ~ U[max(t - eps, t_min), t)."""
    lo = np.maximum(t - cfg.window(t), schedule.t_min)
    u = rng.uniform(size=t.shape)
    return lo + u * (t - lo)


def model_states(h, schedule: NoiseSchedule, t: np.ndarray, dim: int, cfg: ConsistencyConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """x_t drawn from the model: prior draw at t=1 rolled down to t."""
    n = t.shape[0]
    x1 = float(schedule.sigma(1.0)) * rng.standard_normal((n, dim))
    out = x1.copy()
    run = t < 1.0
    if np.any(run):
        out[run] = reverse_rollout(h, schedule, x1[run], 1.0, t[run], cfg.n_steps, rng, cfg.scheme).final
    return out


def combined_step(net, schedule: NoiseSchedule, mix, cfg: ConsistencyConfig, lam: float,
                  rng: np.random.Generator, batch_n: int, t_threshold: float | None = None,
                  t_sampler: Callable | None = None) -> LossReport:
    """One stochastic gradient of DSM + lam * consistency."""
    if lam < 0:
        raise ArgumentError("lambda must be nonnegative")
    model = as_model(net, schedule)
    dsm = dsm_loss(model, schedule, mix, rng, batch_n, t_sampler, t_threshold)
    parts = {"dsm": dsm.value, "consistency": 0.0}
    if lam == 0.0:
        return LossReport(dsm.value, dsm.std_error, dsm.n_samples, dsm.grad, parts=parts)
    t = dsm.parts["t"]
    xt = dsm.parts["xt"]
    m = batch_n if cfg.batch_n is None else min(cfg.batch_n, batch_n)
    t = t[:m]
    keep = t > schedule.t_min
    t = t[keep]
    if t.size == 0:
        return LossReport(dsm.value, dsm.std_error, dsm.n_samples, dsm.grad, parts=parts)
    if cfg.x_source == "target-pt":
        xs = xt[:m][keep]
    else:
        xs = model_states(model, schedule, t, xt.shape[1], cfg, rng)
    t_prime = sample_t_prime(schedule, t, cfg, rng)
    cons = _consistency_grad(model, schedule, xs, t, t_prime, cfg, rng, cfg.estimator == "full")
    parts["consistency"] = cons.value
    return LossReport(dsm.value + lam * cons.value, dsm.std_error, dsm.n_samples,
                      dsm.grad + lam * cons.grad, parts=parts)
