"""Forward corruption and reverse-time samplers.

A denoiser is any callable ``h(x, t)`` mapping states of shape (N, d) and
times of shape (N,) to (N, d). The reverse SDE driven by ``h`` is

    dx = -g(t)^2 (h(x, t) - x) / sigma_t^2 dt + g(t) dB_reverse,

integrated by Euler-Maruyama with the drift frozen at the larger time of
each step, so every transition is exactly Gaussian with a recorded mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .errors import ArgumentError, DivergenceError
from .schedule import NoiseSchedule, grid_times


class DenoiserFn(Protocol):
    def __call__(self, x: np.ndarray, t: np.ndarray) -> np.ndarray: ...


@dataclass
class Trajectory:
    """A batch of discretized reverse paths.

    Shapes: ``times`` (k+1, N), ``states`` (k+1, N, d), ``step_means`` and
    ``step_noise`` (k, N, d), ``step_noise_vars`` (k, N). ``step_noise`` is the
    injected Gaussian increment, so ``states[i+1] - states[i] = step_means[i] + step_noise[i]``.
    """

    times: np.ndarray
    states: np.ndarray
    step_means: np.ndarray
    step_noise_vars: np.ndarray
    step_noise: np.ndarray
    drift_coefs: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def n_steps(self) -> int:
        return self.step_means.shape[0]

    def reconstructed_noise(self) -> np.ndarray:
        """(x_{t_i} - x_{t_{i-1}} - mu_i) / g_i; standard normal under the generating sampler."""
        incr = np.diff(self.states, axis=0) - self.step_means
        return incr / np.sqrt(self.step_noise_vars)[..., None]

    def to_json(self) -> str:
        return json.dumps(
            {
                "times": self.times.tolist(),
                "states": self.states.tolist(),
                "step_means": self.step_means.tolist(),
                "step_noise_vars": self.step_noise_vars.tolist(),
            }
        )


def _check_finite(x: np.ndarray, step: int) -> None:
    bad = ~np.all(np.isfinite(x), axis=-1)
    if np.any(bad):
        index = int(np.flatnonzero(bad)[0])
        raise DivergenceError(f"non-finite state at step {step} (sample {index})", step=step, index=index)


def forward_corrupt(x0, schedule: NoiseSchedule, t, rng: np.random.Generator) -> np.ndarray:
    """Exact draw of x_t ~ N(x0, sigma_t^2 I)."""
    x0 = np.asarray(x0, dtype=np.float64)
    sig = np.asarray(schedule.sigma(t))
    if sig.ndim and x0.ndim > 1:
        sig = sig[..., None]
    return x0 + sig * rng.standard_normal(x0.shape)


def _batch_inputs(x, t_hi, t_lo):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[0]
    t_hi = np.broadcast_to(np.asarray(t_hi, dtype=np.float64), (n,))
    t_lo = np.broadcast_to(np.asarray(t_lo, dtype=np.float64), (n,))
    return x, t_hi, t_lo, single


def reverse_rollout(
    h: DenoiserFn,
    schedule: NoiseSchedule,
    x,
    t_hi,
    t_lo,
    n_steps: int,
    rng: np.random.Generator,
    scheme: str = "uniform",
) -> Trajectory:
    """Euler-Maruyama rollout of the h-driven reverse SDE from t_hi down to t_lo.

    ``x`` may be a single state (d,) or a batch (N, d); ``t_hi``/``t_lo`` are
    scalars or per-sample arrays. Step i (from t_{i-1} to t_i, Delta > 0) uses
    mu_i = g^2(t_{i-1}) (h(x, t_{i-1}) - x) / sigma^2(t_{i-1}) Delta and
    injects N(0, g^2(t_{i-1}) Delta I).
    """
    x, t_hi, t_lo, _ = _batch_inputs(x, t_hi, t_lo)
    times = grid_times(schedule, t_hi, t_lo, n_steps, scheme)
    n, d = x.shape
    states = np.empty((n_steps + 1, n, d))
    means = np.empty((n_steps, n, d))
    noise = np.empty((n_steps, n, d))
    noise_vars = np.empty((n_steps, n))
    coefs = np.empty((n_steps, n))
    states[0] = x
    _check_finite(x, 0)
    for i in range(n_steps):
        t_prev, t_next = times[i], times[i + 1]
        dt = t_prev - t_next
        g2 = schedule.g_squared(t_prev)
        coef = g2 * dt / schedule.sigma_squared(t_prev)
        cur = states[i]
        means[i] = coef[:, None] * (h(cur, t_prev) - cur)
        noise_vars[i] = g2 * dt
        noise[i] = np.sqrt(noise_vars[i])[:, None] * rng.standard_normal((n, d))
        states[i + 1] = cur + means[i] + noise[i]
        coefs[i] = coef
        _check_finite(states[i + 1], i + 1)
    return Trajectory(times, states, means, noise_vars, noise, coefs)


def heun_sample(
    h: DenoiserFn,
    schedule: NoiseSchedule,
    x,
    t_hi,
    t_lo,
    n_steps: int,
    scheme: str = "uniform",
) -> np.ndarray:
    """Deterministic Heun integration of the probability-flow ODE dx = -1/2 g^2 s dt."""
    x, t_hi, t_lo, single = _batch_inputs(x, t_hi, t_lo)
    times = grid_times(schedule, t_hi, t_lo, n_steps, scheme)

    def velocity(state, t):
        # dx/dt of the probability-flow ODE
        return -0.5 * (schedule.g_squared(t) / schedule.sigma_squared(t))[:, None] * (h(state, t) - state)

    cur = x.copy()
    _check_finite(cur, 0)
    for i in range(n_steps):
        t_prev, t_next = times[i], times[i + 1]
        dt = (t_next - t_prev)[:, None]
        v_prev = velocity(cur, t_prev)
        pred = cur + dt * v_prev
        cur = cur + 0.5 * dt * (v_prev + velocity(pred, t_next))
        _check_finite(cur, i + 1)
    return cur[0] if single else cur


def prior_sample(schedule: NoiseSchedule, rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return float(schedule.sigma(1.0)) * rng.standard_normal((n, dim))


def generate(
    h: DenoiserFn,
    schedule: NoiseSchedule,
    n: int,
    n_steps: int,
    rng: np.random.Generator,
    sampler: str = "sde",
    dim: int | None = None,
    x_init: np.ndarray | None = None,
    scheme: str = "uniform",
) -> np.ndarray:
    """Draw n samples at t_min from the model.

    Starts from ``x_init`` when given (any (n, d) draw at t=1, e.g. exact p_1
    samples), otherwise from N(0, sigma_1^2 I).
    """
    if n < 1:
        raise ArgumentError("n must be at least 1")
    if x_init is None:
        if dim is None:
            raise ArgumentError("generate needs dim when x_init is not given")
        x_init = prior_sample(schedule, rng, n, dim)
    x_init = np.atleast_2d(np.asarray(x_init, dtype=np.float64))
    if x_init.shape[0] != n:
        raise ArgumentError(f"x_init has {x_init.shape[0]} rows, expected {n}")
    if sampler == "sde":
        return reverse_rollout(h, schedule, x_init, 1.0, schedule.t_min, n_steps, rng, scheme).final
    if sampler == "ode":
        return heun_sample(h, schedule, x_init, 1.0, schedule.t_min, n_steps, scheme)
    raise ArgumentError(f"unknown sampler {sampler!r}; expected 'sde' or 'ode'")


def early_stopped(h: DenoiserFn, schedule: NoiseSchedule, x_init, t_stop: float, n_steps: int,
                  rng: np.random.Generator, scheme: str = "uniform") -> np.ndarray:
    """Run the SDE from t=1 to t_stop and return h(x_{t_stop}, t_stop) instead of continuing."""
    x_init = np.atleast_2d(np.asarray(x_init, dtype=np.float64))
    xs = reverse_rollout(h, schedule, x_init, 1.0, t_stop, n_steps, rng, scheme).final
    return h(xs, np.full(xs.shape[0], t_stop))


def as_denoiser(fn: Callable) -> DenoiserFn:
    """Wrap a per-point function f(x: (d,), t: float) into a batched denoiser (for test stubs)."""

    def batched(x, t):
        x = np.atleast_2d(x)
        t = np.broadcast_to(t, (x.shape[0],))
        return np.stack([np.asarray(fn(xi, ti), dtype=np.float64) for xi, ti in zip(x, t)])

    return batched
