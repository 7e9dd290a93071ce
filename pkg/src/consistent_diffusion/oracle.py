"""Closed-form Gaussian-mixture targets.

For ``p0 = sum_i w_i N(mu_i, v_i I)`` the noisy marginal is again a mixture,
``p_t = sum_i w_i N(mu_i, (v_i + sigma_t^2) I)``, so density, score and the
optimal denoiser are all available exactly at any (x, t).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ArgumentError, DomainError, InvariantViolation, SingularDensityError, UnsupportedKindError
from .schedule import NoiseSchedule

MAX_COMPONENTS = 32
TWEEDIE_TOL = 1e-10


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic Gaussian mixture; a component with ``var == 0`` is a point mass."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        var = np.atleast_1d(np.asarray(self.variances, dtype=np.float64))
        if w.size < 1:
            raise ArgumentError("a mixture needs at least one component")
        if w.size > MAX_COMPONENTS:
            raise ArgumentError(f"at most {MAX_COMPONENTS} components are supported")
        if mu.shape[0] != w.size or var.shape != w.shape:
            raise ArgumentError("weights, means and variances disagree on the component count")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ArgumentError("weights must be positive and sum to 1")
        if np.any(var < 0) or not np.all(np.isfinite(mu)):
            raise ArgumentError("variances must be nonnegative and means finite")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        d = self.dim
        cov = np.zeros((d, d))
        for w, mu, v in zip(self.weights, self.means, self.variances):
            cov += w * (v * np.eye(d) + np.outer(mu - m, mu - m))
        return cov

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }


def dirac(a) -> GaussianMixture:
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    return GaussianMixture([1.0], a[None, :], [0.0])


def gaussian(mean, var: float) -> GaussianMixture:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    return GaussianMixture([1.0], mean[None, :], [var])


PRESETS = {
    "two-diracs-1d": lambda: GaussianMixture([0.5, 0.5], [[-1.0], [1.0]], [0.0, 0.0]),
    "grid4-2d": lambda: GaussianMixture(
        [0.25] * 4, [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]], [0.01] * 4
    ),
}


def preset(name: str) -> GaussianMixture:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ArgumentError(f"unknown mixture preset {name!r}; known: {sorted(PRESETS)}") from None


@dataclass
class OracleEval:
    density: np.ndarray
    score: np.ndarray
    denoiser: np.ndarray
    posterior_weights: np.ndarray


def _prepare(mix: GaussianMixture, schedule: NoiseSchedule, x, t):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mix.dim:
        raise ArgumentError(f"state has dimension {x.shape[-1]}, mixture has {mix.dim}")
    s2 = np.broadcast_to(schedule.sigma_squared(t), x.shape[:-1])
    return x, s2


def _component_terms(mix: GaussianMixture, x: np.ndarray, s2: np.ndarray):
    """Per-component log weight*density and effective variances, shape (..., K)."""
    var = mix.variances + s2[..., None]
    if np.any(var <= 0):
        raise SingularDensityError("density is singular: a point-mass component at sigma_t = 0")
    diff = x[..., None, :] - mix.means
    sq = np.sum(diff**2, axis=-1)
    d = mix.dim
    log_terms = np.log(mix.weights) - 0.5 * d * np.log(2 * np.pi * var) - 0.5 * sq / var
    return log_terms, var, diff


def log_density_t(mix: GaussianMixture, schedule: NoiseSchedule, x, t) -> np.ndarray:
    x, s2 = _prepare(mix, schedule, x, t)
    log_terms, _, _ = _component_terms(mix, x, s2)
    return logsumexp(log_terms, axis=-1)


def density_t(mix: GaussianMixture, schedule: NoiseSchedule, x, t) -> np.ndarray:
    """Density of p0 convolved with N(0, sigma_t^2 I)."""
    return np.exp(log_density_t(mix, schedule, x, t))


def posterior_weights(mix: GaussianMixture, schedule: NoiseSchedule, x, t) -> np.ndarray:
    x, s2 = _prepare(mix, schedule, x, t)
    log_terms, _, _ = _component_terms(mix, x, s2)
    return np.exp(log_terms - logsumexp(log_terms, axis=-1, keepdims=True))


def score_star(mix: GaussianMixture, schedule: NoiseSchedule, x, t) -> np.ndarray:
    """Exact grad_x log p(x, t)."""
    x, s2 = _prepare(mix, schedule, x, t)
    log_terms, var, diff = _component_terms(mix, x, s2)
    post = np.exp(log_terms - logsumexp(log_terms, axis=-1, keepdims=True))
    return -np.sum(post[..., None] * diff / var[..., None], axis=-2)


def score_jacobian_star(mix: GaussianMixture, schedule: NoiseSchedule, x, t) -> np.ndarray:
    """Exact Jacobian of the score in x, shape (..., d, d); symmetric by construction."""
    x, s2 = _prepare(mix, schedule, x, t)
    log_terms, var, diff = _component_terms(mix, x, s2)
    post = np.exp(log_terms - logsumexp(log_terms, axis=-1, keepdims=True))
    a = -diff / var[..., None]
    abar = np.sum(post[..., None] * a, axis=-2)
    eye = np.eye(mix.dim)
    jac = -np.sum(post / var, axis=-1)[..., None, None] * eye
    jac = jac + np.einsum("...k,...ki,...kj->...ij", post, a, a)
    return jac - abar[..., :, None] * abar[..., None, :]


def _posterior_mean_direct(mix, x, s2):
    log_terms, var, diff = _component_terms(mix, x, s2)
    post = np.exp(log_terms - logsumexp(log_terms, axis=-1, keepdims=True))
    # component posterior mean: mu_i + v_i / (v_i + s2) (x - mu_i)
    shrink = (mix.variances / var)[..., None]
    comp_means = mix.means + shrink * diff
    return np.sum(post[..., None] * comp_means, axis=-2), post


def denoiser_star(mix: GaussianMixture, schedule: NoiseSchedule, x, t) -> np.ndarray:
    """E[x0 | x_t = x], computed both via Tweedie and as a posterior mean.

    Raises InvariantViolation when the two routes disagree beyond 1e-10,
    scaled by the magnitude of x.
    """
    x, s2 = _prepare(mix, schedule, x, t)
    direct, _ = _posterior_mean_direct(mix, x, s2)
    tweedie = x + s2[..., None] * score_star(mix, schedule, x, t)
    scale = 1.0 + np.max(np.abs(x)) if x.size else 1.0
    err = np.max(np.abs(direct - tweedie)) if x.size else 0.0
    if err > TWEEDIE_TOL * scale:
        raise InvariantViolation(f"Tweedie and posterior-mean denoisers disagree by {err:.3e}")
    return direct


def evaluate(mix: GaussianMixture, schedule: NoiseSchedule, x, t) -> OracleEval:
    x, s2 = _prepare(mix, schedule, x, t)
    direct, post = _posterior_mean_direct(mix, x, s2)
    return OracleEval(
        density=density_t(mix, schedule, x, t),
        score=score_star(mix, schedule, x, t),
        denoiser=direct,
        posterior_weights=post,
    )


def sample_p0(mix: GaussianMixture, rng: np.random.Generator, n: int) -> np.ndarray:
    if n < 1:
        raise ArgumentError("n must be at least 1")
    comp = rng.choice(mix.n_components, size=n, p=mix.weights)
    noise = rng.standard_normal((n, mix.dim))
    return mix.means[comp] + np.sqrt(mix.variances[comp])[:, None] * noise


def sample_pt(mix: GaussianMixture, schedule: NoiseSchedule, rng: np.random.Generator, n: int, t) -> np.ndarray:
    """Draws from p_t: a p0 sample plus N(0, sigma_t^2 I)."""
    x0 = sample_p0(mix, rng, n)
    sig = np.broadcast_to(schedule.sigma(t), (n,))
    return x0 + sig[:, None] * rng.standard_normal(x0.shape)


def posterior_bruteforce(mix: GaussianMixture, schedule: NoiseSchedule, x, t, grid_n: int = 2001) -> np.ndarray:
    """E[x0 | x_t = x] by trapezoidal integration of x0 p(x | x0) p0(x0); test oracle only.

    Point-mass components contribute exactly. Each Gaussian component factorizes
    over coordinates, so its integral is a product of 1-D trapezoid rules over
    the union of the prior box mu +- 8 sqrt(v) and the likelihood box x +- 8 sigma;
    Gaussian tails beyond 8 standard deviations are below 1e-14 relative mass.
    The grid spacing is refined to a quarter of the narrower of the two widths.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != mix.dim:
        raise ArgumentError("posterior_bruteforce evaluates a single state of the mixture's dimension")
    if mix.dim > 2:
        raise UnsupportedKindError("brute-force posterior supports d <= 2 only")
    if grid_n < 1000:
        raise ArgumentError("grid_n must be at least 1000")
    s2 = float(schedule.sigma_squared(t))
    if s2 == 0.0:
        raise DomainError("the posterior at sigma_t = 0 is a point mass at x; nothing to integrate")
    sig = np.sqrt(s2)
    log_z = []
    first_moment = []
    for w, mu, v in zip(mix.weights, mix.means, mix.variances):
        if v == 0.0:
            log_z.append(np.log(w) - 0.5 * mix.dim * np.log(2 * np.pi * s2) - 0.5 * np.sum((x - mu) ** 2) / s2)
            first_moment.append(mu.copy())
            continue
        sd = np.sqrt(v)
        width_scale = min(sd, sig)
        lz = np.log(w)
        coord_means = np.empty(mix.dim)
        for j in range(mix.dim):
            lo = min(mu[j] - 8 * sd, x[j] - 8 * sig)
            hi = max(mu[j] + 8 * sd, x[j] + 8 * sig)
            n = int(min(max(grid_n, np.ceil(4 * (hi - lo) / width_scale)), 4_000_000))
            u = np.linspace(lo, hi, n)
            log_f = -0.5 * (u - mu[j]) ** 2 / v - 0.5 * np.log(2 * np.pi * v)
            log_f = log_f - 0.5 * (x[j] - u) ** 2 / s2 - 0.5 * np.log(2 * np.pi * s2)
            peak = np.max(log_f)
            f = np.exp(log_f - peak)
            z = np.trapezoid(f, u)
            coord_means[j] = np.trapezoid(u * f, u) / z
            lz += peak + np.log(z)
        log_z.append(lz)
        first_moment.append(coord_means)
    log_z = np.asarray(log_z)
    post = np.exp(log_z - logsumexp(log_z))
    return post @ np.asarray(first_moment)


class OracleDenoiser:
    """The exact denoiser of a mixture, usable wherever a model denoiser is."""

    def __init__(self, mix: GaussianMixture, schedule: NoiseSchedule, check: bool = False):
        self.mix = mix
        self.schedule = schedule
        self.check = check

    def __call__(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.check:
            return denoiser_star(self.mix, self.schedule, x, t)
        s2 = np.broadcast_to(self.schedule.sigma_squared(t), x.shape[:-1])
        return _posterior_mean_direct(self.mix, x, s2)[0]

    def score(self, x, t) -> np.ndarray:
        return score_star(self.mix, self.schedule, x, t)

    def jacobian_x(self, x, t) -> np.ndarray:
        s2 = np.broadcast_to(self.schedule.sigma_squared(t), np.shape(x)[:-1])
        return np.eye(self.mix.dim) + s2[..., None, None] * score_jacobian_star(self.mix, self.schedule, x, t)
