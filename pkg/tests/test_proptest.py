import numpy as np
import pytest

from consistent_diffusion import oracle
from consistent_diffusion import proptest as P
from consistent_diffusion.errors import ArgumentError, DomainError
from consistent_diffusion.schedule import NoiseSchedule

SCH = NoiseSchedule()


def points(mix, n, seed, t_lo=0.1, t_hi=0.99):
    rng = np.random.default_rng(seed)
    t = rng.uniform(t_lo, t_hi, size=n)
    return oracle.sample_pt(mix, SCH, rng, n, t), t


# ---------------------------------------------------------------- PDE --
def test_pde_residual_single_gaussian():
    mix = oracle.gaussian([0.3, -0.2], 0.5)
    x, t = points(mix, 200, 0)
    s = lambda xx, tt: oracle.score_star(mix, SCH, xx, tt)  # noqa: E731
    assert np.abs(P.pde_residual(s, SCH, x, t)).max() <= 1e-5


def test_pde_residual_two_diracs():
    mix = oracle.preset("two-diracs-1d")
    x, t = points(mix, 200, 1)
    s = lambda xx, tt: oracle.score_star(mix, SCH, xx, tt)  # noqa: E731
    assert np.abs(P.pde_residual(s, SCH, x, t)).max() <= 1e-4


def test_pde_residual_detects_a_wrong_score():
    mix = oracle.gaussian([0.0], 1.0)
    x, t = points(mix, 50, 2)
    wrong = lambda xx, tt: -np.asarray(xx)  # noqa: E731
    # -x is the score of p_t only when sigma_t = 0; the residual is -g^2 x
    res = P.pde_residual(wrong, SCH, x, t)
    np.testing.assert_allclose(res, -SCH.g_squared(t)[:, None] * x, rtol=1e-6, atol=1e-10)


def test_each_extrapolation_level_shrinks_the_residual():
    # between the two diracs the score varies on the scale sigma_t^2, the hardest case for differences
    mix = oracle.preset("two-diracs-1d")
    s = lambda xx, tt: oracle.score_star(mix, SCH, xx, tt)  # noqa: E731
    x, t = np.array([[0.0217]]), 0.1743
    errs = [np.abs(P.pde_residual(s, SCH, x, t, 1e-3, richardson=k)).max() for k in (0, 1, 2)]
    assert errs[0] > 10 * errs[1] > 100 * errs[2]
    assert errs[2] <= 1e-4
    heat = [np.abs(P.heat_residual(mix, SCH, x, t, 1e-3, richardson=k)).max() for k in (0, 1, 2)]
    assert heat[0] > heat[1] > heat[2]


def test_pde_domain_errors():
    s = lambda xx, tt: -np.asarray(xx)  # noqa: E731
    with pytest.raises(DomainError):
        P.pde_residual(s, SCH, np.zeros((1, 1)), 1.0)
    with pytest.raises(ArgumentError):
        P.pde_residual(s, SCH, np.zeros((1, 1)), 0.5, fd_h=0.0)


# --------------------------------------------------------------- heat --
def test_heat_residual_single_gaussian():
    mix = oracle.gaussian([0.0, 0.5], 0.3)
    x, t = points(mix, 200, 4)
    assert np.abs(P.heat_residual(mix, SCH, x, t)).max() <= 1e-6


def test_heat_residual_two_diracs():
    mix = oracle.preset("two-diracs-1d")
    x, t = points(mix, 200, 5)
    assert np.abs(P.heat_residual(mix, SCH, x, t)).max() <= 1e-5


def test_heat_residual_of_a_frozen_density_is_the_time_derivative():
    mix = oracle.gaussian([0.0], 1.0)
    frozen = lambda xx, tt: oracle.density_t(mix, SCH, xx, np.full(len(xx), 0.5))  # noqa: E731
    x = np.array([[0.0]])
    res = P.heat_residual(mix, SCH, x, 0.5, density=frozen)
    # Lap N(0, 1.25) at 0 is -1/(1.25 sqrt(2 pi 1.25)), scaled by g^2/2 = 0.5
    expected = 0.5 / (1.25 * np.sqrt(2 * np.pi * 1.25))
    assert res[0] == pytest.approx(expected, rel=1e-6)


def test_residual_report():
    rep = P.residual_report(np.array([[1e-3, -2e-3], [0.0, 1e-3]]), 1e-3, coarse=np.array([4e-3]))
    assert rep.max_abs == pytest.approx(2e-3)
    assert rep.mean_abs == pytest.approx(1.5e-3)
    assert rep.n_points == 2
    assert rep.convergence_ratio == pytest.approx(2.0)


# ---------------------------------------------------- conservativeness --
def test_rotation_stub_is_not_conservative():
    def rotate(x, t):
        x = np.asarray(x)
        s2 = SCH.sigma_squared(t)[:, None]
        return x + s2 * np.stack([-x[:, 1], x[:, 0]], axis=1)

    asym = P.conservativeness_check(rotate, SCH, np.random.default_rng(6).normal(size=(10, 2)), np.full(10, 0.5))
    np.testing.assert_allclose(asym, 2.0, rtol=1e-7)


def test_oracle_is_conservative():
    mix = oracle.preset("grid4-2d")
    x, t = points(mix, 300, 7)
    h = oracle.OracleDenoiser(mix, SCH)
    assert P.conservativeness_check(h, SCH, x, t).max() <= 1e-8
    fd_only = lambda xx, tt: h(xx, tt)  # noqa: E731
    assert P.conservativeness_check(fd_only, SCH, x, t).max() <= 1e-4


def test_one_dimensional_fields_are_trivially_conservative():
    np.testing.assert_array_equal(P.conservativeness_check(lambda x, t: 2 * x, SCH, np.ones((3, 1)), 0.5), 0.0)


# ------------------------------------------------------------- Tweedie --
def test_tweedie_residual():
    mix = oracle.preset("grid4-2d")
    x, t = points(mix, 300, 8, SCH.t_min, 1.0)
    h = oracle.OracleDenoiser(mix, SCH)
    assert P.tweedie_residual(h, h.score, SCH, x, t).max() <= 1e-10
    lin = lambda xx, tt: 0.3 * np.asarray(xx)  # noqa: E731
    np.testing.assert_array_equal(P.tweedie_residual(lin, P.score_of(lin, SCH), SCH, x, t), 0.0)
    other = oracle.OracleDenoiser(oracle.gaussian([0.0, 0.0], 1.0), SCH)
    assert P.tweedie_residual(h, other.score, SCH, x, t).max() > 1e-2


# ---------------------------------------------------------- martingale --
def test_pairwise_estimate_matches_the_explicit_pair_average():
    diff = np.random.default_rng(9).normal(size=(7, 3))
    pairs = [diff[a] @ diff[b] for a in range(7) for b in range(7) if a != b]
    value, se = P.pairwise_estimate(diff)
    assert value == pytest.approx(np.mean(pairs), rel=1e-12)
    assert se > 0
    per_point = P.pairwise_sq_norm(diff[None])
    assert per_point[0] == pytest.approx(value, rel=1e-12)


def test_pairwise_standard_error_is_calibrated():
    # D ~ N(mu, I) in 2-D: the U-statistic is unbiased for ||mu||^2 and its SE tracks the spread
    rng = np.random.default_rng(10)
    mu = np.array([0.3, -0.1])
    reps = [P.pairwise_estimate(mu + rng.normal(size=(50, 2))) for _ in range(4000)]
    values = np.array([r[0] for r in reps])
    ses = np.array([r[1] for r in reps])
    assert abs(values.mean() - mu @ mu) < 4 * values.std() / np.sqrt(len(values))
    assert np.sqrt(np.mean(ses**2)) == pytest.approx(values.std(), rel=0.1)
    # at the null the estimate errs on the conservative side
    null = [P.pairwise_estimate(rng.normal(size=(50, 2))) for _ in range(2000)]
    assert np.sqrt(np.mean([r[1] ** 2 for r in null])) >= np.std([r[0] for r in null])


@pytest.mark.parametrize("name,x,t,tp", [("two-diracs-1d", [0.3], 0.8, 0.4), ("grid4-2d", [0.2, -0.5], 0.7, 0.3)])
def test_oracle_martingale_violation_is_zero_within_error(name, x, t, tp):
    mix = oracle.preset(name)
    h = oracle.OracleDenoiser(mix, SCH)
    v, se = P.martingale_violation(h, SCH, x, t, tp, 4000, 64, np.random.default_rng(11))
    assert abs(v) <= 3 * se + 1e-12


def test_constant_denoiser_has_no_violation():
    const = lambda x, t: np.full_like(np.asarray(x, dtype=float), 0.4)  # noqa: E731
    v, se = P.martingale_violation(const, SCH, [0.1], 0.9, 0.5, 16, 8, np.random.default_rng(12))
    assert v == 0.0 and se == 0.0


def test_corrupted_oracle_violates_the_martingale_property():
    # ||E D||^2 for h* + 0.1 x on two diracs, from x = 0.5 at t = 1 to t' = 0.5 with 64 steps,
    # by propagating the density through the 64 Gaussian step kernels on a 6001-point grid
    exact = 4.0206020311199e-4
    mix = oracle.preset("two-diracs-1d")
    star = oracle.OracleDenoiser(mix, SCH)
    bad = lambda x, t: star(x, t) + 0.1 * np.asarray(x)  # noqa: E731
    v, se = P.martingale_violation(bad, SCH, [0.5], 1.0, 0.5, 400_000, 64, np.random.default_rng(13))
    assert v > 3 * se
    assert abs(v - exact) < 3 * se


def test_resolution_floor():
    assert P.mixture_span(oracle.preset("two-diracs-1d")) == 2.0
    assert P.mixture_span(oracle.preset("grid4-2d")) == pytest.approx(np.sqrt(8))
    assert P.mixture_span(oracle.dirac([0.3])) == 0.0
    assert P.resolution_floor(2.0, 10_000) == pytest.approx(3.6e-7)
    with pytest.raises(ArgumentError):
        P.resolution_floor(1.0, 0)


def test_saturated_oracle_rollouts_sit_below_the_resolution_floor():
    # far in one mode the spread of D vanishes unless a rare switch is drawn
    mix = oracle.preset("two-diracs-1d")
    h = oracle.OracleDenoiser(mix, SCH)
    v, se = P.martingale_violation(h, SCH, [2.2], 0.55, 0.2, 1000, 32, np.random.default_rng(3))
    assert abs(v) <= 3 * se + P.resolution_floor(P.mixture_span(mix), 1000)


def test_martingale_argument_errors():
    h = lambda x, t: x  # noqa: E731
    with pytest.raises(ArgumentError):
        P.martingale_violation(h, SCH, [0.0], 0.5, 0.6, 4, 4, np.random.default_rng(0))
    with pytest.raises(ArgumentError):
        P.martingale_violation(h, SCH, [0.0], 0.6, 0.5, 1, 4, np.random.default_rng(0))
    with pytest.raises(DomainError):
        P.martingale_violation(h, SCH, [0.0], 0.6, 1e-5, 4, 4, np.random.default_rng(0))


def test_disjoint_pair_samples_are_unbiased_for_the_oracle():
    mix = oracle.preset("grid4-2d")
    h = oracle.OracleDenoiser(mix, SCH)
    prods = P.martingale_samples(h, SCH, [0.5, 0.5], 0.6, 0.3, 4000, 32, np.random.default_rng(14))
    assert prods.shape == (2000,)
    assert abs(prods.mean()) <= 3 * prods.std(ddof=1) / np.sqrt(prods.size)


# --------------------------------------------------------------- sweep --
def test_sweep_grid_shapes():
    cfg = P.SweepConfig()
    t, tp = P.sweep_grid(SCH, "fix-t-vary-tprime", 8, cfg)
    assert np.all(t == 1.0) and tp[0] == SCH.t_min and np.all(np.diff(tp) > 0) and tp[-1] < 1.0
    t, tp = P.sweep_grid(SCH, "fix-tprime-vary-t", 8, cfg)
    assert np.all(tp == SCH.t_min) and t[-1] == 1.0 and np.all(np.diff(t) > 0) and t[0] > SCH.t_min
    with pytest.raises(ArgumentError):
        P.sweep_grid(SCH, "diagonal", 8, cfg)
    with pytest.raises(ArgumentError):
        P.sweep_grid(SCH, "fix-t-vary-tprime", 1, cfg)


def test_oracle_sweep_is_flat():
    mix = oracle.preset("grid4-2d")
    h = oracle.OracleDenoiser(mix, SCH)
    cfg = P.SweepConfig(n_points=32, n_rollouts=32, steps_per_unit=32)
    curve = P.consistency_sweep(h, SCH, mix, "fix-t-vary-tprime", 4, cfg, np.random.default_rng(15))
    assert np.all(np.abs(curve.values) <= 4 * curve.std_errors + 1e-12)


def test_sweep_uses_common_random_numbers():
    mix = oracle.preset("two-diracs-1d")
    cfg = P.SweepConfig(n_points=4, n_rollouts=4, steps_per_unit=8)
    h1 = oracle.OracleDenoiser(mix, SCH)
    h2 = lambda x, t: 0.9 * h1(x, t)  # noqa: E731
    r1, r2 = np.random.default_rng(16), np.random.default_rng(16)
    P.consistency_sweep(h1, SCH, mix, "fix-tprime-vary-t", 3, cfg, r1)
    P.consistency_sweep(h2, SCH, mix, "fix-tprime-vary-t", 3, cfg, r2)
    assert r1.random() == r2.random()


def test_sweep_csv():
    curve = P.SweepCurve("fix-t-vary-tprime", np.ones(2), np.array([0.1, 0.5]), np.zeros(2), np.ones(2))
    lines = curve.to_csv().splitlines()
    assert lines[0] == "# sweep-v1"
    assert lines[1] == ",".join(P.SWEEP_COLUMNS)
    assert lines[2] == "fix-t-vary-tprime,1.0,0.1,0.0,1.0"
    np.testing.assert_array_equal(curve.times, [0.1, 0.5])


def test_sweep_rejects_single_rollouts():
    mix = oracle.preset("two-diracs-1d")
    with pytest.raises(ArgumentError):
        P.consistency_sweep(lambda x, t: x, SCH, mix, "fix-t-vary-tprime", 2, P.SweepConfig(n_rollouts=1),
                            np.random.default_rng(0))


def test_drifted_points_stay_near_the_marginal():
    mix = oracle.preset("grid4-2d")
    x, t = P.drifted_points(mix, SCH, np.random.default_rng(17), 500, 0.2, 1.0, max_offset=2.0)
    assert x.shape == (500, 2) and np.all((t >= 0.2) & (t <= 1.0))
    assert np.all(np.abs(x) <= 1.0 + 0.3 + 8 * SCH.sigma(t)[:, None])
