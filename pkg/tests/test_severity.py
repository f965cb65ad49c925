import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from covreserve.errors import (
    ConfigurationError,
    DivergedError,
    DomainError,
    InfiniteMeanError,
    InsufficientDataError,
    NoModelError,
)
from covreserve.severity import (
    FittedSeverity,
    SeverityFamily,
    aic_bic,
    fit_families,
    fit_severity,
    information_criteria,
    sample_conditional_max,
    sample_severity,
    select_family,
    severity_from_dict,
    severity_loglik_and_gradient,
)

ETA = 8.0
# shapes chosen so every family has a finite variance
SHAPES = {
    "lognormal": (1.0,),
    "gamma": (2.0,),
    "pareto": (3.5,),
    "gb2": (2.0, 1.5, 2.5),
    "weibull": (1.2,),
}


def _model(family, shapes=None, eta=ETA):
    shapes = SHAPES[family] if shapes is None else shapes
    return FittedSeverity(family, np.array([eta]), 0.0, tuple(np.log(shapes)), alpha_star_fixed=True)


def _fd_grad(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


# --- fitting ------------------------------------------------------------------

def test_lognormal_fit_is_moments_of_logs():
    # {e, e^2, e^3} repeated to clear the minimum sample size; the MLE is unchanged
    y = np.exp(np.tile([1.0, 2.0, 3.0], 4))
    fit = fit_severity(np.ones((y.size, 1)), 1, y, "lognormal")
    assert fit.alpha[0] == pytest.approx(2.0, abs=1e-8)
    assert fit.shapes[0] == pytest.approx(np.std([1.0, 2.0, 3.0]), rel=1e-7)
    assert fit.alpha_star_fixed and fit.alpha_star == 0.0


def test_gamma_recovery_within_three_standard_errors():
    rng = np.random.default_rng(17)
    n = 50000
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    j = rng.integers(1, 4, size=n)
    alpha, alpha_star, k = np.array([7.0, 0.3]), 0.2, 1.5
    mu = np.exp(X @ alpha + alpha_star * j)
    y = rng.gamma(k, mu / k)
    fit = fit_severity(X, j, y, "gamma")
    truth = np.concatenate([alpha, [alpha_star, math.log(k)]])
    z = (fit.param_vector() - truth) / fit.standard_errors()
    assert np.all(np.abs(z) < 3), z
    assert fit.convergence.converged


def test_weibull_on_gamma_data_converges():
    rng = np.random.default_rng(4)
    y = rng.gamma(2.0, 500.0, size=3000)
    fit = fit_severity(np.ones((y.size, 1)), rng.integers(1, 3, size=y.size), y, "weibull")
    assert fit.convergence.converged
    assert np.all(np.isfinite(fit.param_vector()))


def test_fit_errors():
    X = np.ones((20, 1))
    with pytest.raises(DomainError):
        fit_severity(X, 1, np.r_[np.ones(19), 0.0], "gamma")
    with pytest.raises(InsufficientDataError):
        fit_severity(X[:5], 1, np.ones(5), "gamma")
    # Lomax tail index below one: the fitted mean would be infinite
    rng = np.random.default_rng(0)
    y = 100 * np.expm1(-np.log(rng.random(5000)) / 0.7)
    with pytest.raises(InfiniteMeanError):
        fit_severity(np.ones((y.size, 1)), 1, y, "pareto")


def test_diverged_fit_carries_trace():
    rng = np.random.default_rng(1)
    y = rng.lognormal(3, 1, size=200)
    with pytest.raises(DivergedError) as exc:
        fit_severity(np.ones((y.size, 1)), 1, y, "gb2", max_iter=1, tol=1e-300)
    assert exc.value.trace


def test_fit_families_returns_errors_in_place():
    rng = np.random.default_rng(0)
    y = 100 * np.expm1(-np.log(rng.random(3000)) / 0.7)
    fits = fit_families(np.ones((y.size, 1)), 1, y, ["lognormal", "pareto"])
    assert isinstance(fits[SeverityFamily.PARETO], InfiniteMeanError)
    assert select_family(fits) == SeverityFamily.LOGNORMAL


# --- information criteria ---------------------------------------------------------

def test_aic_bic_hand_computation():
    aic, bic = aic_bic(-100.0, 3, 100)
    assert aic == 206.0
    assert bic == pytest.approx(213.8155, abs=1e-4)
    assert aic_bic(-100.0, 4, 100)[0] - aic == 2.0


def _with_aic(family, aic, n=10000):
    k = 1 + {"gb2": 3}.get(family, 1)
    fit = _model(family)
    return FittedSeverity(
        fit.family, fit.alpha, 0.0, fit.log_shapes, loglik=-(aic - 2 * k) / 2, n=n, alpha_star_fixed=True
    )


def test_counted_parameters():
    fit = FittedSeverity("gb2", np.zeros(3), 0.1, (0.0, 0.0, 0.0), loglik=-50.0, n=40)
    assert fit.n_params == 3 + 1 + 3
    assert information_criteria(fit) == aic_bic(-50.0, 7, 40)


def test_select_accident_benefits_first_year():
    aics = {"lognormal": 266408, "gamma": 264411, "pareto": 262903, "gb2": 261110, "weibull": 264101}
    fits = [_with_aic(f, a) for f, a in aics.items()]
    assert select_family(fits) == SeverityFamily.GB2


def test_select_bodily_injury_first_year():
    aics = {"lognormal": 100523, "gamma": 99675, "pareto": 98971, "gb2": 99966, "weibull": 99187}
    fits = {SeverityFamily(f): _with_aic(f, a) for f, a in aics.items()}
    assert select_family(fits) == SeverityFamily.PARETO


def test_ties_prefer_fewer_parameters_then_family_order():
    assert select_family([_with_aic("gb2", 500.0), _with_aic("gamma", 500.0)]) == SeverityFamily.GAMMA
    assert select_family([_with_aic("weibull", 500.0), _with_aic("gamma", 500.0)]) == SeverityFamily.GAMMA
    assert select_family([_with_aic("gamma", 500.0), _with_aic("lognormal", 500.0)]) == SeverityFamily.LOGNORMAL


def test_selection_errors():
    with pytest.raises(NoModelError):
        select_family({SeverityFamily.GB2: DivergedError("x", [])})
    with pytest.raises(ConfigurationError):
        select_family([_with_aic("gamma", 1.0)], criterion="HQ")


def test_bic_can_disagree_with_aic():
    # GB2 gains 3 log-likelihood units for 2 extra parameters: enough for AIC, not for BIC at n=10^4
    gamma = _with_aic("gamma", 1000.0)
    gb2 = _with_aic("gb2", 1000.0 - 6 + 4)
    assert select_family([gamma, gb2], "AIC") == SeverityFamily.GB2
    assert select_family([gamma, gb2], "BIC") == SeverityFamily.GAMMA


# --- densities and quantiles ----------------------------------------------------------

@pytest.mark.parametrize("family", list(SHAPES))
def test_density_integrates_to_one(family):
    mod = _model(family)
    x = np.ones((1, 1))
    # substitute y = exp(eta + t); every family's tails are negligible beyond |t| = 80
    f = lambda t: math.exp(float(mod.logpdf(math.exp(ETA + t), x, 1)[0]) + ETA + t)
    edges = [-80, -10, -3, 0, 3, 10, 80]
    total = sum(integrate.quad(f, a, b, epsabs=1e-13, epsrel=1e-11, limit=200)[0] for a, b in zip(edges, edges[1:]))
    assert abs(total - 1) <= 1e-6


@pytest.mark.parametrize("family", list(SHAPES))
def test_quantile_inverts_cdf(family):
    mod = _model(family)
    y = math.exp(ETA) * np.logspace(-4, 1, 26)
    u = mod.cdf(y, np.ones((1, 1)), 1)
    back = mod.ppf(u, np.ones((1, 1)), 1)
    np.testing.assert_allclose(back, y, rtol=1e-8)


@pytest.mark.parametrize("family", list(SHAPES))
def test_monte_carlo_mean_matches_analytic(family):
    mod = _model(family, eta=2.0)
    draws = sample_severity(mod, np.ones(1), 1, np.random.default_rng(99), size=400000)
    se = draws.std() / math.sqrt(draws.size)
    assert abs(draws.mean() - mod.mean(np.ones((1, 1)), 1)[0]) <= 3 * se


def test_lognormal_mean_on_a_million_draws():
    mod = _model("lognormal", (0.8,), eta=1.5)
    draws = sample_severity(mod, np.ones(1), 1, np.random.default_rng(2), size=10**6)
    assert abs(draws.mean() / math.exp(1.5 + 0.32) - 1) <= 0.005


def test_near_point_mass():
    mod = _model("lognormal", (1e-6,), eta=4.0)
    draws = sample_severity(mod, np.ones(1), 1, np.random.default_rng(0), size=100)
    assert np.all(np.abs(draws / math.exp(4.0) - 1) < 0.01)


def test_development_year_effect_shifts_location():
    mod = FittedSeverity("gamma", np.array([5.0]), 0.5, (0.0,))
    assert mod.mean(np.ones((1, 1)), 3)[0] == pytest.approx(math.exp(6.5))


def test_sampling_is_deterministic():
    mod = _model("gb2")
    a = sample_severity(mod, np.ones(1), 2, np.random.default_rng(7), size=50)
    b = sample_severity(mod, np.ones(1), 2, np.random.default_rng(7), size=50)
    np.testing.assert_array_equal(a, b)
    u = np.random.default_rng(7).random(50)
    np.testing.assert_array_equal(sample_severity(mod, np.ones(1), 2, u), a)


def test_serialization_round_trip():
    rng = np.random.default_rng(3)
    y = rng.gamma(2.0, 100.0, size=200)
    fit = fit_severity(np.ones((y.size, 1)), rng.integers(1, 3, size=y.size), y, "weibull", period="2+", coverage=2)
    back = severity_from_dict(fit.to_dict())
    np.testing.assert_array_equal(back.param_vector(), fit.param_vector())
    np.testing.assert_array_equal(back.covariance, fit.covariance)
    assert (back.family, back.period, back.coverage, back.n) == (fit.family, "2+", 2, 200)


# --- conditional maximum --------------------------------------------------------------

def test_conditional_max_with_zero_floor_is_plain_draw():
    mod = _model("pareto")
    u = np.random.default_rng(5).random(1000)
    np.testing.assert_array_equal(sample_conditional_max(mod, np.ones(1), 0.0, 2, u), sample_severity(mod, np.ones(1), 2, u))


def test_conditional_max_atom_at_the_median():
    mod = _model("lognormal")
    median = float(mod.ppf(0.5, np.ones((1, 1)), 1)[0])
    out = sample_conditional_max(mod, np.ones(1), median, 1, np.random.default_rng(11), size=10**5)
    assert abs(np.mean(out == median) - 0.5) <= 0.015


def test_conditional_max_dominating_floor():
    out = sample_conditional_max(_model("gamma"), np.ones(1), 1e9, 1, np.random.default_rng(1), size=10**4)
    assert np.all(out == 1e9)


def test_conditional_max_rejects_negative_floor():
    with pytest.raises(DomainError):
        sample_conditional_max(_model("gamma"), np.ones(1), -1.0, 1, np.random.default_rng(1))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(list(SHAPES)), st.floats(0, 1e6), st.integers(0, 2**32 - 1))
def test_conditional_max_never_below_paid(family, paid, seed):
    out = sample_conditional_max(_model(family), np.ones(1), paid, 2, np.random.default_rng(seed), size=200)
    assert np.all(out >= paid)


# --- gradients --------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.sampled_from(list(SHAPES)), st.integers(0, 2**32 - 1), st.booleans())
def test_severity_gradients_match_finite_differences(family, seed, fixed):
    rng = np.random.default_rng(seed)
    n = 30
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    j = rng.integers(1, 4, size=n)
    y = rng.lognormal(6, 1, size=n)
    n_shape = len(SHAPES[family])
    theta = np.concatenate([[6 + rng.normal(scale=0.5), rng.normal(scale=0.3)], [] if fixed else [rng.normal(scale=0.2)], rng.normal(scale=0.3, size=n_shape)])
    f = lambda t: severity_loglik_and_gradient(t, X, j, y, family, alpha_star_fixed=fixed)[0]
    g = severity_loglik_and_gradient(theta, X, j, y, family, alpha_star_fixed=fixed)[1]
    num = _fd_grad(f, theta)
    assert np.all(np.abs(g - num) / np.maximum(np.abs(num), 1.0) <= 1e-6)
