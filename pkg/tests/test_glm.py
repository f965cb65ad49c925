import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from covreserve.errors import DegenerateSupportError, SeparationError
from covreserve.glm import (
    FittedBernoulli,
    FittedMultinomial,
    IndependentActivation,
    KeepActivation,
    activation_from_dict,
    fit_bernoulli,
    fit_multinomial,
    loglik_and_gradient,
    multinomial_probabilities,
    renormalize,
    softmax,
)
from covreserve.synthgen import first_year_probabilities


def _fd_grad(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


# --- probabilities -------------------------------------------------------------

def test_zero_coefficients_give_uniform_probabilities():
    model = FittedMultinomial.full(np.zeros((2, 1)), 2)
    np.testing.assert_allclose(multinomial_probabilities(np.ones(1), model), [1 / 3] * 3, rtol=0, atol=1e-15)


def test_closed_form_softmax():
    model = FittedMultinomial.full([[np.log(2)], [np.log(3)]], 2)
    np.testing.assert_allclose(multinomial_probabilities(np.ones(1), model), [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_large_predictor_does_not_overflow():
    p = softmax(np.array([50.0, 0.0, 0.0]))
    assert np.all(np.isfinite(p))
    assert p[0] >= 1 - 1e-9
    p = softmax(np.array([1000.0, 0.0, -1000.0]))
    assert p[0] == 1.0 and np.all(np.isfinite(p))


def test_renormalize_examples():
    probs = np.array([0.5, 0.3, 0.2])
    np.testing.assert_allclose(renormalize(probs, {1, 3}), [5 / 7, 0, 2 / 7], atol=1e-15)
    np.testing.assert_allclose(renormalize(probs, {1, 2, 3}), probs, atol=1e-15)
    np.testing.assert_array_equal(renormalize(probs, {2}), [0, 1, 0])


def test_renormalize_rejects_zero_mass():
    with pytest.raises(DegenerateSupportError):
        renormalize(np.array([0.0, 1.0, 0.0]), {1, 3})
    with pytest.raises(DegenerateSupportError):
        renormalize(np.array([0.2, 0.8, 0.0]), set())


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, 7, elements=st.floats(-30, 30)),
    st.floats(-50, 50),
    st.sets(st.integers(1, 7), min_size=1),
)
def test_softmax_shift_invariance_and_idempotent_renormalization(eta, shift, allowed):
    p = softmax(eta)
    assert abs(p.sum() - 1) <= 1e-12
    np.testing.assert_allclose(softmax(eta + shift), p, rtol=1e-12, atol=1e-15)
    r = renormalize(p, allowed)
    assert abs(r.sum() - 1) <= 1e-12
    np.testing.assert_allclose(renormalize(r, allowed), r, rtol=1e-12, atol=1e-15)


def test_transition_table_matches_renormalization():
    rng = np.random.default_rng(3)
    model = FittedMultinomial.full(rng.normal(size=(6, 2)), 3)
    x = np.array([[1.0, 0.4]])
    p = model.probabilities(x)[0]
    table = model.transition_table(x)[0]
    np.testing.assert_allclose(table[0], p)
    for prev in range(1, 8):
        allowed = {v for v in range(1, 8) if v & prev == prev}
        np.testing.assert_allclose(table[prev], renormalize(p, allowed), atol=1e-15)


# --- fitting ---------------------------------------------------------------------

def test_intercept_only_fit_reproduces_first_year_frequencies():
    rng = np.random.default_rng(0)
    y = rng.choice(np.arange(1, 16), size=20000, p=first_year_probabilities())
    fit = fit_multinomial(np.ones((y.size, 1)), y, 4)
    fitted = fit.probabilities(np.ones((1, 1)))[0]
    empirical = np.bincount(y, minlength=16)[1:] / y.size
    np.testing.assert_allclose(fitted, empirical, rtol=0, atol=1e-8)


def test_intercept_only_bernoulli_reproduces_payment_rate():
    n = 10000
    y = np.zeros(n)
    y[:8203] = 1
    fit = fit_bernoulli(np.ones((n, 1)), y)
    assert abs(fit.probabilities(np.ones((1, 1)))[0] - 0.8203) <= 1e-8


def test_separation_errors():
    with pytest.raises(SeparationError):
        fit_multinomial(np.ones((5, 1)), np.full(5, 2), 2)
    with pytest.raises(SeparationError):
        fit_bernoulli(np.ones((5, 1)), np.ones(5))
    # a ridge penalty makes the problem well posed
    assert fit_bernoulli(np.ones((5, 1)), np.ones(5), ridge=1.0).convergence.converged
    assert fit_multinomial(np.ones((5, 1)), np.full(5, 2), 2, ridge=1.0).convergence.converged


def test_known_coefficients_are_recovered():
    rng = np.random.default_rng(5)
    n, m = 30000, 3
    X = np.column_stack([np.ones(n), rng.normal(size=(n, m - 1))])
    beta = np.array([[0.5, -0.3, 0.2], [-0.4, 0.6, 0.1]])
    p = softmax(np.column_stack([np.zeros(n), X @ beta.T]))
    y = 1 + (rng.random(n)[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
    fit = fit_multinomial(X, y, 2)
    z = (fit.beta - beta) / fit.standard_errors()
    assert np.all(np.abs(z) < 4)
    gamma = np.array([0.2, -0.5, 0.3])
    yb = (rng.random(n) < 1 / (1 + np.exp(-X @ gamma))).astype(float)
    fb = fit_bernoulli(X, yb)
    assert np.all(np.abs((fb.gamma - gamma) / fb.standard_errors()) < 4)


def test_two_pattern_multinomial_equals_logistic_regression():
    rng = np.random.default_rng(8)
    n = 4000
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = np.where(rng.random(n) < 1 / (1 + np.exp(-(0.3 + 0.8 * X[:, 1]))), 3, 1)
    mult = fit_multinomial(X, y, 2)
    bern = fit_bernoulli(X, (y == 3).astype(float))
    np.testing.assert_allclose(mult.probabilities(X)[:, 2], bern.probabilities(X), atol=1e-8)


def test_conditional_fit_respects_reachability():
    rng = np.random.default_rng(2)
    n = 3000
    prev = rng.choice([1, 2, 3], size=n)
    grow = rng.random(n) < 0.3
    y = np.where(grow, 3, prev)
    fit = fit_multinomial(np.ones((n, 1)), y, 2, prev=prev)
    table = fit.transition_table(np.ones((1, 1)))[0]
    informative = prev != 3
    assert abs(table[1, 2] - grow[informative & (prev == 1)].mean()) < 0.05
    np.testing.assert_allclose(table[3], [0, 0, 1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loglik_at_mle_beats_zero(seed):
    rng = np.random.default_rng(seed)
    n = 300
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = rng.choice([1, 2, 3], size=n, p=[0.5, 0.3, 0.2])
    fit = fit_multinomial(X, y, 2)
    ll0, _ = loglik_and_gradient(np.zeros(fit.beta.size), X, y, "multinomial", n_coverages=2)
    ll1, g = loglik_and_gradient(fit.beta, X, y, "multinomial", n_coverages=2)
    assert ll1 >= ll0
    assert np.linalg.norm(g) <= 1e-8 * n
    assert fit.convergence.loglik == pytest.approx(ll1, rel=1e-12)
    # accepted Newton steps never decrease the objective
    lls = [t[1] for t in fit.convergence.trace]
    assert all(b >= a for a, b in zip(lls, lls[1:]))


def _rel_ok(analytic, numeric, tol=1e-6):
    scale = np.maximum(np.abs(numeric), 1.0)
    return np.all(np.abs(analytic - numeric) / scale <= tol)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, m = 40, 3
    X = np.column_stack([np.ones(n), rng.normal(size=(n, m - 1))])
    y = rng.choice(np.arange(1, 8), size=n)
    theta = rng.normal(scale=0.5, size=6 * m)
    f = lambda t: loglik_and_gradient(t, X, y, "multinomial", n_coverages=3)[0]
    assert _rel_ok(loglik_and_gradient(theta, X, y, "multinomial", n_coverages=3)[1], _fd_grad(f, theta))
    prev = np.where(rng.random(n) < 0.5, 0, y & rng.integers(1, 8, size=n))
    prev = np.where(prev & y == prev, prev, 0)
    f = lambda t: loglik_and_gradient(t, X, y, "multinomial", n_coverages=3, prev=prev)[0]
    assert _rel_ok(loglik_and_gradient(theta, X, y, "multinomial", n_coverages=3, prev=prev)[1], _fd_grad(f, theta))
    yb = (rng.random(n) < 0.4).astype(float)
    tb = rng.normal(size=m)
    f = lambda t: loglik_and_gradient(t, X, yb, "bernoulli")[0]
    assert _rel_ok(loglik_and_gradient(tb, X, yb, "bernoulli")[1], _fd_grad(f, tb))


def test_empty_dataset():
    for kind, kw, d in (("bernoulli", {}, 2), ("multinomial", {"n_coverages": 2}, 4)):
        ll, g = loglik_and_gradient(np.ones(d), np.zeros((0, 2)), np.zeros(0, dtype=int), kind, **kw)
        assert ll == 0.0 and not g.any()


# --- other activation models ------------------------------------------------------

def test_independent_activation_is_product_measure():
    q = [0.3, 0.6]
    mods = tuple(FittedBernoulli("1", c, np.array([np.log(p / (1 - p))])) for c, p in enumerate(q))
    act = IndependentActivation("1", 2, mods)
    table = act.transition_table(np.ones((1, 1)))[0]
    # from scratch, conditioned on at least one activation; (0 1) is the second coverage alone
    raw = np.array([(1 - q[0]) * q[1], q[0] * (1 - q[1]), q[0] * q[1]])
    np.testing.assert_allclose(table[0], raw / raw.sum())
    np.testing.assert_allclose(table[1], [1 - q[0], 0, q[0]])
    np.testing.assert_allclose(table[3], [0, 0, 1])


def test_keep_activation_and_serialization():
    keep = KeepActivation("2+", 2)
    table = keep.transition_table(np.ones((3, 1)))
    np.testing.assert_array_equal(table[:, 1:], np.broadcast_to(np.eye(3), (3, 3, 3)))
    model = FittedMultinomial.full([[0.1], [0.2]], 2)
    for mod in (keep, model):
        back = activation_from_dict(mod.to_dict())
        np.testing.assert_array_equal(back.transition_table(np.ones((1, 1))), mod.transition_table(np.ones((1, 1))))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_probabilities_sum_to_one_on_random_inputs(seed):
    rng = np.random.default_rng(seed)
    model = FittedMultinomial.full(rng.normal(scale=5, size=(14, 6)), 4)
    X = np.column_stack([np.ones(500), rng.normal(scale=3, size=(500, 5))])
    p = model.probabilities(X)
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)
    assert np.all(p >= 0)
