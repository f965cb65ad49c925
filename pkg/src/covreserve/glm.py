"""Multinomial activation-pattern and Bernoulli payment regressions.

Both models are fitted by maximum likelihood with a damped Newton method.
The multinomial uses reference coding: the lowest supported pattern has its
coefficients fixed at zero.  Development-year transitions use the
conditional likelihood in which each claim-year only competes against the
patterns reachable from its previous pattern.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .domain import mask_bits, n_patterns, superset_table
from .errors import (
    ConfigurationError,
    DegenerateSupportError,
    DivergedError,
    SeparationError,
)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
COND_LIMIT = 1e12


# --- optimizer ---------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceReport:
    iterations: int
    grad_norm: float
    loglik: float
    converged: bool
    method: str = "newton"
    trace: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "loglik": self.loglik,
            "converged": self.converged,
            "method": self.method,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConvergenceReport":
        return cls(int(d["iterations"]), float(d["grad_norm"]), float(d["loglik"]), bool(d["converged"]), d.get("method", "newton"))


def newton_maximize(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray, np.ndarray]],
    theta0: np.ndarray,
    tol: float,
    max_iter: int = DEFAULT_MAX_ITER,
    value_only: Callable[[np.ndarray], float] | None = None,
) -> tuple[np.ndarray, ConvergenceReport, np.ndarray]:
    """Maximize a concave-ish objective returning ``(value, gradient, hessian)``.

    Newton directions with step halving keep the objective monotone.  When the
    Hessian is ill-conditioned the step is damped Levenberg-Marquardt style.
    Returns ``(theta, report, hessian)``.
    """
    value_only = value_only or (lambda t: objective(t)[0])
    theta = np.array(theta0, dtype=np.float64)
    f, g, H = objective(theta)
    trace = [(0, float(f), float(np.linalg.norm(g)))]
    if not np.isfinite(f):
        raise DivergedError("non-finite log-likelihood at the starting point", trace)
    method = "newton"
    for it in range(1, max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return theta, ConvergenceReport(it - 1, gnorm, float(f), True, method, tuple(trace)), H
        negH = -H
        if not theta.size:
            break
        cond = np.linalg.cond(negH) if np.all(np.isfinite(negH)) else np.inf
        if cond > COND_LIMIT:
            method = "newton+damping"
            mu = 1e-6 * max(float(np.max(np.abs(np.diag(negH)))), 1.0)
            while True:
                try:
                    step = np.linalg.solve(negH + mu * np.eye(len(theta)), g)
                except np.linalg.LinAlgError:
                    step = None
                if step is not None and np.all(np.isfinite(step)) and np.linalg.cond(negH + mu * np.eye(len(theta))) < COND_LIMIT:
                    break
                mu *= 10.0
        else:
            step = np.linalg.solve(negH, g)
            if not float(g @ step) > 0:
                step = g / max(float(np.max(np.abs(np.diag(negH)))), 1.0)
        t = 1.0
        accepted = False
        for _ in range(60):
            cand = theta + t * step
            f_new = value_only(cand)
            if np.isfinite(f_new) and f_new >= f:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            trace.append((it, float(f), gnorm))
            raise DivergedError(
                f"line search failed at iteration {it} (gradient norm {gnorm:.3g})", trace
            )
        theta = cand
        f, g, H = objective(theta)
        trace.append((it, float(f), float(np.linalg.norm(g))))
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise DivergedError("non-finite log-likelihood", trace)
    gnorm = float(np.linalg.norm(g))
    if gnorm <= tol:
        return theta, ConvergenceReport(max_iter, gnorm, float(f), True, method, tuple(trace)), H
    raise DivergedError(
        f"no convergence after {max_iter} iterations (gradient norm {gnorm:.3g})", trace
    )


def _covariance(H: np.ndarray) -> np.ndarray:
    if H.size == 0:
        return np.zeros((0, 0))
    try:
        return np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(-H)


# --- multinomial -----------------------------------------------------------------

def softmax(eta: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; ``-inf`` entries get probability 0."""
    eta = np.asarray(eta, dtype=np.float64)
    top = np.max(eta, axis=-1, keepdims=True)
    e = np.exp(eta - top)
    return e / e.sum(axis=-1, keepdims=True)


def renormalize(probs, allowed) -> np.ndarray:
    """Restrict a probability vector to ``allowed`` and rescale to sum 1.

    ``allowed`` is a boolean mask of length V or an iterable of 1-based
    pattern indices.
    """
    probs = np.asarray(probs, dtype=np.float64)
    V = probs.shape[-1]
    mask = _allowed_mask(allowed, V)
    if not mask.any():
        raise DegenerateSupportError("no allowed pattern")
    kept = np.where(mask, probs, 0.0)
    total = kept.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DegenerateSupportError("allowed patterns carry zero probability")
    return kept / total


def _allowed_mask(allowed, V: int) -> np.ndarray:
    arr = np.asarray(allowed) if not isinstance(allowed, (set, frozenset)) else None
    if arr is not None and arr.dtype == bool:
        if arr.shape[-1] != V:
            raise ConfigurationError("allowed mask has wrong length")
        return arr
    mask = np.zeros(V, dtype=bool)
    for v in allowed:
        v = int(getattr(v, "index", v))
        if not 1 <= v <= V:
            raise ConfigurationError(f"pattern index {v} out of range 1..{V}")
        mask[v - 1] = True
    return mask


@dataclass(frozen=True, eq=False)
class FittedMultinomial:
    """Pattern probabilities ``softmax(x'beta_v)`` over the supported patterns.

    ``support`` lists the pattern indices with positive probability, ascending;
    ``support[0]`` is the reference.  ``beta`` has one row per non-reference
    supported pattern.  Patterns outside the support have probability zero.
    """

    period: str
    n_coverages: int
    support: tuple[int, ...]
    beta: np.ndarray
    covariance: np.ndarray | None = None
    convergence: ConvergenceReport | None = None
    ridge: float = 0.0
    schema_fingerprint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(int(v) for v in self.support))
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim == 1:
            beta = beta.reshape(len(self.support) - 1, -1)
        object.__setattr__(self, "beta", beta)
        V = n_patterns(self.n_coverages)
        if not self.support or list(self.support) != sorted(set(self.support)):
            raise ConfigurationError("support must be a nonempty ascending list of patterns")
        if self.support[0] < 1 or self.support[-1] > V:
            raise ConfigurationError("support outside 1..V")
        if beta.shape[0] != len(self.support) - 1:
            raise ConfigurationError("beta needs one row per non-reference pattern")
        if not np.all(np.isfinite(beta)):
            raise ConfigurationError("non-finite coefficients")

    @classmethod
    def full(cls, beta, n_coverages: int, period: str = "1") -> "FittedMultinomial":
        """Model over all ``V`` patterns; ``beta`` has ``V - 1`` rows (pattern 1 is the reference)."""
        V = n_patterns(n_coverages)
        return cls(period, n_coverages, tuple(range(1, V + 1)), np.atleast_2d(np.asarray(beta, dtype=np.float64)).reshape(V - 1, -1))

    @property
    def n_patterns(self) -> int:
        return n_patterns(self.n_coverages)

    @property
    def m(self) -> int:
        return self.beta.shape[1]

    @property
    def n_params(self) -> int:
        return self.beta.size

    def linear_predictors(self, X) -> np.ndarray:
        """``(n, V)`` linear predictors; ``-inf`` outside the support."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        eta = np.full((X.shape[0], self.n_patterns), -np.inf)
        eta[:, self.support[0] - 1] = 0.0
        if len(self.support) > 1:
            eta[:, np.array(self.support[1:]) - 1] = X @ self.beta.T
        return eta

    def probabilities(self, X) -> np.ndarray:
        return softmax(self.linear_predictors(X))

    def transition_table(self, X) -> np.ndarray:
        """``table[i, prev, v-1]``: probability of pattern ``v`` given previous mask ``prev``.

        Row ``prev = 0`` is the unconditional distribution.  When no supported
        pattern is reachable from ``prev`` the claim keeps ``prev``.
        """
        probs = self.probabilities(X)
        return _conditional_table(probs, self.n_coverages)

    def to_dict(self) -> dict:
        return {
            "kind": "multinomial",
            "period": self.period,
            "n_coverages": self.n_coverages,
            "support": list(self.support),
            "reference": self.support[0],
            "beta": self.beta.tolist(),
            "covariance": None if self.covariance is None else np.asarray(self.covariance).tolist(),
            "convergence": None if self.convergence is None else self.convergence.to_dict(),
            "ridge": self.ridge,
            "schema_fingerprint": self.schema_fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedMultinomial":
        support = tuple(d["support"])
        beta = np.array(d["beta"], dtype=np.float64).reshape(len(support) - 1, -1)
        return cls(
            period=d["period"],
            n_coverages=int(d["n_coverages"]),
            support=support,
            beta=beta,
            covariance=None if d.get("covariance") is None else np.array(d["covariance"]),
            convergence=None if d.get("convergence") is None else ConvergenceReport.from_dict(d["convergence"]),
            ridge=float(d.get("ridge", 0.0)),
            schema_fingerprint=d.get("schema_fingerprint"),
        )

    def standard_errors(self) -> np.ndarray:
        if self.covariance is None:
            raise ConfigurationError("model has no covariance estimate")
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None)).reshape(self.beta.shape)


def _conditional_table(probs: np.ndarray, C: int) -> np.ndarray:
    allowed = superset_table(C)  # (V+1, V)
    table = probs[:, None, :] * allowed[None, :, :]
    total = table.sum(axis=2, keepdims=True)
    dead = total[..., 0] <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        table = np.where(total > 0, table / np.where(total > 0, total, 1.0), 0.0)
    if dead.any():
        i, p = np.nonzero(dead)
        if np.any(p == 0):
            raise DegenerateSupportError("unconditional pattern distribution has no mass")
        table[i, p, p - 1] = 1.0
    return table


def multinomial_probabilities(x, model: FittedMultinomial) -> np.ndarray:
    """Pattern probabilities for one design vector (length V)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.m:
        raise ConfigurationError(f"design vector must have length {model.m}")
    return model.probabilities(x[None, :])[0]


class _MultinomialProblem:
    """Log-likelihood pieces for the (conditional) multinomial."""

    def __init__(self, X, y, C, support, prev=None, ridge=0.0):
        self.X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.support = np.asarray(support, dtype=np.int64)
        self.K = len(self.support)
        self.m = self.X.shape[1]
        self.ridge = float(ridge)
        V = n_patterns(C)
        pos = np.full(V + 1, -1, dtype=np.int64)
        pos[self.support] = np.arange(self.K)
        self.col = pos[y]
        if np.any(self.col < 0):
            raise ConfigurationError("response pattern outside the model support")
        if prev is None:
            self.allowed = None
        else:
            prev = np.asarray(prev, dtype=np.int64)
            self.allowed = superset_table(C)[prev][:, self.support - 1]

    def eta(self, theta):
        B = theta.reshape(self.K - 1, self.m)
        eta = np.zeros((self.X.shape[0], self.K))
        eta[:, 1:] = self.X @ B.T
        if self.allowed is not None:
            eta = np.where(self.allowed, eta, -np.inf)
        return eta

    def value(self, theta) -> float:
        if self.X.shape[0] == 0:
            return -0.5 * self.ridge * float(theta @ theta)
        eta = self.eta(theta)
        ll = np.take_along_axis(eta, self.col[:, None], 1)[:, 0] - logsumexp(eta, axis=1)
        return float(ll.sum()) - 0.5 * self.ridge * float(theta @ theta)

    def value_grad(self, theta):
        n = self.X.shape[0]
        if n == 0:
            return self.value(theta), -self.ridge * theta, None
        eta = self.eta(theta)
        lse = logsumexp(eta, axis=1)
        ll = np.take_along_axis(eta, self.col[:, None], 1)[:, 0] - lse
        P = np.exp(eta - lse[:, None])
        R = -P
        R[np.arange(n), self.col] += 1.0
        g = (R[:, 1:].T @ self.X).ravel() - self.ridge * theta
        return float(ll.sum()) - 0.5 * self.ridge * float(theta @ theta), g, P

    def __call__(self, theta):
        f, g, P = self.value_grad(theta)
        K1, m = self.K - 1, self.m
        H = np.zeros((K1 * m, K1 * m))
        if P is not None:
            X = self.X
            for k in range(K1):
                pk = P[:, k + 1]
                for l in range(k, K1):
                    w = (pk if l == k else 0.0) - pk * P[:, l + 1]
                    block = -(X.T @ (X * w[:, None]))
                    H[k * m:(k + 1) * m, l * m:(l + 1) * m] = block
                    if l != k:
                        H[l * m:(l + 1) * m, k * m:(k + 1) * m] = block.T
        H -= self.ridge * np.eye(K1 * m)
        return f, g, H


def _informative(y, prev, C):
    """Rows whose reachable set has more than one pattern."""
    if prev is None:
        return np.ones(len(y), dtype=bool)
    return superset_table(C)[np.asarray(prev, dtype=np.int64)].sum(axis=1) > 1


def fit_multinomial(
    X,
    y,
    n_coverages: int,
    *,
    prev=None,
    ridge: float = 0.0,
    period: str = "1",
    allow_degenerate: bool = False,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    schema_fingerprint: str | None = None,
) -> FittedMultinomial:
    """Maximum-likelihood multinomial logit over activation patterns.

    ``y`` holds pattern indices (masks).  When ``prev`` is given, row ``i``
    is a transition from mask ``prev[i]`` and its likelihood is renormalized
    over the patterns reachable from it.  Without a ridge penalty, patterns
    that are never chosen get probability zero and are left out of the
    support.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] != y.shape[0]:
        raise ConfigurationError("X and y lengths differ")
    V = n_patterns(n_coverages)
    if np.any((y < 1) | (y > V)):
        raise ConfigurationError("pattern index out of range")
    if prev is not None:
        prev = np.asarray(prev, dtype=np.int64)
        if np.any(y & prev != prev):
            raise ConfigurationError("transition to a pattern that drops an active coverage")
    m = X.shape[1]
    keep = _informative(y, prev, n_coverages)
    Xi, yi = X[keep], y[keep]
    pi = None if prev is None else prev[keep]
    if ridge > 0:
        support = np.arange(1, V + 1)
    else:
        support = np.unique(yi)
    if len(support) <= 1:
        if ridge <= 0 and not allow_degenerate:
            raise SeparationError(
                "every observation has the same activation pattern; supply a ridge penalty"
            )
        if len(support) == 0:
            support = np.unique(y) if len(y) else np.array([V])
            support = support[:1]
        rep = ConvergenceReport(0, 0.0, 0.0, True, "point-mass")
        return FittedMultinomial(period, n_coverages, tuple(support), np.zeros((0, m)), np.zeros((0, 0)), rep, ridge, schema_fingerprint)
    problem = _MultinomialProblem(Xi, yi, n_coverages, support, pi, ridge)
    theta0 = _multinomial_start(problem)
    theta, rep, H = newton_maximize(problem, theta0, tol * max(len(yi), 1), max_iter, problem.value)
    return FittedMultinomial(
        period, n_coverages, tuple(int(v) for v in support), theta.reshape(len(support) - 1, m),
        _covariance(H), rep, ridge, schema_fingerprint,
    )


def _multinomial_start(problem: _MultinomialProblem) -> np.ndarray:
    """Intercepts at log frequency ratios when column 0 is an intercept."""
    theta = np.zeros((problem.K - 1, problem.m))
    X = problem.X
    if problem.allowed is None and X.shape[0] and np.all(X[:, 0] == 1.0):
        counts = np.bincount(problem.col, minlength=problem.K).astype(float) + 0.5
        theta[:, 0] = np.log(counts[1:] / counts[0])
    return theta.ravel()


# --- Bernoulli --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FittedBernoulli:
    """Logistic regression ``P(paid) = expit(x'gamma)``.

    ``constant`` replaces the regression by a fixed probability for slots
    where every response is identical (only produced on request).
    """

    period: str
    coverage: int
    gamma: np.ndarray
    covariance: np.ndarray | None = None
    convergence: ConvergenceReport | None = None
    ridge: float = 0.0
    constant: float | None = None
    schema_fingerprint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=np.float64).ravel())
        if not np.all(np.isfinite(self.gamma)):
            raise ConfigurationError("non-finite coefficients")
        if self.constant is not None and not 0.0 <= self.constant <= 1.0:
            raise ConfigurationError("constant probability outside [0, 1]")

    @property
    def m(self) -> int:
        return self.gamma.shape[0]

    def probabilities(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.constant is not None:
            return np.full(X.shape[0], float(self.constant))
        return expit(X @ self.gamma)

    def standard_errors(self) -> np.ndarray:
        if self.covariance is None:
            raise ConfigurationError("model has no covariance estimate")
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def to_dict(self) -> dict:
        return {
            "kind": "bernoulli",
            "period": self.period,
            "coverage": self.coverage,
            "gamma": self.gamma.tolist(),
            "covariance": None if self.covariance is None else np.asarray(self.covariance).tolist(),
            "convergence": None if self.convergence is None else self.convergence.to_dict(),
            "ridge": self.ridge,
            "constant": self.constant,
            "schema_fingerprint": self.schema_fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedBernoulli":
        return cls(
            period=d["period"],
            coverage=int(d["coverage"]),
            gamma=np.array(d["gamma"], dtype=np.float64),
            covariance=None if d.get("covariance") is None else np.array(d["covariance"]),
            convergence=None if d.get("convergence") is None else ConvergenceReport.from_dict(d["convergence"]),
            ridge=float(d.get("ridge", 0.0)),
            constant=d.get("constant"),
            schema_fingerprint=d.get("schema_fingerprint"),
        )


class _BernoulliProblem:
    def __init__(self, X, y, ridge=0.0):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.ridge = float(ridge)

    def value(self, theta) -> float:
        eta = self.X @ theta
        ll = self.y * log_expit(eta) + (1 - self.y) * log_expit(-eta)
        return float(ll.sum()) - 0.5 * self.ridge * float(theta @ theta)

    def __call__(self, theta):
        eta = self.X @ theta
        p = expit(eta)
        ll = float((self.y * log_expit(eta) + (1 - self.y) * log_expit(-eta)).sum())
        g = self.X.T @ (self.y - p) - self.ridge * theta
        w = p * (1 - p)
        H = -(self.X.T @ (self.X * w[:, None])) - self.ridge * np.eye(len(theta))
        return ll - 0.5 * self.ridge * float(theta @ theta), g, H


def fit_bernoulli(
    X,
    y,
    *,
    ridge: float = 0.0,
    period: str = "1",
    coverage: int = 0,
    allow_degenerate: bool = False,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    schema_fingerprint: str | None = None,
) -> FittedBernoulli:
    """Maximum-likelihood logistic regression of payment flags."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise ConfigurationError("X and y lengths differ")
    if np.any((y != 0) & (y != 1)):
        raise ConfigurationError("responses must be 0/1")
    m = X.shape[1]
    if ridge <= 0 and (len(y) == 0 or np.all(y == y[0])):
        if not allow_degenerate:
            raise SeparationError("all responses are identical; supply a ridge penalty")
        const = float(y[0]) if len(y) else 0.0
        rep = ConvergenceReport(0, 0.0, 0.0, True, "constant")
        return FittedBernoulli(period, coverage, np.zeros(m), np.zeros((m, m)), rep, ridge, const, schema_fingerprint)
    problem = _BernoulliProblem(X, y, ridge)
    theta0 = np.zeros(m)
    if len(y) and np.all(X[:, 0] == 1.0):
        rate = (y.sum() + 0.5) / (len(y) + 1.0)
        theta0[0] = np.log(rate / (1 - rate))
    theta, rep, H = newton_maximize(problem, theta0, tol * max(len(y), 1), max_iter, problem.value)
    return FittedBernoulli(period, coverage, theta, _covariance(H), rep, ridge, None, schema_fingerprint)


# --- verification hooks ------------------------------------------------------------

def loglik_and_gradient(
    params,
    X,
    y,
    kind: str,
    *,
    n_coverages: int | None = None,
    prev=None,
    support: Sequence[int] | None = None,
    ridge: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Log-likelihood and analytic gradient at ``params``.

    ``kind`` is ``"multinomial"`` (params flattened from the
    ``(K - 1, m)`` coefficient matrix) or ``"bernoulli"``.
    """
    params = np.asarray(params, dtype=np.float64).ravel()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(0, params.size) if X.size == 0 else X[None, :]
    if kind == "bernoulli":
        if X.shape[0] == 0:
            return -0.5 * ridge * float(params @ params), -ridge * params
        f, g, _ = _BernoulliProblem(X, y, ridge)(params)
        return f, g
    if kind == "multinomial":
        if n_coverages is None:
            raise ConfigurationError("n_coverages required for the multinomial")
        if support is None:
            support = range(1, n_patterns(n_coverages) + 1)
        problem = _MultinomialProblem(X, np.asarray(y, dtype=np.int64), n_coverages, list(support), prev, ridge)
        f, g, _ = problem.value_grad(params)
        return f, g
    raise ConfigurationError(f"unknown model kind {kind!r}")


# --- independent per-coverage activation -------------------------------------------

@dataclass(frozen=True, eq=False)
class KeepActivation:
    """Placeholder for a period with no training rows: every claim keeps its pattern."""

    period: str
    n_coverages: int
    convergence: ConvergenceReport | None = None
    schema_fingerprint: str | None = None

    def transition_table(self, X) -> np.ndarray:
        V = n_patterns(self.n_coverages)
        n = np.atleast_2d(X).shape[0]
        table = np.zeros((n, V + 1, V))
        table[:, np.arange(1, V + 1), np.arange(V)] = 1.0
        return table

    def to_dict(self) -> dict:
        return {"kind": "keep", "period": self.period, "n_coverages": self.n_coverages,
                "schema_fingerprint": self.schema_fingerprint}

    @classmethod
    def from_dict(cls, d: dict) -> "KeepActivation":
        return cls(d["period"], int(d["n_coverages"]), schema_fingerprint=d.get("schema_fingerprint"))


@dataclass(frozen=True, eq=False)
class IndependentActivation:
    """Activation drawn as independent per-coverage Bernoulli flags.

    Coverages already active stay active; each inactive coverage activates
    with its own probability.  Starting from no active coverage the outcome
    is conditioned on at least one activation.
    """

    period: str
    n_coverages: int
    models: tuple[FittedBernoulli, ...]

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        if len(self.models) != self.n_coverages:
            raise ConfigurationError("need one Bernoulli model per coverage")

    def coverage_probabilities(self, X) -> np.ndarray:
        return np.column_stack([mod.probabilities(X) for mod in self.models])

    def transition_table(self, X) -> np.ndarray:
        C = self.n_coverages
        V = n_patterns(C)
        q = self.coverage_probabilities(X)  # (n, C)
        vb = mask_bits(np.arange(1, V + 1), C)  # (V, C)
        pb = mask_bits(np.arange(V + 1), C)  # (V+1, C)
        per = np.where(vb[None, None], q[:, None, None, :], 1.0 - q[:, None, None, :])
        per = np.where(pb[None, :, None, :], 1.0, per)
        table = per.prod(axis=3) * superset_table(C)[None]
        total = table.sum(axis=2, keepdims=True)
        if np.any(total[:, 0] <= 0):
            raise DegenerateSupportError("every coverage has activation probability zero")
        return table / total

    def probabilities(self, X) -> np.ndarray:
        return self.transition_table(X)[:, 0, :]

    def to_dict(self) -> dict:
        return {
            "kind": "independent",
            "period": self.period,
            "n_coverages": self.n_coverages,
            "models": [mod.to_dict() for mod in self.models],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IndependentActivation":
        return cls(d["period"], int(d["n_coverages"]), tuple(FittedBernoulli.from_dict(x) for x in d["models"]))


def activation_from_dict(d: dict):
    if d["kind"] == "multinomial":
        return FittedMultinomial.from_dict(d)
    if d["kind"] == "independent":
        return IndependentActivation.from_dict(d)
    if d["kind"] == "keep":
        return KeepActivation.from_dict(d)
    raise ConfigurationError(f"unknown activation model kind {d['kind']!r}")
