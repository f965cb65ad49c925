"""Parametric severity regressions.

Every family uses a log link on its location/scale parameter,
``eta = x'alpha + alpha_star * j``, with constant shape parameters stored on
the log scale:

* lognormal: ``log Y ~ N(eta, sigma^2)``
* gamma: mean ``exp(eta)``, shape ``k``
* pareto (Lomax): scale ``exp(eta)``, tail index ``theta``
* gb2: scale ``b = exp(eta)``, shapes ``a, p, q``
* weibull: scale ``exp(eta)``, shape ``k``
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize
from scipy.special import (
    betainc,
    betaincinv,
    betaln,
    digamma,
    expit,
    gammainc,
    gammainccinv,
    gammaincinv,
    gammaln,
    ndtr,
    ndtri,
)

from .errors import (
    ConfigurationError,
    DivergedError,
    DomainError,
    InfiniteMeanError,
    InsufficientDataError,
    NoModelError,
)
from .glm import ConvergenceReport

MIN_SAMPLES = 10
MAX_ITER = 500
_LOG_2PI = math.log(2 * math.pi)


class SeverityFamily(str, enum.Enum):
    LOGNORMAL = "lognormal"
    GAMMA = "gamma"
    PARETO = "pareto"
    GB2 = "gb2"
    WEIBULL = "weibull"


FAMILY_ORDER = tuple(SeverityFamily)


def _softplus(x):
    return np.logaddexp(0.0, x)


# --- family kernels --------------------------------------------------------------
# Each kernel works on arrays ``y`` and ``eta`` and shapes on the natural scale.

class _Kernel:
    n_shape = 0
    shape_names: tuple[str, ...] = ()

    def logpdf(self, y, eta, s):
        raise NotImplementedError

    def grad(self, y, eta, s):
        """Return (d logpdf / d eta, [d logpdf / d log shape_k])."""
        raise NotImplementedError

    def cdf(self, y, eta, s):
        raise NotImplementedError

    def ppf(self, u, eta, s):
        raise NotImplementedError

    def mean(self, eta, s):
        raise NotImplementedError

    def finite_mean(self, s) -> bool:
        return True

    def start(self, resid_sd):
        raise NotImplementedError

    def offset(self, s) -> float:
        """log(median / scale) used to place the starting intercept."""
        return 0.0


class _LogNormal(_Kernel):
    n_shape = 1
    shape_names = ("sigma",)

    def logpdf(self, y, eta, s):
        (sig,) = s
        ly = np.log(y)
        z = (ly - eta) / sig
        return -ly - np.log(sig) - 0.5 * _LOG_2PI - 0.5 * z * z

    def grad(self, y, eta, s):
        (sig,) = s
        z = (np.log(y) - eta) / sig
        return z / sig, [-1.0 + z * z]

    def cdf(self, y, eta, s):
        return ndtr((np.log(y) - eta) / s[0])

    def ppf(self, u, eta, s):
        return np.exp(eta + s[0] * ndtri(u))

    def mean(self, eta, s):
        return np.exp(eta + 0.5 * s[0] ** 2)

    def start(self, resid_sd):
        return [resid_sd]


class _Gamma(_Kernel):
    n_shape = 1
    shape_names = ("k",)

    def logpdf(self, y, eta, s):
        (k,) = s
        return k * np.log(k) - k * eta + (k - 1) * np.log(y) - k * y * np.exp(-eta) - gammaln(k)

    def grad(self, y, eta, s):
        (k,) = s
        ye = y * np.exp(-eta)
        d_eta = -k + k * ye
        d_t = k * (np.log(k) + 1 - eta + np.log(y) - ye - digamma(k))
        return d_eta, [d_t]

    def cdf(self, y, eta, s):
        (k,) = s
        return gammainc(k, k * y * np.exp(-eta))

    def ppf(self, u, eta, s):
        (k,) = s
        u, eta = np.broadcast_arrays(np.asarray(u, dtype=np.float64), np.asarray(eta, dtype=np.float64))
        lo = u < 0.5
        g = np.empty(u.shape)
        g[lo] = gammaincinv(k, u[lo])
        g[~lo] = gammainccinv(k, 1 - u[~lo])
        return np.exp(eta) * g / k

    def mean(self, eta, s):
        return np.exp(eta)

    def start(self, resid_sd):
        return [1.0 / max(resid_sd**2, 1e-3)]

    def offset(self, s):
        (k,) = s
        return float(np.log(gammaincinv(k, 0.5) / k))


class _Pareto(_Kernel):
    n_shape = 1
    shape_names = ("theta",)

    def logpdf(self, y, eta, s):
        (th,) = s
        return np.log(th) - eta - (th + 1) * np.log1p(y * np.exp(-eta))

    def grad(self, y, eta, s):
        (th,) = s
        r = y * np.exp(-eta)
        return -1 + (th + 1) * r / (1 + r), [1 - th * np.log1p(r)]

    def cdf(self, y, eta, s):
        return -np.expm1(-s[0] * np.log1p(y * np.exp(-eta)))

    def ppf(self, u, eta, s):
        return np.exp(eta) * np.expm1(-np.log1p(-np.asarray(u, dtype=np.float64)) / s[0])

    def mean(self, eta, s):
        (th,) = s
        if th <= 1:
            return np.full(np.shape(eta), np.inf)
        return np.exp(eta) / (th - 1)

    def finite_mean(self, s):
        return s[0] > 1

    def start(self, resid_sd):
        return [3.0]

    def offset(self, s):
        return math.log(2 ** (1 / s[0]) - 1)


class _GB2(_Kernel):
    n_shape = 3
    shape_names = ("a", "p", "q")

    def logpdf(self, y, eta, s):
        a, p, q = s
        u = np.log(y) - eta
        return np.log(a) + a * p * u - np.log(y) - betaln(p, q) - (p + q) * _softplus(a * u)

    def grad(self, y, eta, s):
        a, p, q = s
        u = np.log(y) - eta
        sg = expit(a * u)
        sp = _softplus(a * u)
        d_eta = -a * p + (p + q) * a * sg
        psi = digamma(p + q)
        d_a = 1 + a * u * (p - (p + q) * sg)
        d_p = p * (a * u - digamma(p) + psi - sp)
        d_q = q * (-digamma(q) + psi - sp)
        return d_eta, [d_a, d_p, d_q]

    def cdf(self, y, eta, s):
        a, p, q = s
        au = a * (np.log(y) - eta)
        z = expit(au)
        return np.where(au <= 0, betainc(p, q, z), 1 - betainc(q, p, expit(-au)))

    def ppf(self, u, eta, s):
        a, p, q = s
        u, eta = np.broadcast_arrays(np.asarray(u, dtype=np.float64), np.asarray(eta, dtype=np.float64))
        lo = u <= 0.5
        # log(z / (1 - z)) computed from whichever tail is accurate
        logit = np.empty(u.shape)
        z = betaincinv(p, q, u[lo])
        logit[lo] = np.log(z) - np.log1p(-z)
        w = betaincinv(q, p, 1 - u[~lo])
        logit[~lo] = np.log1p(-w) - np.log(w)
        return np.exp(eta + logit / a)

    def mean(self, eta, s):
        a, p, q = s
        if a * q <= 1:
            return np.full(np.shape(eta), np.inf)
        return np.exp(eta + betaln(p + 1 / a, q - 1 / a) - betaln(p, q))

    def finite_mean(self, s):
        a, p, q = s
        return a * q > 1 and -a * p < 1

    def start(self, resid_sd):
        return [max(math.pi / (math.sqrt(3) * max(resid_sd, 1e-3)), 1.5), 1.0, 1.0]


class _Weibull(_Kernel):
    n_shape = 1
    shape_names = ("k",)

    def logpdf(self, y, eta, s):
        (k,) = s
        u = np.log(y) - eta
        return np.log(k) - eta + (k - 1) * u - np.exp(k * u)

    def grad(self, y, eta, s):
        (k,) = s
        u = np.log(y) - eta
        w = np.exp(k * u)
        return -k + k * w, [1 + k * u * (1 - w)]

    def cdf(self, y, eta, s):
        (k,) = s
        return -np.expm1(-np.exp(k * (np.log(y) - eta)))

    def ppf(self, u, eta, s):
        (k,) = s
        return np.exp(eta) * (-np.log1p(-np.asarray(u, dtype=np.float64))) ** (1 / k)

    def mean(self, eta, s):
        (k,) = s
        return np.exp(eta + gammaln(1 + 1 / k))

    def start(self, resid_sd):
        return [max(1.28 / max(resid_sd, 1e-3), 0.2)]

    def offset(self, s):
        return math.log(math.log(2)) / s[0]


KERNELS: dict[SeverityFamily, _Kernel] = {
    SeverityFamily.LOGNORMAL: _LogNormal(),
    SeverityFamily.GAMMA: _Gamma(),
    SeverityFamily.PARETO: _Pareto(),
    SeverityFamily.GB2: _GB2(),
    SeverityFamily.WEIBULL: _Weibull(),
}


# --- fitted models -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FittedSeverity:
    """One fitted severity regression for a (period, coverage) slot."""

    family: SeverityFamily
    alpha: np.ndarray
    alpha_star: float
    log_shapes: tuple[float, ...]
    loglik: float = float("nan")
    n: int = 0
    period: str = "1"
    coverage: int = 0
    alpha_star_fixed: bool = False
    covariance: np.ndarray | None = None
    convergence: ConvergenceReport | None = None
    schema_fingerprint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", SeverityFamily(self.family))
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=np.float64).ravel())
        object.__setattr__(self, "log_shapes", tuple(float(v) for v in self.log_shapes))
        if len(self.log_shapes) != self.kernel.n_shape:
            raise ConfigurationError(f"{self.family.value} needs {self.kernel.n_shape} shape parameter(s)")
        if not (np.all(np.isfinite(self.alpha)) and math.isfinite(self.alpha_star) and all(map(math.isfinite, self.log_shapes))):
            raise ConfigurationError("non-finite severity parameters")

    @property
    def kernel(self) -> _Kernel:
        return KERNELS[self.family]

    @property
    def shapes(self) -> tuple[float, ...]:
        return tuple(math.exp(v) for v in self.log_shapes)

    @property
    def m(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_params(self) -> int:
        return self.m + (0 if self.alpha_star_fixed else 1) + self.kernel.n_shape

    def eta(self, X, j) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return X @ self.alpha + self.alpha_star * np.asarray(j, dtype=np.float64)

    def logpdf(self, y, X, j):
        return self.kernel.logpdf(np.asarray(y, dtype=np.float64), self.eta(X, j), self.shapes)

    def pdf(self, y, X, j):
        return np.exp(self.logpdf(y, X, j))

    def cdf(self, y, X, j):
        return self.kernel.cdf(np.asarray(y, dtype=np.float64), self.eta(X, j), self.shapes)

    def ppf(self, u, X, j):
        return self.kernel.ppf(u, self.eta(X, j), self.shapes)

    def mean(self, X, j):
        return self.kernel.mean(self.eta(X, j), self.shapes)

    def ppf_eta(self, u, eta):
        """Quantiles for precomputed linear predictors (simulation hot path)."""
        return self.kernel.ppf(u, eta, self.shapes)

    def to_dict(self) -> dict:
        return {
            "kind": "severity",
            "family": self.family.value,
            "period": self.period,
            "coverage": self.coverage,
            "alpha": self.alpha.tolist(),
            "alpha_star": self.alpha_star,
            "alpha_star_fixed": self.alpha_star_fixed,
            "log_shapes": list(self.log_shapes),
            "shape_names": list(self.kernel.shape_names),
            "loglik": self.loglik,
            "n": self.n,
            "covariance": None if self.covariance is None else np.asarray(self.covariance).tolist(),
            "convergence": None if self.convergence is None else self.convergence.to_dict(),
            "schema_fingerprint": self.schema_fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedSeverity":
        return cls(
            family=SeverityFamily(d["family"]),
            alpha=np.array(d["alpha"], dtype=np.float64),
            alpha_star=float(d["alpha_star"]),
            log_shapes=tuple(d["log_shapes"]),
            loglik=float(d.get("loglik", float("nan"))),
            n=int(d.get("n", 0)),
            period=d.get("period", "1"),
            coverage=int(d.get("coverage", 0)),
            alpha_star_fixed=bool(d.get("alpha_star_fixed", False)),
            covariance=None if d.get("covariance") is None else np.array(d["covariance"]),
            convergence=None if d.get("convergence") is None else ConvergenceReport.from_dict(d["convergence"]),
            schema_fingerprint=d.get("schema_fingerprint"),
        )

    def standard_errors(self) -> np.ndarray:
        """Standard errors in parameter-vector order (alpha, alpha_star if free, log shapes)."""
        if self.covariance is None:
            raise ConfigurationError("model has no covariance estimate")
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def param_vector(self) -> np.ndarray:
        star = [] if self.alpha_star_fixed else [self.alpha_star]
        return np.concatenate([self.alpha, star, self.log_shapes])


@dataclass(frozen=True, eq=False)
class PointMassSeverity:
    """Degenerate severity that always returns ``value``."""

    value: float
    period: str = "1"
    coverage: int = 0
    family: str = "pointmass"

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value >= 0):
            raise ConfigurationError("point-mass severity must be finite and >= 0")

    n_params = 0

    def ppf(self, u, X, j):
        return np.full(np.broadcast(np.asarray(u), np.asarray(j)).shape, float(self.value))

    def ppf_eta(self, u, eta):
        return np.full(np.broadcast(np.asarray(u), np.asarray(eta)).shape, float(self.value))

    def eta(self, X, j):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.zeros(X.shape[0]) + 0.0 * np.asarray(j, dtype=np.float64)

    def mean(self, X, j):
        return np.full(np.shape(self.eta(X, j)), float(self.value))

    def cdf(self, y, X, j):
        return (np.asarray(y, dtype=np.float64) >= self.value).astype(np.float64)

    def to_dict(self) -> dict:
        return {"kind": "severity", "family": "pointmass", "value": self.value, "period": self.period, "coverage": self.coverage}

    @classmethod
    def from_dict(cls, d: dict) -> "PointMassSeverity":
        return cls(float(d["value"]), d.get("period", "1"), int(d.get("coverage", 0)))


def severity_from_dict(d: dict):
    if d["family"] == "pointmass":
        return PointMassSeverity.from_dict(d)
    return FittedSeverity.from_dict(d)


# --- likelihood ------------------------------------------------------------------

def _design(X, j, fix_star: bool) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if fix_star:
        return X
    return np.column_stack([X, np.asarray(j, dtype=np.float64)])


def severity_loglik_and_gradient(params, X, j, y, family, alpha_star_fixed: bool = False):
    """Total log-likelihood and gradient in ``(alpha, alpha_star, log shapes)``.

    ``alpha_star`` is omitted from ``params`` when ``alpha_star_fixed``.
    """
    kern = KERNELS[SeverityFamily(family)]
    Z = _design(X, j, alpha_star_fixed)
    return _loglik_grad(np.asarray(params, dtype=np.float64), Z, np.asarray(y, dtype=np.float64), kern)


def _loglik_grad(theta, Z, y, kern):
    d = Z.shape[1]
    eta = Z @ theta[:d]
    s = np.exp(theta[d:])
    ll = kern.logpdf(y, eta, s)
    d_eta, d_s = kern.grad(y, eta, s)
    g = np.concatenate([Z.T @ d_eta, [np.sum(v) for v in d_s]])
    return float(np.sum(ll)), g


def _fd_hessian(fun, theta):
    P = len(theta)
    H = np.empty((P, P))
    for k in range(P):
        h = 1e-5 * max(1.0, abs(theta[k]))
        e = np.zeros(P)
        e[k] = h
        H[:, k] = (fun(theta + e)[1] - fun(theta - e)[1]) / (2 * h)
    return 0.5 * (H + H.T)


def fit_severity(
    X,
    j,
    y,
    family: SeverityFamily | str,
    *,
    period: str = "1",
    coverage: int = 0,
    tol: float = 1e-8,
    max_iter: int = MAX_ITER,
    schema_fingerprint: str | None = None,
) -> FittedSeverity:
    """Maximum-likelihood severity regression with ``eta = x'alpha + alpha_star * j``.

    ``alpha_star`` is held at zero when every sample shares one development
    year, since it is then not identifiable next to the intercept.
    """
    family = SeverityFamily(family)
    kern = KERNELS[family]
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    j = np.broadcast_to(np.asarray(j, dtype=np.float64), y.shape)
    n = y.shape[0]
    if X.shape[0] != n:
        raise ConfigurationError("X and y lengths differ")
    if n < MIN_SAMPLES:
        raise InsufficientDataError(f"need at least {MIN_SAMPLES} positive amounts, got {n}")
    if not np.all(np.isfinite(y)) or np.any(y <= 0):
        raise DomainError("severity amounts must be strictly positive and finite")
    fix_star = bool(np.all(j == j[0]))
    Z = _design(X, j, fix_star)
    d = Z.shape[1]

    # start: least squares on log amounts, then shift the intercept
    ly = np.log(y)
    coef, *_ = np.linalg.lstsq(Z, ly, rcond=None)
    resid = ly - Z @ coef
    sd = float(np.std(resid)) or 1.0
    s0 = kern.start(sd)
    if np.allclose(Z[:, 0], 1.0):
        coef[0] -= kern.offset(s0)
    theta0 = np.concatenate([coef, np.log(s0)])

    def fun(theta):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            f, g = _loglik_grad(theta, Z, y, kern)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            return -np.inf, np.zeros_like(theta)
        return f, g

    def neg(theta):
        f, g = fun(theta)
        if not np.isfinite(f):
            return 1e300, np.zeros_like(theta)
        return -f / n, -g / n

    res = optimize.minimize(neg, theta0, jac=True, method="BFGS", options={"maxiter": max_iter, "gtol": 1e-9})
    theta = res.x
    f, g = fun(theta)
    trace = [(int(res.nit), f, float(np.linalg.norm(g)))]
    target = tol * n
    it = 0
    H = _fd_hessian(fun, theta)
    while np.linalg.norm(g) > target and it < 100:
        it += 1
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-H, g, rcond=None)[0]
        if not float(g @ step) > 0:
            step = g / max(float(np.max(np.abs(np.diag(H)))), 1.0)
        t = 1.0
        for _ in range(40):
            f_new, g_new = fun(theta + t * step)
            if np.isfinite(f_new) and f_new >= f - 1e-12 * abs(f):
                break
            t *= 0.5
        else:
            break
        theta, f, g = theta + t * step, f_new, g_new
        H = _fd_hessian(fun, theta)
        trace.append((int(res.nit) + it, f, float(np.linalg.norm(g))))
    gnorm = float(np.linalg.norm(g))
    if not np.isfinite(f) or gnorm > target:
        raise DivergedError(
            f"{family.value} fit did not converge (gradient norm {gnorm:.3g}, tolerance {target:.3g})", trace
        )
    shapes = np.exp(theta[d:])
    if not kern.finite_mean(tuple(shapes)):
        raise InfiniteMeanError(
            f"{family.value} fit implies an infinite mean ({dict(zip(kern.shape_names, np.round(shapes, 4)))})"
        )
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(-H)
    rep = ConvergenceReport(int(res.nit) + it, gnorm, f, True, "bfgs+newton", tuple(trace))
    return FittedSeverity(
        family=family,
        alpha=theta[: X.shape[1]],
        alpha_star=0.0 if fix_star else float(theta[X.shape[1]]),
        log_shapes=tuple(theta[d:]),
        loglik=f,
        n=n,
        period=period,
        coverage=coverage,
        alpha_star_fixed=fix_star,
        covariance=cov,
        convergence=rep,
        schema_fingerprint=schema_fingerprint,
    )


# --- selection -------------------------------------------------------------------

def aic_bic(loglik: float, k: int, n: int) -> tuple[float, float]:
    return -2 * loglik + 2 * k, -2 * loglik + k * math.log(n)


def information_criteria(fit: FittedSeverity) -> tuple[float, float]:
    """``(AIC, BIC)`` with ``k`` counting location coefficients, ``alpha_star`` and shapes."""
    return aic_bic(fit.loglik, fit.n_params, fit.n)


def fit_families(X, j, y, families: Sequence[SeverityFamily | str] = FAMILY_ORDER, **kwargs) -> dict:
    """Fit each family; failed fits are returned as the raised error."""
    out = {}
    for fam in families:
        fam = SeverityFamily(fam)
        try:
            out[fam] = fit_severity(X, j, y, fam, **kwargs)
        except (DivergedError, InfiniteMeanError) as exc:
            out[fam] = exc
    return out


def select_family(fits, criterion: str = "AIC") -> SeverityFamily:
    """Family with the lowest AIC or BIC among successful fits.

    ``fits`` is a mapping family -> fit (or error) or a sequence of fits.
    Ties go to the family with fewer parameters, then to the fixed family
    order.
    """
    criterion = criterion.upper()
    if criterion not in ("AIC", "BIC"):
        raise ConfigurationError(f"criterion must be AIC or BIC, got {criterion!r}")
    items = fits.values() if isinstance(fits, Mapping) else fits
    best = None
    for fit in items:
        if not isinstance(fit, FittedSeverity):
            continue
        aic, bic = information_criteria(fit)
        score = aic if criterion == "AIC" else bic
        if not math.isfinite(score):
            continue
        key = (score, fit.n_params, FAMILY_ORDER.index(fit.family))
        if best is None or key < best[0]:
            best = (key, fit.family)
    if best is None:
        raise NoModelError("no severity family could be fitted")
    return best[1]


# --- sampling --------------------------------------------------------------------

def _uniforms(rng, size=None):
    if isinstance(rng, np.random.Generator):
        return rng.random(size)
    u = np.asarray(rng, dtype=np.float64)
    return u if size is None else u.reshape(size)


def sample_severity(model, x, j, rng, size=None):
    """Draw from the fitted severity at design ``x`` and development year ``j``.

    ``rng`` is a numpy Generator or an array of uniforms in (0, 1).
    """
    u = _uniforms(rng, size)
    x = np.asarray(x, dtype=np.float64)
    eta = model.eta(x[None, :] if x.ndim == 1 else x, j)
    return model.ppf_eta(u, eta if np.ndim(u) else eta[0])


def sample_conditional_max(model, x, paid_to_date: float, j_ref, rng, size=None):
    """``max(paid_to_date, D)`` with ``D`` a fresh severity draw at ``j_ref``."""
    if paid_to_date < 0:
        raise DomainError("paid_to_date must be >= 0")
    d = sample_severity(model, x, j_ref, rng, size)
    out = np.maximum(paid_to_date, d)
    assert np.all(out >= paid_to_date)
    return out
