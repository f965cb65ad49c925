"""Synthetic portfolios from known parameters.

The generator is written independently of the fitting and simulation code:
it evaluates its own softmax over the reachable patterns and draws
severities through ``scipy.stats``.  Each claim uses its own counter-based
stream, so a portfolio is a pure function of ``(truth, n_claims, seed)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .bundle import FittedModelBundle, PeriodBuckets
from .domain import Portfolio, censor, dec31, mask_bits, n_patterns, year_of
from .errors import ConfigurationError
from .glm import FittedBernoulli, FittedMultinomial
from .ingestion import CategoricalFactor, ContinuousFactor, CovariateSchema
from .rng import StreamFamily
from .severity import FittedSeverity

DEFAULT_COVERAGES = ("AB", "BI", "VD", "LoU")

# observed first-year pattern frequencies (percent), coverage order AB, BI, VD, LoU;
# keys are masks with AB as the most significant bit
FIRST_YEAR_FREQ = {
    2: 42.95, 3: 42.72, 10: 4.98, 7: 1.99, 8: 1.44, 6: 1.24, 11: 1.07, 1: 1.04,
    15: 1.01, 4: 0.61, 14: 0.43, 12: 0.38, 9: 0.10, 5: 0.04, 13: 0.01,
}
PAYMENT_RATES = {
    1: (0.5155, 0.3484, 0.8203, 0.7070),
    2: (0.3578, 0.2812, 0.1138, 0.0720),
}
MEAN_SEVERITY = (12386.0, 23271.0, 5040.0, 545.0)

# stream purposes used by the generator (disjoint from the simulation kinds)
_K_COV, _K_DATES, _K_PATTERN, _K_PAY, _K_SEV, _K_CLOSE, _K_TERM = 8, 9, 10, 11, 12, 13, 14


def _p(j: int, kind: int) -> int:
    return 16 * j + kind


def first_year_probabilities() -> np.ndarray:
    """First-year pattern probabilities indexed by mask - 1, normalized to 1."""
    p = np.array([FIRST_YEAR_FREQ[v] for v in range(1, 16)], dtype=np.float64)
    return p / p.sum()


# --- ground truth -----------------------------------------------------------------

@dataclass(frozen=True)
class CovariateDistribution:
    """Independent covariates: categorical level probabilities, gamma-distributed continuous."""

    categorical: Mapping[str, tuple[tuple[str, ...], tuple[float, ...]]]
    continuous: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        for name, (levels, probs) in self.categorical.items():
            if len(levels) != len(probs) or len(levels) < 2:
                raise ConfigurationError(f"covariate {name}: levels and probabilities must match (>= 2 levels)")
            if any(p < 0 for p in probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
                raise ConfigurationError(f"covariate {name}: probabilities must sum to 1")
        for name, (mean, sd) in self.continuous.items():
            if not (mean > 0 and sd > 0):
                raise ConfigurationError(f"covariate {name}: need positive mean and sd")

    def schema(self, coverages: Sequence[str]) -> CovariateSchema:
        factors = [CategoricalFactor(k, tuple(lv), lv[0]) for k, (lv, _) in self.categorical.items()]
        factors += [ContinuousFactor(k, float(m), float(s)) for k, (m, s) in self.continuous.items()]
        return CovariateSchema(tuple(coverages), tuple(factors))

    def to_dict(self) -> dict:
        return {
            "categorical": {k: {"levels": list(lv), "probs": list(p)} for k, (lv, p) in self.categorical.items()},
            "continuous": {k: {"mean": m, "sd": s} for k, (m, s) in self.continuous.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateDistribution":
        return cls(
            {k: (tuple(v["levels"]), tuple(v["probs"])) for k, v in d["categorical"].items()},
            {k: (float(v["mean"]), float(v["sd"])) for k, v in d.get("continuous", {}).items()},
        )


def default_covariates() -> CovariateDistribution:
    return CovariateDistribution(
        categorical={
            "gender": (("M", "F"), (0.55, 0.45)),
            "yob": (("1960", "1950", "1970", "1980", "1990"), (0.25, 0.15, 0.25, 0.2, 0.15)),
            "vu": (("P", "C"), (0.7, 0.3)),
            "prov": (("ON", "QC", "AB", "NS"), (0.45, 0.3, 0.15, 0.1)),
            "fr": (("0", "1", "2"), (0.7, 0.2, 0.1)),
        },
        continuous={"am": (15000.0, 5000.0)},
    )


@dataclass(frozen=True)
class SeverityTruth:
    """Severity law with ``eta = x'alpha + alpha_star * j`` and natural-scale shapes."""

    family: str
    alpha: tuple[float, ...]
    alpha_star: float
    shapes: tuple[float, ...]

    _N_SHAPES = {"lognormal": 1, "gamma": 1, "pareto": 1, "gb2": 3, "weibull": 1}

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "shapes", tuple(float(s) for s in self.shapes))
        if self.family not in self._N_SHAPES:
            raise ConfigurationError(f"unknown severity family {self.family!r}")
        if len(self.shapes) != self._N_SHAPES[self.family] or any(s <= 0 for s in self.shapes):
            raise ConfigurationError(f"{self.family}: invalid shape parameters {self.shapes}")
        if self.family == "pareto" and self.shapes[0] <= 1:
            raise ConfigurationError("pareto truth needs a finite mean (theta > 1)")
        if self.family == "gb2" and self.shapes[0] * self.shapes[2] <= 1:
            raise ConfigurationError("gb2 truth needs a finite mean (a * q > 1)")

    def dist(self, eta):
        """Frozen ``scipy.stats`` distribution at linear predictor(s) ``eta``."""
        scale = np.exp(eta)
        s = self.shapes
        if self.family == "lognormal":
            return stats.lognorm(s=s[0], scale=scale)
        if self.family == "gamma":
            return stats.gamma(a=s[0], scale=scale / s[0])
        if self.family == "pareto":
            return stats.lomax(c=s[0], scale=scale)
        if self.family == "weibull":
            return stats.weibull_min(c=s[0], scale=scale)
        raise ConfigurationError("use sample() for gb2")

    def sample(self, u, eta) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if self.family == "gb2":
            a, p, q = self.shapes
            z = stats.betaprime(p, q).ppf(u)
            return np.exp(eta) * z ** (1.0 / a)
        return self.dist(eta).ppf(u)

    def mean(self, eta) -> np.ndarray:
        if self.family == "gb2":
            a, p, q = self.shapes
            return np.exp(eta + math.lgamma(p + 1 / a) + math.lgamma(q - 1 / a) - math.lgamma(p) - math.lgamma(q))
        return self.dist(eta).mean()

    def to_dict(self) -> dict:
        return {"family": self.family, "alpha": list(self.alpha), "alpha_star": self.alpha_star, "shapes": list(self.shapes)}

    @classmethod
    def from_dict(cls, d: dict) -> "SeverityTruth":
        return cls(d["family"], tuple(d["alpha"]), float(d["alpha_star"]), tuple(d["shapes"]))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Complete data-generating process.

    ``beta[b]`` is a ``(V, m)`` matrix of pattern logits per bucket (row
    ``v - 1``; a ``-inf`` intercept makes a pattern impossible).
    ``gamma[b]`` is ``(C, m)``; ``severity[b][c]`` a :class:`SeverityTruth`.
    """

    coverages: tuple[str, ...]
    covariates: CovariateDistribution
    beta: tuple
    gamma: tuple
    severity: tuple
    buckets: tuple[int, ...] = (1, 2)
    report_delay: tuple[float, ...] = (0.75, 0.2, 0.05)
    occurrence_years: tuple[int, ...] = (2014, 2015, 2016, 2017)
    occurrence_weights: tuple[float, ...] | None = None
    p_close: float = 0.7
    j_star: int = 3
    horizon: int = 10

    def __post_init__(self):
        set_ = object.__setattr__
        C = len(self.coverages)
        V = n_patterns(C)
        m = self.schema.n_columns
        set_(self, "beta", tuple(np.asarray(b, dtype=np.float64).reshape(V, m) for b in self.beta))
        set_(self, "gamma", tuple(np.asarray(g, dtype=np.float64).reshape(C, m) for g in self.gamma))
        set_(self, "severity", tuple(tuple(r) for r in self.severity))
        B = len(self.buckets)
        if self.buckets[0] != 1 or list(self.buckets) != sorted(set(self.buckets)):
            raise ConfigurationError("buckets must start at 1 and increase")
        if len(self.beta) != B or len(self.gamma) != B or len(self.severity) != B:
            raise ConfigurationError("one parameter set per bucket required")
        for b in range(B):
            if not np.any(np.isfinite(self.beta[b][:, 0])):
                raise ConfigurationError("every pattern is impossible")
            if np.any(np.isnan(self.beta[b])) or not np.all(np.isfinite(self.gamma[b])):
                raise ConfigurationError("invalid coefficients")
            if len(self.severity[b]) != C:
                raise ConfigurationError("one severity law per coverage required")
            for s in self.severity[b]:
                if len(s.alpha) != m:
                    raise ConfigurationError("severity alpha has wrong length")
        if any(p < 0 for p in self.report_delay) or not math.isclose(sum(self.report_delay), 1.0, abs_tol=1e-9):
            raise ConfigurationError("report-delay probabilities must sum to 1")
        w = self.occurrence_weights or tuple(1.0 / len(self.occurrence_years) for _ in self.occurrence_years)
        if len(w) != len(self.occurrence_years) or not math.isclose(sum(w), 1.0, abs_tol=1e-9) or any(x < 0 for x in w):
            raise ConfigurationError("occurrence weights must match the years and sum to 1")
        set_(self, "occurrence_weights", tuple(float(x) for x in w))
        if not 0 <= self.p_close <= 1:
            raise ConfigurationError("p_close must lie in [0, 1]")
        if self.j_star < 2 or self.horizon < 1:
            raise ConfigurationError("need j_star >= 2 and horizon >= 1")

    @property
    def schema(self) -> CovariateSchema:
        return self.covariates.schema(self.coverages)

    @property
    def n_coverages(self) -> int:
        return len(self.coverages)

    def bucket(self, j: int) -> int:
        return int(np.searchsorted(self.buckets, j, side="right") - 1)

    def to_dict(self) -> dict:
        def arr(a):
            return [[None if not np.isfinite(x) else float(x) for x in row] for row in a]

        return {
            "coverages": list(self.coverages),
            "covariates": self.covariates.to_dict(),
            "schema": self.schema.to_dict(),
            "buckets": list(self.buckets),
            "beta": [arr(b) for b in self.beta],
            "gamma": [g.tolist() for g in self.gamma],
            "severity": [[s.to_dict() for s in row] for row in self.severity],
            "report_delay": list(self.report_delay),
            "occurrence_years": list(self.occurrence_years),
            "occurrence_weights": list(self.occurrence_weights),
            "p_close": self.p_close,
            "j_star": self.j_star,
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        def arr(a):
            return np.array([[-np.inf if x is None else x for x in row] for row in a], dtype=np.float64)

        return cls(
            coverages=tuple(d["coverages"]),
            covariates=CovariateDistribution.from_dict(d["covariates"]),
            beta=tuple(arr(b) for b in d["beta"]),
            gamma=tuple(np.array(g) for g in d["gamma"]),
            severity=tuple(tuple(SeverityTruth.from_dict(s) for s in row) for row in d["severity"]),
            buckets=tuple(d["buckets"]),
            report_delay=tuple(d["report_delay"]),
            occurrence_years=tuple(d["occurrence_years"]),
            occurrence_weights=tuple(d["occurrence_weights"]),
            p_close=float(d["p_close"]),
            j_star=int(d["j_star"]),
            horizon=int(d["horizon"]),
        )


def default_truth(
    *,
    covariate_effects: bool = True,
    j_star: int = 3,
    p_close: float = 0.7,
    families: Sequence[str] = ("lognormal", "pareto", "gamma", "weibull"),
    alpha_star: float = 0.1,
    effect_scale: float = 0.15,
    effect_seed: int = 2024,
    occurrence_years: Sequence[int] = (2014, 2015, 2016, 2017),
    report_delay: Sequence[float] = (0.75, 0.2, 0.05),
    horizon: int = 10,
) -> GroundTruth:
    """Four-coverage truth calibrated to the published frequencies and rates.

    First-year pattern intercepts reproduce the observed pattern frequencies,
    payment intercepts the observed payment rates and severity intercepts the
    observed mean amounts (at the reference profile).  Covariate effects are
    small fixed draws from ``N(0, effect_scale^2)``.
    """
    cov = default_covariates()
    C = len(DEFAULT_COVERAGES)
    V = n_patterns(C)
    schema = cov.schema(DEFAULT_COVERAGES)
    m = schema.n_columns
    gen = np.random.default_rng(effect_seed)

    def effects(rows):
        e = gen.normal(0.0, effect_scale, size=(rows, m)) if covariate_effects else np.zeros((rows, m))
        e[:, 0] = 0.0
        return e

    freq = first_year_probabilities()
    beta1 = effects(V)
    beta1[:, 0] = np.log(freq / freq[0])
    beta1[0, :] = 0.0
    # later years: adding k coverages costs 2.5 k on the logit scale
    size = mask_bits(np.arange(1, V + 1), C).sum(axis=1)
    beta2 = effects(V)
    beta2[:, 0] = -2.5 * (size - 1)
    beta2[0, :] = 0.0
    gammas = []
    for j in (1, 2):
        g = effects(C)
        rates = np.array(PAYMENT_RATES[j])
        g[:, 0] = np.log(rates / (1 - rates))
        gammas.append(g)
    shapes = {"lognormal": (1.2,), "gamma": (1.5,), "pareto": (2.5,), "weibull": (0.9,), "gb2": (2.5, 1.2, 1.8)}
    sev = []
    for b, star in ((0, 0.0), (1, alpha_star)):
        row = []
        for c, fam in enumerate(families):
            e = effects(1)[0] * 0.5
            base = SeverityTruth(fam, tuple(e), 0.0, shapes[fam])
            j_ref = 1 if b == 0 else 2
            shift = math.log(MEAN_SEVERITY[c]) - float(np.log(base.mean(0.0))) - star * j_ref
            e[0] = shift
            row.append(SeverityTruth(fam, tuple(e), star, shapes[fam]))
        sev.append(tuple(row))
    return GroundTruth(
        coverages=DEFAULT_COVERAGES,
        covariates=cov,
        beta=(beta1, beta2),
        gamma=tuple(gammas),
        severity=tuple(sev),
        buckets=(1, 2),
        report_delay=tuple(report_delay),
        occurrence_years=tuple(occurrence_years),
        p_close=p_close,
        j_star=j_star,
        horizon=horizon,
    )


def comonotone_truth(p: float = 0.4, *, p_close: float = 0.0, j_star: int = 2) -> GroundTruth:
    """Three coverages: the third always active, the first two active together with probability ``p``."""
    cov = CovariateDistribution({"gender": (("M", "F"), (0.5, 0.5))})
    coverages = ("A", "B", "D")
    C, V = 3, 7
    m = cov.schema(coverages).n_columns
    beta1 = np.full((V, m), 0.0)
    beta1[:, 0] = -np.inf
    beta1[0, 0] = 0.0  # (0 0 1)
    beta1[6, 0] = math.log(p / (1 - p))  # (1 1 1)
    beta2 = np.zeros((V, m))
    beta2[1:, 0] = -np.inf  # no further activation
    gamma = np.zeros((C, m))
    gamma[:, 0] = 0.5
    sev = tuple(SeverityTruth("lognormal", (7.0,) + (0.0,) * (m - 1), 0.0, (1.0,)) for _ in range(C))
    return GroundTruth(
        coverages=coverages,
        covariates=cov,
        beta=(beta1, beta2),
        gamma=(gamma, gamma.copy()),
        severity=(sev, sev),
        p_close=p_close,
        j_star=j_star,
    )


# --- generation ------------------------------------------------------------------

def _design(truth: GroundTruth, covs: dict) -> np.ndarray:
    """Design matrix built directly from the truth's covariate distribution."""
    cols = [np.ones(len(next(iter(covs.values()))) if covs else 0)]
    for name, (levels, _) in truth.covariates.categorical.items():
        vals = covs[name]
        for lvl in levels[1:]:
            cols.append((vals == lvl).astype(np.float64))
    for name, (mean, sd) in truth.covariates.continuous.items():
        cols.append((covs[name] - mean) / sd)
    return np.column_stack(cols)


def _draw_patterns(logits: np.ndarray, prev: np.ndarray, u: np.ndarray, C: int) -> np.ndarray:
    V = logits.shape[1]
    masks = np.arange(1, V + 1)
    ok = (masks[None, :] & prev[:, None]) == prev[:, None]
    z = np.where(ok, logits, -np.inf)
    top = z.max(axis=1, keepdims=True)
    stay = ~np.isfinite(top[:, 0])  # no reachable pattern has positive probability
    top[stay] = 0.0
    w = np.exp(z - top)
    w[stay] = 0.0
    w[stay, np.maximum(prev[stay] - 1, 0)] = 1.0
    cdf = np.cumsum(w, axis=1)
    cdf /= cdf[:, -1:]
    pick = np.minimum((u[:, None] > cdf).sum(axis=1), V - 1)
    # never land on a zero-probability pattern through rounding
    while True:
        bad = w[np.arange(len(pick)), pick] == 0
        if not bad.any():
            break
        pick[bad] -= 1
    return masks[pick]


def generate_portfolio(truth: GroundTruth, n_claims: int, seed: int) -> Portfolio:
    """Fully developed claims drawn from ``truth``.

    Each claim rolls the activation, payment and severity process forward
    from its reporting year: year-by-year while ``j < j*`` (closing after a
    year without payments with probability ``p_close``), then one closing
    payment ``max(paid, D) - paid`` per active coverage in year ``j*``.
    """
    if n_claims < 1:
        raise ConfigurationError("n_claims must be >= 1")
    C = truth.n_coverages
    V = n_patterns(C)
    fam = StreamFamily(seed)
    ids = np.arange(n_claims, dtype=np.uint64)

    # covariates
    names_cat = list(truth.covariates.categorical)
    names_con = list(truth.covariates.continuous)
    u = fam.uniforms(0, ids, _p(0, _K_COV), max(len(names_cat) + len(names_con), 1))
    covs = {}
    for k, name in enumerate(names_cat):
        levels, probs = truth.covariates.categorical[name]
        idx = np.minimum(np.searchsorted(np.cumsum(probs), u[:, k], side="right"), len(levels) - 1)
        covs[name] = np.asarray(levels)[idx]
    for k, name in enumerate(names_con):
        mean, sd = truth.covariates.continuous[name]
        shape = (mean / sd) ** 2
        covs[name] = stats.gamma(a=shape, scale=mean / shape).ppf(u[:, len(names_cat) + k])
    X = _design(truth, covs)

    # dates
    u = fam.uniforms(0, ids, _p(0, _K_DATES), 4)
    years = np.asarray(truth.occurrence_years)
    occ_year = years[np.minimum(np.searchsorted(np.cumsum(truth.occurrence_weights), u[:, 0], side="right"), len(years) - 1)]
    start = dec31(occ_year - 1) + 1
    length = (dec31(occ_year) - start).astype(np.int64) + 1
    occurrence = start + (u[:, 1] * length).astype(np.int64)
    delay = np.minimum(np.searchsorted(np.cumsum(truth.report_delay), u[:, 2], side="right"), len(truth.report_delay) - 1)
    rep_year = occ_year + delay
    rstart = np.where(delay == 0, occurrence, dec31(rep_year - 1) + 1)
    rlen = (dec31(rep_year) - rstart).astype(np.int64) + 1
    report = rstart + (u[:, 3] * rlen).astype(np.int64)

    # development
    prev = np.zeros(n_claims, dtype=np.int64)
    cum = np.zeros((n_claims, C), dtype=np.int64)
    alive = np.ones(n_claims, dtype=bool)
    settle_year = np.full(n_claims, -1, dtype=np.int64)
    rows = []  # (claim idx, j, activation, payments, cents)
    last_markov = min(truth.j_star - 1, truth.horizon)
    bits_of = mask_bits(np.arange(V + 1), C)
    weights = 1 << np.arange(C - 1, -1, -1)
    for j in range(1, last_markov + 1):
        i = np.flatnonzero(alive)
        if not i.size:
            break
        b = truth.bucket(j)
        up = fam.uniforms(0, ids[i], _p(j, _K_PATTERN), 1)[:, 0]
        logits = X[i] @ truth.beta[b].T
        pattern = _draw_patterns(logits, prev[i], up, C)
        act = bits_of[pattern]
        pi = 1.0 / (1.0 + np.exp(-(X[i] @ truth.gamma[b].T)))
        upay = fam.uniforms(0, ids[i], _p(j, _K_PAY), C)
        paid = act & (upay < pi)
        usev = fam.uniforms(0, ids[i], _p(j, _K_SEV), C)
        cents = np.zeros((i.size, C), dtype=np.int64)
        for c in range(C):
            sel = paid[:, c]
            if sel.any():
                law = truth.severity[b][c]
                eta = X[i[sel]] @ np.asarray(law.alpha) + law.alpha_star * j
                y = law.sample(usev[sel, c], eta)
                cents[sel, c] = np.maximum(np.rint(np.minimum(y, 1e13) * 100), 1).astype(np.int64)
        pay_mask = paid.astype(np.int64) @ weights
        rows.append((i, np.full(i.size, j), pattern, pay_mask, cents))
        prev[i] = pattern
        cum[i] += cents
        no_pay = pay_mask == 0
        uc = fam.uniforms(0, ids[i], _p(j, _K_CLOSE), 1)[:, 0]
        close = no_pay & (uc < truth.p_close)
        settle_year[i[close]] = j
        alive[i[close]] = False
    if truth.j_star <= truth.horizon:
        i = np.flatnonzero(alive)
        j = truth.j_star
        b = truth.bucket(j)
        act = bits_of[prev[i]]
        ut = fam.uniforms(0, ids[i], _p(j, _K_TERM), C)
        cents = np.zeros((i.size, C), dtype=np.int64)
        for c in range(C):
            sel = act[:, c]
            if sel.any():
                law = truth.severity[b][c]
                eta = X[i[sel]] @ np.asarray(law.alpha) + law.alpha_star * j
                d = np.maximum(np.rint(np.minimum(law.sample(ut[sel, c], eta), 1e13) * 100), 1).astype(np.int64)
                cents[sel, c] = np.maximum(d - cum[i[sel], c], 0)
        pay_mask = (cents > 0).astype(np.int64) @ weights
        rows.append((i, np.full(i.size, j), prev[i].copy(), pay_mask, cents))
        settle_year[i] = j
    else:
        settle_year[alive] = last_markov

    claim = np.concatenate([r[0] for r in rows])
    dev = np.concatenate([r[1] for r in rows])
    order = np.lexsort((dev, claim))
    act = np.concatenate([r[2] for r in rows])[order]
    pay = np.concatenate([r[3] for r in rows])[order]
    amt = np.concatenate([r[4] for r in rows])[order] / 100.0
    settlement = dec31(year_of(report) + settle_year - 1)
    width = len(str(n_claims - 1))
    return Portfolio(
        coverages=truth.coverages,
        claim_id=np.array([f"S{k:0{width}d}" for k in range(n_claims)], dtype=object),
        occurrence=occurrence,
        report=report,
        settlement=settlement,
        covariates=covs,
        obs_claim=claim[order],
        obs_dev_year=dev[order],
        obs_activation=act,
        obs_payments=pay,
        obs_amounts=amt,
    )


# --- truncation ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HoldoutReserve:
    """Exact future payments at the evaluation date, in cents, by class and coverage."""

    coverages: tuple[str, ...]
    cents: np.ndarray  # (2, C): IBNR, RBNS

    @property
    def total(self) -> float:
        return int(self.cents.sum()) / 100.0

    @property
    def by_coverage(self) -> np.ndarray:
        return self.cents.sum(axis=0) / 100.0

    @property
    def by_class(self) -> np.ndarray:
        return self.cents.sum(axis=1) / 100.0

    def series(self) -> dict[str, float]:
        out = {"total": self.total}
        out.update({name: float(v) for name, v in zip(self.coverages, self.by_coverage)})
        out.update({"IBNR": float(self.by_class[0]), "RBNS": float(self.by_class[1])})
        return out

    def to_dict(self) -> dict:
        return {"coverages": list(self.coverages), "reserve": self.series(), "cents": self.cents.tolist()}


def truncate_at(portfolio: Portfolio, eval_date) -> tuple[Portfolio, HoldoutReserve]:
    """Split a developed portfolio into what is known at ``eval_date`` and the exact reserve.

    Claims occurring after ``eval_date`` belong to neither part.
    """
    eval_date = np.datetime64(eval_date, "D")
    in_scope = np.flatnonzero(portfolio.occurrence <= eval_date)
    scoped = portfolio.take(in_scope)
    observed = censor(scoped, eval_date)
    future = scoped.payment_dates() > eval_date
    cents = np.rint(scoped.obs_amounts * 100).astype(np.int64)
    cls = np.where(scoped.report[scoped.obs_claim] > eval_date, 0, 1)
    out = np.zeros((2, scoped.n_coverages), dtype=np.int64)
    for k in (0, 1):
        sel = future & (cls == k)
        out[k] = cents[sel].sum(axis=0)
    return observed, HoldoutReserve(portfolio.coverages, out)


def write_truth(truth: GroundTruth, path, holdout: HoldoutReserve | None = None, extra: dict | None = None) -> None:
    doc = {"truth": truth.to_dict()}
    if holdout is not None:
        doc["holdout"] = holdout.to_dict()
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def read_truth(path) -> GroundTruth:
    with open(path, encoding="utf-8") as fh:
        return GroundTruth.from_dict(json.load(fh)["truth"])


def truth_bundle(truth: GroundTruth):
    """The truth expressed as a :class:`FittedModelBundle` (an oracle for the engine)."""

    schema = truth.schema
    fp = schema.fingerprint()
    C = truth.n_coverages
    activation, payment, severity = [], [], []
    for b in range(len(truth.buckets)):
        lab = PeriodBuckets(truth.buckets).labels[b]
        beta = truth.beta[b]
        support = np.flatnonzero(np.isfinite(beta[:, 0])) + 1
        rel = beta[support[1:] - 1] - beta[support[0] - 1]
        activation.append(FittedMultinomial(lab, C, tuple(support), rel, schema_fingerprint=fp))
        payment.append(tuple(FittedBernoulli(lab, c, truth.gamma[b][c], schema_fingerprint=fp) for c in range(C)))
        severity.append(tuple(
            FittedSeverity(s.family, np.asarray(s.alpha), s.alpha_star, tuple(np.log(s.shapes)),
                           period=lab, coverage=c, schema_fingerprint=fp)
            for c, s in enumerate(truth.severity[b])
        ))
    return FittedModelBundle(
        coverages=truth.coverages,
        schema=schema,
        buckets=PeriodBuckets(truth.buckets),
        activation=tuple(activation),
        payment=tuple(payment),
        severity=tuple(severity),
        j_star=truth.j_star,
        horizon=truth.horizon,
        kind="truth",
    )
