"""Fitting every model slot from an observed portfolio."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .domain import DEFAULT_J_STAR, Portfolio, mask_bits, next_dev_year
from .errors import (
    ConfigurationError,
    DivergedError,
    InsufficientDataError,
    NoModelError,
)
from .glm import (
    FittedBernoulli,
    FittedMultinomial,
    IndependentActivation,
    KeepActivation,
    activation_from_dict,
    fit_bernoulli,
    fit_multinomial,
)
from .ingestion import CovariateSchema
from .severity import (
    FAMILY_ORDER,
    FittedSeverity,
    SeverityFamily,
    fit_families,
    information_criteria,
    select_family,
    severity_from_dict,
)

log = logging.getLogger(__name__)

DEFAULT_HORIZON = 10
FALLBACK_RIDGE = 1e-6


@dataclass(frozen=True)
class PeriodBuckets:
    """Development-year buckets given by their first years, e.g. ``(1, 2)``."""

    starts: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        starts = tuple(int(s) for s in self.starts)
        object.__setattr__(self, "starts", starts)
        if not starts or starts[0] != 1 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigurationError("period buckets must start at 1 and increase strictly")

    def __len__(self) -> int:
        return len(self.starts)

    def index(self, j):
        idx = np.searchsorted(self.starts, np.asarray(j), side="right") - 1
        return int(idx) if np.ndim(idx) == 0 else idx

    @property
    def labels(self) -> list[str]:
        out = []
        for k, s in enumerate(self.starts):
            if k + 1 < len(self.starts):
                e = self.starts[k + 1] - 1
                out.append(str(s) if e == s else f"{s}-{e}")
            else:
                out.append(f"{s}+" if k else str(s) if len(self.starts) > 1 else "1+")
        return out


@dataclass(frozen=True, eq=False)
class TrainingData:
    """Completed claim-years usable for fitting."""

    X: np.ndarray
    claim: np.ndarray
    dev_year: np.ndarray
    activation: np.ndarray
    prev: np.ndarray
    payments: np.ndarray
    amounts: np.ndarray
    n_coverages: int


def training_data(portfolio: Portfolio, schema: CovariateSchema, eval_date, j_star: int) -> TrainingData:
    """Claim-years completed by ``eval_date`` with development year below ``j_star``.

    Years from ``j_star`` on follow the stabilized-claim treatment and are
    not used to fit the year-by-year models.
    """
    if tuple(schema.coverages) != tuple(portfolio.coverages):
        raise ConfigurationError("schema coverages differ from the portfolio's")
    X = schema.encode_matrix(portfolio.covariates, portfolio.n_claims)
    eval_date = np.datetime64(eval_date, "D")
    jc = next_dev_year(portfolio.report, eval_date)
    reported = portfolio.report <= eval_date
    rows = np.flatnonzero(
        reported[portfolio.obs_claim]
        & (portfolio.obs_dev_year < jc[portfolio.obs_claim])
        & (portfolio.obs_dev_year < j_star)
    )
    prev_all = np.r_[0, portfolio.obs_activation[:-1]]
    prev_all = np.where(portfolio.obs_dev_year == 1, 0, prev_all)
    return TrainingData(
        X=X,
        claim=portfolio.obs_claim[rows],
        dev_year=portfolio.obs_dev_year[rows],
        activation=portfolio.obs_activation[rows],
        prev=prev_all[rows],
        payments=portfolio.obs_payments[rows],
        amounts=portfolio.obs_amounts[rows],
        n_coverages=portfolio.n_coverages,
    )


@dataclass(frozen=True, eq=False)
class FittedModelBundle:
    """Every fitted slot needed to simulate claims.

    ``activation[b]``, ``payment[b][c]`` and ``severity[b][c]`` hold the
    models of period bucket ``b`` and coverage ``c``.  A severity slot is
    ``None`` only when the coverage is never paid.
    """

    coverages: tuple[str, ...]
    schema: CovariateSchema
    buckets: PeriodBuckets
    activation: tuple
    payment: tuple
    severity: tuple
    j_star: int = DEFAULT_J_STAR
    horizon: int = DEFAULT_HORIZON
    kind: str = "pattern"
    selection: tuple = field(default=(), repr=False)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "coverages", tuple(self.coverages))
        set_(self, "activation", tuple(self.activation))
        set_(self, "payment", tuple(tuple(r) for r in self.payment))
        set_(self, "severity", tuple(tuple(r) for r in self.severity))
        B, C = len(self.buckets), len(self.coverages)
        if self.j_star < 2 or self.horizon < 1:
            # with j* = 1 an unreported claim would freeze before activating anything
            raise ConfigurationError("need j_star >= 2 and horizon >= 1")
        if len(self.activation) != B or len(self.payment) != B or len(self.severity) != B:
            raise ConfigurationError("one model set per period bucket required")
        if any(len(r) != C for r in self.payment) or any(len(r) != C for r in self.severity):
            raise ConfigurationError("one payment and severity slot per coverage required")
        fp = self.schema.fingerprint()
        for mod in self._models():
            own = getattr(mod, "schema_fingerprint", None)
            if own is not None and own != fp:
                raise ConfigurationError("sub-model fitted under a different covariate schema")
        m = self.schema.n_columns
        for mod in self._models():
            width = getattr(mod, "m", None)
            if width is not None and width != m and not (isinstance(mod, FittedMultinomial) and mod.beta.shape[0] == 0):
                raise ConfigurationError(f"sub-model expects {width} covariates, schema has {m}")

    def _models(self):
        for b in range(len(self.buckets)):
            a = self.activation[b]
            yield a
            if isinstance(a, IndependentActivation):
                yield from a.models
            yield from self.payment[b]
            yield from (s for s in self.severity[b] if s is not None)

    @property
    def n_coverages(self) -> int:
        return len(self.coverages)

    def encode(self, portfolio: Portfolio) -> np.ndarray:
        return self.schema.encode_matrix(portfolio.covariates, portfolio.n_claims)

    def to_dict(self) -> dict:
        return {
            "format": "covreserve-bundle/1",
            "kind": self.kind,
            "coverages": list(self.coverages),
            "patterns": "ascending mask value, first coverage = most significant bit",
            "schema": self.schema.to_dict(),
            "schema_fingerprint": self.schema.fingerprint(),
            "buckets": list(self.buckets.starts),
            "bucket_labels": self.buckets.labels,
            "j_star": self.j_star,
            "horizon": self.horizon,
            "activation": [a.to_dict() for a in self.activation],
            "payment": [[p.to_dict() for p in row] for row in self.payment],
            "severity": [[None if s is None else s.to_dict() for s in row] for row in self.severity],
            "selection": list(self.selection),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModelBundle":
        schema = CovariateSchema.from_dict(d["schema"])
        if d.get("schema_fingerprint") not in (None, schema.fingerprint()):
            raise ConfigurationError("bundle schema fingerprint mismatch")
        return cls(
            coverages=tuple(d["coverages"]),
            schema=schema,
            buckets=PeriodBuckets(tuple(d["buckets"])),
            activation=tuple(activation_from_dict(a) for a in d["activation"]),
            payment=tuple(tuple(FittedBernoulli.from_dict(p) for p in row) for row in d["payment"]),
            severity=tuple(tuple(None if s is None else severity_from_dict(s) for s in row) for row in d["severity"]),
            j_star=int(d["j_star"]),
            horizon=int(d["horizon"]),
            kind=d.get("kind", "pattern"),
            selection=tuple(d.get("selection", ())),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, allow_nan=False)

    @classmethod
    def load(cls, path) -> "FittedModelBundle":
        if not os.path.exists(path):
            raise FileNotFoundError(f"model bundle not found: {path}")
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def convergence_report(self) -> list[dict]:
        out = []
        labels = self.buckets.labels
        for b, lab in enumerate(labels):
            a = self.activation[b]
            subs = [("activation", c, mod) for c, mod in enumerate(a.models)] if isinstance(
                a, IndependentActivation
            ) else [("activation", None, a)]
            subs += [("payment", c, p) for c, p in enumerate(self.payment[b])]
            subs += [("severity", c, s) for c, s in enumerate(self.severity[b]) if isinstance(s, FittedSeverity)]
            for part, c, mod in subs:
                rep = mod.convergence
                out.append({
                    "period": lab,
                    "model": part,
                    "coverage": None if c is None else self.coverages[c],
                    **(rep.to_dict() if rep is not None else {}),
                })
        return out


# --- fitting --------------------------------------------------------------------

def _fit_multinomial_slot(X, y, C, prev, ridge, period, fp):
    try:
        return fit_multinomial(X, y, C, prev=prev, ridge=ridge, period=period, allow_degenerate=True, schema_fingerprint=fp)
    except DivergedError:
        if ridge > 0:
            raise
        log.warning("activation model for period %s did not converge; refitting with ridge %g", period, FALLBACK_RIDGE)
        return fit_multinomial(X, y, C, prev=prev, ridge=FALLBACK_RIDGE, period=period, allow_degenerate=True, schema_fingerprint=fp)


def _fit_bernoulli_slot(X, y, ridge, period, c, fp):
    try:
        return fit_bernoulli(X, y, ridge=ridge, period=period, coverage=c, allow_degenerate=True, schema_fingerprint=fp)
    except DivergedError:
        if ridge > 0:
            raise
        log.warning("payment model %s/%d did not converge; refitting with ridge %g", period, c, FALLBACK_RIDGE)
        return fit_bernoulli(X, y, ridge=FALLBACK_RIDGE, period=period, coverage=c, allow_degenerate=True, schema_fingerprint=fp)


def _fit_payment_and_severity(data, buckets, schema, ridge, families, criterion, fixed_severity):
    C = data.n_coverages
    fp = schema.fingerprint()
    labels = buckets.labels
    bidx = buckets.index(data.dev_year)
    act_bits = mask_bits(data.activation, C)
    pay_bits = mask_bits(data.payments, C)
    payment, severity, selection = [], [], []
    for b, lab in enumerate(labels):
        rows_b = bidx == b
        pay_row, sev_row = [], []
        for c in range(C):
            r = rows_b & act_bits[:, c]
            pay_row.append(_fit_bernoulli_slot(data.X[data.claim[r]], pay_bits[r, c], ridge, lab, c, fp))
            s = rows_b & (data.amounts[:, c] > 0)
            if fixed_severity is not None:
                sev_row.append(fixed_severity[b][c])
                continue
            Xs, js, ys = data.X[data.claim[s]], data.dev_year[s], data.amounts[s, c]
            try:
                fits = fit_families(Xs, js, ys, families, period=lab, coverage=c, schema_fingerprint=fp)
            except InsufficientDataError:
                sev_row.append(None)
                selection.append({"period": lab, "coverage": schema.coverages[c], "n": int(s.sum()), "status": "insufficient-data"})
                continue
            try:
                best = select_family(fits, criterion)
            except NoModelError:
                best = None
            for fam, fit in fits.items():
                row = {"period": lab, "coverage": schema.coverages[c], "family": fam.value, "n": int(s.sum())}
                if isinstance(fit, FittedSeverity):
                    aic, bic = information_criteria(fit)
                    row.update(loglik=fit.loglik, k=fit.n_params, aic=aic, bic=bic, status="ok", selected=fam == best)
                else:
                    row.update(status=getattr(fit, "code", "error"), message=str(fit), selected=False)
                selection.append(row)
            sev_row.append(fits[best] if best is not None else None)
        payment.append(tuple(pay_row))
        severity.append(sev_row)
    # borrow a neighbouring bucket's severity when a slot had too little data
    B = len(labels)
    for c in range(C):
        for b in range(B):
            if severity[b][c] is None:
                for other in sorted(range(B), key=lambda o: (abs(o - b), -o)):
                    if severity[other][c] is not None:
                        severity[b][c] = severity[other][c]
                        break
        if all(severity[b][c] is None for b in range(B)):
            pays = any(
                payment[b][c].constant is None or payment[b][c].constant > 0 for b in range(B)
            )
            if pays:
                raise NoModelError(f"no severity model could be fitted for coverage {schema.coverages[c]}")
    return tuple(payment), tuple(tuple(r) for r in severity), tuple(selection)


def fit_bundle(
    portfolio: Portfolio,
    schema: CovariateSchema,
    eval_date,
    *,
    j_star: int = DEFAULT_J_STAR,
    horizon: int = DEFAULT_HORIZON,
    buckets: Sequence[int] | PeriodBuckets = (1, 2),
    families: Sequence[SeverityFamily | str] = FAMILY_ORDER,
    criterion: str = "AIC",
    ridge: float = 0.0,
    fixed_severity=None,
) -> FittedModelBundle:
    """Fit the activation-pattern model on the claims observed at ``eval_date``."""
    if not isinstance(buckets, PeriodBuckets):
        buckets = PeriodBuckets(tuple(buckets))
    data = training_data(portfolio, schema, eval_date, j_star)
    C = portfolio.n_coverages
    fp = schema.fingerprint()
    bidx = buckets.index(data.dev_year)
    activation = []
    for b, lab in enumerate(buckets.labels):
        r = bidx == b
        prev = None if b == 0 and buckets.starts[0] == 1 and np.all(data.prev[r] == 0) else data.prev[r]
        if not r.any():
            # nothing observed: keep the current pattern
            activation.append(KeepActivation(lab, C, schema_fingerprint=fp))
            continue
        activation.append(_fit_multinomial_slot(data.X[data.claim[r]], data.activation[r], C, prev, ridge, lab, fp))
    payment, severity, selection = _fit_payment_and_severity(
        data, buckets, schema, ridge, families, criterion, fixed_severity
    )
    return FittedModelBundle(
        coverages=portfolio.coverages,
        schema=schema,
        buckets=buckets,
        activation=tuple(activation),
        payment=payment,
        severity=severity,
        j_star=j_star,
        horizon=horizon,
        kind="pattern",
        selection=selection,
    )


def fit_independence_bundle(
    portfolio: Portfolio,
    schema: CovariateSchema,
    eval_date,
    *,
    j_star: int = DEFAULT_J_STAR,
    horizon: int = DEFAULT_HORIZON,
    buckets: Sequence[int] | PeriodBuckets = (1, 2),
    families: Sequence[SeverityFamily | str] = FAMILY_ORDER,
    criterion: str = "AIC",
    ridge: float = 0.0,
    fixed_severity=None,
    reuse: FittedModelBundle | None = None,
) -> FittedModelBundle:
    """Same slots as :func:`fit_bundle` with per-coverage activation regressions.

    In later years each coverage's activation is fitted on the claim-years
    where it was still inactive the year before.  ``reuse`` shares the
    payment and severity fits of an existing bundle.
    """
    if not isinstance(buckets, PeriodBuckets):
        buckets = PeriodBuckets(tuple(buckets))
    data = training_data(portfolio, schema, eval_date, j_star)
    C = portfolio.n_coverages
    fp = schema.fingerprint()
    bidx = buckets.index(data.dev_year)
    act_bits = mask_bits(data.activation, C)
    prev_bits = mask_bits(data.prev, C)
    activation = []
    for b, lab in enumerate(buckets.labels):
        mods = []
        for c in range(C):
            r = (bidx == b) & ~prev_bits[:, c]
            mods.append(_fit_bernoulli_slot(data.X[data.claim[r]], act_bits[r, c], ridge, lab, c, fp))
        activation.append(IndependentActivation(lab, C, tuple(mods)))
    if reuse is not None:
        payment, severity, selection = reuse.payment, reuse.severity, reuse.selection
    else:
        payment, severity, selection = _fit_payment_and_severity(
            data, buckets, schema, ridge, families, criterion, fixed_severity
        )
    return FittedModelBundle(
        coverages=portfolio.coverages,
        schema=schema,
        buckets=buckets,
        activation=tuple(activation),
        payment=payment,
        severity=severity,
        j_star=j_star,
        horizon=horizon,
        kind="independence",
        selection=selection,
    )


# --- estimation risk --------------------------------------------------------------

PARAM_ORDINAL_BASE = 1 << 42
KIND_PARAMETER = 6
_MAX_REDRAWS = 20
# coefficients with a larger standard error come from (quasi-)separated fits,
# where the normal approximation is meaningless; they keep their estimate
SE_LIMIT = 10.0
Z_LIMIT = 3.0


def _normal_draw(cov: np.ndarray, source, draw: int, ordinal: int) -> np.ndarray:
    """``L z`` with ``L L' = cov`` (negative eigenvalues clipped) and ``z`` from the stream."""
    w, Q = np.linalg.eigh(0.5 * (cov + cov.T))
    u = source.uniforms(np.int64(draw), np.uint64(ordinal), KIND_PARAMETER, cov.shape[0])
    # truncated at 3 sd so that no draw lands on the edge of the parameter space
    z = np.clip(ndtri(np.clip(u, 1e-300, 1 - 2.0**-53)), -Z_LIMIT, Z_LIMIT)
    return Q @ (np.sqrt(np.clip(w, 0.0, None)) * z)


def _perturb(mod, source, draw: int, ordinal: int):
    cov = getattr(mod, "covariance", None)
    if isinstance(mod, IndependentActivation):
        models = tuple(_perturb(m, source, draw, ordinal * 16 + k) for k, m in enumerate(mod.models))
        return dataclasses.replace(mod, models=models)
    if cov is None:
        return mod
    if not isinstance(mod, FittedMultinomial) and np.sqrt(np.clip(np.diag(cov), 0, None)).max() > SE_LIMIT:
        return mod
    if isinstance(mod, FittedMultinomial):
        if mod.beta.size == 0:
            return mod
        shift = _normal_draw(cov, source, draw, ordinal).reshape(mod.beta.shape)
        wild = np.sqrt(np.clip(np.diag(cov), 0, None)).reshape(mod.beta.shape).max(axis=1) > SE_LIMIT
        shift[wild] = 0.0
        return dataclasses.replace(mod, beta=mod.beta + shift)
    if isinstance(mod, FittedBernoulli):
        if mod.constant is not None:
            return mod
        return dataclasses.replace(mod, gamma=mod.gamma + _normal_draw(cov, source, draw, ordinal))
    if isinstance(mod, FittedSeverity):
        theta0 = mod.param_vector()
        m = mod.alpha.shape[0]
        ns = mod.kernel.n_shape
        log_mean0, w = _log_mean_gradient(mod, cov.shape[0])
        for k in range(_MAX_REDRAWS):
            delta = _normal_draw(cov, source, draw, ordinal + k * (1 << 20))
            theta = theta0 + delta
            log_shapes = theta[len(theta) - ns:]
            shapes = tuple(np.exp(log_shapes))
            if not (np.all(np.isfinite(theta)) and mod.kernel.finite_mean(shapes)):
                continue
            # the reference log mean is much closer to normal than the raw
            # shapes are: pin it to its linearized draw through the intercept
            theta[0] += log_mean0 + w @ delta - theta[0] - _log_mean_factor(mod, shapes)
            star = mod.alpha_star if mod.alpha_star_fixed else float(theta[m])
            return dataclasses.replace(mod, alpha=theta[:m], alpha_star=star, log_shapes=tuple(log_shapes))
        return mod
    return mod


def _log_mean_factor(mod, shapes) -> float:
    with np.errstate(divide="ignore", over="ignore"):
        return float(np.log(mod.kernel.mean(np.zeros(1), tuple(shapes))[0]))


def _log_mean_gradient(mod, d: int):
    """Log mean at the reference profile and its gradient in the parameter vector."""
    ns = mod.kernel.n_shape
    log_shapes = np.asarray(mod.log_shapes)
    w = np.zeros(d)
    w[0] = 1.0
    h = 1e-6
    for i in range(ns):
        up, dn = log_shapes.copy(), log_shapes.copy()
        up[i] += h
        dn[i] -= h
        w[d - ns + i] = (_log_mean_factor(mod, np.exp(up)) - _log_mean_factor(mod, np.exp(dn))) / (2 * h)
    return mod.alpha[0] + _log_mean_factor(mod, np.exp(log_shapes)), w


def perturb_bundle(bundle: FittedModelBundle, source, draw: int) -> FittedModelBundle:
    """One draw of every fitted coefficient from its asymptotic normal law.

    Each sub-model with a covariance estimate is shifted by ``N(0, cov)``.
    Severity draws implying an infinite mean are redrawn, and the severity
    intercept is reset so the reference log mean moves by exactly its
    linearized shift.  Degenerate and point-mass slots are left as fitted.
    The draw is a pure function of ``(source, draw)``.
    """
    B = len(bundle.buckets)
    C = bundle.n_coverages
    base = PARAM_ORDINAL_BASE
    activation = tuple(_perturb(bundle.activation[b], source, draw, base + b * 64) for b in range(B))
    payment = tuple(
        tuple(_perturb(bundle.payment[b][c], source, draw, base + b * 64 + 16 + c) for c in range(C)) for b in range(B)
    )
    severity = tuple(
        tuple(
            None if s is None else _perturb(s, source, draw, base + b * 64 + 32 + c) for c, s in enumerate(bundle.severity[b])
        )
        for b in range(B)
    )
    return dataclasses.replace(bundle, activation=activation, payment=payment, severity=severity)
