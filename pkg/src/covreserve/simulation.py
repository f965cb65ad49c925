"""Monte Carlo reserve simulation for IBNR, RBNS and stabilized (RBNS+) claims.

A simulated claim moves through development years ``j0, j0 + 1, ...``:

* while ``j < j*`` (and ``j <= J``) it takes a Markov step: a new activation
  pattern drawn from the reachable patterns, payment flags for the active
  coverages and severities for the paid ones;
* at ``j_term = max(j*, j0)`` each active coverage receives its final
  cumulative amount ``max(paid so far, D)`` with ``D`` a severity draw at
  ``j_term``, after which the claim is closed.

All money is handled in integer cents so the accounting identities hold
exactly.  Uniform draws come from a source addressed by
``(replication, claim ordinal, purpose)``; the default is a
:class:`~covreserve.rng.StreamFamily`, which makes results independent of
chunking and worker count.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .bundle import FittedModelBundle, perturb_bundle
from .domain import (
    ClaimRecord,
    ClaimStatus,
    Portfolio,
    censor,
    classify_claim_status,
    classify_portfolio,
    dec31,
    mask_bits,
    n_patterns,
    next_dev_year,
    year_of,
)
from .errors import ConfigurationError, InvalidStatusError
from .ingestion import encode_covariates
from .rng import StreamFamily

log = logging.getLogger(__name__)

# draw purposes: purpose = 16 * dev_year + kind
KIND_PATTERN = 0
KIND_PAYMENT = 1
KIND_SEVERITY = 2
KIND_TERMINAL = 3
KIND_IBNR_COUNT = 4
KIND_IBNR_PROFILE = 5

IBNR_ORDINAL_BASE = 1 << 40
COUNT_ORDINAL_BASE = 1 << 41
MAX_CENTS = 10**15
CLASSES = ("IBNR", "RBNS")
_TAIL = 2.0**-53


def purpose(dev_year: int, kind: int) -> int:
    return 16 * int(dev_year) + kind


def _cents(amounts) -> np.ndarray:
    a = np.rint(np.asarray(amounts, dtype=np.float64) * 100.0)
    a = np.where(np.isfinite(a), a, MAX_CENTS)
    return np.clip(a, 0, MAX_CENTS).astype(np.int64)


# --- draw sources -----------------------------------------------------------------

class ForcedDraws:
    """Scripted uniforms for walkthroughs and tests.

    ``script`` maps ``(dev_year, kind)`` to a value or a sequence of values
    (one per coverage for payment/severity draws).  Unscripted draws return
    ``default``.
    """

    def __init__(self, script: Mapping[tuple[int, int], object] | None = None, default: float = 0.5):
        self.script = dict(script or {})
        self.default = float(default)

    def uniforms(self, replication, claim, purpose_code: int, n: int) -> np.ndarray:
        rep, clm = np.broadcast_arrays(np.asarray(replication), np.asarray(claim))
        key = (purpose_code // 16, purpose_code % 16)
        vals = np.asarray(self.script.get(key, self.default), dtype=np.float64).ravel()
        row = np.resize(vals, n) if vals.size else np.full(n, self.default)
        return np.broadcast_to(row, rep.shape + (n,)).copy()


class MeanSeverity:
    """Wraps a severity model so every draw returns its mean (test helper)."""

    def __init__(self, model):
        self.model = model

    def ppf_eta(self, u, eta):
        return np.broadcast_to(self.model.kernel.mean(np.asarray(eta), self.model.shapes), np.shape(u))


# --- engine -------------------------------------------------------------------------

@dataclass
class Units:
    """Claims to simulate, as columns.

    ``prof`` indexes rows of the profile design matrix and may vary by
    replication (shape ``(R, T)``) for bootstrapped IBNR covariates;
    ``active`` switches off unused IBNR slots.
    """

    ordinal: np.ndarray
    j0: np.ndarray
    prev0: np.ndarray
    known_first: np.ndarray
    cum0: np.ndarray
    stabilized: np.ndarray
    cls: np.ndarray

    @property
    def T(self) -> int:
        return len(self.ordinal)


class Engine:
    """Vectorized path simulation for one bundle and a fixed profile matrix."""

    def __init__(self, bundle: FittedModelBundle, X: np.ndarray, horizon: int | None = None, check: bool = True):
        self.bundle = bundle
        self.X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.C = bundle.n_coverages
        self.V = n_patterns(self.C)
        self.j_star = bundle.j_star
        self.J = int(horizon or bundle.horizon)
        self.check = check
        self.bits = mask_bits(np.arange(self.V + 1), self.C)
        B = len(bundle.buckets)
        self.cdf = []
        for b in range(B):
            table = bundle.activation[b].transition_table(self.X)
            self.cdf.append(_cdf_table(table))
        self.pay = np.stack(
            [np.column_stack([bundle.payment[b][c].probabilities(self.X) for c in range(self.C)]) for b in range(B)]
        )  # (B, P, C)
        self.eta0 = np.zeros((B, self.X.shape[0], self.C))
        self.alpha_star = np.zeros((B, self.C))
        for b in range(B):
            for c in range(self.C):
                sev = bundle.severity[b][c]
                if sev is None:
                    continue
                self.eta0[b, :, c] = sev.eta(self.X, 0.0)
                self.alpha_star[b, c] = getattr(sev, "alpha_star", 0.0)

    def j_term(self, units: Units) -> np.ndarray:
        """Year of the closing step per unit (0 when the claim just stops at J)."""
        jt = np.maximum(self.j_star, units.j0)
        has = (self.j_star <= self.J) | units.stabilized
        return np.where(has, jt, 0)

    def run(self, source, reps: np.ndarray, units: Units, prof: np.ndarray, active: np.ndarray, on_step: Callable):
        """Simulate ``len(reps) x T`` paths and report every step to ``on_step``.

        ``on_step(j, r, t, pattern, paid_mask, cents)`` receives flat arrays
        of replication row, unit column, pattern, payment mask and per
        coverage cents for the live paths of development year ``j``.
        """
        R, T, C = len(reps), units.T, self.C
        prof = np.broadcast_to(prof, (R, T))
        state = np.broadcast_to(units.prev0, (R, T)).astype(np.int64)
        cum = np.broadcast_to(units.cum0, (R, T, C)).astype(np.int64)
        jt = self.j_term(units)
        last_markov = np.minimum(self.j_star - 1, self.J)
        stop = np.maximum(jt, np.where(units.j0 <= last_markov, last_markov, 0))
        if T == 0 or R == 0:
            return
        j_max = int(stop.max())
        for j in range(int(units.j0.min()), j_max + 1):
            markov_t = (units.j0 <= j) & (j <= last_markov) & ~units.stabilized
            term_t = jt == j
            cols = np.flatnonzero(markov_t | term_t)
            if not cols.size:
                continue
            r, t = np.nonzero(active[:, cols])
            t = cols[t]
            if not r.size:
                continue
            b = self.bundle.buckets.index(j)
            ordinal = units.ordinal[t]
            rep = reps[r]
            is_term = term_t[t]
            p = prof[r, t]
            prev = state[r, t]
            pattern = prev.copy()
            paid_mask = np.zeros(r.size, dtype=np.int64)
            cents = np.zeros((r.size, C), dtype=np.int64)

            mk = ~is_term
            if mk.any():
                draw = mk & ~(units.known_first[t] & (units.j0[t] == j))
                if draw.any():
                    u = source.uniforms(rep[draw], ordinal[draw], purpose(j, KIND_PATTERN), 1)[:, 0]
                    cdf = self.cdf[b][p[draw], prev[draw]]
                    v = (u[:, None] > cdf).sum(axis=1) + 1
                    pattern[draw] = np.minimum(v, self.V)
                if self.check and np.any(pattern[mk] & prev[mk] != prev[mk]):
                    raise AssertionError("simulated activation dropped a coverage")
                act = self.bits[pattern[mk]]
                up = source.uniforms(rep[mk], ordinal[mk], purpose(j, KIND_PAYMENT), C)
                paid = act & (up < self.pay[b][p[mk]])
                us = source.uniforms(rep[mk], ordinal[mk], purpose(j, KIND_SEVERITY), C)
                sub = np.zeros((int(mk.sum()), C), dtype=np.int64)
                for c in range(C):
                    sel = paid[:, c]
                    if not sel.any():
                        continue
                    sev = self.bundle.severity[b][c]
                    if sev is None:
                        continue
                    eta = self.eta0[b, p[mk][sel], c] + self.alpha_star[b, c] * j
                    sub[sel, c] = _cents(sev.ppf_eta(us[sel, c], eta))
                cents[mk] = sub
                weights = (1 << np.arange(C - 1, -1, -1)).astype(np.int64)
                paid_mask[mk] = paid.astype(np.int64) @ weights
                if self.check:
                    assert np.all(paid_mask[mk] & ~pattern[mk] == 0)
            if is_term.any():
                act = self.bits[prev[is_term]]
                ut = source.uniforms(rep[is_term], ordinal[is_term], purpose(j, KIND_TERMINAL), C)
                bt = b
                sub = np.zeros((int(is_term.sum()), C), dtype=np.int64)
                for c in range(C):
                    sel = act[:, c]
                    sev = self.bundle.severity[bt][c]
                    if not sel.any() or sev is None:
                        continue
                    eta = self.eta0[bt, p[is_term][sel], c] + self.alpha_star[bt, c] * j
                    d = _cents(sev.ppf_eta(ut[sel, c], eta))
                    have = cum[r[is_term][sel], t[is_term][sel], c]
                    sub[sel, c] = np.maximum(d - have, 0)
                cents[is_term] = sub
                weights = (1 << np.arange(C - 1, -1, -1)).astype(np.int64)
                paid_mask[is_term] = (sub > 0).astype(np.int64) @ weights
            if self.check:
                assert np.all(cents >= 0)
            state[r, t] = pattern
            cum[r, t] += cents
            on_step(j, r, t, pattern, paid_mask, cents)


def _cdf_table(table: np.ndarray) -> np.ndarray:
    """Cumulative probabilities with the tail pinned to 1 past the last positive entry."""
    cdf = np.cumsum(table, axis=-1)
    total = cdf[..., -1:]
    cdf = np.divide(cdf, total, out=np.zeros_like(cdf), where=total > 0)
    positive = table > 0
    V = table.shape[-1]
    last = V - 1 - np.argmax(positive[..., ::-1], axis=-1)
    cdf[np.arange(V) >= last[..., None]] = 1.0
    return cdf


# --- per-claim routines --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClaimCashflows:
    """Simulated future development of one claim.

    ``amounts[k, y, c]`` is the payment of path ``k`` in development year
    ``first_year + y`` on coverage ``c``; ``patterns`` and ``payments`` hold
    the matching masks (0 where the path was not live).
    """

    first_year: int
    amounts: np.ndarray
    patterns: np.ndarray
    payments: np.ndarray

    @property
    def dev_years(self) -> np.ndarray:
        return self.first_year + np.arange(self.amounts.shape[1])

    def total(self) -> np.ndarray:
        return self.amounts.sum(axis=(1, 2))

    def year_totals(self) -> np.ndarray:
        return self.amounts.sum(axis=2)


def _as_source(rng):
    """Return ``(source, replication, ordinal)`` for a per-claim call."""
    if isinstance(rng, StreamFamily):
        return rng, 0, 0
    if hasattr(rng, "family") and hasattr(rng, "replication"):
        return rng.family, rng.replication, rng.claim
    if hasattr(rng, "uniforms"):
        return rng, 0, 0
    if isinstance(rng, (int, np.integer)):
        return StreamFamily(int(rng)), 0, 0
    raise ConfigurationError("rng must be a StreamFamily, Stream, draw source or integer seed")


def _run_single(bundle, x, units: Units, rng, n_paths: int, horizon=None) -> ClaimCashflows:
    source, rep0, ordinal = _as_source(rng)
    units.ordinal = np.array([ordinal], dtype=np.uint64)
    engine = Engine(bundle, np.atleast_2d(x), horizon)
    jt = engine.j_term(units)
    last = int(max(jt.max(), min(engine.j_star - 1, engine.J), units.j0.max()))
    first = int(units.j0[0])
    ny = max(last - first + 1, 0)
    C = bundle.n_coverages
    amounts = np.zeros((n_paths, ny, C), dtype=np.int64)
    patterns = np.zeros((n_paths, ny), dtype=np.int64)
    payments = np.zeros((n_paths, ny), dtype=np.int64)

    def on_step(j, r, t, pattern, paid, cents):
        amounts[r, j - first] += cents
        patterns[r, j - first] = pattern
        payments[r, j - first] = paid

    reps = rep0 + np.arange(n_paths, dtype=np.int64)
    engine.run(source, reps, units, np.zeros((1, 1), dtype=np.int64), np.ones((n_paths, 1), dtype=bool), on_step)
    return ClaimCashflows(first, amounts / 100.0, patterns, payments)


def simulate_claim_ibnr(x, bundle: FittedModelBundle, rng, n_paths: int = 1) -> ClaimCashflows:
    """Full development of a not-yet-reported claim with design vector ``x``."""
    C = bundle.n_coverages
    units = Units(
        ordinal=np.zeros(1, dtype=np.uint64),
        j0=np.array([1]),
        prev0=np.array([0]),
        known_first=np.array([False]),
        cum0=np.zeros((1, C), dtype=np.int64),
        stabilized=np.array([False]),
        cls=np.array([0]),
    )
    return _run_single(bundle, np.asarray(x, dtype=np.float64), units, rng, n_paths)


def _reported_state(claim: ClaimRecord, eval_date):
    """``(jc, known_first, last pattern, cents paid so far)`` of a reported claim."""
    eval_date = np.datetime64(eval_date, "D")
    jc = int(next_dev_year(np.datetime64(claim.report_date, "D"), eval_date))
    complete = [o for o in claim.history if o.dev_year < jc]
    C = len(claim.history[0].amounts) if claim.history else 0
    cum = np.zeros(C, dtype=np.int64)
    for o in complete:
        cum += _cents(o.amounts)
    if complete:
        return jc, False, complete[-1].activation, cum
    if not claim.history:
        raise InvalidStatusError(f"claim {claim.claim_id} has no observed activation")
    return jc, True, claim.history[0].activation, cum


def simulate_claim_rbns(claim: ClaimRecord, bundle: FittedModelBundle, eval_date, rng, n_paths: int = 1) -> ClaimCashflows:
    """Future development of a reported open claim (RBNP or RBNS) from its last pattern."""
    status = classify_claim_status(claim, eval_date, bundle.j_star)
    if status not in (ClaimStatus.RBNP, ClaimStatus.RBNS):
        raise InvalidStatusError(f"claim {claim.claim_id} is {getattr(status, 'name', 'out of scope')}, expected RBNP or RBNS")
    return _simulate_reported(claim, bundle, eval_date, rng, n_paths)


def simulate_claim_rbns_plus(claim: ClaimRecord, bundle: FittedModelBundle, eval_date, rng, n_paths: int = 1) -> ClaimCashflows:
    """Closing payment of a stabilized claim: ``max(paid, D) - paid`` per active coverage."""
    status = classify_claim_status(claim, eval_date, bundle.j_star)
    if status != ClaimStatus.RBNS_PLUS:
        raise InvalidStatusError(f"claim {claim.claim_id} is {getattr(status, 'name', 'out of scope')}, expected RBNS_PLUS")
    return _simulate_reported(claim, bundle, eval_date, rng, n_paths)


def _simulate_reported(claim, bundle, eval_date, rng, n_paths):
    jc, known, prev, cum = _reported_state(claim, eval_date)
    x = encode_covariates(claim, bundle.schema)
    units = Units(
        ordinal=np.zeros(1, dtype=np.uint64),
        j0=np.array([jc]),
        prev0=np.array([prev]),
        known_first=np.array([known]),
        cum0=cum[None, :],
        stabilized=np.array([jc >= bundle.j_star]),
        cls=np.array([1]),
    )
    return _run_single(bundle, x, units, rng, n_paths)


# --- portfolio level ----------------------------------------------------------------

@dataclass(frozen=True)
class IbnrSpec:
    """Number of unreported claims per occurrence year.

    ``counts`` fixes them explicitly; otherwise each year's count is Poisson
    with mean taken from a chain ladder on reported claim counts by
    reporting delay.
    """

    counts: Mapping[int, int] | None = None

    @property
    def method(self) -> str:
        return "explicit" if self.counts is not None else "chain-ladder-poisson"

    def to_dict(self) -> dict:
        return {"method": self.method, "counts": None if self.counts is None else {str(k): int(v) for k, v in self.counts.items()}}


@dataclass(frozen=True)
class SimulationConfig:
    eval_date: object
    n_replications: int = 5000
    seed: int = 0
    horizon: int | None = None
    ibnr: IbnrSpec = field(default_factory=IbnrSpec)
    workers: int = 1
    chunk_size: int | None = None
    check_invariants: bool = True
    parameter_draws: int = 0

    def __post_init__(self):
        if self.n_replications < 1:
            raise ConfigurationError("n_replications must be >= 1")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if self.parameter_draws < 0:
            raise ConfigurationError("parameter_draws must be >= 0")

    def to_dict(self) -> dict:
        return {
            "eval_date": str(np.datetime64(self.eval_date, "D")),
            "n_replications": self.n_replications,
            "seed": self.seed,
            "horizon": self.horizon,
            "ibnr": self.ibnr.to_dict(),
            "workers": self.workers,
            "chunk_size": self.chunk_size,
            "parameter_draws": self.parameter_draws,
        }


@dataclass(frozen=True, eq=False)
class ReservePredictiveDistribution:
    """Simulated reserves per replication, by claim class and coverage, in cents."""

    coverages: tuple[str, ...]
    cents: np.ndarray  # (R, 2, C) int64
    seed: int
    warnings: tuple[str, ...] = ()
    metadata: Mapping = field(default_factory=dict)

    @property
    def n_replications(self) -> int:
        return self.cents.shape[0]

    @property
    def total_cents(self) -> np.ndarray:
        return self.cents.sum(axis=(1, 2))

    @property
    def coverage_cents(self) -> np.ndarray:
        return self.cents.sum(axis=1)

    @property
    def class_cents(self) -> np.ndarray:
        return self.cents.sum(axis=2)

    @property
    def total(self) -> np.ndarray:
        return self.total_cents / 100.0

    @property
    def by_coverage(self) -> np.ndarray:
        return self.coverage_cents / 100.0

    @property
    def by_class(self) -> np.ndarray:
        return self.class_cents / 100.0

    def series(self) -> dict[str, np.ndarray]:
        out = {"total": self.total}
        for c, name in enumerate(self.coverages):
            out[name] = self.by_coverage[:, c]
        for k, name in enumerate(CLASSES):
            out[name] = self.by_class[:, k]
        return out

    def head(self, n: int) -> "ReservePredictiveDistribution":
        return ReservePredictiveDistribution(self.coverages, self.cents[:n], self.seed, self.warnings, self.metadata)


def value_at_risk(values, q: float) -> float:
    """Empirical quantile: the ``ceil(q * n)``-th smallest value."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    n = values.shape[0]
    if n < 1:
        raise ConfigurationError("need at least one replication")
    if not 0 < q < 1:
        raise ConfigurationError("q must lie in (0, 1)")
    rank = max(math.ceil(round(q * n, 9)), 1)
    return float(values[rank - 1])


def summarize(dist: ReservePredictiveDistribution, q: float = 0.95) -> dict:
    """Mean and VaR_q per coverage, per claim class and in total."""
    out = {}
    for name, vals in dist.series().items():
        out[name] = {"mean": float(np.mean(vals)), "VaR": value_at_risk(vals, q), "q": q}
    return out


def _count_chain_ladder(portfolio: Portfolio, eval_date) -> dict[int, float]:
    """Expected unreported claims per occurrence year from reporting-delay counts."""
    eval_date = np.datetime64(eval_date, "D")
    ey = int(year_of(eval_date))
    last = ey if eval_date >= dec31(ey) else ey - 1
    reported = portfolio.report <= eval_date
    occ = year_of(portfolio.occurrence)[reported]
    rep = year_of(portfolio.report)[reported]
    if occ.size == 0:
        return {}
    first = int(occ.min())
    if last < first:
        return {}
    n = last - first + 1
    tri = np.zeros((n, n))
    inside = rep <= last
    np.add.at(tri, (occ[inside] - first, rep[inside] - occ[inside]), 1.0)
    cum = np.cumsum(tri, axis=1)
    observed = (np.arange(n)[:, None] + np.arange(n)[None, :]) <= n - 1
    factors = np.ones(n)
    for d in range(n - 1):
        rows = observed[:, d + 1]
        den = cum[rows, d].sum()
        factors[d] = cum[rows, d + 1].sum() / den if den > 0 else 1.0
    out = {}
    total_reported = np.bincount(occ - first, minlength=n)
    for i in range(n):
        latest = n - 1 - i
        ult = cum[i, latest] * np.prod(factors[latest:n - 1])
        out[first + i] = max(float(ult - total_reported[i]), 0.0)
    return out


@dataclass
class _Plan:
    engine: Engine
    units: Units
    prof_fixed: np.ndarray
    ibnr_cols: np.ndarray
    ibnr_origin: np.ndarray
    ibnr_rank: np.ndarray
    origins: list
    means: np.ndarray | None
    fixed_counts: np.ndarray | None
    pools: list
    slots: np.ndarray
    n_claims: int
    X: np.ndarray


def _plan(portfolio: Portfolio, bundle: FittedModelBundle, config: SimulationConfig) -> _Plan:
    eval_date = np.datetime64(config.eval_date, "D")
    obs = censor(portfolio, eval_date)
    status, jc = classify_portfolio(obs, eval_date, bundle.j_star)
    C = bundle.n_coverages
    X = bundle.encode(obs)
    open_ = np.isin(status, [ClaimStatus.RBNP, ClaimStatus.RBNS, ClaimStatus.RBNS_PLUS])
    idx = np.flatnonzero(open_)

    # state of open claims
    cum = np.zeros((obs.n_claims, C), dtype=np.int64)
    complete = obs.obs_dev_year < jc[obs.obs_claim]
    np.add.at(cum, obs.obs_claim[complete], _cents(obs.obs_amounts[complete]))
    last_pattern = np.zeros(obs.n_claims, dtype=np.int64)
    rows_c = np.flatnonzero(complete)
    last_pattern[obs.obs_claim[rows_c]] = obs.obs_activation[rows_c]  # rows sorted: last wins
    known = np.zeros(obs.n_claims, dtype=bool)
    first_rows = np.flatnonzero((obs.obs_dev_year == 1) & ~complete)
    known[obs.obs_claim[first_rows]] = True
    last_pattern[obs.obs_claim[first_rows]] = obs.obs_activation[first_rows]

    # IBNR
    occ_year = year_of(obs.occurrence)
    if config.ibnr.counts is not None:
        origins = sorted(int(k) for k, v in config.ibnr.counts.items() if int(v) > 0)
        fixed = np.array([int(config.ibnr.counts[o]) for o in origins], dtype=np.int64)
        means = None
        slots = fixed.copy()
    else:
        mu = _count_chain_ladder(obs, eval_date)
        origins = sorted(o for o, v in mu.items() if v > 0)
        means = np.array([mu[o] for o in origins])
        fixed = None
        slots = stats.poisson.ppf(1 - _TAIL, means).astype(np.int64) if len(origins) else np.zeros(0, dtype=np.int64)
    pools = []
    for o in origins:
        pool = np.flatnonzero(occ_year == o)
        if not pool.size:
            pool = np.arange(obs.n_claims)
        if not pool.size:
            raise ConfigurationError("cannot bootstrap IBNR covariates from an empty portfolio")
        pools.append(pool)

    # profile rows: open claims and all pool members
    needed = np.unique(np.concatenate([idx] + pools)) if (idx.size or pools) else np.zeros(0, dtype=np.int64)
    remap = np.full(obs.n_claims, -1, dtype=np.int64)
    remap[needed] = np.arange(needed.size)
    engine = Engine(bundle, X[needed] if needed.size else np.zeros((0, bundle.schema.n_columns)), config.horizon, config.check_invariants)
    pools = [remap[p] for p in pools]

    n_ibnr = int(slots.sum())
    T = idx.size + n_ibnr
    ibnr_origin = np.repeat(np.arange(len(origins)), slots)
    ibnr_rank = np.arange(n_ibnr) - np.repeat(np.r_[0, np.cumsum(slots)[:-1]].astype(np.int64), slots) if n_ibnr else np.zeros(0, dtype=np.int64)
    units = Units(
        ordinal=np.r_[idx, IBNR_ORDINAL_BASE + np.arange(n_ibnr)].astype(np.uint64),
        j0=np.r_[jc[idx], np.ones(n_ibnr, dtype=np.int64)].astype(np.int64),
        prev0=np.r_[last_pattern[idx], np.zeros(n_ibnr, dtype=np.int64)],
        known_first=np.r_[known[idx], np.zeros(n_ibnr, dtype=bool)],
        cum0=np.concatenate([cum[idx], np.zeros((n_ibnr, C), dtype=np.int64)]),
        stabilized=np.r_[jc[idx] >= bundle.j_star, np.zeros(n_ibnr, dtype=bool)],
        cls=np.r_[np.ones(idx.size, dtype=np.int64), np.zeros(n_ibnr, dtype=np.int64)],
    )
    prof_fixed = np.r_[remap[idx], np.zeros(n_ibnr, dtype=np.int64)]
    return _Plan(
        engine, units, prof_fixed, np.arange(idx.size, T), ibnr_origin, ibnr_rank, origins, means, fixed, pools, slots,
        obs.n_claims, engine.X,
    )


def _run_chunk(plan: _Plan, source, reps: np.ndarray) -> np.ndarray:
    R, T, C = len(reps), plan.units.T, plan.engine.C
    prof = np.broadcast_to(plan.prof_fixed, (R, T)).copy()
    active = np.ones((R, T), dtype=bool)
    if plan.ibnr_cols.size:
        O = len(plan.origins)
        if plan.fixed_counts is not None:
            counts = np.broadcast_to(plan.fixed_counts, (R, O))
        else:
            u = source.uniforms(reps[:, None], COUNT_ORDINAL_BASE + np.arange(O, dtype=np.uint64)[None, :], purpose(0, KIND_IBNR_COUNT), 1)[..., 0]
            counts = np.minimum(stats.poisson.ppf(u, plan.means[None, :]).astype(np.int64), plan.slots[None, :])
        active[:, plan.ibnr_cols] = plan.ibnr_rank[None, :] < counts[:, plan.ibnr_origin]
        up = source.uniforms(reps[:, None], plan.units.ordinal[plan.ibnr_cols][None, :], purpose(0, KIND_IBNR_PROFILE), 1)[..., 0]
        for o, pool in enumerate(plan.pools):
            cols = plan.ibnr_origin == o
            pick = np.minimum((up[:, cols] * pool.size).astype(np.int64), pool.size - 1)
            prof[:, plan.ibnr_cols[cols]] = pool[pick]
    out = np.zeros((R, 2, C), dtype=np.int64)
    cls = plan.units.cls

    def on_step(j, r, t, pattern, paid, cents):
        k = cls[t]
        for c in range(C):
            np.add.at(out[:, :, c], (r, k), cents[:, c])

    plan.engine.run(source, reps, plan.units, prof, active, on_step)
    return out


def run_reserving(portfolio: Portfolio, bundle: FittedModelBundle, config: SimulationConfig, source=None) -> ReservePredictiveDistribution:
    """Predictive reserve distribution of the open and unreported claims at the evaluation date.

    With ``config.parameter_draws = K > 0`` replication ``r`` runs under
    coefficient draw ``r mod K`` (see :func:`~covreserve.bundle.perturb_bundle`),
    adding estimation risk to the process risk of the plug-in simulation.
    """
    plan = _plan(portfolio, bundle, config)
    source = source or StreamFamily(config.seed)
    R = config.n_replications
    T = max(plan.units.T, 1)
    chunk = config.chunk_size or int(max(1, min(R, 2_000_000 // (T * max(bundle.n_coverages, 1)))))
    K = min(config.parameter_draws, R)
    if K:
        groups = [np.arange(d, R, K, dtype=np.int64) for d in range(K)]
    else:
        groups = [np.arange(R, dtype=np.int64)]
    out = np.zeros((R, 2, bundle.n_coverages), dtype=np.int64)

    def runner(p):
        return lambda reps: (reps, _run_chunk(p, source, reps))

    results = []
    for d, group in enumerate(groups):
        p = plan
        if K:
            p = dataclasses.replace(plan, engine=Engine(perturb_bundle(bundle, source, d), plan.X, config.horizon, config.check_invariants))
        results += _map(runner(p), [group[s:s + chunk] for s in range(0, len(group), chunk)], config.workers)
    for reps, block in results:
        out[reps] = block
    warnings = []
    if plan.units.T == 0:
        warnings.append("no open claims and no IBNR claims: reserve is zero")
        log.warning(warnings[-1])
    meta = {
        "n_open": int((plan.units.cls == 1).sum()),
        "ibnr_origins": plan.origins,
        "ibnr_expected": None if plan.means is None else [float(m) for m in plan.means],
        "ibnr_fixed": None if plan.fixed_counts is None else [int(c) for c in plan.fixed_counts],
        "j_star": bundle.j_star,
        "horizon": plan.engine.J,
        "model": bundle.kind,
        "parameter_draws": K,
    }
    return ReservePredictiveDistribution(bundle.coverages, out, config.seed, tuple(warnings), meta)


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(t) for t in items]


def stability_curve(
    portfolio: Portfolio,
    bundle: FittedModelBundle,
    config: SimulationConfig,
    checkpoints: Sequence[int],
    q: float = 0.95,
    series: str = "total",
    dist: ReservePredictiveDistribution | None = None,
) -> list[dict]:
    """VaR_q on growing prefixes of one replication stream.

    Each entry holds the replication count, the VaR and the relative change
    from the previous checkpoint.
    """
    checkpoints = [int(c) for c in checkpoints]
    if not checkpoints or any(b <= a for a, b in zip(checkpoints, checkpoints[1:])) or checkpoints[0] < 1:
        raise ConfigurationError("checkpoints must be positive and strictly ascending")
    n = checkpoints[-1]
    if dist is None or dist.n_replications < n:
        cfg = SimulationConfig(**{**config.__dict__, "n_replications": n})
        dist = run_reserving(portfolio, bundle, cfg)
    values = dist.series()[series]
    out = []
    prev = None
    for k in checkpoints:
        v = value_at_risk(values[:k], q)
        rel = None if prev is None else (abs(v - prev) / abs(v) if v else 0.0)
        out.append({"n": k, "VaR": v, "rel_change": rel})
        prev = v
    return out


# --- outputs ----------------------------------------------------------------------------

def write_distribution_csv(dist: ReservePredictiveDistribution, path) -> None:
    """One row per replication: total, per coverage, per claim class."""
    series = dist.series()
    names = list(series)
    cents = [dist.total_cents] + [dist.coverage_cents[:, c] for c in range(len(dist.coverages))] + [
        dist.class_cents[:, k] for k in range(len(CLASSES))
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("replication," + ",".join(names) + "\n")
        for r in range(dist.n_replications):
            fh.write(str(r) + "," + ",".join(_fmt_cents(col[r]) for col in cents) + "\n")


def _fmt_cents(c) -> str:
    c = int(c)
    return f"{c // 100}.{c % 100:02d}"


def histogram_data(dist: ReservePredictiveDistribution, bins: int = 50) -> list[dict]:
    """Bin edges and counts per series, for external plotting."""
    rows = []
    for name, vals in dist.series().items():
        counts, edges = np.histogram(vals, bins=bins)
        for k in range(len(counts)):
            rows.append({"series": name, "bin_left": float(edges[k]), "bin_right": float(edges[k + 1]), "count": int(counts[k])})
    return rows


def write_histogram_csv(dist: ReservePredictiveDistribution, path, bins: int = 50) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("series,bin_left,bin_right,count\n")
        for row in histogram_data(dist, bins):
            fh.write(f"{row['series']},{row['bin_left']!r},{row['bin_right']!r},{row['count']}\n")
