"""Claims, coverages, activation patterns and evaluation-date status.

Activation and payment vectors are stored as integer bit masks.  A pattern
tuple ``(a_1, ..., a_C)`` is read as a binary number with the first coverage
as the most significant bit, so ``(0 1) == 1``, ``(1 0) == 2`` and
``(1 1) == 3``.  Patterns are ordered by mask value, which makes the pattern
index ``v`` (1-based) equal to the mask itself.

Development year ``j = 1`` is the calendar year containing the report date.
Payments of development year ``j`` are recorded on December 31 of that
calendar year.
"""
from __future__ import annotations

import datetime as dt
import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DataIntegrityError, InvalidPatternError

DEFAULT_J_STAR = 3


def n_patterns(n_coverages: int) -> int:
    if n_coverages < 1:
        raise ConfigurationError(f"need at least one coverage, got {n_coverages}")
    return 2**n_coverages - 1


def coverage_bit(coverage: int, n_coverages: int) -> int:
    """Mask bit of a 0-based coverage index."""
    return 1 << (n_coverages - 1 - coverage)


def mask_to_tuple(mask: int, n_coverages: int) -> tuple[int, ...]:
    return tuple((mask >> (n_coverages - 1 - c)) & 1 for c in range(n_coverages))


def tuple_to_mask(bits: Sequence[int]) -> int:
    mask = 0
    for b in bits:
        if b not in (0, 1):
            raise InvalidPatternError(f"pattern entries must be 0/1, got {tuple(bits)}")
        mask = (mask << 1) | int(b)
    return mask


def mask_bits(masks, n_coverages: int) -> np.ndarray:
    """Expand an array of masks into a trailing 0/1 coverage axis."""
    masks = np.asarray(masks, dtype=np.int64)
    shifts = np.arange(n_coverages - 1, -1, -1, dtype=np.int64)
    return ((masks[..., None] >> shifts) & 1).astype(bool)


@dataclass(frozen=True, order=True)
class ActivationPattern:
    """Nonzero activation mask over ``n_coverages`` coverages."""

    bits: int
    n_coverages: int = field(compare=False)

    def __post_init__(self):
        if self.n_coverages < 1:
            raise ConfigurationError("n_coverages must be >= 1")
        if not 0 <= self.bits < 2**self.n_coverages:
            raise InvalidPatternError(f"mask {self.bits} out of range for C={self.n_coverages}")

    @classmethod
    def from_tuple(cls, bits: Sequence[int]) -> "ActivationPattern":
        return cls(tuple_to_mask(bits), len(bits))

    @property
    def index(self) -> int:
        """1-based pattern index ``v``."""
        return self.bits

    def as_tuple(self) -> tuple[int, ...]:
        return mask_to_tuple(self.bits, self.n_coverages)

    def active(self) -> tuple[int, ...]:
        return tuple(c for c, b in enumerate(self.as_tuple()) if b)

    def __repr__(self) -> str:
        return "(" + " ".join(map(str, self.as_tuple())) + ")"


def enumerate_patterns(n_coverages: int) -> list[ActivationPattern]:
    """All ``2**C - 1`` nonzero patterns, ascending by mask value."""
    V = n_patterns(n_coverages)
    return [ActivationPattern(m, n_coverages) for m in range(1, V + 1)]


def reachable_patterns(prev: ActivationPattern | int, n_coverages: int | None = None) -> set[ActivationPattern]:
    """Patterns containing every coverage active in ``prev`` (``prev`` included)."""
    if isinstance(prev, ActivationPattern):
        mask, C = prev.bits, prev.n_coverages
    else:
        mask, C = int(prev), n_coverages
    if C is None:
        raise ConfigurationError("n_coverages required for an integer mask")
    if mask == 0:
        raise InvalidPatternError("the zero mask is not a valid activation pattern")
    return {p for p in enumerate_patterns(C) if p.bits & mask == mask}


def superset_table(n_coverages: int) -> np.ndarray:
    """``table[prev, v-1]`` is True when pattern ``v`` is reachable from ``prev``.

    Row 0 (no previous pattern) allows every pattern.
    """
    V = n_patterns(n_coverages)
    prev = np.arange(V + 1)[:, None]
    masks = np.arange(1, V + 1)[None, :]
    return (masks & prev) == prev


class ClaimStatus(enum.IntEnum):
    IBNR = 0
    RBNP = 1
    RBNS = 2
    RBNS_PLUS = 3
    SETTLED = 4


OUT_OF_SCOPE = -1


@dataclass(frozen=True)
class DevYearObservation:
    dev_year: int
    activation: int
    payments: int
    amounts: tuple[float, ...]

    def __post_init__(self):
        if self.dev_year < 1:
            raise DataIntegrityError(f"development years start at 1, got {self.dev_year}")
        if self.payments & ~self.activation:
            raise DataIntegrityError("payment recorded on an inactive coverage")
        C = len(self.amounts)
        for c, a in enumerate(self.amounts):
            if a > 0 and not self.payments & coverage_bit(c, C):
                raise DataIntegrityError("positive amount without payment indicator")


@dataclass(frozen=True)
class ClaimRecord:
    claim_id: str
    occurrence_date: dt.date
    report_date: dt.date
    covariates: Mapping[str, object]
    history: tuple[DevYearObservation, ...]
    settlement_date: dt.date | None = None

    def __post_init__(self):
        if self.report_date < self.occurrence_date:
            raise DataIntegrityError(f"claim {self.claim_id}: reported before occurrence", [self.claim_id])
        for k, obs in enumerate(self.history):
            if obs.dev_year != k + 1:
                raise DataIntegrityError(f"claim {self.claim_id}: history must run 1, 2, ...", [self.claim_id])
            if k and obs.activation & self.history[k - 1].activation != self.history[k - 1].activation:
                raise DataIntegrityError(f"claim {self.claim_id}: activation is not absorbing", [self.claim_id])

    @property
    def settled(self) -> bool:
        return self.settlement_date is not None


# --- date helpers -----------------------------------------------------------

def year_of(dates) -> np.ndarray:
    return np.asarray(dates, dtype="datetime64[D]").astype("datetime64[Y]").astype(np.int64) + 1970


def to_datetime64(value) -> np.datetime64:
    if value is None:
        return np.datetime64("NaT", "D")
    return np.datetime64(value, "D")


def to_date(value) -> dt.date | None:
    value = np.datetime64(value, "D")
    if np.isnat(value):
        return None
    return value.astype(dt.date)


def next_dev_year(report, eval_date) -> np.ndarray:
    """First development year whose payments are not yet recorded at ``eval_date``."""
    eval_date = np.datetime64(eval_date, "D")
    ey = int(year_of(eval_date))
    year_complete = eval_date >= np.datetime64(f"{ey}-12-31", "D")
    return ey - year_of(report) + 1 + int(year_complete)


# --- portfolio ---------------------------------------------------------------

def _as_int(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class Portfolio:
    """Columnar claim portfolio.

    Claim-level arrays have length ``n``; the claim-year table (``obs_*``) is
    sorted by claim then development year, with years ``1..k`` present for
    every claim that has any history.
    """

    coverages: tuple[str, ...]
    claim_id: np.ndarray
    occurrence: np.ndarray
    report: np.ndarray
    settlement: np.ndarray
    covariates: Mapping[str, np.ndarray]
    obs_claim: np.ndarray
    obs_dev_year: np.ndarray
    obs_activation: np.ndarray
    obs_payments: np.ndarray
    obs_amounts: np.ndarray

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "coverages", tuple(self.coverages))
        set_(self, "claim_id", np.asarray(self.claim_id, dtype=object))
        for name in ("occurrence", "report", "settlement"):
            set_(self, name, np.asarray(getattr(self, name), dtype="datetime64[D]"))
        set_(self, "covariates", {k: np.asarray(v) for k, v in self.covariates.items()})
        for name in ("obs_claim", "obs_dev_year", "obs_activation", "obs_payments"):
            set_(self, name, _as_int(getattr(self, name)))
        C = len(self.coverages)
        set_(self, "obs_amounts", np.asarray(self.obs_amounts, dtype=np.float64).reshape(-1, C))
        self._validate()
        set_(self, "_offsets", np.searchsorted(self.obs_claim, np.arange(self.n_claims + 1)))

    # structural invariants, checked once on construction
    def _validate(self):
        n = len(self.claim_id)
        C = self.n_coverages
        for name in ("occurrence", "report", "settlement"):
            if len(getattr(self, name)) != n:
                raise DataIntegrityError(f"{name} has wrong length")
        for k, v in self.covariates.items():
            if len(v) != n:
                raise DataIntegrityError(f"covariate {k} has wrong length")
        bad = self.report < self.occurrence
        if bad.any():
            raise DataIntegrityError("report date before occurrence date", self.claim_id[bad][:10])
        m = len(self.obs_claim)
        if not (len(self.obs_dev_year) == len(self.obs_activation) == len(self.obs_payments) == m == len(self.obs_amounts)):
            raise DataIntegrityError("claim-year columns have inconsistent lengths")
        if m == 0:
            return
        if self.obs_claim.min() < 0 or self.obs_claim.max() >= n:
            raise DataIntegrityError("claim-year row refers to an unknown claim")
        key = self.obs_claim * (1 << 20) + self.obs_dev_year
        if np.any(np.diff(key) <= 0):
            raise DataIntegrityError("claim-year rows must be sorted by claim and development year")
        first = np.r_[True, self.obs_claim[1:] != self.obs_claim[:-1]]
        expected = np.where(first, 1, np.r_[0, self.obs_dev_year[:-1]] + 1)
        if np.any(self.obs_dev_year != expected):
            bad = self.obs_claim[self.obs_dev_year != expected]
            raise DataIntegrityError("development years must run 1, 2, ... per claim", self.claim_id[bad][:10])
        top = 2**C - 1
        if np.any((self.obs_activation < 0) | (self.obs_activation > top)):
            raise DataIntegrityError("activation mask out of range")
        zero_first = first & (self.obs_activation == 0)
        if zero_first.any():
            raise DataIntegrityError(
                "claim activates no coverage in its first development year",
                self.claim_id[self.obs_claim[zero_first]][:10],
            )
        prev = np.r_[0, self.obs_activation[:-1]]
        not_absorbing = ~first & ((self.obs_activation & prev) != prev)
        if not_absorbing.any():
            raise DataIntegrityError(
                "activation is not absorbing", self.claim_id[self.obs_claim[not_absorbing]][:10]
            )
        if np.any(self.obs_payments & ~self.obs_activation):
            bad = self.obs_claim[(self.obs_payments & ~self.obs_activation) != 0]
            raise DataIntegrityError("payment on an inactive coverage", self.claim_id[bad][:10])
        pay_bits = mask_bits(self.obs_payments, C)
        bad = np.any((self.obs_amounts > 0) & ~pay_bits, axis=1)
        if bad.any():
            raise DataIntegrityError("positive amount without payment flag", self.claim_id[self.obs_claim[bad]][:10])

    # --- basic access -------------------------------------------------------
    @property
    def n_coverages(self) -> int:
        return len(self.coverages)

    @property
    def n_claims(self) -> int:
        return len(self.claim_id)

    def __len__(self) -> int:
        return self.n_claims

    def history_slice(self, i: int) -> slice:
        return slice(self._offsets[i], self._offsets[i + 1])

    def history_length(self) -> np.ndarray:
        return np.diff(self._offsets)

    def claim(self, i: int) -> ClaimRecord:
        s = self.history_slice(i)
        history = tuple(
            DevYearObservation(
                int(j), int(a), int(p), tuple(float(x) for x in amt)
            )
            for j, a, p, amt in zip(
                self.obs_dev_year[s], self.obs_activation[s], self.obs_payments[s], self.obs_amounts[s]
            )
        )
        covs = {k: v[i].item() if hasattr(v[i], "item") else v[i] for k, v in self.covariates.items()}
        return ClaimRecord(
            claim_id=str(self.claim_id[i]),
            occurrence_date=to_date(self.occurrence[i]),
            report_date=to_date(self.report[i]),
            covariates=covs,
            history=history,
            settlement_date=to_date(self.settlement[i]),
        )

    def __iter__(self) -> Iterator[ClaimRecord]:
        for i in range(self.n_claims):
            yield self.claim(i)

    @classmethod
    def from_records(cls, records: Iterable[ClaimRecord], coverages: Sequence[str]) -> "Portfolio":
        records = list(records)
        C = len(coverages)
        keys = sorted({k for r in records for k in r.covariates})
        cov = {k: np.array([r.covariates.get(k) for r in records], dtype=object) for k in keys}
        for k, v in cov.items():
            if all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
                cov[k] = v.astype(np.float64)
            else:
                cov[k] = v.astype(str)
        rows = [(i, o) for i, r in enumerate(records) for o in r.history]
        return cls(
            coverages=tuple(coverages),
            claim_id=np.array([r.claim_id for r in records], dtype=object),
            occurrence=np.array([to_datetime64(r.occurrence_date) for r in records], dtype="datetime64[D]"),
            report=np.array([to_datetime64(r.report_date) for r in records], dtype="datetime64[D]"),
            settlement=np.array([to_datetime64(r.settlement_date) for r in records], dtype="datetime64[D]"),
            covariates=cov,
            obs_claim=[i for i, _ in rows],
            obs_dev_year=[o.dev_year for _, o in rows],
            obs_activation=[o.activation for _, o in rows],
            obs_payments=[o.payments for _, o in rows],
            obs_amounts=np.array([o.amounts for _, o in rows], dtype=np.float64).reshape(-1, C),
        )

    def take(self, claims) -> "Portfolio":
        """Sub-portfolio with the given claim indices (in the given order)."""
        claims = np.asarray(claims, dtype=np.int64)
        lens = self.history_length()[claims]
        starts = self._offsets[claims]
        rows = np.repeat(starts - np.r_[0, np.cumsum(lens)[:-1]], lens) + np.arange(lens.sum())
        new_claim = np.repeat(np.arange(len(claims)), lens)
        return self.replace_history(
            claims,
            obs_rows=rows,
            obs_claim=new_claim,
        )

    def replace_history(self, claims, obs_rows, obs_claim, **overrides) -> "Portfolio":
        fields = dict(
            coverages=self.coverages,
            claim_id=self.claim_id[claims],
            occurrence=self.occurrence[claims],
            report=self.report[claims],
            settlement=self.settlement[claims],
            covariates={k: v[claims] for k, v in self.covariates.items()},
            obs_claim=obs_claim,
            obs_dev_year=self.obs_dev_year[obs_rows],
            obs_activation=self.obs_activation[obs_rows],
            obs_payments=self.obs_payments[obs_rows],
            obs_amounts=self.obs_amounts[obs_rows],
        )
        fields.update(overrides)
        return Portfolio(**fields)

    # --- derived quantities ------------------------------------------------
    def payment_dates(self) -> np.ndarray:
        """December 31 of each claim-year row's calendar year."""
        years = year_of(self.report)[self.obs_claim] + self.obs_dev_year - 1
        return dec31(years)

    def latest_rows(self) -> np.ndarray:
        """Index of each claim's last claim-year row (-1 when it has none)."""
        last = self._offsets[1:] - 1
        return np.where(self.history_length() > 0, last, -1)


def dec31(years) -> np.ndarray:
    years = np.asarray(years, dtype=np.int64)
    return (years - 1969).astype("datetime64[Y]").astype("datetime64[D]") - np.timedelta64(1, "D")


# --- status --------------------------------------------------------------

def classify_portfolio(portfolio: Portfolio, eval_date, j_star: int = DEFAULT_J_STAR):
    """Vectorized status classification.

    Returns ``(status, current_dev_year)`` where ``status`` holds
    :class:`ClaimStatus` codes or :data:`OUT_OF_SCOPE`.
    """
    eval_date = np.datetime64(eval_date, "D")
    n = portfolio.n_claims
    status = np.full(n, OUT_OF_SCOPE, dtype=np.int64)
    jc = next_dev_year(portfolio.report, eval_date)
    in_scope = portfolio.occurrence <= eval_date
    reported = portfolio.report <= eval_date
    settled = ~np.isnat(portfolio.settlement) & (portfolio.settlement <= eval_date)

    paid_rows = (portfolio.obs_dev_year < jc[portfolio.obs_claim]) & np.any(portfolio.obs_amounts > 0, axis=1)
    has_paid = np.zeros(n, dtype=bool)
    has_paid[portfolio.obs_claim[paid_rows]] = True

    status[in_scope & ~reported] = ClaimStatus.IBNR
    open_ = in_scope & reported & ~settled
    status[in_scope & reported & settled] = ClaimStatus.SETTLED
    status[open_ & ~has_paid] = ClaimStatus.RBNP
    rbns = open_ & has_paid
    status[rbns & (jc < j_star)] = ClaimStatus.RBNS
    status[rbns & (jc >= j_star)] = ClaimStatus.RBNS_PLUS
    return status, jc


def classify_claim_status(claim: ClaimRecord, eval_date, j_star: int = DEFAULT_J_STAR) -> ClaimStatus | None:
    """Status of one claim at ``eval_date``; ``None`` if it has not occurred yet."""
    eval_date = np.datetime64(eval_date, "D")
    if np.datetime64(claim.occurrence_date, "D") > eval_date:
        return None
    if np.datetime64(claim.report_date, "D") > eval_date:
        return ClaimStatus.IBNR
    if claim.settlement_date is not None and np.datetime64(claim.settlement_date, "D") <= eval_date:
        return ClaimStatus.SETTLED
    jc = int(next_dev_year(np.datetime64(claim.report_date, "D"), eval_date))
    paid = any(any(a > 0 for a in o.amounts) for o in claim.history if o.dev_year < jc)
    if not paid:
        return ClaimStatus.RBNP
    return ClaimStatus.RBNS_PLUS if jc >= j_star else ClaimStatus.RBNS


def censor(portfolio: Portfolio, eval_date) -> Portfolio:
    """What an insurer sees at ``eval_date``.

    Keeps claims reported on or before ``eval_date``, their completed
    development years and, for claims still in their first year, the year-1
    activation with payments removed.  Settlements after ``eval_date`` are
    reopened.
    """
    eval_date = np.datetime64(eval_date, "D")
    keep_claims = np.flatnonzero(portfolio.report <= eval_date)
    jc = next_dev_year(portfolio.report, eval_date)
    row_jc = jc[portfolio.obs_claim]
    complete = portfolio.obs_dev_year < row_jc
    partial_first = (row_jc == 1) & (portfolio.obs_dev_year == 1)
    keep_row = (complete | partial_first) & (portfolio.report[portfolio.obs_claim] <= eval_date)
    rows = np.flatnonzero(keep_row)
    remap = np.full(portfolio.n_claims, -1, dtype=np.int64)
    remap[keep_claims] = np.arange(len(keep_claims))
    payments = portfolio.obs_payments[rows].copy()
    amounts = portfolio.obs_amounts[rows].copy()
    payments[partial_first[rows]] = 0
    amounts[partial_first[rows]] = 0.0
    settlement = portfolio.settlement[keep_claims].copy()
    settlement[~np.isnat(settlement) & (settlement > eval_date)] = np.datetime64("NaT")
    return portfolio.replace_history(
        keep_claims,
        obs_rows=rows,
        obs_claim=remap[portfolio.obs_claim[rows]],
        obs_payments=payments,
        obs_amounts=amounts,
        settlement=settlement,
    )
