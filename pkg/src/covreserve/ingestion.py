"""Claim transaction files, covariate encoding and loss triangles."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import IO, Mapping, Sequence

import numpy as np

from .domain import (
    ClaimRecord,
    Portfolio,
    coverage_bit,
    dec31,
    mask_bits,
    year_of,
)
from .errors import (
    ConfigurationError,
    DataIntegrityError,
    EmptyTriangleError,
    MissingCovariateError,
    ParseError,
    UnknownLevelError,
)

COVARIATE_COLUMNS = ("gender", "yob", "vu", "am", "prov", "fr")
CONTINUOUS_COLUMNS = ("am",)
HEADER = (
    "claim_id",
    "occurrence_date",
    "report_date",
    "settlement_date",
    "coverage",
    "dev_year",
    "activated",
    "paid_amount",
) + COVARIATE_COLUMNS


# --- covariate schema ---------------------------------------------------------

@dataclass(frozen=True)
class CategoricalFactor:
    name: str
    levels: tuple[str, ...]
    reference: str

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if len(self.levels) < 2:
            raise ConfigurationError(f"factor {self.name}: need at least two levels")
        if len(set(self.levels)) != len(self.levels):
            raise ConfigurationError(f"factor {self.name}: duplicate levels")
        if self.reference not in self.levels:
            raise ConfigurationError(f"factor {self.name}: reference {self.reference!r} not a level")

    @property
    def encoded_levels(self) -> tuple[str, ...]:
        return tuple(v for v in self.levels if v != self.reference)

    @property
    def width(self) -> int:
        return len(self.levels) - 1


@dataclass(frozen=True)
class ContinuousFactor:
    name: str
    mean: float
    sd: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.sd) and self.sd > 0):
            raise ConfigurationError(f"factor {self.name}: need finite mean and positive sd")

    width = 1


@dataclass(frozen=True)
class CovariateSchema:
    """Coverage names plus the factor encoding of the design vector."""

    coverages: tuple[str, ...]
    factors: tuple[CategoricalFactor | ContinuousFactor, ...]

    def __post_init__(self):
        object.__setattr__(self, "coverages", tuple(self.coverages))
        object.__setattr__(self, "factors", tuple(self.factors))
        if not self.coverages:
            raise ConfigurationError("schema lists no coverages")
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate factor names")

    @property
    def n_columns(self) -> int:
        return 1 + sum(f.width for f in self.factors)

    @property
    def column_names(self) -> list[str]:
        cols = ["intercept"]
        for f in self.factors:
            if isinstance(f, CategoricalFactor):
                cols += [f"{f.name}={lvl}" for lvl in f.encoded_levels]
            else:
                cols.append(f.name)
        return cols

    def to_dict(self) -> dict:
        out = []
        for f in self.factors:
            if isinstance(f, CategoricalFactor):
                out.append({"name": f.name, "kind": "categorical", "levels": list(f.levels), "reference": f.reference})
            else:
                out.append({"name": f.name, "kind": "continuous", "mean": f.mean, "sd": f.sd})
        return {"coverages": list(self.coverages), "factors": out}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CovariateSchema":
        factors = []
        try:
            for f in doc["factors"]:
                if f["kind"] == "categorical":
                    factors.append(CategoricalFactor(f["name"], tuple(f["levels"]), str(f["reference"])))
                elif f["kind"] == "continuous":
                    factors.append(ContinuousFactor(f["name"], float(f["mean"]), float(f["sd"])))
                else:
                    raise ConfigurationError(f"unknown factor kind {f['kind']!r}")
            return cls(tuple(doc["coverages"]), tuple(factors))
        except KeyError as exc:
            raise ConfigurationError(f"schema document missing key {exc}") from None

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "CovariateSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def encode_matrix(self, covariates: Mapping[str, Sequence], n: int | None = None) -> np.ndarray:
        """Design matrix (n, m) for columnar covariates."""
        if n is None:
            n = len(next(iter(covariates.values()))) if covariates else 0
        cols = [np.ones(n)]
        for f in self.factors:
            if f.name not in covariates:
                raise MissingCovariateError(f"missing covariate {f.name!r}")
            raw = np.asarray(covariates[f.name])
            if isinstance(f, CategoricalFactor):
                values = raw.astype(str)
                missing = np.isin(values, ("", "None", "nan"))
                if missing.any():
                    raise MissingCovariateError(f"missing value for covariate {f.name!r}")
                unknown = ~np.isin(values, f.levels)
                if unknown.any():
                    raise UnknownLevelError(
                        f"factor {f.name!r}: unknown level(s) {sorted(set(values[unknown]))[:5]}"
                    )
                for lvl in f.encoded_levels:
                    cols.append((values == lvl).astype(np.float64))
            else:
                try:
                    values = raw.astype(np.float64)
                except (TypeError, ValueError):
                    raise MissingCovariateError(f"non-numeric value for covariate {f.name!r}") from None
                if not np.all(np.isfinite(values)):
                    raise MissingCovariateError(f"missing value for covariate {f.name!r}")
                cols.append((values - f.mean) / f.sd)
        return np.column_stack(cols) if n else np.zeros((0, self.n_columns))


def infer_schema(portfolio: Portfolio, continuous: Sequence[str] = CONTINUOUS_COLUMNS) -> CovariateSchema:
    """Schema read off the data: sorted levels with the most frequent as reference.

    Continuous columns are standardized with their sample mean and sd;
    single-level categorical columns carry no information and are dropped.
    """
    factors = []
    for name, values in portfolio.covariates.items():
        if name in continuous:
            v = np.asarray(values, dtype=np.float64)
            sd = float(v.std())
            if sd > 0:
                factors.append(ContinuousFactor(name, float(v.mean()), sd))
            continue
        levels, counts = np.unique(np.asarray(values).astype(str), return_counts=True)
        if levels.size >= 2:
            factors.append(CategoricalFactor(name, tuple(levels), str(levels[np.argmax(counts)])))
    return CovariateSchema(portfolio.coverages, tuple(factors))


def encode_covariates(claim: ClaimRecord, schema: CovariateSchema) -> np.ndarray:
    """Design vector ``(1, dummies..., standardized continuous...)`` of one claim."""
    covs = {}
    for f in schema.factors:
        if f.name not in claim.covariates or claim.covariates[f.name] is None:
            raise MissingCovariateError(f"claim {claim.claim_id}: missing covariate {f.name!r}")
        covs[f.name] = [claim.covariates[f.name]]
    return schema.encode_matrix(covs, 1)[0]


# --- transaction files --------------------------------------------------------

def _parse_date(text: str, line: int, name: str):
    try:
        return np.datetime64(text, "D")
    except ValueError:
        raise ParseError(f"bad {name} {text!r} (expected YYYY-MM-DD)", line) from None


def parse_claims(
    stream: IO[str] | str | os.PathLike,
    coverages: Sequence[str],
    allow_negative: bool = False,
) -> Portfolio:
    """Read a claim transaction CSV into a :class:`Portfolio`.

    Rows may come in any order.  Activation flags are OR-ed forward over
    development years, duplicate payment rows are summed and missing
    intermediate years are filled with the carried-forward pattern.
    """
    if isinstance(stream, (str, os.PathLike)):
        with open(stream, encoding="utf-8", newline="") as fh:
            return parse_claims(fh, coverages, allow_negative)

    cov_index = {name: c for c, name in enumerate(coverages)}
    C = len(coverages)
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file", 1) from None
    header = [h.strip() for h in header]
    if tuple(header) != HEADER:
        raise ParseError(f"unexpected header {header}", 1)

    claims: dict[str, dict] = {}
    for line, row in enumerate(reader, start=2):
        if not row or all(not x.strip() for x in row):
            continue
        if len(row) != len(HEADER):
            raise ParseError(f"expected {len(HEADER)} fields, got {len(row)}", line)
        rec = dict(zip(HEADER, (x.strip() for x in row)))
        cid = rec["claim_id"]
        if not cid:
            raise ParseError("empty claim_id", line)
        occ = _parse_date(rec["occurrence_date"], line, "occurrence_date")
        rep = _parse_date(rec["report_date"], line, "report_date")
        settle = _parse_date(rec["settlement_date"], line, "settlement_date") if rec["settlement_date"] else None
        if rec["coverage"] not in cov_index:
            raise ParseError(f"unknown coverage {rec['coverage']!r}", line)
        try:
            j = int(rec["dev_year"])
        except ValueError:
            raise ParseError(f"bad dev_year {rec['dev_year']!r}", line) from None
        if j < 1:
            raise ParseError(f"dev_year must be >= 1, got {j}", line)
        if rec["activated"] not in ("0", "1"):
            raise ParseError(f"activated must be 0 or 1, got {rec['activated']!r}", line)
        try:
            paid = float(rec["paid_amount"]) if rec["paid_amount"] else 0.0
        except ValueError:
            raise ParseError(f"bad paid_amount {rec['paid_amount']!r}", line) from None
        if not math.isfinite(paid):
            raise ParseError("paid_amount must be finite", line)
        if paid < 0 and not allow_negative:
            raise ParseError(f"negative paid_amount {paid} (enable negative increments to accept)", line)
        covs = {}
        for k in COVARIATE_COLUMNS:
            v = rec[k]
            if k in CONTINUOUS_COLUMNS:
                try:
                    covs[k] = float(v) if v else math.nan
                except ValueError:
                    raise ParseError(f"bad {k} {v!r}", line) from None
            else:
                covs[k] = v
        head = (occ, rep, settle, tuple(covs.items()))
        entry = claims.get(cid)
        if entry is None:
            entry = claims[cid] = {"head": head, "line": line, "act": defaultdict(int), "amt": defaultdict(float)}
        elif not _same_head(entry["head"], head):
            raise ParseError(f"claim {cid}: claim-level fields differ from line {entry['line']}", line)
        c = cov_index[rec["coverage"]]
        if rec["activated"] == "1":
            entry["act"][j] |= coverage_bit(c, C)
        else:
            entry["act"][j] |= 0
        if paid:
            entry["amt"][(j, c)] += paid

    ids = sorted(claims)
    n = len(ids)
    occurrence = np.empty(n, dtype="datetime64[D]")
    report = np.empty(n, dtype="datetime64[D]")
    settlement = np.empty(n, dtype="datetime64[D]")
    cov_cols = {k: [] for k in COVARIATE_COLUMNS}
    o_claim, o_year, o_act, o_pay, o_amt = [], [], [], [], []
    bad_payment = []
    for i, cid in enumerate(ids):
        e = claims[cid]
        occ, rep, settle, covs = e["head"]
        occurrence[i], report[i] = occ, rep
        settlement[i] = settle if settle is not None else np.datetime64("NaT")
        for k, v in covs:
            cov_cols[k].append(v)
        K = max(e["act"])
        mask = 0
        for j in range(1, K + 1):
            mask |= e["act"].get(j, 0)
            amounts = [e["amt"].get((j, c), 0.0) for c in range(C)]
            pay = 0
            for c, a in enumerate(amounts):
                if a != 0 and not mask & coverage_bit(c, C):
                    bad_payment.append(cid)
                if a > 0:
                    pay |= coverage_bit(c, C)
            o_claim.append(i)
            o_year.append(j)
            o_act.append(mask)
            o_pay.append(pay & mask)
            o_amt.append(amounts)
    if bad_payment:
        raise DataIntegrityError(
            f"payment on a coverage not activated by that year for claims {sorted(set(bad_payment))[:20]}",
            sorted(set(bad_payment)),
        )
    covariates = {
        k: np.array(v, dtype=np.float64 if k in CONTINUOUS_COLUMNS else str) for k, v in cov_cols.items()
    }
    if n == 0:
        covariates = {k: np.array([], dtype=np.float64 if k in CONTINUOUS_COLUMNS else str) for k in COVARIATE_COLUMNS}
    return Portfolio(
        coverages=tuple(coverages),
        claim_id=np.array(ids, dtype=object),
        occurrence=occurrence,
        report=report,
        settlement=settlement,
        covariates=covariates,
        obs_claim=o_claim,
        obs_dev_year=o_year,
        obs_activation=o_act,
        obs_payments=o_pay,
        obs_amounts=np.array(o_amt, dtype=np.float64).reshape(-1, C),
    )


def _same_head(a, b) -> bool:
    if a[0] != b[0] or a[1] != b[1] or a[2] != b[2]:
        return False
    for (ka, va), (kb, vb) in zip(a[3], b[3]):
        if ka != kb:
            return False
        if isinstance(va, float) and isinstance(vb, float):
            if not (va == vb or (math.isnan(va) and math.isnan(vb))):
                return False
        elif va != vb:
            return False
    return True


def _fmt_cov(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_claims(portfolio: Portfolio, stream: IO[str] | str | os.PathLike) -> None:
    """Write the canonical transaction file.

    One row per claim, development year and coverage active in that year, in
    portfolio order.
    """
    if isinstance(stream, (str, os.PathLike)):
        with open(stream, "w", encoding="utf-8", newline="") as fh:
            return write_claims(portfolio, fh)
    C = portfolio.n_coverages
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(HEADER)
    bits = mask_bits(portfolio.obs_activation, C)
    occ = portfolio.occurrence.astype(str)
    rep = portfolio.report.astype(str)
    settle = np.where(np.isnat(portfolio.settlement), "", portfolio.settlement.astype(str))
    covs = [portfolio.covariates.get(k, np.full(portfolio.n_claims, "")) for k in COVARIATE_COLUMNS]
    for r in range(len(portfolio.obs_claim)):
        i = portfolio.obs_claim[r]
        head = [str(portfolio.claim_id[i]), occ[i], rep[i], settle[i]]
        tail = [_fmt_cov(col[i]) for col in covs]
        for c in range(C):
            if bits[r, c]:
                writer.writerow(
                    head
                    + [portfolio.coverages[c], str(portfolio.obs_dev_year[r]), "1", repr(float(portfolio.obs_amounts[r, c]))]
                    + tail
                )


def claims_to_text(portfolio: Portfolio) -> str:
    buf = io.StringIO()
    write_claims(portfolio, buf)
    return buf.getvalue()


# --- loss triangles -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LossTriangle:
    """Incremental paid amounts by occurrence year and development year."""

    origin_years: tuple[int, ...]
    cells: np.ndarray
    observed: np.ndarray
    coverage: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "cells", np.asarray(self.cells, dtype=np.float64))
        object.__setattr__(self, "observed", np.asarray(self.observed, dtype=bool))
        if self.cells.shape != self.observed.shape or self.cells.shape[0] != len(self.origin_years):
            raise ConfigurationError("triangle shape mismatch")

    @property
    def n_origins(self) -> int:
        return self.cells.shape[0]

    @property
    def n_dev(self) -> int:
        return self.cells.shape[1]

    def cumulative(self) -> np.ndarray:
        """Cumulative amounts; unobserved cells are NaN."""
        cum = np.cumsum(np.where(self.observed, self.cells, 0.0), axis=1)
        return np.where(self.observed, cum, np.nan)

    def latest_dev(self) -> np.ndarray:
        """0-based index of the last observed column per origin (-1 if none)."""
        idx = np.where(self.observed, np.arange(self.n_dev), -1)
        return idx.max(axis=1)

    @classmethod
    def from_cumulative(cls, rows: Sequence[Sequence[float | None]], origin_years=None, coverage=None) -> "LossTriangle":
        n_o = len(rows)
        n_d = max(len(r) for r in rows)
        cum = np.full((n_o, n_d), np.nan)
        for i, r in enumerate(rows):
            for d, v in enumerate(r):
                if v is not None:
                    cum[i, d] = v
        observed = ~np.isnan(cum)
        inc = np.where(observed, np.diff(np.nan_to_num(cum), axis=1, prepend=0.0), 0.0)
        origins = tuple(origin_years) if origin_years is not None else tuple(range(n_o))
        return cls(origins, inc, observed, coverage)

    def scaled(self, factor: float) -> "LossTriangle":
        return LossTriangle(self.origin_years, self.cells * factor, self.observed, self.coverage)


def build_triangle(portfolio: Portfolio, eval_date, coverage: int | str | None = None) -> LossTriangle:
    """Aggregate payments recorded on or before ``eval_date`` by occurrence year.

    Development year ``d`` of origin ``o`` is calendar year ``o + d - 1``.
    """
    eval_date = np.datetime64(eval_date, "D")
    if portfolio.n_claims == 0:
        raise EmptyTriangleError("empty portfolio")
    if isinstance(coverage, str):
        coverage = portfolio.coverages.index(coverage)
    in_scope = portfolio.occurrence <= eval_date
    if not in_scope.any():
        raise EmptyTriangleError("evaluation date precedes every occurrence")
    ey = int(year_of(eval_date))
    last_complete = ey if eval_date >= dec31(ey) else ey - 1
    occ_year = year_of(portfolio.occurrence)
    first = int(occ_year[in_scope].min())
    if first > last_complete:
        raise EmptyTriangleError("no completed development year at the evaluation date")
    origins = tuple(range(first, last_complete + 1))
    n_o = n_d = len(origins)
    cells = np.zeros((n_o, n_d))
    rows = np.flatnonzero(
        in_scope[portfolio.obs_claim] & (portfolio.payment_dates() <= eval_date)
    )
    if coverage is None:
        amounts = portfolio.obs_amounts[rows].sum(axis=1)
    else:
        amounts = portfolio.obs_amounts[rows, coverage]
    claims = portfolio.obs_claim[rows]
    pay_year = year_of(portfolio.report)[claims] + portfolio.obs_dev_year[rows] - 1
    o_idx = occ_year[claims] - first
    d_idx = pay_year - occ_year[claims]
    keep = o_idx < n_o
    np.add.at(cells, (o_idx[keep], d_idx[keep]), amounts[keep])
    observed = (np.array(origins)[:, None] + np.arange(n_d)[None, :]) <= last_complete
    name = None if coverage is None else portfolio.coverages[coverage]
    return LossTriangle(origins, cells, observed, name)
