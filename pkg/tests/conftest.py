import io

import numpy as np
import pytest

from covreserve.ingestion import HEADER, LossTriangle, parse_claims

COVS = ("AB", "BI", "VD", "LoU")

# Taylor & Ashe (1983) cumulative paid triangle, the usual chain-ladder benchmark
TAYLOR_ASHE = [
    [357848, 1124788, 1735330, 2218270, 2745596, 3319994, 3466336, 3606286, 3833515, 3901463],
    [352118, 1236139, 2170033, 3353322, 3799067, 4120063, 4647867, 4914039, 5339085],
    [290507, 1292306, 2218525, 3235179, 3985995, 4132918, 4628910, 4909315],
    [310608, 1418858, 2195047, 3757447, 4029929, 4381982, 4588268],
    [443160, 1136350, 2128333, 2897821, 3402672, 3873311],
    [396132, 1333217, 2180715, 2985752, 3691712],
    [440832, 1288463, 2419861, 3483130],
    [359480, 1421128, 2864498],
    [376686, 1363294],
    [344014],
]

DEFAULT_COVS = {"gender": "F", "yob": "1970", "vu": "P", "am": "12000", "prov": "ON", "fr": "0"}


def row(claim_id, coverage, dev_year, paid=0.0, activated=1, occ="2015-03-01", rep="2015-04-01", settle="", **covs):
    c = {**DEFAULT_COVS, **covs}
    return [claim_id, occ, rep, settle, coverage, str(dev_year), str(activated), str(paid)] + [
        c[k] for k in HEADER[8:]
    ]


def csv_text(rows) -> str:
    lines = [",".join(HEADER)] + [",".join(r) for r in rows]
    return "\n".join(lines) + "\n"


def portfolio_from_rows(rows, coverages=COVS):
    return parse_claims(io.StringIO(csv_text(rows)), coverages)


@pytest.fixture
def taylor_ashe():
    return LossTriangle.from_cumulative(TAYLOR_ASHE, origin_years=range(2001, 2011))


@pytest.fixture(scope="session")
def small_truth():
    from covreserve.synthgen import default_truth

    return default_truth(occurrence_years=(2014, 2015, 2016, 2017))


@pytest.fixture(scope="session")
def small_portfolio(small_truth):
    from covreserve.synthgen import generate_portfolio

    return generate_portfolio(small_truth, 4000, seed=11)


@pytest.fixture(scope="session")
def small_fit(small_truth, small_portfolio):
    from covreserve.bundle import fit_bundle
    from covreserve.synthgen import truncate_at

    observed, holdout = truncate_at(small_portfolio, "2018-01-01")
    bundle = fit_bundle(observed, small_truth.schema, "2018-01-01")
    return observed, holdout, bundle


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.abs(b), 1e-300)


def hand_bundle(
    coverages=("A", "B"),
    first=None,
    later=None,
    pay=((0.5, 0.5), (0.5, 0.5)),
    severity=((100.0, 100.0), (100.0, 100.0)),
    j_star=3,
    horizon=2,
):
    """Intercept-only bundle with two period buckets (year 1, years 2+).

    ``first``/``later`` are pattern probabilities over all ``V`` patterns
    (uniform when omitted); ``pay`` holds payment probabilities; ``severity``
    entries are point-mass values or ready-made severity models.
    """
    from covreserve.bundle import FittedModelBundle, PeriodBuckets
    from covreserve.glm import FittedBernoulli, FittedMultinomial
    from covreserve.ingestion import CovariateSchema
    from covreserve.severity import PointMassSeverity

    C = len(coverages)
    V = 2**C - 1

    def multinomial(probs, period):
        probs = np.full(V, 1.0 / V) if probs is None else np.asarray(probs, dtype=float)
        support = tuple(int(v) + 1 for v in np.flatnonzero(probs > 0))
        logp = np.log(probs[np.asarray(support) - 1])
        return FittedMultinomial(period, C, support, (logp[1:] - logp[0])[:, None])

    def sev(v, period, c):
        return PointMassSeverity(float(v), period, c) if np.isscalar(v) else v

    periods = ("1", "2+")
    return FittedModelBundle(
        coverages=tuple(coverages),
        schema=CovariateSchema(tuple(coverages), ()),
        buckets=PeriodBuckets((1, 2)),
        activation=(multinomial(first, "1"), multinomial(later, "2+")),
        payment=tuple(
            tuple(FittedBernoulli(periods[b], c, np.zeros(1), constant=float(pay[b][c])) for c in range(C)) for b in range(2)
        ),
        severity=tuple(tuple(sev(severity[b][c], periods[b], c) for c in range(C)) for b in range(2)),
        j_star=j_star,
        horizon=horizon,
    )
