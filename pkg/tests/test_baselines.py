import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covreserve.baselines import (
    ZeroNoiseDraws,
    chain_ladder_odp_bootstrap,
    chain_ladder_point,
    independence_reserving,
    odp_reserves,
)
from covreserve.bundle import FittedModelBundle, fit_bundle, fit_independence_bundle
from covreserve.domain import ClaimRecord, Portfolio
from covreserve.errors import ConfigurationError, DegenerateDispersionError, UndefinedFactorError
from covreserve.glm import FittedBernoulli, IndependentActivation
from covreserve.ingestion import LossTriangle
from covreserve.rng import StreamFamily
from covreserve.simulation import IbnrSpec, SimulationConfig, run_reserving, simulate_claim_ibnr
from covreserve.synthgen import (
    CovariateDistribution,
    GroundTruth,
    SeverityTruth,
    comonotone_truth,
    generate_portfolio,
    truncate_at,
)

from conftest import TAYLOR_ASHE, hand_bundle

# volume-weighted factors of the Taylor & Ashe triangle (Mack 1993, Table 1)
TA_FACTORS = [3.4906, 1.7473, 1.4574, 1.1739, 1.1038, 1.0863, 1.0539, 1.0766, 1.0177]


def _loop_chain_ladder(cum_rows):
    """Textbook chain ladder on ragged cumulative rows, written with plain loops."""
    n = len(cum_rows[0])
    factors = []
    for d in range(n - 1):
        num = sum(r[d + 1] for r in cum_rows if len(r) > d + 1)
        den = sum(r[d] for r in cum_rows if len(r) > d + 1)
        factors.append(num / den)
    reserve = 0.0
    for r in cum_rows:
        ult = r[-1]
        for d in range(len(r) - 1, n - 1):
            ult *= factors[d]
        reserve += ult - r[-1]
    return factors, reserve


# --- point chain ladder ---------------------------------------------------------

def test_two_by_two():
    res = chain_ladder_point(LossTriangle.from_cumulative([[100, 150], [120, None]]))
    assert res.factors.tolist() == [1.5]
    assert res.point_reserve == pytest.approx(60.0, abs=1e-12)


def test_square_triangle_has_no_reserve():
    res = chain_ladder_point(LossTriangle.from_cumulative([[100, 150, 160], [90, 130, 150], [80, 100, 110]]))
    assert res.point_reserve == 0.0


def test_identical_rows_give_their_own_ratios():
    res = chain_ladder_point(LossTriangle.from_cumulative([[100, 150, 180], [100, 150, None], [100, None, None]]))
    np.testing.assert_allclose(res.factors, [1.5, 1.2], rtol=1e-15)


def test_taylor_ashe(taylor_ashe):
    res = chain_ladder_point(taylor_ashe)
    np.testing.assert_allclose(res.factors, TA_FACTORS, atol=5e-5)
    assert round(res.point_reserve) == 18680856
    factors, reserve = _loop_chain_ladder(TAYLOR_ASHE)
    np.testing.assert_allclose(res.factors, factors, rtol=1e-14)
    assert res.point_reserve == pytest.approx(reserve, rel=1e-13)


def test_undefined_factor_names_the_column():
    with pytest.raises(UndefinedFactorError) as exc:
        chain_ladder_point(LossTriangle.from_cumulative([[0, 10, 20], [0, 5, None], [4, None, None]]))
    assert "1" in str(exc.value)


def test_too_small_triangle():
    with pytest.raises(ConfigurationError):
        chain_ladder_point(LossTriangle.from_cumulative([[100]]))


@st.composite
def ragged(draw):
    n = draw(st.integers(2, 7))
    rows = []
    for o in range(n):
        vals = np.cumsum(draw(st.lists(st.floats(1, 1e5), min_size=n - o, max_size=n - o)))
        rows.append(vals.tolist())
    return rows


@settings(max_examples=60, deadline=None)
@given(ragged(), st.floats(1e-3, 1e3))
def test_chain_ladder_matches_loop_oracle_and_scales(rows, s):
    padded = [r + [None] * (len(rows[0]) - len(r)) for r in rows]
    res = chain_ladder_point(LossTriangle.from_cumulative(padded))
    factors, reserve = _loop_chain_ladder(rows)
    np.testing.assert_allclose(res.factors, factors, rtol=1e-12)
    assert res.point_reserve == pytest.approx(reserve, rel=1e-10, abs=1e-6)
    scaled = chain_ladder_point(LossTriangle.from_cumulative([[None if v is None else v * s for v in r] for r in padded]))
    assert scaled.point_reserve == pytest.approx(s * res.point_reserve, rel=1e-10, abs=1e-6)


# --- bootstrap ------------------------------------------------------------------------

def test_dispersion_of_taylor_ashe(taylor_ashe):
    res = chain_ladder_odp_bootstrap(taylor_ashe, 1, 0)
    # ODP scale parameter reported by England and Verrall (1999)
    assert res.dispersion == pytest.approx(52601.36, rel=1e-5)


def test_zero_noise_reproduces_point_reserve(taylor_ashe):
    res = chain_ladder_odp_bootstrap(taylor_ashe, 1, ZeroNoiseDraws())
    np.testing.assert_allclose(res.boot_by_origin[0], res.point_by_origin, rtol=1e-12, atol=1e-6)
    assert res.boot_total[0] == pytest.approx(res.point_reserve, rel=1e-13)


@settings(max_examples=25, deadline=None)
@given(ragged())
def test_zero_noise_on_random_triangles(rows):
    n = len(rows[0])
    padded = [r + [None] * (n - len(r)) for r in rows]
    tri = LossTriangle.from_cumulative(padded)
    try:
        res = chain_ladder_odp_bootstrap(tri, 1, ZeroNoiseDraws())
    except DegenerateDispersionError:
        return
    np.testing.assert_allclose(res.boot_total, [res.point_reserve], rtol=1e-9, atol=1e-6)


def test_bootstrap_mean_is_close_to_point(taylor_ashe):
    res = chain_ladder_odp_bootstrap(taylor_ashe, 10000, 42)
    assert abs(res.boot_total.mean() / res.point_reserve - 1) <= 0.10
    assert np.all(res.boot_by_origin >= 0)
    s = res.summary()
    assert s["n_boot"] == 10000 and s["VaR"] > s["mean"]


def test_bootstrap_is_deterministic(taylor_ashe):
    a = chain_ladder_odp_bootstrap(taylor_ashe, 300, 7)
    b = chain_ladder_odp_bootstrap(taylor_ashe, 300, 7, workers=4, chunk_size=37)
    np.testing.assert_array_equal(a.boot_by_origin, b.boot_by_origin)
    c = chain_ladder_odp_bootstrap(taylor_ashe, 300, 8)
    assert not np.array_equal(a.boot_total, c.boot_total)


def test_degenerate_dispersion():
    # proportional rows fit exactly, so every residual is zero
    with pytest.raises(DegenerateDispersionError):
        chain_ladder_odp_bootstrap(LossTriangle.from_cumulative([[100, 150], [200, 300], [300, None]]), 10, 0)
    with pytest.raises(DegenerateDispersionError):
        chain_ladder_odp_bootstrap(LossTriangle.from_cumulative([[100, 150], [120, None]]), 10, 0)


def test_odp_reserves_per_coverage_and_total(small_fit):
    observed, _, _ = small_fit
    out = odp_reserves(observed, "2018-01-01", 200, seed=3)
    assert list(out) == list(observed.coverages) + ["total"]
    per = sum(out[c].point_reserve for c in observed.coverages)
    assert out["total"].point_reserve > 0
    assert all(r.boot_total.shape == (200,) for r in out.values())
    # chain ladder is not additive across triangles, but both sides estimate the same reserve
    assert 0.5 < per / out["total"].point_reserve < 2


# --- independence model ------------------------------------------------------------------

def _independent_truth():
    """Coverage B always opens the claim; A joins independently with 0.4, then 0.2 a year."""
    cov = CovariateDistribution({"gender": (("M", "F"), (0.5, 0.5))})
    coverages = ("A", "B")
    m = cov.schema(coverages).n_columns
    beta1 = np.zeros((3, m))
    beta1[1, 0] = -np.inf  # (1 0) never
    beta1[2, 0] = math.log(0.4 / 0.6)  # (1 1)
    beta2 = np.zeros((3, m))
    beta2[1, 0] = -np.inf
    beta2[2, 0] = math.log(0.2 / 0.8)
    gamma = np.zeros((2, m))
    gamma[:, 0] = [0.4, 0.8]
    sev = (
        SeverityTruth("lognormal", (8.0, 0.0), 0.0, (0.8,)),
        SeverityTruth("lognormal", (6.0, 0.0), 0.0, (0.8,)),
    )
    return GroundTruth(coverages, cov, (beta1, beta2), (gamma, gamma.copy()), (sev, sev), p_close=0.3, j_star=3)


def test_independence_and_pattern_agree_on_independent_data():
    truth = _independent_truth()
    pf = generate_portfolio(truth, 6000, seed=21)
    observed, _ = truncate_at(pf, "2018-01-01")
    pattern = fit_bundle(observed, truth.schema, "2018-01-01", j_star=3, families=("lognormal",))
    indep = fit_independence_bundle(observed, truth.schema, "2018-01-01", j_star=3, reuse=pattern)
    cfg = SimulationConfig("2018-01-01", n_replications=2000, seed=4)
    a = run_reserving(observed, pattern, cfg).total
    b = independence_reserving(observed, indep, cfg).total
    se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    assert abs(a.mean() - b.mean()) <= 3 * se


def test_comonotone_activation_separates_the_models():
    p = 0.4
    truth = comonotone_truth(p)
    pf = generate_portfolio(truth, 10000, seed=5)
    observed, _ = truncate_at(pf, "2018-01-01")
    pattern = fit_bundle(observed, truth.schema, "2018-01-01", j_star=2, families=("lognormal",))
    indep = fit_independence_bundle(observed, truth.schema, "2018-01-01", j_star=2, reuse=pattern)
    x = np.ones((1, truth.schema.n_columns))
    both = 7 - 1  # pattern (1 1 1)
    assert abs(pattern.activation[0].probabilities(x)[0, both] - p) < 0.02
    assert abs(indep.activation[0].probabilities(x)[0, both] - p * p) < 0.02


def test_activation_is_the_only_difference():
    # both models force (1 1) from the start, so every other draw must coincide
    pattern = hand_bundle(first=[0.0, 0.0, 1.0], later=[0.0, 0.0, 1.0], pay=((0.5, 0.7), (0.4, 0.6)), horizon=4, j_star=5)
    indep = _with_independent_activation(pattern, 1.0)
    a = simulate_claim_ibnr(np.ones(1), pattern, StreamFamily(13), n_paths=500)
    b = simulate_claim_ibnr(np.ones(1), indep, StreamFamily(13), n_paths=500)
    np.testing.assert_array_equal(a.amounts, b.amounts)
    np.testing.assert_array_equal(a.payments, b.payments)


def test_zero_payment_probability_gives_zero_independence_reserve():
    indep = _with_independent_activation(hand_bundle(pay=((0.0, 0.0), (0.0, 0.0))), 0.5)
    pf = generate_portfolio(_independent_truth(), 50, seed=1)
    observed, _ = truncate_at(pf, "2018-01-01")
    # drop covariates to match the intercept-only hand bundle; keep claims still in their
    # year-by-year phase, since stabilized claims get a closing draw regardless of payment flags
    records = [
        ClaimRecord(c.claim_id, c.occurrence_date, c.report_date, {}, c.history, c.settlement_date)
        for c in observed
        if c.report_date.year == 2017
    ]
    dist = independence_reserving(
        Portfolio.from_records(records, observed.coverages), indep,
        SimulationConfig("2018-01-01", 50, ibnr=IbnrSpec(counts={2017: 5})),
    )
    assert dist.metadata["n_open"] > 0
    assert not dist.cents.any()


def _with_independent_activation(bundle, q):
    act = tuple(
        IndependentActivation(lab, 2, tuple(FittedBernoulli(lab, c, np.zeros(1), constant=q) for c in range(2)))
        for lab in ("1", "2+")
    )
    return FittedModelBundle(
        bundle.coverages, bundle.schema, bundle.buckets, act, bundle.payment, bundle.severity,
        j_star=bundle.j_star, horizon=bundle.horizon, kind="independence",
    )


def test_independence_reserving_needs_an_independence_bundle(small_fit):
    observed, _, bundle = small_fit
    with pytest.raises(ConfigurationError):
        independence_reserving(observed, bundle, SimulationConfig("2018-01-01", 5))
