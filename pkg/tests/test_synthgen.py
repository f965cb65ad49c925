import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covreserve.domain import mask_bits
from covreserve.errors import ConfigurationError
from covreserve.ingestion import claims_to_text
from covreserve.synthgen import (
    PAYMENT_RATES,
    FIRST_YEAR_FREQ,
    GroundTruth,
    comonotone_truth,
    default_truth,
    generate_portfolio,
    read_truth,
    first_year_probabilities,
    truncate_at,
    truth_bundle,
    write_truth,
)

from conftest import portfolio_from_rows, row


@pytest.fixture(scope="module")
def plain_truth():
    return default_truth(covariate_effects=False)


def test_same_seed_same_portfolio(small_truth):
    a = claims_to_text(generate_portfolio(small_truth, 300, seed=4))
    assert a == claims_to_text(generate_portfolio(small_truth, 300, seed=4))
    assert a != claims_to_text(generate_portfolio(small_truth, 300, seed=5))


def test_published_first_year_frequencies():
    # VD alone is (0 0 1 0) with AB as the leading coverage
    assert FIRST_YEAR_FREQ[0b0010] == 42.95
    assert abs(sum(FIRST_YEAR_FREQ.values()) - 100) < 0.05
    assert first_year_probabilities().sum() == pytest.approx(1.0, abs=1e-15)


def test_first_year_pattern_frequencies(plain_truth):
    pf = generate_portfolio(plain_truth, 10000, seed=3)
    first = pf.obs_activation[pf.obs_dev_year == 1]
    freq = np.bincount(first, minlength=16)[1:] / first.size
    assert np.max(np.abs(freq - first_year_probabilities())) <= 0.015


def test_first_year_payment_rate(plain_truth):
    p_ab = first_year_probabilities()[mask_bits(np.arange(1, 16), 4)[:, 0]].sum()
    n = math.ceil(10000 / p_ab)
    pf = generate_portfolio(plain_truth, n, seed=8)
    year1 = pf.obs_dev_year == 1
    ab = year1 & ((pf.obs_activation >> 3) & 1).astype(bool)
    assert ab.sum() >= 9500
    rate = ((pf.obs_payments[ab] >> 3) & 1).mean()
    assert abs(rate - PAYMENT_RATES[1][0]) <= 0.01
    assert PAYMENT_RATES[1][0] == 0.5155


def test_generated_histories_are_valid(small_portfolio):
    pf = small_portfolio
    assert np.all(pf.obs_payments & ~pf.obs_activation == 0)
    paid_bits = mask_bits(pf.obs_payments, pf.n_coverages)
    assert np.all((pf.obs_amounts > 0) == paid_bits)
    same = pf.obs_claim[1:] == pf.obs_claim[:-1]
    prev, cur = pf.obs_activation[:-1][same], pf.obs_activation[1:][same]
    assert np.all(cur & prev == prev)
    assert np.all(pf.report >= pf.occurrence)
    assert np.all(pf.settlement >= pf.report)


def test_comonotone_patterns():
    pf = generate_portfolio(comonotone_truth(0.4), 3000, seed=2)
    first = pf.obs_activation[pf.obs_dev_year == 1]
    assert set(np.unique(pf.obs_activation)) == {0b001, 0b111}
    assert abs(np.mean(first == 0b111) - 0.4) < 0.03


def test_invalid_truth():
    with pytest.raises(ConfigurationError):
        default_truth(report_delay=(0.5, 0.2))
    with pytest.raises(ConfigurationError):
        default_truth(j_star=1)
    with pytest.raises(ConfigurationError):
        generate_portfolio(default_truth(), 0, seed=1)


def test_truth_round_trip(tmp_path, small_truth):
    back = GroundTruth.from_dict(small_truth.to_dict())
    assert back.to_dict() == small_truth.to_dict()
    write_truth(comonotone_truth(), tmp_path / "t.json")
    # impossible patterns survive the trip as -inf
    assert np.array_equal(read_truth(tmp_path / "t.json").beta[0], comonotone_truth().beta[0])
    a = claims_to_text(generate_portfolio(back, 100, seed=1))
    assert a == claims_to_text(generate_portfolio(small_truth, 100, seed=1))


def test_truth_bundle_reproduces_the_truth(small_truth):
    bundle = truth_bundle(small_truth)
    # reference profile: intercept only
    x = np.eye(1, small_truth.schema.n_columns)
    np.testing.assert_allclose(bundle.activation[0].probabilities(x)[0], first_year_probabilities(), rtol=1e-12)
    rates = [bundle.payment[0][c].probabilities(x)[0] for c in range(4)]
    np.testing.assert_allclose(rates, PAYMENT_RATES[1], rtol=1e-12)


# --- truncation -------------------------------------------------------------------------

def test_nothing_left_after_every_settlement(small_portfolio):
    _, hold = truncate_at(small_portfolio, "2030-01-01")
    assert hold.total == 0 and not hold.cents.any()


def test_single_claim_split():
    pf = portfolio_from_rows(
        [row("c1", "VD", 1, 100, occ="2015-03-01", rep="2015-04-01"), row("c1", "VD", 2, 50, occ="2015-03-01", rep="2015-04-01")]
    )
    observed, hold = truncate_at(pf, "2016-06-30")
    assert hold.total == 50.0
    assert hold.series()["RBNS"] == 50.0 and hold.series()["IBNR"] == 0.0
    assert observed.obs_amounts.sum() == 100.0


def test_unreported_claim_counts_as_ibnr():
    pf = portfolio_from_rows([row("c1", "BI", 1, 70, occ="2016-12-20", rep="2017-01-10")])
    observed, hold = truncate_at(pf, "2016-12-31")
    assert hold.series()["IBNR"] == 70.0 and hold.series()["BI"] == 70.0
    assert observed.n_claims == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.dates(min_value=np.datetime64("2014-03-01").item(), max_value=np.datetime64("2021-12-31").item()))
def test_truncation_conserves_payments(seed, when):
    truth = default_truth(occurrence_years=(2014, 2015, 2016))
    pf = generate_portfolio(truth, 200, seed)
    observed, hold = truncate_at(pf, when)
    scope = pf.occurrence <= np.datetime64(when)
    full = np.rint(pf.obs_amounts[scope[pf.obs_claim]] * 100).astype(np.int64).sum(axis=0)
    seen = np.rint(observed.obs_amounts * 100).astype(np.int64).sum(axis=0)
    np.testing.assert_array_equal(seen + hold.cents.sum(axis=0), full)
