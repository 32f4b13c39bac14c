# -*- coding: utf-8 -*-
import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from errors import BudgetError, DomainError
from mod_query import InfluenceSet
from mod_surprisal import initial_deviations
from mod_synth import (
    SynthConfig, anonymity_preservation, dp_escape, dp_generate_continuous, dp_generate_nominal, dp_sensitivity,
    synthesize_dataset,
)
from tests.conftest import build_store


def _uniform_influence(n):
    rows = np.arange(n)
    return InfluenceSet(case_ids=rows.copy(), rows=rows, surprisals=np.zeros(n), probabilities=np.ones(n),
                        weights=np.full(n, 1.0 / n))


@pytest.fixture
def five(make_store):
    return make_store(pd.DataFrame({"x": [0.0, 1.0, 2.0, 3.0, 4.0]}))


@pytest.fixture
def small_mixed():
    r = np.random.default_rng(31)
    df = pd.DataFrame({"x": r.normal(size=60), "y": r.normal(size=60), "c": r.choice(["p", "q"], size=60)})
    return build_store(df, {"c": "nominal"})


@pytest.fixture
def wide(small_mixed):
    return initial_deviations(small_mixed.snapshot, overrides={"x": 1.0, "y": 1.0, "c": 0.3})


# ==========================================
# 1. CONFIGURACIÓN
# ==========================================
def test_synth_config_validation():
    assert SynthConfig.from_config(None).retries == 16
    with pytest.raises(DomainError):
        SynthConfig(mode="gan")
    with pytest.raises(DomainError):
        SynthConfig(mode="dp")
    with pytest.raises(DomainError):
        SynthConfig(anonymity="sometimes")
    with pytest.raises(DomainError):
        SynthConfig(conviction=0.0)


# ==========================================
# 2. MECANISMOS DP
# ==========================================
def test_sensitivity_rule(five):
    infl = _uniform_influence(5)
    assert dp_sensitivity(five.snapshot, infl, 0) == (1.0, False)
    assert dp_sensitivity(five.snapshot, infl, 0, sensitivity=5.0)[0] == 5.0


def test_large_epsilon_returns_weighted_mean(five):
    x = dp_generate_continuous(five, _uniform_influence(5), "x", 1e9, rng=np.random.default_rng(0))
    assert x == pytest.approx(2.0, abs=1e-6)
    with pytest.raises(DomainError):
        dp_generate_continuous(five, _uniform_influence(5), "x", 0.0)


def test_laplace_noise_distribution(five):
    draws = dp_generate_continuous(five, _uniform_influence(5), "x", 1.0, rng=np.random.default_rng(1), size=100_000)
    assert stats.kstest(draws, "laplace", args=(2.0, 1.0)).pvalue > 1e-3


def test_case_variant_centers_on_stored_values(five):
    draws = dp_generate_continuous(five, _uniform_influence(5), "x", 1e9, rng=np.random.default_rng(2),
                                   variant="case", size=200)
    assert set(np.round(draws, 6)) <= {0.0, 1.0, 2.0, 3.0, 4.0}


def test_dp_escape():
    assert dp_escape(1e-12) == pytest.approx(0.5)
    assert dp_escape(math.log(3)) == pytest.approx(0.25)
    assert dp_escape(50.0) < 1e-20


def test_dp_nominal_branch_frequencies(make_store):
    store = make_store(pd.DataFrame({"c": ["a"] * 8 + ["b"] * 2}), {"c": "nominal"}, c={"domain": ["a", "b", "c"]})
    infl = _uniform_influence(8)
    rng = np.random.default_rng(3)
    n = 20000
    counts = {"influence": 0, "marginal": 0, "uniform": 0}
    for _ in range(n):
        _, branch = dp_generate_nominal(store, infl, "c", math.log(3), rng)
        counts[branch] += 1
    assert counts["influence"] / n == pytest.approx(0.75, abs=0.015)
    assert counts["marginal"] / n == pytest.approx(0.1875, abs=0.015)
    assert counts["uniform"] / n == pytest.approx(0.0625, abs=0.01)


# ==========================================
# 3. ANONIMATO
# ==========================================
def test_exact_copy_has_zero_ap_min(small_mixed, wide):
    values = small_mixed.snapshot.to_frame().iloc[10][["x", "y", "c"]].to_dict()
    ap = anonymity_preservation(small_mixed, wide, values)
    assert not ap["flagged"]
    assert ap["ap_min"] == 0.0
    assert ap["ap_max"] >= ap["ap_min"]


# ==========================================
# 4. SÍNTESIS
# ==========================================
def test_zero_cases_gives_empty_frame(small_mixed):
    frame, report = synthesize_dataset(small_mixed, None, 0)
    assert frame.empty
    assert list(frame.columns) == ["x", "y", "c"]
    assert report["n_emitted"] == 0
    with pytest.raises(DomainError):
        synthesize_dataset(small_mixed, None, -1)


def test_conviction_synthesis_is_seeded(small_mixed):
    synth = SynthConfig(conviction=2.0, seed=9)
    a, report = synthesize_dataset(small_mixed, None, 6, synth=synth)
    b, _ = synthesize_dataset(small_mixed, None, 6, synth=synth)
    pd.testing.assert_frame_equal(a, b)
    assert len(a) == 6 and report["n_emitted"] == 6
    assert set(a["c"]) <= {"p", "q"}
    c, _ = synthesize_dataset(small_mixed, None, 6, synth=SynthConfig(conviction=2.0, seed=10))
    assert not a.equals(c)


def test_parallel_matches_serial(small_mixed):
    synth = SynthConfig(seed=4)
    serial, _ = synthesize_dataset(small_mixed, None, 4, synth=synth)
    threaded, _ = synthesize_dataset(small_mixed, None, 4, synth=synth, n_jobs=2)
    pd.testing.assert_frame_equal(serial, threaded)


def test_anonymity_filter_drops_close_cases(small_mixed, wide):
    synth = SynthConfig(anonymity="min", ap_threshold=1e9, retries=1, seed=2)
    frame, report = synthesize_dataset(small_mixed, wide, 3, synth=synth)
    assert frame.empty
    assert len(report["dropped"]) == 3
    assert all(d["attempts"] == 2 for d in report["dropped"])


def test_dp_budget_is_spent_once(small_mixed):
    synth = SynthConfig(mode="dp", epsilon=1.0, seed=1)
    frame, report = synthesize_dataset(small_mixed, None, 3, synth=synth)
    assert len(frame) == 3
    sid = small_mixed.snapshot.snapshot_id
    assert report["budget_ledger"][sid]["epsilon"] == 1.0
    assert report["sensitivity"] == {"x": "observed", "y": "observed"}
    with pytest.raises(BudgetError):
        synthesize_dataset(small_mixed, None, 3, synth=synth)
    again = SynthConfig(mode="dp", epsilon=1.0, seed=1, override_budget=True)
    _, report = synthesize_dataset(small_mixed, None, 3, synth=again)
    assert report["budget_ledger"][sid]["override"] is True
    assert small_mixed.metadata["budget_ledger"][sid]["previous"]["n_cases"] == 3
