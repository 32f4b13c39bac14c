# -*- coding: utf-8 -*-
import math

import numpy as np
import pandas as pd
import pytest

from errors import DomainError
from mod_analysis import analyze
from mod_lifecycle import AblationPolicy, entropy_of, influence_entropy, rebalance, reduce, train_with_ablation
from mod_surprisal import initial_deviations
from tests.conftest import SMALL_CONFIG, build_store


@pytest.fixture
def cloud():
    r = np.random.default_rng(23)
    return build_store(pd.DataFrame(r.normal(size=(120, 2)), columns=["x", "y"]))


# ==========================================
# 1. POLÍTICA Y ENTROPÍA
# ==========================================
def test_policy_validation_and_config():
    policy = AblationPolicy.from_config({"lifecycle": {"batch_size": 8, "strict": True}})
    assert policy.batch_size == 8 and policy.strict
    assert policy.reduction_fraction == pytest.approx(1 / math.e)
    with pytest.raises(DomainError):
        AblationPolicy(reduction_fraction=1.0)
    with pytest.raises(DomainError):
        AblationPolicy(batch_size=0)
    with pytest.raises(DomainError):
        AblationPolicy(min_trained_cases=0)


def test_entropy_of():
    assert entropy_of([1.0, 1.0]) == pytest.approx(math.log(2))
    assert entropy_of([0.25] * 4) == pytest.approx(math.log(4))
    assert entropy_of([3.0]) == 0.0
    assert entropy_of([0.0, 2.0]) == 0.0


def test_influence_entropy_of_stored_case(cloud):
    h = influence_entropy(cloud, None, 4)
    assert 0.0 <= h < math.log(len(cloud))


# ==========================================
# 2. ABLACIÓN AL ENTRENAR
# ==========================================
def test_below_minimum_cases_are_trained(cloud):
    before = len(cloud)
    report = train_with_ablation(cloud, None, [{"x": 0.0, "y": 0.0}])
    assert report[0]["status"] == "trained"
    assert len(cloud) == before + 1


def test_duplicate_is_ablated_and_mass_kept(cloud):
    model = analyze(cloud, config=SMALL_CONFIG, seed=0)
    config = {"lifecycle": {"min_trained_cases": 50, "strict": True}}
    values = cloud.snapshot.to_frame().iloc[3][["x", "y"]].to_dict()
    n, mass = len(cloud), cloud.total_mass
    report = train_with_ablation(cloud, model, [values], config=config)
    assert report[0]["status"] == "ablated"
    recipients = report[0]["recipients"]
    assert 3 in [r["id"] for r in recipients]
    assert math.fsum(r["amount"] for r in recipients) == pytest.approx(1.0)
    assert len(cloud) == n
    assert cloud.total_mass == pytest.approx(mass + 1.0)
    assert cloud.reconcile_mass() == pytest.approx(n + 1.0)


# ==========================================
# 3. REDUCCIÓN
# ==========================================
@pytest.mark.filterwarnings("ignore")
def test_reduce_conserves_mass(cloud):
    wide = initial_deviations(cloud.snapshot, overrides={"x": 0.5, "y": 0.5})
    out = reduce(cloud, wide, policy=AblationPolicy(batch_size=16))
    assert out["cases_before"] == 120
    assert out["target"] == math.ceil(120 / math.e)
    assert out["cases_after"] < out["cases_before"]
    assert out["cases_after"] == len(cloud)
    assert out["mass_after"] == pytest.approx(out["mass_before"])
    assert cloud.snapshot.weights.sum() == pytest.approx(120.0)
    kept = set(cloud.snapshot.case_ids.tolist())
    assert not kept & set(out["removed"])
    assert len(out["flows"]) == len(out["removed"])


def test_reduce_clamps_tiny_target(make_store):
    store = make_store(pd.DataFrame({"x": [0.0, 1.0, 2.0]}))
    with pytest.warns(UserWarning):
        out = reduce(store, None, policy=AblationPolicy(reduction_fraction=0.1))
    assert out["target"] >= 2
    assert out["mass_after"] == pytest.approx(3.0)


# ==========================================
# 4. REBALANCEO
# ==========================================
@pytest.fixture
def skewed(make_store):
    df = pd.DataFrame({"x": np.arange(40.0), "c": ["a"] * 30 + ["b"] * 10})
    return make_store(df, {"c": "nominal"})


def test_rebalance_inverse_share_equalizes(skewed):
    w = rebalance(skewed, "c")
    assert w[:30].sum() == pytest.approx(w[30:].sum())
    assert w.sum() == pytest.approx(40.0)
    assert skewed.snapshot.weights.tolist() == pytest.approx(w.tolist())


def test_rebalance_share_mode(skewed):
    w = rebalance(skewed, ["c"], mode="share")
    assert w[:30].sum() / w[30:].sum() == pytest.approx(9.0)
    assert w.sum() == pytest.approx(40.0)


def test_rebalance_validation(skewed):
    with pytest.raises(DomainError):
        rebalance(skewed, "x")
    with pytest.raises(DomainError):
        rebalance(skewed, "c", mode="sideways")
