"""Tests for the p-value fusion rules.

Worked examples are hand-traced through each rule's definition and frozen
here as literals. The batch API is then required to agree with the scalar
API decision for decision and score on random inputs.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from mlod.calibrator import Decision
from mlod.combiner import (
    METHODS,
    SCORED_METHODS,
    CombinerConfig,
    PValueVector,
    combine,
    combine_adabh,
    combine_bh,
    combine_by,
    combine_cauchy,
    combine_fisher,
    combine_last_layer,
    combine_naive_and,
    combined_score,
    decide_batch,
    score_batch,
)
from mlod.errors import (
    BadWeights,
    ConfigError,
    EmptyPVector,
    UnsupportedMethod,
)
from mlod.statfn import cauchy_quantile, chi2_quantile


def random_p_rows(rng, n: int, m: int) -> np.ndarray:
    """Random p-values mixing uniform mass with a spike near zero."""
    u = rng.uniform(size=(n, m))
    spike = rng.uniform(size=(n, m)) ** 6
    pick = rng.uniform(size=(n, m)) < 0.35
    return np.clip(np.where(pick, spike, u), 1e-15, 1.0 - 1e-12)


# step-up rules ---------------------------------------------------------------

def test_bh_rejects_smallest_pvalue_example():
    res = combine_bh(np.array([0.01, 0.20, 0.30]), alpha=0.05)
    assert res.decision is Decision.OOD     # 0.01 <= 0.05*1/3
    assert res.rejected_layers == (1,)
    assert abs(res.statistic - 0.03) < 1e-12  # min_k p_(k)*m/k


def test_bh_accepts_example():
    res = combine_bh(np.array([0.10, 0.20, 0.90]), alpha=0.05)
    assert res.decision is Decision.ID
    assert res.rejected_layers == ()


def test_bh_localizes_unsorted_input():
    res = combine_bh(np.array([0.20, 0.01, 0.30]), alpha=0.05)
    assert res.decision is Decision.OOD
    assert res.rejected_layers == (2,)


def test_bh_rejects_everything_below_kstar_cutoff():
    # k*=3 here: 0.04 <= 0.05*3/3, so all three p-values are rejected
    res = combine_bh(np.array([0.04, 0.03, 0.01]), alpha=0.05)
    assert res.decision is Decision.OOD
    assert res.rejected_layers == (1, 2, 3)


def test_bh_single_layer_is_plain_test():
    assert combine_bh(np.array([0.04]), alpha=0.05).decision is Decision.OOD
    assert combine_bh(np.array([0.06]), alpha=0.05).decision is Decision.ID


def test_by_more_conservative_than_bh_example():
    # f(3) = 11/6, first threshold 0.05/(3*11/6) = 0.009090..., so 0.01 no
    # longer clears it even though plain BH rejects the same vector
    p = np.array([0.01, 0.20, 0.30])
    assert combine_bh(p, alpha=0.05).decision is Decision.OOD
    res = combine_by(p, alpha=0.05)
    assert res.decision is Decision.ID
    assert abs(res.statistic - 0.01 * 3 * (11 / 6)) < 1e-12


def test_by_rejects_example():
    res = combine_by(np.array([0.005, 0.20, 0.30]), alpha=0.05)
    assert res.decision is Decision.OOD
    assert res.rejected_layers == (1,)


def test_by_never_rejects_when_bh_accepts():
    rng = np.random.default_rng(101)
    for _ in range(300):
        p = random_p_rows(rng, 1, int(rng.integers(1, 9)))[0]
        bh = combine_bh(p, alpha=0.1)
        by = combine_by(p, alpha=0.1)
        if by.decision is Decision.OOD:
            assert bh.decision is Decision.OOD
            assert set(by.rejected_layers) <= set(bh.rejected_layers)


def test_adabh_accepts_at_stage_one():
    res = combine_adabh(np.array([0.10, 0.20, 0.90]), alpha=0.05)
    assert res.decision is Decision.ID
    assert res.m0_hat is None
    assert res.rejected_layers == ()


def test_adabh_two_stage_example():
    # stage 1 fails (0.01 < 0.05/3); slopes S = [0.33, 0.48, 0.10] drop at
    # j=3, so m0 = min(floor(1/0.10)+1, 3) = 3 and the step-up reruns
    res = combine_adabh(np.array([0.01, 0.04, 0.90]), alpha=0.05)
    assert res.decision is Decision.OOD
    assert res.m0_hat == 3
    assert res.rejected_layers == (1,)


def test_adabh_m0_from_first_slope_drop():
    # S = [0.2475, 0.3167, 0.425, 0.4]: first drop at the last position with
    # S_j = 0.4, so m0 = floor(1/0.4)+1 = 3 < m
    res = combine_adabh(np.array([0.01, 0.05, 0.15, 0.60]), alpha=0.05)
    assert res.decision is Decision.OOD
    assert res.m0_hat == 3
    assert res.rejected_layers == (1,)
    assert abs(res.statistic - 0.03) < 1e-12  # min_k p_(k)*m0/k


def test_adabh_zero_slope_falls_back_to_m():
    # p=1 entries zero out the slope at the drop; the estimate falls back to m
    res = combine_adabh(np.array([0.01, 1.0, 1.0]), alpha=0.05)
    assert res.decision is Decision.OOD
    assert res.m0_hat == 3


def test_adabh_estimate_clipped_to_m():
    # drop exists but the slope is tiny, so floor(1/S)+1 far exceeds m
    res = combine_adabh(np.array([0.001, 0.96, 0.97, 0.98]), alpha=0.05)
    assert res.decision is Decision.OOD
    assert res.m0_hat == 4


def test_adabh_no_drop_uses_m():
    res = combine_adabh(np.array([0.001, 0.30, 0.31]), alpha=0.05)
    assert res.decision is Decision.OOD
    assert res.m0_hat == 3


def test_adabh_decision_equals_stage_one_failure():
    # stage 2 thresholds use m0 <= m, so any strict stage-1 failure also
    # passes the stage-2 step-up: the verdict depends on stage 1 alone
    rng = np.random.default_rng(103)
    for _ in range(400):
        m = int(rng.integers(1, 10))
        p = random_p_rows(rng, 1, m)[0]
        alpha = float(rng.uniform(0.01, 0.3))
        psort = np.sort(p)
        ranks = np.arange(1, m + 1)
        stage1_fails = bool(np.any(psort < alpha * ranks / m))
        res = combine_adabh(p, alpha=alpha)
        assert (res.decision is Decision.OOD) == stage1_fails


# global rules ----------------------------------------------------------------

def test_fisher_accepts_example():
    res = combine_fisher(np.array([0.5, 0.5]), alpha=0.05)
    assert res.decision is Decision.ID
    assert abs(res.statistic - (-4.0 * math.log(0.5))) < 1e-12
    assert round(res.statistic, 4) == 2.7726


def test_fisher_rejects_example():
    res = combine_fisher(np.array([0.001, 0.001]), alpha=0.05)
    assert res.decision is Decision.OOD
    assert round(res.statistic, 3) == 27.631
    assert res.statistic > chi2_quantile(0.95, 4)
    assert res.rejected_layers == (1, 2)  # both below alpha/m = 0.025


def test_fisher_bonferroni_diagnostics_only_when_ood():
    res = combine_fisher(np.array([0.5, 0.5]), alpha=0.05)
    assert res.rejected_layers == ()
    # one strong and one null layer: rejection driven by layer 1 alone
    res = combine_fisher(np.array([1e-6, 0.4]), alpha=0.05)
    assert res.decision is Decision.OOD
    assert res.rejected_layers == (1,)


def test_cauchy_single_layer_examples():
    res = combine_cauchy(np.array([0.01]), alpha=0.05)
    assert res.decision is Decision.OOD
    assert abs(res.statistic - math.tan(0.49 * math.pi)) < 1e-9
    assert res.statistic > cauchy_quantile(0.95)
    res = combine_cauchy(np.array([0.9, 0.9]), alpha=0.05)
    assert res.decision is Decision.ID
    assert abs(res.statistic - math.tan(-0.4 * math.pi)) < 1e-9


def test_cauchy_single_layer_equals_plain_test():
    rng = np.random.default_rng(107)
    for _ in range(200):
        p = float(rng.uniform(0.001, 0.999))
        alpha = float(rng.uniform(0.01, 0.5))
        res = combine_cauchy(np.array([p]), alpha=alpha)
        assert (res.decision is Decision.OOD) == (p < alpha)
    for alpha in (0.01, 0.05, 0.1, 0.25):
        # exactly on the boundary: p < alpha is false, so the verdict is ID
        assert combine_cauchy(np.array([alpha]), alpha=alpha).decision is Decision.ID


def test_cauchy_weights_steer_the_statistic():
    p = np.array([0.01, 0.9])
    all_first = combine_cauchy(p, alpha=0.05, weights=(1.0, 0.0))
    assert all_first.decision is Decision.OOD
    all_second = combine_cauchy(p, alpha=0.05, weights=(0.0, 1.0))
    assert all_second.decision is Decision.ID
    uniform = combine_cauchy(p, alpha=0.05)
    expected = 0.5 * (math.tan(0.49 * math.pi) + math.tan(-0.4 * math.pi))
    assert abs(uniform.statistic - expected) < 1e-9


def test_cauchy_weight_validation():
    p = np.array([0.1, 0.2])
    with pytest.raises(BadWeights):
        combine_cauchy(p, weights=(1.0,))
    with pytest.raises(BadWeights):
        combine_cauchy(p, weights=(-0.1, 1.1))
    with pytest.raises(BadWeights):
        combine_cauchy(p, weights=(0.6, 0.6))
    combine_cauchy(p, weights=(0.5, 0.5 - 1e-12))  # within the 1e-9 budget


def test_strict_open_interval_for_log_and_tan_rules():
    with pytest.raises(ValueError):
        combine_fisher(np.array([0.5, 1.0]))
    with pytest.raises(ValueError):
        combine_cauchy(np.array([1.0]))
    # step-up rules tolerate p = 1 exactly
    assert combine_bh(np.array([1.0, 1.0])).decision is Decision.ID
    assert combine_adabh(np.array([1.0, 1.0])).decision is Decision.ID


# baselines --------------------------------------------------------------------

def test_naive_and_examples():
    res = combine_naive_and(np.array([0.04, 0.9]), alpha=0.05)
    assert res.decision is Decision.OOD
    assert res.rejected_layers == (1,)
    assert res.statistic == 0.04
    assert combine_naive_and(np.array([0.05, 0.9]), alpha=0.05).decision is Decision.ID


def test_naive_and_false_alarm_rate_grows_with_depth():
    # under the global null the keep rate is (1-alpha)^m
    rng = np.random.default_rng(109)
    m, alpha, n = 5, 0.1, 20000
    P = np.clip(rng.uniform(size=(n, m)), 1e-12, 1.0)
    rate = float(decide_batch(P, CombinerConfig("naive_and", alpha=alpha)).mean())
    expected = 1.0 - (1.0 - alpha) ** m
    assert abs(rate - expected) < 0.015


def test_last_layer_examples():
    res = combine_last_layer(np.array([0.9, 0.01]), alpha=0.05)
    assert res.decision is Decision.OOD
    assert res.rejected_layers == (2,)
    assert res.statistic == 0.01
    assert combine_last_layer(np.array([0.01, 0.9]), alpha=0.05).decision is Decision.ID


# dispatch and configs ----------------------------------------------------------

def test_combine_dispatches_every_method():
    p = PValueVector(values=np.array([0.02, 0.4, 0.6]),
                     layers=["layer1", "layer2", "layer3"])
    direct = {
        "bh": combine_bh, "adabh": combine_adabh, "by": combine_by,
        "fisher": combine_fisher, "cauchy": combine_cauchy,
        "naive_and": combine_naive_and, "last_layer": combine_last_layer,
    }
    for method in METHODS:
        got = combine(p, CombinerConfig(method, alpha=0.05))
        want = direct[method](p, 0.05)
        assert got.method == method == want.method
        assert got.decision is want.decision
        assert got.statistic == want.statistic
        assert got.rejected_layers == want.rejected_layers


def test_combine_respects_cauchy_weights_in_config():
    p = np.array([0.01, 0.9])
    cfg = CombinerConfig("cauchy", alpha=0.05, weights=(0.0, 1.0))
    assert combine(p, cfg).decision is Decision.ID


def test_combiner_config_validation():
    with pytest.raises(ConfigError):
        CombinerConfig("simes")
    with pytest.raises(ConfigError):
        CombinerConfig("bh", alpha=0.0)
    with pytest.raises(ConfigError):
        CombinerConfig("bh", alpha=1.0)
    with pytest.raises(ConfigError):
        CombinerConfig("bh", weights=(0.5, 0.5))


def test_p_vector_domain_checks():
    with pytest.raises(EmptyPVector):
        combine_bh(np.array([]))
    with pytest.raises(ValueError):
        combine_bh(np.array([0.0, 0.5]))
    with pytest.raises(ValueError):
        combine_bh(np.array([0.5, 1.2]))
    with pytest.raises(ConfigError):
        combine_bh(np.ones((2, 2)) * 0.5)
    with pytest.raises(ConfigError):
        combine_bh(np.array([0.5]), alpha=2.0)


# batch API ---------------------------------------------------------------------

def test_decide_batch_matches_scalar_for_every_method():
    rng = np.random.default_rng(211)
    for m in (1, 2, 3, 6):
        P = random_p_rows(rng, 250, m)
        for method in METHODS:
            cfg = CombinerConfig(method, alpha=0.07)
            batch = decide_batch(P, cfg)
            scalar = np.array([combine(row, cfg).decision is Decision.OOD
                               for row in P])
            assert np.array_equal(batch, scalar), method


def test_score_batch_matches_scalar():
    rng = np.random.default_rng(223)
    for m in (1, 4):
        P = random_p_rows(rng, 200, m)
        for method in SCORED_METHODS:
            cfg = CombinerConfig(method, alpha=0.05)
            batch = score_batch(P, cfg)
            scalar = np.array([combined_score(row, cfg) for row in P])
            assert np.array_equal(batch, scalar), method


def test_score_thresholding_reproduces_decisions():
    # lower combined score means more OOD; thresholding it at the level must
    # agree with the decision rule for every scored method
    rng = np.random.default_rng(227)
    m = 5
    for alpha in rng.uniform(0.01, 0.5, size=10):
        alpha = float(alpha)
        P = random_p_rows(rng, 10000, m)
        for method in SCORED_METHODS:
            cfg = CombinerConfig(method, alpha=alpha)
            decided = decide_batch(P, cfg)
            score = score_batch(P, cfg)
            if method in ("bh", "by"):
                expected = score <= alpha
            elif method == "fisher":
                expected = score < -chi2_quantile(1.0 - alpha, 2 * m)
            elif method == "cauchy":
                expected = -score > cauchy_quantile(1.0 - alpha)
            else:
                expected = score < alpha
            assert np.array_equal(decided, expected), (method, alpha)


def test_statistic_and_score_are_consistent():
    rng = np.random.default_rng(229)
    P = random_p_rows(rng, 50, 3)
    for row in P:
        bh = combine_bh(row)
        assert combined_score(row, CombinerConfig("bh")) == bh.statistic
        fisher = combine_fisher(row)
        assert combined_score(row, CombinerConfig("fisher")) == -fisher.statistic
        cauchy = combine_cauchy(row)
        assert combined_score(row, CombinerConfig("cauchy")) == -cauchy.statistic


def test_decide_batch_monotone_in_alpha():
    rng = np.random.default_rng(233)
    P = random_p_rows(rng, 400, 4)
    levels = [0.001, 0.01, 0.05, 0.2, 0.5, 0.9]
    for method in METHODS:
        cfg = CombinerConfig(method, alpha=0.05)
        prev = np.zeros(P.shape[0], dtype=bool)
        for a in levels:
            cur = decide_batch(P, cfg, alpha=a)
            assert np.all(prev <= cur), (method, a)
            prev = cur


def test_decide_batch_alpha_endpoints():
    P = np.full((5, 3), 0.5)
    cfg = CombinerConfig("bh")
    assert not decide_batch(P, cfg, alpha=0.0).any()
    assert decide_batch(P, cfg, alpha=1.0).all()
    with pytest.raises(ConfigError):
        decide_batch(P, cfg, alpha=1.5)


def test_score_batch_rejects_adabh():
    with pytest.raises(UnsupportedMethod):
        score_batch(np.full((2, 3), 0.5), CombinerConfig("adabh"))


def test_batch_domain_checks():
    cfg = CombinerConfig("bh")
    with pytest.raises(EmptyPVector):
        decide_batch(np.empty((0, 0)), cfg)
    with pytest.raises(EmptyPVector):
        decide_batch(np.array([0.5, 0.5]), cfg)  # 1-D is not a batch
    with pytest.raises(ValueError):
        decide_batch(np.array([[0.5, 0.0]]), cfg)
    with pytest.raises(ValueError):
        decide_batch(np.array([[0.5, 1.0]]), CombinerConfig("fisher"))
