import itertools

import numpy as np
import pytest

import bruteforce as bf
from msm_iv.dgp import BUILTINS, MisspecPattern, ROBUSTNESS_PATTERNS, desk_dgp
from msm_iv.msm import MsmSpec
from msm_iv import oracle


SPECS = ["desk", "unconfounded", "perfect_compliance", "backdoor"]


@pytest.mark.parametrize("name", SPECS)
def test_beta0_matches_bruteforce(name, msm):
    spec = BUILTINS[name]()
    ref = bf.beta0(spec.to_json(), lambda a: [1.0, sum(a)])
    assert np.allclose(oracle.true_beta(spec, msm), ref, atol=1e-13)


def test_beta0_grid_refined(desk, msm):
    # coarse-to-fine grid search of the least-squares criterion
    cm = bf.counterfactual_means(desk.to_json())
    X = np.array([[1.0, sum(a)] for a in cm])
    y = np.array(list(cm.values()))
    centre, width = np.zeros(2), 4.0
    for _ in range(40):
        g = np.linspace(-width, width, 21)
        cand = np.array(list(itertools.product(centre[0] + g, centre[1] + g)))
        loss = ((y[None] - cand @ X.T) ** 2).sum(1)
        centre = cand[np.argmin(loss)]
        width /= 4
    assert np.allclose(oracle.true_beta(desk, msm), centre, atol=1e-10)


def test_desk_beta0_value(desk, msm):
    # the treatment coefficient of a linear-in-sum_a MSM equals the per-occasion effect
    assert np.allclose(oracle.true_beta(desk, msm), [1.375, 0.6], atol=1e-12)


def test_counterfactual_mean(desk):
    cm = bf.counterfactual_means(desk.to_json())
    for a, v in cm.items():
        assert abs(oracle.counterfactual_mean(desk, a) - v) < 1e-13
    # conditional on V there are strata
    vals, pv = oracle.v_values(desk)
    tot = sum(p * oracle.counterfactual_mean(desk, (1, 0), v=v) for v, p in zip(vals, pv))
    assert abs(tot - cm[(1, 0)]) < 1e-13


def test_series_counterfactual(msm):
    s = BUILTINS["series"]()
    m1 = oracle.counterfactual_mean(s, (1, 1), m=1)
    m2 = oracle.counterfactual_mean(s, (1, 1), m=2)
    assert m2 > m1


def test_instrument_effect_against_bruteforce(desk):
    rep = oracle.check_instrument_effect(desk)
    assert rep.passed and rep.details["cells"] > 0
    pairs = np.array(bf.arm_contrasts(desk.to_json()))
    assert np.max(np.abs(pairs[:, 0] - pairs[:, 1])) < 1e-12


def test_instrument_effect_negative_control_names_time():
    rep = oracle.check_instrument_effect(BUILTINS["backdoor"]())
    assert not rep.passed and rep.max_abs_diff > 1e-3
    assert rep.details["worst_time"] in (0, 1)


def test_weighted_moment_battery(desk):
    rep = oracle.check_weighted_moment_battery(desk)
    assert rep.passed and rep.details["functions"] >= 20


def test_weighted_moment_skipping_first_occasion_fails(desk):
    rep = oracle.check_weighted_moment_battery(desk, first_index=1)
    assert not rep.passed


def test_weighted_moment_fitted_reference(desk):
    # identity holds for a non-uniform reference density too
    rep = oracle.check_weighted_moment(desk, lambda A, L, Y: Y * A[:, 1], fstar="fitted")
    assert rep.passed


def test_influence_mean_zero_and_power(desk, msm):
    assert oracle.check_influence_zero(desk, msm).passed
    off = oracle.check_influence_zero(desk, msm, beta=[1.375, 0.7])
    assert off.max_abs_diff > 1e-3


@pytest.mark.parametrize("J", [1, 3])
def test_identities_other_horizons(J, msm):
    s = desk_dgp(J=J)
    assert oracle.check_instrument_effect(s).passed
    assert oracle.check_weighted_moment_battery(s).passed
    assert oracle.check_influence_zero(s, msm).passed
    assert oracle.check_weight_mean(s).passed


def test_plim_matrix(desk, msm):
    res = oracle.robustness_matrix(desk, msm, ("sra_ipw", "iv_ipw", "iv_mr"))
    for pat in ROBUSTNESS_PATTERNS:
        b = np.max(np.abs(res[pat, "iv_mr"].bias))
        assert (b < 1e-8) if pat != "all_wrong" else (b > 1e-2), pat
        # weighting alone is consistent exactly when the weights are right
        bi = np.max(np.abs(res[pat, "iv_ipw"].bias))
        assert (bi < 1e-8) if pat in ("all_correct", "i_only") else (bi > 1e-3), pat
        assert np.max(np.abs(res[pat, "sra_ipw"].bias)) > 0.05


def test_sra_dr_double_robustness(msm):
    u = BUILTINS["unconfounded"]()
    for pat in ("all_correct", "sra_weights_wrong", "sra_outcome_wrong"):
        assert np.max(np.abs(oracle.plim_solve(u, msm, "sra_dr", MisspecPattern.named(pat)).bias)) < 1e-8
    assert np.max(np.abs(oracle.plim_solve(u, msm, "sra_dr", MisspecPattern.named("sra_both_wrong")).bias)) > 1e-2


def test_efficiency_check(desk, msm):
    rep = oracle.efficiency_check(desk, msm, n_random=5)
    assert rep.passed and rep.min_gap_eig > -1e-10
    assert np.all(np.diag(rep.avar_eff) <= np.diag(rep.avar_ipw))


def test_identity_suite(desk, msm):
    out = oracle.identity_suite(desk, msm)
    assert out["pass"] and "collapse" not in out
    pc = oracle.identity_suite(BUILTINS["perfect_compliance"](), msm)
    assert pc["pass"] and pc["collapse"]["perfect_compliance"]
    bad = oracle.identity_suite(BUILTINS["backdoor"](), msm)
    assert not bad["pass"]
