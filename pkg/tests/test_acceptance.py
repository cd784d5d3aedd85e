"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s``; the lines are also
echoed when the suite runs under ``pytest -v``.
"""
import time
import warnings

import numpy as np
import pytest

from msm_iv.dgp import BUILTINS, MisspecPattern, simulate
from msm_iv.errors import MergedCellWarning
from msm_iv.estimators import fit_ipw_iv, fit_ipw_sra
from msm_iv.experiments import monte_carlo
from msm_iv.msm import MsmSpec
from msm_iv.nuisance import fit_nuisances
from msm_iv.weights import iv_weights, sra_weights
from msm_iv import oracle

# sra_ipw probability limit minus beta0 on the confounded desk process
PINNED_SRA_IPW_BIAS = np.array([-0.3240019866400794, 0.3205146221315769])

RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="module")
def spec():
    return BUILTINS["desk"]()


@pytest.fixture(scope="module")
def model():
    return MsmSpec("1.1")


def report(capsys, k: int, ok: bool, detail: str) -> None:
    RESULTS[k] = (ok, detail)
    with capsys.disabled():
        print(f"\nCRITERION {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_01_instrument_effect_identity(spec, capsys):
    t = time.perf_counter()
    rep = oracle.check_instrument_effect(spec)
    dt = time.perf_counter() - t
    ok = rep.max_abs_diff < 1e-10 and dt < 1.0
    report(capsys, 1, ok, f"max|diff|={rep.max_abs_diff:.2e} over {rep.details['cells']} cells, {dt:.3f}s")


def test_criterion_02_weighted_moment_identity(spec, capsys):
    t = time.perf_counter()
    rep = oracle.check_weighted_moment_battery(spec)
    dt = time.perf_counter() - t
    nfun = rep.details["functions"]
    ok = rep.max_abs_diff < 1e-10 and nfun >= 20 and dt < 5.0
    report(capsys, 2, ok, f"{nfun} functions, max|diff|={rep.max_abs_diff:.2e}, {dt:.3f}s")


def test_criterion_03_mean_one_weights(spec, capsys):
    exact = oracle.check_weight_mean(spec, tol=1e-12)
    panel = simulate(spec, 100_000, seed=31)
    m, se = oracle.sample_weight_mean(spec, panel)
    ok = exact.passed and abs(m - 1) <= 3 * se
    report(capsys, 3, ok, f"enumerated |mean-1|={exact.max_abs_diff:.1e}; "
                          f"sample mean {m:.4f} (SE {se:.4f}, z={(m - 1) / se:+.2f})")


def test_criterion_04_perfect_compliance_collapse(model, capsys):
    pc = BUILTINS["perfect_compliance"]()
    panel = simulate(pc, 5000, seed=41)
    nu = fit_nuisances(panel)
    same_w = np.array_equal(iv_weights(panel, nu).inv_iv, sra_weights(panel, nu).inv_sra)
    a, b = fit_ipw_iv(panel, model, nu), fit_ipw_sra(panel, model, nu)
    pop = oracle.population(pc)
    pa, pb = fit_ipw_iv(pop, model), fit_ipw_sra(pop, model)
    ok = same_w and np.array_equal(a.beta, b.beta) and np.array_equal(pa.beta, pb.beta)
    report(capsys, 4, ok, f"weights identical: {same_w}; max|beta_iv-beta_sra|="
                          f"{np.max(np.abs(a.beta - b.beta)):.1e} (sample), "
                          f"{np.max(np.abs(pa.beta - pb.beta)):.1e} (population)")


def test_criterion_05_influence_mean_zero(spec, model, capsys):
    rep = oracle.check_influence_zero(spec, model)
    report(capsys, 5, rep.max_abs_diff < 1e-10, f"||E D(beta0)||_inf={rep.max_abs_diff:.2e}")


def test_criterion_06_robustness_matrix(spec, model, capsys):
    t = time.perf_counter()
    bias = {}
    for pat in ("i_only", "ii_only", "iii_only", "all_wrong"):
        r = oracle.plim_solve(spec, model, "iv_mr", MisspecPattern.named(pat))
        bias[pat] = float(np.max(np.abs(r.bias)))
    u = BUILTINS["unconfounded"]()
    dr = {}
    for pat in ("sra_weights_wrong", "sra_outcome_wrong", "sra_both_wrong"):
        r = oracle.plim_solve(u, model, "sra_dr", MisspecPattern.named(pat))
        dr[pat] = float(np.max(np.abs(r.bias)))
    dt = time.perf_counter() - t
    ok = (all(bias[p] < 1e-8 for p in ("i_only", "ii_only", "iii_only")) and bias["all_wrong"] > 1e-2
          and dr["sra_weights_wrong"] < 1e-8 and dr["sra_outcome_wrong"] < 1e-8
          and dr["sra_both_wrong"] > 1e-2 and dt < 120)
    txt = ", ".join(f"{k}={v:.1e}" for k, v in {**bias, **dr}.items())
    report(capsys, 6, ok, f"max|plim bias|: {txt}; {dt:.2f}s")


def test_criterion_07_confounding_bias(spec, model, capsys):
    r = oracle.plim_solve(spec, model, "sra_ipw")
    big = np.max(np.abs(r.bias)) > 0.05
    pinned = np.allclose(r.bias, PINNED_SRA_IPW_BIAS, atol=1e-9)
    report(capsys, 7, big and pinned, f"sra_ipw plim bias {np.round(r.bias, 6).tolist()} "
                                      f"(pinned match: {pinned})")


def test_criterion_08_finite_sample_consistency(spec, model, capsys):
    t = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MergedCellWarning)
        mc = monte_carlo(spec, model, n=20_000, reps=500, seed=808, estimators=("iv_ipw", "iv_mr"))
    dt = time.perf_counter() - t
    parts, ok = [], dt < 600
    for e in ("iv_ipw", "iv_mr"):
        b, se = mc.bias(e), mc.mc_se(e)
        ok &= bool(np.all(np.abs(b) < np.maximum(0.02, 3 * se))) and mc.failures[e] == 0
        parts.append(f"{e} bias {np.round(b, 4).tolist()} (MC-SE {np.round(se, 4).tolist()})")
    report(capsys, 8, ok, "; ".join(parts) + f"; {dt:.1f}s")


def test_criterion_09_coverage(spec, model, capsys):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MergedCellWarning)
        mc = monte_carlo(spec, model, n=5000, reps=1000, seed=909, estimators=("iv_mr",), boot=200)
    cs = mc.coverage("iv_mr", "sandwich")
    cb = mc.coverage("iv_mr", "bootstrap")
    ok = bool(np.all((cs >= 0.92) & (cs <= 0.97)) and np.all((cb >= 0.92) & (cb <= 0.97)))
    report(capsys, 9, ok, f"sandwich {np.round(cs, 3).tolist()}, bootstrap {np.round(cb, 3).tolist()}")


def test_criterion_10_efficiency(spec, model, capsys):
    rep = oracle.efficiency_check(spec, model, n_random=20, seed=10)
    exact_ratio = np.diag(rep.avar_eff) / np.diag(rep.avar_mr)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MergedCellWarning)
        mc = monte_carlo(spec, model, n=20_000, reps=500, seed=1010, estimators=("iv_mr", "iv_eff"))
    mc_ratio = mc.variance("iv_eff") / mc.variance("iv_mr")
    rel = np.abs(mc_ratio / exact_ratio - 1)
    ok = rep.passed and bool(np.all(rel < 0.15))
    report(capsys, 10, ok, f"min diag gap {rep.min_gap_diag:.3g} over 20 random h and iv_mr; "
                           f"var ratio eff/mr exact {np.round(exact_ratio, 4).tolist()}, "
                           f"MC {np.round(mc_ratio, 4).tolist()}")


def test_summary(capsys):
    with capsys.disabled():
        print("\nACCEPTANCE SUMMARY")
        for k in range(1, 11):
            ok, detail = RESULTS.get(k, (False, "not run"))
            print(f"  criterion {k:>2}: {'PASS' if ok else 'FAIL'}")
    assert len(RESULTS) == 10 and all(ok for ok, _ in RESULTS.values())
