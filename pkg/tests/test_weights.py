import numpy as np

from msm_iv.dgp import BUILTINS, simulate
from msm_iv.nuisance import fit_nuisances
from msm_iv.oracle import check_weight_mean, oracle_nuisances, population, sample_weight_mean
from msm_iv.weights import inverse_weights, iv_weights, sra_weights, weight_diagnostics


def test_iv_weight_factorisation(desk_panel):
    nu = fit_nuisances(desk_panel)
    t = iv_weights(desk_panel, nu)
    prod = np.cumprod(t.iv1 * t.iv2, axis=1)
    assert np.allclose(prod, t.iv, rtol=1e-12)
    assert np.allclose(t.iv * t.inv_iv, 1.0)
    inv = inverse_weights(t, "iv")
    assert inv.shape == (desk_panel.n, desk_panel.J + 1) and np.all(inv[:, 0] == 1)


def test_sign_follows_instrument_and_treatment(desk_panel):
    nu = fit_nuisances(desk_panel)
    t = iv_weights(desk_panel, nu)
    s = np.prod((2 * desk_panel.Z - 1) * (2 * desk_panel.A - 1), axis=1)
    assert np.array_equal(np.sign(t.iv[:, -1]), s)


def test_collapse_is_exact():
    spec = BUILTINS["perfect_compliance"]()
    p = simulate(spec, 3000, seed=4)
    nu = fit_nuisances(p)
    a, b = iv_weights(p, nu), sra_weights(p, nu)
    assert np.array_equal(a.inv_iv, b.inv_sra)
    assert np.all(a.iv_sign == 1)


def test_sra_weights_are_density_ratios(desk):
    pop, nu = oracle_nuisances(desk)
    t = sra_weights(pop, nu)
    # E[1/W-bar] over the observed law equals one for the fitted (true) propensities
    assert abs(pop.w @ t.inv_sra[:, -1] - 1) < 1e-12


def test_mean_one_enumerated(desk):
    assert check_weight_mean(desk).max_abs_diff < 1e-12


def test_mean_one_sample(desk):
    p = simulate(desk, 50_000, seed=3)
    m, se = sample_weight_mean(desk, p)
    assert abs(m - 1) < 3 * se


def test_population_inverse_weights_match_oracle(desk):
    pop, nu = oracle_nuisances(desk)
    from msm_iv.oracle import true_inverse_iv
    assert np.allclose(iv_weights(pop, nu).inv_iv[:, -1], true_inverse_iv(desk, pop), rtol=1e-12)


def test_diagnostics(desk_panel):
    nu = fit_nuisances(desk_panel)
    s = weight_diagnostics(iv_weights(desk_panel, nu))
    assert 0 < s.ess <= desk_panel.n
    assert 0 < s.positive_share < 1
    assert s.quantiles_abs_inv["0.5"] <= s.quantiles_abs_inv["0.99"]
    assert s.to_json()["n"] == desk_panel.n
