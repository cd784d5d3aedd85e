import warnings

import numpy as np
import pytest

from msm_iv.dgp import BUILTINS, MisspecPattern, conditional_tables
from msm_iv.errors import ConfigError, MergedCellWarning, NumericError, SeparationWarning
from msm_iv.nuisance import (CondModel, ReferenceDensity, cj_recursion, fit_logistic, fit_nuisances,
                             psi_recursion, set_reference_density)
from msm_iv.oracle import TableModel, population
from msm_iv.panel import Panel


def test_logistic_recovers_coefficients():
    r = np.random.default_rng(0)
    X = np.column_stack([np.ones(20000), r.normal(size=20000)])
    y = (r.random(20000) < 1 / (1 + np.exp(-(X @ [-0.5, 1.2])))).astype(float)
    b = fit_logistic(X, y)
    assert np.allclose(b, [-0.5, 1.2], atol=0.06)
    # first-order condition at the returned point
    p = 1 / (1 + np.exp(-X @ b))
    assert np.max(np.abs(X.T @ (y - p))) / len(y) < 1e-9


def test_logistic_weights_equal_replication():
    r = np.random.default_rng(1)
    X = np.column_stack([np.ones(50), r.normal(size=50)])
    y = (r.random(50) < 0.4).astype(float)
    w = r.integers(1, 4, 50)
    rep = np.repeat(np.arange(50), w)
    assert np.allclose(fit_logistic(X, y, w), fit_logistic(X[rep], y[rep]), atol=1e-8)


def test_logistic_separation_warns():
    X = np.column_stack([np.ones(20), np.r_[np.zeros(10), np.ones(10)]])
    y = np.r_[np.zeros(10), np.ones(10)]
    with pytest.warns(SeparationWarning):
        fit_logistic(X, y)


def test_logistic_too_few_rows():
    with pytest.raises(NumericError):
        fit_logistic(np.ones((1, 2)), np.ones(1))


def _panel(L, Z, A, Y):
    return Panel(np.asarray(L, float)[:, None, None], np.asarray(Z)[:, None], np.asarray(A)[:, None],
                 np.asarray(Y, float), ("l",))


def test_saturated_cell_means():
    p = _panel([0, 0, 1, 1, 1], [0, 1, 0, 1, 1], [0, 1, 1, 0, 1], [1, 2, 3, 4, 6])
    m = CondModel.fit(p, [("l", 0), ("z", 0)], p.Y)
    assert m.kind == "saturated"
    assert np.allclose(m.predict(p), [1, 2, 3, 5, 5])
    assert np.allclose(m.predict(p, {("z", 0): 1}), [2, 2, 5, 5, 5])


def test_empty_cell_merges_with_warning():
    p = _panel([0, 0, 1], [0, 1, 0], [0, 1, 1], [1.0, 3.0, 5.0])
    m = CondModel.fit(p, [("l", 0), ("z", 0)], p.Y)
    with pytest.warns(MergedCellWarning):
        out = m.predict(p, {("z", 0): 1})
    # the (l=1, z=1) cell is empty; it borrows the l=1 cell
    assert out[2] == 5.0


def test_empty_cell_model_fallback():
    p = _panel([0, 0, 1, 1], [0, 1, 0, 0], [0, 1, 1, 1], [1.0, 3.0, 5.0, 5.0])
    m = CondModel.fit(p, [("l", 0), ("z", 0)], p.Z[:, 0], binary=True, fallback="model")
    with pytest.warns(MergedCellWarning, match="main-effects"):
        m.predict(p, {("z", 0): 1})


def test_unknown_kind():
    p = _panel([0, 1], [0, 1], [0, 1], [1.0, 2.0])
    with pytest.raises(ConfigError):
        CondModel.fit(p, [("l", 0)], p.Y, kind="forest")


def test_population_fits_equal_conditional_probabilities(desk):
    pop = population(desk)
    nu = fit_nuisances(pop)
    law = conditional_tables(desk)
    # instrument density at time 1 against the enumerated conditional law
    given = [("l", 0), ("z", 0), ("a", 0), ("l", 1)]
    truth = law.cond_mean(law.bits["z", 1].astype(float), given)
    code_pop = np.zeros(pop.n, dtype=np.int64)
    for v in given:
        code_pop = code_pop * 2 + pop.column(v).astype(np.int64)
    code_law = law.codes(given)
    lookup = dict(zip(code_law, truth))
    assert np.allclose(nu.fz1(pop, 1), [lookup[c] for c in code_pop], atol=1e-13)
    # the fitted effect equals the structural delta (it does not involve U)
    assert np.allclose(nu.delta_hat(pop, 1), TableModel(desk.delta[1]).predict(pop), atol=1e-13)


def test_misspecified_fit_drops_column(desk):
    pop = population(desk)
    nu = fit_nuisances(pop, MisspecPattern({"delta": "omit_covariate:l"}))
    assert ("l", 1) not in nu.delta[1].fit.variables
    assert ("l", 1) in nu.fZ[1].variables


def test_delta_floor_counts(desk):
    pop = population(desk)
    nu = fit_nuisances(pop, delta_floor=0.45)
    nu.delta_hat(pop, 0)
    assert nu.diagnostics["delta_floor_hits"] > 0
    assert np.all(np.abs(nu.delta_hat(pop, 0)) >= 0.45)


def test_reference_density_modes(desk_panel):
    u = set_reference_density(desk_panel, "uniform")
    assert np.all(u.prob(desk_panel, 1) == 0.5)
    f = set_reference_density(desk_panel, "fitted")
    p1 = f.prob1(desk_panel, 1)
    assert np.all((p1 > 0) & (p1 < 1))
    t = set_reference_density(desk_panel, "table", table=[{(0,): 0.3, (1,): 0.6},
                                                          {(0, 0): .5, (0, 1): .5, (1, 0): .2, (1, 1): .9}],
                              v_columns=("l",))
    got = t.prob1(desk_panel, 0)
    assert np.allclose(got, np.where(desk_panel.L[:, 0, 0] == 1, 0.6, 0.3))
    with pytest.raises(NumericError, match="zero mass"):
        set_reference_density(desk_panel, "table", table=[{(0,): 0.0, (1,): 0.0},
                                                          {(0, 0): .5, (0, 1): .5, (1, 0): .5, (1, 1): .5}],
                              v_columns=("l",))
    with pytest.raises(ConfigError):
        set_reference_density(desk_panel, "magic")


def test_regime_prob_uniform():
    ref = ReferenceDensity("uniform", 3)
    A = np.array([[0, 1, 1], [1, 1, 1]])
    assert np.allclose(ref.regime_prob(A, np.zeros((2, 0))), 0.125)


def test_psi_recursion_terminal_contrast(desk):
    # Gamma1 at the last time is the instrument-arm difference of the pseudo-outcome
    pop = population(desk)
    nu = fit_nuisances(pop)
    X = pop.Y[:, None]
    fit = psi_recursion(pop, nu, X)
    assert len(fit.gamma1) == 2 and fit.gamma1[0].shape[0] == pop.n
    q = cj_recursion(pop, nu, X)
    assert np.all(np.isfinite(q.q_bar))


def test_treatment_model_needs_relevance(desk):
    from msm_iv.dgp import DgpSpec, Table
    d = [Table(t.parents, np.zeros_like(t.values)) for t in desk.delta]
    spec = DgpSpec(**{**desk.__dict__, "delta": d})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pop = conditional_tables(spec).population_panel()
    with pytest.raises(NumericError, match="relevance|floor"):
        fit_nuisances(pop)
