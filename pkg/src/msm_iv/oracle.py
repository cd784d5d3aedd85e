"""Exact population computations by enumerating a discrete DGP.

Two independent routes meet here.  The latent g-formula integrates U and
L under a fixed regime using the structural tables; the observed-data
route enumerates the joint law of the observables, builds a frequency
weighted population panel, and runs the very same estimator code on it.
Identity checks compare the two.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dgp import (DgpSpec, LatentLaw, MisspecPattern, ROBUSTNESS_PATTERNS, Table,
                  conditional_tables)
from .errors import ConfigError, NumericError
from .estimators import (AffineEE, eff_components, eff_equation, estimating_equation,
                         fit_efficient_iv, heff, solve_ee)
from .msm import MsmSpec
from .nuisance import NuisanceSet, ReferenceDensity, fit_nuisances, set_reference_density
from .panel import Panel, Regime, enumerate_regimes

TOL = 1e-10


@dataclass
class IdentityReport:
    name: str
    lhs: np.ndarray
    rhs: np.ndarray
    max_abs_diff: float
    tolerance: float = TOL
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_diff <= self.tolerance)

    # ``pass`` is a keyword, so the boolean is exposed under both spellings
    @property
    def pass_(self) -> bool:
        return self.passed

    def to_json(self) -> dict:
        return {"name": self.name, "pass": self.passed, "max_abs_diff": self.max_abs_diff,
                "tolerance": self.tolerance, "lhs": np.ravel(self.lhs).tolist(),
                "rhs": np.ravel(self.rhs).tolist(), "details": self.details}


def _report(name, lhs, rhs, tol, **details) -> IdentityReport:
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    diff = float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0
    return IdentityReport(name, lhs, rhs, diff, tol, details)


def _fstar(spec: DgpSpec, fstar) -> ReferenceDensity:
    if isinstance(fstar, ReferenceDensity):
        return fstar
    if fstar in (None, "uniform"):
        return ReferenceDensity("uniform", spec.J, spec.v_columns)
    if fstar == "fitted":
        return set_reference_density(population(spec), "fitted")
    raise ConfigError(f"unsupported reference density {fstar!r} for the oracle")


_POP_CACHE: dict = {}


def population(spec: DgpSpec) -> Panel:
    """Population panel of the observed law (cached per spec digest)."""
    key = spec.digest()
    if key not in _POP_CACHE:
        if len(_POP_CACHE) > 32:
            _POP_CACHE.clear()
        _POP_CACHE[key] = conditional_tables(spec).population_panel()
    return _POP_CACHE[key]


# -- latent g-formula -----------------------------------------------------------------

def v_values(spec: DgpSpec) -> tuple[np.ndarray, np.ndarray]:
    """Distinct baseline V values and their probabilities."""
    law = conditional_tables(spec, regime=(0,) * spec.J)
    return _v_strata(law, spec)


def _v_strata(law: LatentLaw, spec: DgpSpec):
    k = len(spec.v_columns)
    if k == 0:
        return np.zeros((1, 0)), np.array([law.total_mass()])
    vals = np.array(list(itertools.product((0, 1), repeat=k)), dtype=float)
    code = law.codes([(c, 0) for c in spec.v_columns])
    mass = np.bincount(code, weights=law.prob, minlength=1 << k)
    keep = mass > 0
    return vals[keep], mass[keep]


def _v_mask(law: LatentLaw, spec: DgpSpec, v) -> np.ndarray:
    mask = np.ones(law.size, dtype=bool)
    for c, val in zip(spec.v_columns, np.atleast_1d(v) if len(spec.v_columns) else []):
        mask &= law.bits[c, 0] == int(val)
    return mask


def counterfactual_mean(spec: DgpSpec, regime, v=None, m: int | None = None) -> float:
    """E(Y_a | V=v) by the latent g-formula (``v=None`` gives the marginal mean).

    ``m`` selects Y(m) for a series outcome.
    """
    a = tuple(regime.a if isinstance(regime, Regime) else regime)
    if len(a) != spec.J:
        raise ConfigError(f"regime has length {len(a)}, expected J={spec.J}")
    law = conditional_tables(spec, regime=a)
    col = 0 if m is None else m - 1
    mask = np.ones(law.size, dtype=bool) if v is None else _v_mask(law, spec, v)
    mass = law.prob[mask].sum()
    if mass <= 0:
        raise ConfigError(f"V={v} has probability zero")
    return float(law.prob[mask] @ law.mu[mask, col] / mass)


def counterfactual_table(spec: DgpSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(V values (nv, k), P(V) (nv,), means (nv, C, K)) over all regimes."""
    vals, pv = v_values(spec)
    regs = enumerate_regimes(spec.J)
    K = 1 if spec.muY_series is None else spec.J
    means = np.zeros((len(vals), len(regs), K))
    for c, r in enumerate(regs):
        law = conditional_tables(spec, regime=r.a)
        for s, v in enumerate(vals):
            mask = _v_mask(law, spec, v)
            mass = law.prob[mask].sum()
            means[s, c] = law.prob[mask] @ law.mu[mask] / mass
    return vals, pv, means


def target_system(spec: DgpSpec, msm: MsmSpec, fstar=None):
    """Normal equations (G, r) with G beta0 = r for the MSM projection under f*."""
    ref = _fstar(spec, fstar)
    vals, pv, means = counterfactual_table(spec)
    regs = np.array([r.a for r in enumerate_regimes(spec.J)])
    C = len(regs)
    p = msm.dim_beta
    G = np.zeros((p, p))
    r = np.zeros(p)
    vidx = [spec.v_columns.index(c) for c in msm.v_columns]
    for s, v in enumerate(vals):
        A = regs
        V = np.repeat(v[None, :], C, axis=0)
        wts = pv[s] * ref.regime_prob(A, V)
        Vm = V[:, vidx]
        if msm.family == "1.1":
            x = msm.design(A, Vm)
            h = x if msm.h is None else np.asarray(msm.h(A, Vm), dtype=float)
            G += (h * wts[:, None]).T @ x
            r += (h * wts[:, None]).T @ means[s, :, 0]
        else:
            for m in range(1, spec.J + 1):
                x = msm.design(A, Vm, m)
                G += (x * wts[:, None]).T @ x
                r += (x * wts[:, None]).T @ means[s, :, m - 1]
    return G, r


def true_beta(spec: DgpSpec, msm: MsmSpec, fstar=None) -> np.ndarray:
    """beta0 solving sum_{a,v} P(v) prod f* h (E[Y_a|v] - g) = 0 (a linear system)."""
    G, r = target_system(spec, msm, fstar)
    if np.linalg.matrix_rank(G, tol=1e-12 * max(1.0, np.abs(G).max())) < G.shape[0]:
        raise NumericError("MSM features are collinear under the reference density")
    return np.linalg.solve(G, r)


# -- oracle nuisances ------------------------------------------------------------------------

@dataclass(eq=False)
class TableModel:
    """Wraps a structural table as a prediction model on panel columns."""

    table: Table

    def predict(self, panel: Panel, overrides=None) -> np.ndarray:
        bits = {}
        for v in self.table.parents:
            if overrides and v in overrides:
                bits[v] = np.broadcast_to(np.asarray(overrides[v]), (panel.n,)).astype(np.int64)
            else:
                bits[v] = panel.column(v).astype(np.int64)
        return self.table(bits) * np.ones(panel.n)

    def to_json(self) -> dict:
        return {"kind": "table", "values": self.table.to_json()}


def oracle_nuisances(spec: DgpSpec, fstar=None) -> tuple[Panel, NuisanceSet]:
    """Population panel plus true nuisances.

    Instrument density and instrument effect come straight from the
    structural tables; the remaining conditional expectations have no
    structural counterpart and are exact saturated fits to the population.
    """
    pop = population(spec)
    nu = fit_nuisances(pop, MisspecPattern.correct(), fstar=_fstar(spec, fstar))
    nu.fZ = [TableModel(t) for t in spec.pZ]
    if spec.delta_u is None:
        nu.delta = [TableModel(t) for t in spec.delta]
        nu.delta_psi = list(nu.delta)
    return pop, nu


# -- identity checks ----------------------------------------------------------------------------

def check_instrument_effect(spec: DgpSpec, tol: float = TOL) -> IdentityReport:
    """Observed instrument-arm contrast in P(A(j)=1 | history, Z(j)) against the
    structural instrument effect, in every reachable latent cell."""
    law = conditional_tables(spec)
    lhs_all, rhs_all, where = [], [], []
    for j in range(spec.J):
        H = [v for v in law.observed_vars() if v[1] < j or (v[1] == j and v[0] not in ("z", "a"))]
        hcode = law.codes(H)
        size = 1 << len(H)
        zj = law.bits["z", j]
        aj = law.bits["a", j]
        arm = {}
        for z in (0, 1):
            m = zj == z
            num = np.bincount(hcode[m], weights=law.prob[m] * aj[m], minlength=size)
            den = np.bincount(hcode[m], weights=law.prob[m], minlength=size)
            arm[z] = (num, den)
        live = (law.prob > 0)
        ok = live & (arm[0][1][hcode] > 0) & (arm[1][1][hcode] > 0)
        contrast = (arm[1][0] / np.where(arm[1][1] > 0, arm[1][1], 1)
                    - arm[0][0] / np.where(arm[0][1] > 0, arm[0][1], 1))
        lhs_all.append(contrast[hcode][ok])
        rhs_all.append(spec.effect_table(j)(law.bits)[ok])
        where.append(np.full(int(ok.sum()), j))
    lhs = np.concatenate(lhs_all)
    rhs = np.concatenate(rhs_all)
    rep = _report("instrument_effect_identification", lhs, rhs, tol, cells=int(lhs.size))
    if not rep.passed:
        bad = int(np.argmax(np.abs(lhs - rhs)))
        rep.details["worst_time"] = int(np.concatenate(where)[bad])
    return rep


def _true_inverse_weights(spec: DgpSpec, law: LatentLaw, ref: ReferenceDensity,
                          first_index: int = 0) -> np.ndarray:
    J = spec.J
    A = np.column_stack([law.bits["a", j] for j in range(J)])
    V = np.column_stack([law.bits[c, 0] for c in spec.v_columns]) if spec.v_columns else np.zeros((law.size, 0))
    fs = ref.factors(A, V)
    inv = np.ones(law.size)
    for k in range(first_index, J):
        pz = spec.pZ[k](law.bits)
        z = law.bits["z", k]
        fz = np.where(z == 1, pz, 1 - pz)
        d = spec.delta[k](law.bits) * np.ones(law.size)
        reach = law.prob > 0
        if np.any(reach & (np.abs(d) == 0)):
            raise NumericError(f"instrument effect is zero on a reachable history at time {k}: "
                               "instrument relevance fails")
        s = (2.0 * z - 1) * (2.0 * A[:, k] - 1)
        inv *= s * fs[:, k] / (fz * np.where(d == 0, 1.0, d))
    return inv


def true_inverse_iv(spec: DgpSpec, panel: Panel, fstar=None) -> np.ndarray:
    """1/W-dagger(J-1) for each panel row from the structural tables."""
    ref = _fstar(spec, fstar)
    bits = {}
    for j in range(spec.J):
        for i, c in enumerate(spec.l_columns):
            bits[c, j] = panel.L[:, j, i].astype(np.int64)
        bits["z", j] = panel.Z[:, j].astype(np.int64)
        bits["a", j] = panel.A[:, j].astype(np.int64)
    V = panel.V if spec.v_columns else np.zeros((panel.n, 0))
    fs = ref.factors(panel.A, V)
    inv = np.ones(panel.n)
    for k in range(spec.J):
        pz = spec.pZ[k](bits) * np.ones(panel.n)
        z = panel.Z[:, k]
        fz = np.where(z == 1, pz, 1 - pz)
        d = spec.delta[k](bits) * np.ones(panel.n)
        inv *= (2.0 * z - 1) * (2.0 * panel.A[:, k] - 1) * fs[:, k] / (fz * d)
    return inv


def check_weight_mean(spec: DgpSpec, fstar=None, tol: float = 1e-12) -> IdentityReport:
    """E[1/W-dagger(J-1)] = 1 by enumeration."""
    law = conditional_tables(spec)
    inv = _true_inverse_weights(spec, law, _fstar(spec, fstar))
    m = law.prob @ inv
    return _report("mean_one_weights", [m], [1.0], tol,
                   second_moment=float(law.prob @ inv ** 2))


def sample_weight_mean(spec: DgpSpec, panel: Panel, fstar=None) -> tuple[float, float]:
    """(mean, standard error) of the true inverse weights over a sample."""
    inv = true_inverse_iv(spec, panel, fstar)
    return float(inv.mean()), float(inv.std(ddof=1) / np.sqrt(panel.n))


def check_weighted_moment(spec: DgpSpec, g_fn: Callable, fstar=None, *, first_index: int = 0,
                 tol: float = TOL, name: str = "weighted_moment") -> IdentityReport:
    """E[g(A, L, Y) / W-dagger | V] against sum_a E[g(a, L_a, Y_a) | V] prod f*.

    ``g_fn(A, L, Y)`` takes arrays A (N, J), L (N, J, p), Y (N,) and must be
    affine in Y (it is evaluated at the conditional mean of Y).
    ``first_index`` starts the weight product at a later occasion (used to
    show that skipping time 0 breaks the identity).
    """
    ref = _fstar(spec, fstar)
    law = conditional_tables(spec)
    J, cols = spec.J, spec.l_columns

    def arrays(lw: LatentLaw):
        A = np.column_stack([lw.bits["a", j] for j in range(J)])
        L = np.stack([np.column_stack([lw.bits[c, j] for c in cols]) for j in range(J)], 1)
        return A, L.astype(float), lw.mu[:, 0]

    inv = _true_inverse_weights(spec, law, ref, first_index)
    g = np.asarray(g_fn(*arrays(law)), dtype=float) * np.ones(law.size)
    vals, pv = _v_strata(law, spec)
    lhs = np.array([law.prob[m] @ (g[m] * inv[m]) / law.prob[m].sum()
                    for m in (_v_mask(law, spec, v) for v in vals)])
    rhs = np.zeros(len(vals))
    for r in enumerate_regimes(J):
        lw = conditional_tables(spec, regime=r.a)
        A, L, Y = arrays(lw)
        gv = np.asarray(g_fn(A, L, Y), dtype=float) * np.ones(lw.size)
        for s, v in enumerate(vals):
            m = _v_mask(lw, spec, v)
            fs = ref.regime_prob(np.array([r.a]), v[None, :])[0]
            rhs[s] += fs * (lw.prob[m] @ gv[m]) / lw.prob[m].sum()
    return _report(name, lhs, rhs, tol, strata=vals.tolist(), first_index=first_index)


def weighted_moment_battery(spec: DgpSpec) -> list[tuple[str, Callable]]:
    """Cell indicators of (A-history, L-history) and their Y-weighted versions."""
    J, p = spec.J, spec.p
    out = []
    lbits = list(itertools.product((0, 1), repeat=J * p))
    for r in enumerate_regimes(J):
        a = np.array(r.a)
        for lb in lbits:
            lv = np.array(lb, dtype=float).reshape(J, p)

            def ind(A, L, Y, a=a, lv=lv):
                return (np.all(A == a, axis=1) & np.all(L.reshape(len(A), -1) == lv.ravel(), axis=1)).astype(float)

            def yind(A, L, Y, f=ind):
                return f(A, L, Y) * Y

            tag = "".join(map(str, r.a)) + "|" + "".join(str(int(x)) for x in lv.ravel())
            out.append((f"1[{tag}]", ind))
            out.append((f"Y*1[{tag}]", yind))
    return out


def check_weighted_moment_battery(spec: DgpSpec, fstar=None, tol: float = TOL,
                         first_index: int = 0) -> IdentityReport:
    reps = [check_weighted_moment(spec, fn, fstar, first_index=first_index, tol=tol, name=nm)
            for nm, fn in weighted_moment_battery(spec)]
    lhs = np.concatenate([r.lhs for r in reps])
    rhs = np.concatenate([r.rhs for r in reps])
    worst = max(reps, key=lambda r: r.max_abs_diff)
    return _report("weighted_moments", lhs, rhs, tol, functions=len(reps),
                   worst=worst.name, first_index=first_index)


def check_influence_zero(spec: DgpSpec, msm: MsmSpec, fstar=None, *, beta=None,
                         tol: float = TOL) -> IdentityReport:
    """Mean of the multiply robust influence function at beta0 with true nuisances."""
    pop, nu = oracle_nuisances(spec, fstar)
    b0 = true_beta(spec, msm, nu.fstar) if beta is None else np.asarray(beta, dtype=float)
    ee = estimating_equation("iv_mr", pop, msm, nu)
    mean = ee.mean(b0)
    return _report("influence_mean_zero", mean, np.zeros_like(mean), tol, beta=b0.tolist())


# -- probability limits --------------------------------------------------------------------

@dataclass
class PlimResult:
    estimator_id: str
    pattern: str
    beta: np.ndarray
    beta0: np.ndarray
    converged: bool
    eq_norm: float
    trace: list = field(default_factory=list)

    @property
    def bias(self) -> np.ndarray:
        return self.beta - self.beta0


def plim_solve(spec: DgpSpec, msm: MsmSpec, estimator_id: str,
               misspec: MisspecPattern | None = None, fstar=None, *, tol: float = 1e-12) -> PlimResult:
    """Probability limit: root of the population estimating equation with
    nuisances fitted to the exact observed law under ``misspec``."""
    misspec = misspec or MisspecPattern.correct()
    pop = population(spec)
    ref = _fstar(spec, fstar)
    nu = fit_nuisances(pop, misspec, fstar=ref)
    b0 = true_beta(spec, msm, ref)
    if estimator_id == "iv_eff":
        est = fit_efficient_iv(pop, msm, nu)
        return PlimResult(estimator_id, misspec.name, est.beta, b0, est.converged, est.eq_norm)
    ee = estimating_equation(estimator_id, pop, msm, nu)
    res = solve_ee(ee.mean, np.zeros(msm.dim_beta), tol=tol)
    if not res.converged:
        raise NumericError(f"no root of the population equation for {estimator_id} under "
                           f"{misspec.name}; residual trace {res.trace[-10:]}")
    return PlimResult(estimator_id, misspec.name, res.beta, b0, res.converged, res.eq_norm, res.trace)


def robustness_matrix(spec: DgpSpec, msm: MsmSpec, estimators: Sequence[str],
                      patterns: Sequence[str] = ROBUSTNESS_PATTERNS, fstar=None,
                      column: str | None = None) -> dict:
    column = column or spec.l_columns[0]
    out = {}
    for pat in patterns:
        mp = MisspecPattern.named(pat, column)
        for est in estimators:
            out[pat, est] = plim_solve(spec, msm, est, mp, fstar)
    return out


# -- asymptotic variances -----------------------------------------------------------------

def avar_of(ee: AffineEE, beta) -> np.ndarray:
    """J^-1 E[D D^T] J^-T for a population estimating equation."""
    phi = ee.values(beta)
    M = (phi * ee.w[:, None]).T @ phi / ee.total
    Jinv = np.linalg.inv(ee.jacobian())
    out = Jinv @ M @ Jinv.T
    return (out + out.T) / 2


@dataclass
class EfficiencyReport:
    avar_eff: np.ndarray
    avar_ipw: np.ndarray
    avar_mr: np.ndarray
    avar_random: list[np.ndarray]
    min_gap_diag: float
    min_gap_eig: float
    slack: float = 1e-10

    @property
    def passed(self) -> bool:
        return self.min_gap_diag >= -self.slack

    def to_json(self) -> dict:
        return {"pass": self.passed, "avar_eff": self.avar_eff.tolist(),
                "avar_ipw": self.avar_ipw.tolist(), "avar_mr": self.avar_mr.tolist(),
                "avar_random_diag": [np.diag(a).tolist() for a in self.avar_random],
                "min_gap_diag": self.min_gap_diag, "min_gap_eig": self.min_gap_eig}


def asymptotic_variance(spec: DgpSpec, msm: MsmSpec, estimator_id: str, fstar=None, *,
                        H: dict | None = None) -> np.ndarray:
    """Exact asymptotic variance with true nuisances.  For the efficient
    estimator ``H`` may supply a custom per-stratum index matrix."""
    pop, nu = oracle_nuisances(spec, fstar)
    b0 = true_beta(spec, msm, nu.fstar)
    if estimator_id == "iv_eff":
        comp = eff_components(pop, msm, nu)
        H = heff(comp, pop.w, b0) if H is None else H
        return avar_of(eff_equation(comp, H, pop.w), b0)
    return avar_of(estimating_equation(estimator_id, pop, msm, nu), b0)


def efficiency_check(spec: DgpSpec, msm: MsmSpec, fstar=None, *, n_random: int = 20,
                     seed: int = 0, slack: float = 1e-10) -> EfficiencyReport:
    """Compare the efficient index against random indices h(a, v) and the
    weighted and default multiply robust estimators, all at true nuisances."""
    pop, nu = oracle_nuisances(spec, fstar)
    b0 = true_beta(spec, msm, nu.fstar)
    comp = eff_components(pop, msm, nu)
    Heff = heff(comp, pop.w, b0, ridge=0.0)
    v_eff = avar_of(eff_equation(comp, Heff, pop.w), b0)
    rng = np.random.default_rng(seed)
    C = comp.TY.shape[1]
    p = msm.dim_beta
    rand = []
    for _ in range(n_random):
        H = {s: rng.standard_normal((p, C)) for s in Heff}
        rand.append(avar_of(eff_equation(comp, H, pop.w), b0))
    v_ipw = avar_of(estimating_equation("iv_ipw", pop, msm, nu), b0)
    v_mr = avar_of(estimating_equation("iv_mr", pop, msm, nu), b0)
    others = rand + [v_mr]
    gap_d = min(float(np.min(np.diag(V) - np.diag(v_eff))) for V in others)
    gap_e = min(float(np.min(np.linalg.eigvalsh(V - v_eff))) for V in others)
    return EfficiencyReport(v_eff, v_ipw, v_mr, rand, gap_d, gap_e, slack)


# -- aggregate ---------------------------------------------------------------------------------

def identity_suite(spec: DgpSpec, msm: MsmSpec, fstar=None, column: str | None = None) -> dict:
    """All exact checks for one DGP, as JSON-ready dicts plus an overall flag."""
    reps = [check_instrument_effect(spec), check_weighted_moment_battery(spec, fstar),
            check_influence_zero(spec, msm, fstar)]
    b0 = true_beta(spec, msm, _fstar(spec, fstar))
    plim_rows = []
    ok_plim = True
    for pat in ROBUSTNESS_PATTERNS:
        r = plim_solve(spec, msm, "iv_mr", MisspecPattern.named(pat, column or spec.l_columns[0]), fstar)
        bias = float(np.max(np.abs(r.bias)))
        good = bias < 1e-8 if pat != "all_wrong" else bias > 1e-7
        ok_plim &= good
        plim_rows.append({"pattern": pat, "max_abs_bias": bias, "pass": bool(good)})
    out = {"spec": spec.name, "beta0": b0.tolist(),
           "checks": [r.to_json() for r in reps], "plim_iv_mr": plim_rows}
    if (spec.delta_u is None and all(np.allclose(t.values, 1.0) for t in spec.delta)
            and all(np.allclose(t.values, 0.0) for t in spec.b)):
        out["collapse"] = {"perfect_compliance": True}
    out["pass"] = bool(all(r.passed for r in reps) and ok_plim)
    return out
