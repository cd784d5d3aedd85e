"""Estimating equations for the five MSM estimators and their variances.

With a linear predictor g, every estimating function used here is affine
in beta: D_i(beta) = c_i - B_i beta.  The nuisance transforms (weighting and
the backward regressions) are linear operators on per-subject columns, so
they are applied once to the columns of [c, B] and the root of the mean
equation is found by damped Newton.  This gives exactly what refitting
the regressions at every beta iterate would give.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError
from .msm import MsmSpec, _v, regime_features
from .nuisance import NuisanceSet, cj_recursion, fit_nuisances, psi_recursion
from .panel import Panel, enumerate_regimes, regime_index
from .weights import inverse_weights, iv_weights, sra_weights

ESTIMATORS = ("sra_ipw", "sra_dr", "iv_ipw", "iv_mr", "iv_eff")


# -- solver ----------------------------------------------------------------------

@dataclass
class SolveResult:
    beta: np.ndarray
    eq_norm: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def fd_jacobian(fn: Callable, beta: np.ndarray, step: float = 1e-6, f0=None) -> np.ndarray:
    f0 = fn(beta) if f0 is None else f0
    Jac = np.empty((f0.size, beta.size))
    for k in range(beta.size):
        b = beta.copy()
        b[k] += step
        Jac[:, k] = (fn(b) - f0) / step
    return Jac


def solve_ee(residual: Callable, beta_init, *, step: float = 1e-6, tol: float = 1e-8,
             max_iter: int = 200, max_halvings: int = 30, bound: float = 50.0) -> SolveResult:
    """Damped Newton on a mean estimating function with a forward-difference Jacobian.

    A step is halved (up to ``max_halvings`` times) until the sup-norm of
    the residual decreases and the iterate stays inside ``|beta|_inf <= bound``.
    """
    beta = np.asarray(beta_init, dtype=float).copy()
    r = np.asarray(residual(beta), dtype=float)
    norm = float(np.max(np.abs(r)))
    trace = [(0, norm)]
    for it in range(1, max_iter + 1):
        if norm < tol:
            return SolveResult(beta, norm, it - 1, True, trace)
        Jac = fd_jacobian(residual, beta, step, r)
        try:
            delta = np.linalg.solve(Jac, -r)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(Jac, -r, rcond=None)[0]
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = beta + t * delta
            if np.max(np.abs(cand)) <= bound:
                rc = np.asarray(residual(cand), dtype=float)
                nc = float(np.max(np.abs(rc)))
                if nc < norm:
                    break
            t *= 0.5
        else:
            trace.append((it, norm))
            return SolveResult(beta, norm, it, False, trace)
        beta, r, norm = cand, rc, nc
        trace.append((it, norm))
    return SolveResult(beta, norm, max_iter, norm < tol, trace)


# -- affine estimating equations ---------------------------------------------------

@dataclass(eq=False)
class AffineEE:
    """D_i(beta) = c_i - B_i beta with frequency weights w."""

    c: np.ndarray  # (n, p)
    B: np.ndarray  # (n, p, p)
    w: np.ndarray  # (n,)

    @property
    def total(self) -> float:
        return float(self.w.sum())

    def values(self, beta) -> np.ndarray:
        return self.c - self.B @ np.asarray(beta, dtype=float)

    def mean(self, beta) -> np.ndarray:
        return self.w @ self.values(beta) / self.total

    def jacobian(self) -> np.ndarray:
        return -np.tensordot(self.w, self.B, axes=1) / self.total

    def root(self) -> np.ndarray:
        cbar = self.w @ self.c / self.total
        return np.linalg.solve(-self.jacobian(), cbar)


def _stack(c, B):
    n, p = c.shape
    return np.concatenate([c, B.reshape(n, p * p)], axis=1), p


def _unstack(X, p):
    n = X.shape[0]
    return X[:, :p], X[:, p:].reshape(n, p, p)


def mr_transform(panel: Panel, nuis: NuisanceSet, X: np.ndarray, track=None, psi=None):
    """Apply the multiply robust instrument transform to columns of X.

    D-dagger = X / W(J-1)
               - sum_j (1 / W(j-1)) [(-1)^(1-Z) Psi_j / f(Z) - Psi-tilde_j]
               - sum_j (1 / W(j-1)) eps_j Psi-tilde_j (-1)^(1-Z) / (f(Z) delta_j)
    """
    J = panel.J
    track = track or iv_weights(panel, nuis)
    inv = inverse_weights(track, "iv")  # column j+1 is 1/W(j)
    psi = psi or psi_recursion(panel, nuis, X)
    out = X * inv[:, J, None]
    for j in range(J):
        sz = 2.0 * panel.Z[:, j] - 1.0
        fz = nuis.fz_obs(panel, j)
        eps = nuis.residual(panel, j)
        d = nuis.delta_hat(panel, j)
        g1 = psi.gamma1[j]
        prev = inv[:, j, None]
        out -= prev * ((sz / fz)[:, None] * psi.psi_obs[j] - g1)
        out -= prev * (eps * sz / (fz * d))[:, None] * g1
    return out


def dr_transform(panel: Panel, nuis: NuisanceSet, X: np.ndarray, track=None, q=None):
    """Doubly robust transform under sequential randomization:
    X / W(J-1) - sum_j Q_j / W(j) + sum_j Q-bar_j / W(j-1)."""
    J = panel.J
    track = track or sra_weights(panel, nuis)
    inv = inverse_weights(track, "sra")
    q = q or cj_recursion(panel, nuis, X)
    out = X * inv[:, J, None]
    for j in range(J):
        out += -q.q_obs[j] * inv[:, j + 1, None] + q.q_bar[j] * inv[:, j, None]
    return out


def estimating_equation(estimator_id: str, panel: Panel, msm: MsmSpec, nuis: NuisanceSet) -> AffineEE:
    """Affine estimating equation of one of the weighted or augmented estimators."""
    c, B = msm.linear_parts(panel)
    w = panel.w
    if estimator_id in ("sra_ipw", "iv_ipw"):
        track = sra_weights(panel, nuis) if estimator_id == "sra_ipw" else iv_weights(panel, nuis)
        inv = (track.inv_sra if estimator_id == "sra_ipw" else track.inv_iv)[:, -1]
        return AffineEE(c * inv[:, None], B * inv[:, None, None], w)
    X, p = _stack(c, B)
    if estimator_id == "iv_mr":
        T = mr_transform(panel, nuis, X)
    elif estimator_id == "sra_dr":
        if msm.family != "1.1":
            raise ConfigError("sra_dr supports the terminal-outcome family only")
        T = dr_transform(panel, nuis, X)
    else:
        raise ConfigError(f"no plain estimating equation for {estimator_id!r}")
    return AffineEE(*_unstack(T, p), w)


# -- efficient estimator ---------------------------------------------------------------

@dataclass
class EffComponents:
    """Transformed regime-indicator residual pieces.

    Xi-tilde(beta) = TY - TX beta, with TY (n, C) and TX (n, C, p).
    ``Heff`` maps each V stratum to its (p, C) index matrix.
    """

    TY: np.ndarray
    TX: np.ndarray
    strata: np.ndarray
    stratum_values: np.ndarray
    Heff: dict = field(default_factory=dict)
    regime_counts: np.ndarray | None = None

    def xi_tilde(self, beta) -> np.ndarray:
        return self.TY - self.TX @ np.asarray(beta, dtype=float)


def eff_components(panel: Panel, msm: MsmSpec, nuis: NuisanceSet) -> EffComponents:
    if msm.family != "1.1":
        raise ConfigError("the efficient estimator is implemented for the terminal family 1.1")
    if panel.J > 6:
        raise ConfigError("the efficient estimator needs 2^J <= 64 regimes")
    V = _v(panel, msm)
    C = 1 << panel.J
    if V.shape[1]:
        vals, strata = np.unique(V, axis=0, return_inverse=True)
        strata = strata.ravel()
    else:
        vals, strata = np.zeros((1, 0)), np.zeros(panel.n, dtype=np.int64)
    if len(vals) > 64:
        raise ConfigError("the efficient estimator needs a discrete V (at most 64 strata)")
    xr = regime_features(msm, panel.J, vals)  # (nv, C, p)
    p = xr.shape[2]
    ind = np.zeros((panel.n, C))
    ind[np.arange(panel.n), regime_index(panel.A)] = 1.0
    Xy = ind * panel.Y[:, None]
    Xx = ind[:, :, None] * xr[strata]  # (n, C, p)
    T = mr_transform(panel, nuis, np.concatenate([Xy, Xx.reshape(panel.n, C * p)], axis=1))
    counts = np.zeros((len(vals), C))
    np.add.at(counts, strata, ind * panel.w[:, None])
    return EffComponents(T[:, :C], T[:, C:].reshape(panel.n, C, p), strata, vals,
                         regime_counts=counts)


def heff(comp: EffComponents, w: np.ndarray, beta, ridge: float = 1e-8, cond_max: float = 1e12) -> dict:
    """H_eff(v) = E[TX | v]^T (E[Xi-tilde Xi-tilde^T | v] + ridge I)^(-1) per stratum."""
    xi = comp.xi_tilde(beta)
    out = {}
    C = xi.shape[1]
    for s in range(len(comp.stratum_values)):
        m = comp.strata == s
        ws = w[m]
        tot = ws.sum()
        if tot <= 0:
            continue
        S = (xi[m] * ws[:, None]).T @ xi[m] / tot + ridge * np.eye(C)
        G = np.tensordot(ws, comp.TX[m], axes=1) / tot  # (C, p)
        if np.linalg.cond(S) > cond_max:
            missing = [enumerate_regimes(int(np.log2(C)))[c].a for c in range(C)
                       if comp.regime_counts[s, c] <= 0]
            raise NumericError(f"singular Gram matrix in V stratum {comp.stratum_values[s].tolist()}; "
                               f"unobserved regimes: {missing}")
        out[s] = np.linalg.solve(S, G).T  # (p, C)
    return out


def eff_equation(comp: EffComponents, H: dict, w: np.ndarray) -> AffineEE:
    n, C, p = comp.TX.shape
    Hs = np.zeros((n, p, C))
    for s, h in H.items():
        Hs[comp.strata == s] = h
    c = np.einsum("npc,nc->np", Hs, comp.TY)
    B = np.einsum("npc,ncq->npq", Hs, comp.TX)
    return AffineEE(c, B, w)


# -- estimates -------------------------------------------------------------------------

@dataclass
class Estimate:
    estimator_id: str
    beta: np.ndarray
    covariance: np.ndarray
    eq_norm: float
    iterations: int
    converged: bool
    fingerprint: str = ""
    diagnostics: dict = field(default_factory=dict)
    influence: np.ndarray | None = field(default=None, repr=False)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def ci(self, z: float = 1.959963984540054) -> np.ndarray:
        return np.column_stack([self.beta - z * self.se, self.beta + z * self.se])

    def to_json(self) -> dict:
        return {"estimator_id": self.estimator_id, "beta": self.beta.tolist(),
                "covariance": self.covariance.tolist(), "se": self.se.tolist(),
                "eq_norm": self.eq_norm, "iterations": self.iterations, "converged": self.converged,
                "fingerprint": self.fingerprint, "diagnostics": self.diagnostics}


def sandwich(influence: np.ndarray, bread: np.ndarray, weights=None) -> np.ndarray:
    """J^-1 M J^-T / n with M the (weighted) mean outer product of the influence values."""
    phi = np.asarray(influence, dtype=float)
    phi = phi.reshape(len(phi), -1)
    w = np.ones(len(phi)) if weights is None else np.asarray(weights, dtype=float)
    n = w.sum()
    bread = np.atleast_2d(np.asarray(bread, dtype=float))
    if np.linalg.cond(bread) > 1e12:
        raise NumericError("bread matrix is singular or badly conditioned")
    M = (phi * w[:, None]).T @ phi / n
    Jinv = np.linalg.inv(bread)
    cov = Jinv @ M @ Jinv.T / n
    return (cov + cov.T) / 2


def nuisance_fingerprint(panel: Panel, nuis: NuisanceSet) -> str:
    h = hashlib.sha256()
    for arr in (panel.L, panel.Z, panel.A, panel.Y, panel.w):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(json.dumps({"misspec": nuis.misspec.to_json(), "fstar": nuis.fstar.mode,
                         "clamp": nuis.clamp, "floor": nuis.delta_floor}, sort_keys=True).encode())
    return h.hexdigest()[:16]


def _beta_init(panel: Panel, msm: MsmSpec, nuis: NuisanceSet) -> np.ndarray:
    c, B = msm.linear_parts(panel)
    a = np.abs(iv_weights(panel, nuis).inv_iv[:, -1]) * panel.w
    G = np.tensordot(a, B, axes=1)
    try:
        return np.linalg.solve(G, a @ c)
    except np.linalg.LinAlgError:
        return np.zeros(msm.dim_beta)


def _finish(est_id, ee: AffineEE, panel, msm, nuis, *, solve_kwargs=None, diag=None,
            beta_init=None) -> Estimate:
    bread = ee.jacobian()
    if np.linalg.cond(bread) > 1e12:
        raise NumericError(f"{est_id}: Jacobian of the estimating equation is singular "
                           f"(condition {np.linalg.cond(bread):.3g})")
    b0 = _beta_init(panel, msm, nuis) if beta_init is None else beta_init
    res = solve_ee(ee.mean, b0, **(solve_kwargs or {}))
    phi = ee.values(res.beta)
    cov = sandwich(phi, bread, ee.w)
    d = {"delta_floor_hits": nuis.diagnostics.get("delta_floor_hits", 0), **(diag or {})}
    if not res.converged:
        d["trace"] = res.trace[-5:]
    return Estimate(est_id, res.beta, cov, res.eq_norm, res.iterations, res.converged,
                    nuisance_fingerprint(panel, nuis), d, phi)


def _nuis(panel, nuis, misspec=None, fstar="uniform"):
    return nuis if nuis is not None else fit_nuisances(panel, misspec, fstar=fstar)


def fit_ipw_sra(panel: Panel, msm: MsmSpec, nuis: NuisanceSet | None = None, **kw) -> Estimate:
    """Solve P_n D_sm(beta) / W-bar = 0."""
    nuis = _nuis(panel, nuis, kw.pop("misspec", None), kw.pop("fstar", "uniform"))
    return _finish("sra_ipw", estimating_equation("sra_ipw", panel, msm, nuis), panel, msm, nuis, **kw)


def fit_dr_sra(panel: Panel, msm: MsmSpec, nuis: NuisanceSet | None = None, **kw) -> Estimate:
    """Doubly robust estimator under sequential randomization."""
    nuis = _nuis(panel, nuis, kw.pop("misspec", None), kw.pop("fstar", "uniform"))
    return _finish("sra_dr", estimating_equation("sra_dr", panel, msm, nuis), panel, msm, nuis, **kw)


def fit_ipw_iv(panel: Panel, msm: MsmSpec, nuis: NuisanceSet | None = None, **kw) -> Estimate:
    """Solve P_n D_sm(beta) / W-dagger = 0 with signed instrument weights."""
    nuis = _nuis(panel, nuis, kw.pop("misspec", None), kw.pop("fstar", "uniform"))
    return _finish("iv_ipw", estimating_equation("iv_ipw", panel, msm, nuis), panel, msm, nuis, **kw)


def fit_mr_iv(panel: Panel, msm: MsmSpec, nuis: NuisanceSet | None = None, **kw) -> Estimate:
    """Multiply robust instrument estimator."""
    nuis = _nuis(panel, nuis, kw.pop("misspec", None), kw.pop("fstar", "uniform"))
    return _finish("iv_mr", estimating_equation("iv_mr", panel, msm, nuis), panel, msm, nuis, **kw)


def fit_efficient_iv(panel: Panel, msm: MsmSpec, nuis: NuisanceSet | None = None, *,
                     updates: int = 2, ridge: float = 1e-8, **kw) -> Estimate:
    """Locally efficient estimator: H_eff from within-stratum moments of Xi-tilde,
    started at the multiply robust estimate and updated ``updates`` times."""
    nuis = _nuis(panel, nuis, kw.pop("misspec", None), kw.pop("fstar", "uniform"))
    prelim = estimating_equation("iv_mr", panel, msm, nuis)
    beta = prelim.root()
    comp = eff_components(panel, msm, nuis)
    ee = None
    for _ in range(max(1, updates)):
        comp.Heff = heff(comp, panel.w, beta, ridge)
        ee = eff_equation(comp, comp.Heff, panel.w)
        beta = ee.root()
    est = _finish("iv_eff", ee, panel, msm, nuis, beta_init=beta, **kw)
    est.diagnostics["Heff"] = {int(s): h.tolist() for s, h in comp.Heff.items()}
    return est


FITTERS = {"sra_ipw": fit_ipw_sra, "sra_dr": fit_dr_sra, "iv_ipw": fit_ipw_iv,
           "iv_mr": fit_mr_iv, "iv_eff": fit_efficient_iv}


def fit(estimator_id: str, panel: Panel, msm: MsmSpec, nuis: NuisanceSet | None = None, **kw) -> Estimate:
    if estimator_id not in FITTERS:
        raise ConfigError(f"unknown estimator {estimator_id!r}; expected one of {ESTIMATORS}")
    return FITTERS[estimator_id](panel, msm, nuis, **kw)


def compressible(panel: Panel) -> bool:
    return all(panel.is_discrete((c, j)) for c in panel.l_columns for j in range(panel.J))


@dataclass
class BootstrapResult:
    betas: np.ndarray  # (B, p)
    lower: np.ndarray
    upper: np.ndarray
    failures: int


def bootstrap(panel: Panel, msm: MsmSpec, estimator_id: str, *, B: int = 200, seed: int = 0,
              level: float = 0.95, misspec=None, fstar="uniform") -> BootstrapResult:
    """Nonparametric percentile bootstrap with multinomial subject weights.

    Replicate b draws its weights from its own stream seeded by (seed, b).
    Discrete panels are refit on their weighted cell summaries, which gives
    the same estimate as refitting the resampled subjects.
    """
    base = panel.w
    n = int(round(base.sum()))
    prob = base / base.sum()
    use_cells = compressible(panel)
    betas = []
    fails = 0
    for b in range(B):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), b]))
        wb = rng.multinomial(n, prob).astype(float)
        boot = panel.compress(wb) if use_cells else panel.with_weights(wb)
        try:
            nu = fit_nuisances(boot, misspec, fstar=fstar)
            if estimator_id == "iv_eff":
                betas.append(fit_efficient_iv(boot, msm, nu).beta)
            else:
                betas.append(estimating_equation(estimator_id, boot, msm, nu).root())
        except (NumericError, np.linalg.LinAlgError):
            fails += 1
    arr = np.array(betas)
    a = (1 - level) / 2
    lo, hi = np.quantile(arr, [a, 1 - a], axis=0) if len(arr) else (np.nan, np.nan)
    return BootstrapResult(arr, np.atleast_1d(lo), np.atleast_1d(hi), fails)
