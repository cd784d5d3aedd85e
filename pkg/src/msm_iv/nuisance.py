"""Nuisance models: instrument density, treatment arms, reference density,
and the backward sequential regressions used by the augmented estimators.

Every fit accepts frequency weights through the panel, so the same code
fits sample data and the exact population law (where "fitting" returns
the true conditional expectations, or their covariate-marginalized
versions when a column is deliberately left out).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .dgp import MisspecPattern
from .errors import ConfigError, MergedCellWarning, NumericError, SeparationWarning
from .panel import Panel, Var, history_vars

CLAMP = 1e-8
DELTA_FLOOR = 0.01


# -- logistic regression ----------------------------------------------------------

def fit_logistic(X, y, weights=None, *, tol: float = 1e-10, max_iter: int = 100,
                 ridge: float = 1e-8, sep_norm: float = 30.0) -> np.ndarray:
    """Weighted logistic regression by iteratively reweighted least squares.

    Stops when the weight-normalized score has sup-norm below ``tol``.
    Emits SeparationWarning and returns the current iterate once the
    coefficient norm exceeds ``sep_norm``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    n, d = X.shape
    if n <= d:
        raise NumericError(f"logistic fit needs more rows ({n}) than columns ({d})")
    tot = w.sum()
    beta = np.zeros(d)
    for _ in range(max_iter):
        p = expit(X @ beta)
        score = X.T @ (w * (y - p)) / tot
        if np.max(np.abs(score)) < tol:
            break
        info = (X * (w * p * (1 - p))[:, None]).T @ X / tot + ridge * np.eye(d)
        beta = beta + np.linalg.solve(info, score)
        if np.linalg.norm(beta) > sep_norm:
            warnings.warn(f"logistic coefficients diverging (norm {np.linalg.norm(beta):.1f}); "
                          "data look separated", SeparationWarning, stacklevel=2)
            break
    return beta


def _wls(X, y, w, ridge: float = 1e-10) -> np.ndarray:
    Xw = X * w[:, None]
    G = Xw.T @ X
    G += ridge * np.trace(G) / max(len(G), 1) * np.eye(len(G))
    return np.linalg.solve(G, Xw.T @ y)


# -- conditional models -----------------------------------------------------------

def _levels(panel: Panel, var: Var) -> np.ndarray:
    key = ("levels", var)
    if key not in panel._cache:
        panel._cache[key] = np.unique(panel.column(var))
    return panel._cache[key]


def _values(panel: Panel, var: Var, overrides: Mapping[Var, object] | None) -> np.ndarray:
    if overrides and var in overrides:
        return np.broadcast_to(np.asarray(overrides[var], dtype=float), (panel.n,))
    return panel.column(var)


def _index(levels: np.ndarray, x: np.ndarray) -> np.ndarray:
    if levels.size == 2 and levels[0] == 0 and levels[1] == 1:
        idx = x.astype(np.int64)
        return np.where((x == 0) | (x == 1), idx, -1)
    pos = np.searchsorted(levels, x)
    pos = np.minimum(pos, levels.size - 1)
    return np.where(levels[pos] == x, pos, -1)


@dataclass(eq=False)
class CondModel:
    """A fitted E[y | variables] (or P(y=1 | variables) when ``binary``).

    ``saturated`` stores weighted cell sums over the joint levels of the
    variables; empty prediction cells borrow from coarser cells (dropping
    the last variable first) or from a main-effects model.
    """

    kind: str
    variables: tuple[Var, ...]
    binary: bool = False
    j: int | None = None
    fallback: str = "merge"
    levels: tuple[np.ndarray, ...] = ()
    sums: np.ndarray | None = None
    counts: np.ndarray | None = None
    coef: np.ndarray | None = None
    _train: tuple | None = field(default=None, repr=False)
    _coarse: dict = field(default_factory=dict, repr=False)
    _param: object = field(default=None, repr=False)

    # fitting --------------------------------------------------------------------
    @classmethod
    def fit(cls, panel: Panel, variables: Sequence[Var], y, *, kind: str = "auto",
            binary: bool = False, fallback: str = "merge", j: int | None = None,
            weights=None) -> "CondModel":
        variables = tuple(variables)
        y = np.asarray(y, dtype=float)
        w = panel.w if weights is None else np.asarray(weights, dtype=float)
        if kind == "auto":
            kind = "saturated" if all(panel.is_discrete(v) for v in variables) else (
                "logistic" if binary else "linear")
        if kind not in ("saturated", "linear", "logistic"):
            raise ConfigError(f"unknown model kind {kind!r}")
        model = cls(kind, variables, binary, j, fallback)
        if kind == "saturated":
            levels = tuple(_levels(panel, v) for v in variables)
            idx = [_index(lv, panel.column(v)) for lv, v in zip(levels, variables)]
            code, size = _code(idx, [lv.size for lv in levels], panel.n)
            y2 = y.reshape(len(y), -1)
            model.levels = levels
            model.counts = np.bincount(code, weights=w, minlength=size)
            model.sums = np.stack([np.bincount(code, weights=w * y2[:, k], minlength=size)
                                   for k in range(y2.shape[1])], 1)
            model._train = (idx, y2, w, y.ndim)
        else:
            X = _main_effects(panel, variables, None)
            model.coef = fit_logistic(X, y, w) if kind == "logistic" else _wls(X, y, w)
        return model

    # prediction -----------------------------------------------------------------
    def predict(self, panel: Panel, overrides: Mapping[Var, object] | None = None) -> np.ndarray:
        if self.kind != "saturated":
            X = _main_effects(panel, self.variables, overrides)
            out = X @ self.coef
            return expit(out) if self.kind == "logistic" else out
        idx = [_index(lv, np.asarray(_values(panel, v, overrides)))
               for lv, v in zip(self.levels, self.variables)]
        code, _ = _code(idx, [lv.size for lv in self.levels], panel.n)
        bad = code < 0
        safe = np.where(bad, 0, code)
        cnt = self.counts[safe]
        empty = bad | (cnt <= 0)
        out = self.sums[safe] / np.where(empty, 1.0, cnt)[:, None]
        if empty.any():
            out[empty] = self._fill(panel, overrides, idx, empty)
        return out[:, 0] if self._train[3] == 1 else out

    def _fill(self, panel, overrides, idx, empty):
        if self.fallback == "model":
            warnings.warn(f"empty cell in saturated fit over {_names(self.variables)}; "
                          "using a main-effects model there", MergedCellWarning, stacklevel=3)
            if self._param is None:
                _, y2, w, _ = self._train
                self._param = _ParamFallback(self, y2, w)
            return self._param.predict(panel, overrides)[empty]
        warnings.warn(f"empty cell in saturated fit over {_names(self.variables)}; "
                      "merging with coarser cells", MergedCellWarning, stacklevel=3)
        out = np.zeros((int(empty.sum()), self.sums.shape[1]))
        todo = np.ones(out.shape[0], dtype=bool)
        sub = [ix[empty] for ix in idx]
        for k in range(len(self.variables) - 1, -1, -1):
            counts, sums = self._coarser(k)
            code, _ = _code(sub[:k], [lv.size for lv in self.levels[:k]], out.shape[0])
            ok = todo & (code >= 0)
            c = np.where(ok, code, 0)
            have = ok & (counts[c] > 0)
            out[have] = sums[c[have]] / counts[c[have]][:, None]
            todo &= ~have
            if not todo.any():
                break
        return out

    def _coarser(self, k: int):
        if k not in self._coarse:
            idx, y2, w, _ = self._train
            code, size = _code(idx[:k], [lv.size for lv in self.levels[:k]], len(w))
            counts = np.bincount(code, weights=w, minlength=size)
            sums = np.stack([np.bincount(code, weights=w * y2[:, q], minlength=size)
                             for q in range(y2.shape[1])], 1)
            self._coarse[k] = (counts, sums)
        return self._coarse[k]

    def to_json(self) -> dict:
        out = {"kind": self.kind, "j": self.j, "variables": [f"{v[0]}{v[1]}" for v in self.variables],
               "binary": self.binary}
        if self.kind == "saturated":
            out["levels"] = [lv.tolist() for lv in self.levels]
            out["counts"] = self.counts.tolist()
            out["sums"] = self.sums.tolist()
        else:
            out["coef"] = np.asarray(self.coef).tolist()
        return out


class _ParamFallback:
    """Main-effects model refit on the training rows of a saturated model."""

    def __init__(self, model: CondModel, y2, w):
        self.model = model
        idx = model._train[0]
        # rebuild the raw design from level indices
        X = np.column_stack([np.ones(len(w))] + [lv[np.maximum(ix, 0)].astype(float)
                                                  for lv, ix in zip(model.levels, idx)])
        if model.binary and y2.shape[1] == 1:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", SeparationWarning)
                self.coef = fit_logistic(X, y2[:, 0], w)[:, None]
        else:
            self.coef = _wls(X, y2, w)

    def predict(self, panel, overrides):
        X = _main_effects(panel, self.model.variables, overrides)
        out = X @ self.coef
        return expit(out) if self.model.binary and out.shape[1] == 1 else out


def _names(vs):
    return [f"{v[0]}{v[1]}" for v in vs]


def _code(idx: Sequence[np.ndarray], radices: Sequence[int], n: int):
    size = 1
    for r in radices:
        size *= int(r)
    code = np.zeros(n, dtype=np.int64)
    bad = np.zeros(n, dtype=bool)
    for ix, r in zip(idx, radices):
        code = code * int(r) + ix
        bad |= ix < 0
    return np.where(bad, -1, code), size


def _main_effects(panel: Panel, variables, overrides) -> np.ndarray:
    cols = [np.ones(panel.n)] + [np.asarray(_values(panel, v, overrides), dtype=float)
                                 for v in variables]
    return np.column_stack(cols)


# -- reference density --------------------------------------------------------------

@dataclass(eq=False)
class ReferenceDensity:
    """f*(A(k)=1 | V, A-history(k-1)) for k = 0..J-1.

    ``uniform`` is 0.5 everywhere; ``fitted`` is a main-effects logistic
    regression of A(k) on (V, A(0..k-1)); ``table`` holds user tables keyed
    by ``(v..., a(0..k-1))`` tuples.
    """

    mode: str
    J: int
    v_columns: tuple[str, ...] = ()
    models: list | None = None
    tables: list[dict] | None = None

    def prob1(self, panel: Panel, k: int, overrides: Mapping[Var, object] | None = None) -> np.ndarray:
        if self.mode == "uniform":
            return np.full(panel.n, 0.5)
        if self.mode == "fitted":
            return np.clip(self.models[k].predict(panel, overrides), CLAMP, 1 - CLAMP)
        keys = self._keys(panel, k, overrides)
        tab = self.tables[k]
        try:
            return np.array([tab[key] for key in keys], dtype=float)
        except KeyError as exc:
            raise NumericError(f"reference table for time {k} has no entry for history {exc}") from None

    def _keys(self, panel, k, overrides):
        cols = [np.asarray(_values(panel, (v, 0), overrides)) for v in self.v_columns]
        cols += [np.asarray(_values(panel, ("a", i), overrides)) for i in range(k)]
        if not cols:
            return [()] * panel.n
        return [tuple(int(x) if float(x).is_integer() else float(x) for x in row)
                for row in np.column_stack(cols)]

    def prob(self, panel: Panel, k: int, a=None, overrides=None) -> np.ndarray:
        """f*(A(k)=a | ...); ``a=None`` uses the observed A(k)."""
        p1 = self.prob1(panel, k, overrides)
        a = panel.A[:, k] if a is None else np.broadcast_to(a, (panel.n,))
        return np.where(a == 1, p1, 1 - p1)

    def factors(self, A: np.ndarray, V: np.ndarray) -> np.ndarray:
        """f*(a(k) | v, a(..k-1)) for every k on arbitrary (A, V) rows: (n, J)."""
        A = np.asarray(A)
        n, J = A.shape
        V = np.asarray(V, dtype=float).reshape(n, -1)
        L = np.zeros((n, J, len(self.v_columns)))
        L[:, 0, :] = V
        tmp = Panel(L, np.zeros_like(A), A, np.zeros(n), self.v_columns, self.v_columns)
        return np.column_stack([self.prob(tmp, k) for k in range(J)])

    def regime_prob(self, A: np.ndarray, V: np.ndarray) -> np.ndarray:
        """prod_k f*(a(k) | v, a(..k-1)) on arbitrary (A, V) rows."""
        return self.factors(A, V).prod(axis=1)

    def to_json(self) -> dict:
        out = {"mode": self.mode, "J": self.J, "v_columns": list(self.v_columns)}
        if self.models:
            out["models"] = [m.to_json() for m in self.models]
        if self.tables:
            out["tables"] = [{",".join(map(str, k)): v for k, v in t.items()} for t in self.tables]
        return out


def set_reference_density(panel: Panel, mode: str = "uniform", *, v_columns: Sequence[str] | None = None,
                          table: Sequence[Mapping] | None = None,
                          misspec: MisspecPattern | None = None) -> ReferenceDensity:
    """Choose f*: ``uniform``, ``fitted`` (logistic on V and past A) or ``table``."""
    J = panel.J
    vcols = tuple(panel.v_columns if v_columns is None else v_columns)
    if mode == "uniform":
        return ReferenceDensity("uniform", J, vcols)
    if mode == "fitted":
        omit = set(misspec.omitted("reference_density")) if misspec else set()
        keep = tuple(c for c in vcols if c not in omit)
        models = []
        for k in range(J):
            vars_ = [(c, 0) for c in keep] + [("a", i) for i in range(k)]
            models.append(CondModel.fit(panel, vars_, panel.A[:, k], kind="logistic", binary=True, j=k))
        # the fitted density depends on V only through the retained columns
        return ReferenceDensity("fitted", J, vcols, models=models)
    if mode == "table":
        if table is None or len(table) != J:
            raise ConfigError(f"table mode needs {J} per-time tables")
        tabs = [{_tuple_key(k): float(v) for k, v in t.items()} for t in table]
        for t in tabs:
            if any(not 0 <= v <= 1 for v in t.values()):
                raise ConfigError("reference table entries must be probabilities")
        ref = ReferenceDensity("table", J, vcols, tables=tabs)
        for k in range(J):
            if (ref.prob(panel, k) <= 0).any():
                rows = np.flatnonzero(ref.prob(panel, k) <= 0)
                raise NumericError(f"reference density gives zero mass to the observed A({k}) "
                                   f"for {rows.size} row(s), e.g. row {rows[0]}")
        return ref
    raise ConfigError(f"unknown reference density mode {mode!r}")


def _tuple_key(k) -> tuple:
    if isinstance(k, tuple):
        return k
    if isinstance(k, str):
        return tuple(int(x) for x in k.split(",") if x != "")
    return (k,)


# -- nuisance set -----------------------------------------------------------------------

@dataclass(eq=False)
class ArmModel:
    """Treatment mean by instrument arm: base = E[A | Z=0], shift = difference."""

    fit: CondModel
    j: int
    part: str  # "base" or "shift"

    def predict(self, panel: Panel, overrides=None) -> np.ndarray:
        o0 = dict(overrides or {})
        o0["z", self.j] = 0
        m0 = self.fit.predict(panel, o0)
        if self.part == "base":
            return m0
        o1 = dict(o0)
        o1["z", self.j] = 1
        return self.fit.predict(panel, o1) - m0

    def to_json(self) -> dict:
        return {"part": self.part, **self.fit.to_json()}


@dataclass(eq=False)
class NuisanceSet:
    """Fitted per-time nuisance models.  ``delta_psi`` is the shift model fitted
    on the design of the first sequential regression (used inside it)."""

    misspec: MisspecPattern
    fZ: list
    mA0: list
    delta: list
    delta_psi: list
    fA: list
    fstar: ReferenceDensity
    clamp: float = CLAMP
    delta_floor: float = DELTA_FLOOR
    diagnostics: dict = field(default_factory=dict)

    @property
    def J(self) -> int:
        return len(self.fZ)

    # evaluated quantities on a panel -------------------------------------------------
    def fz1(self, panel: Panel, j: int) -> np.ndarray:
        return np.clip(self.fZ[j].predict(panel), self.clamp, 1 - self.clamp)

    def fz_obs(self, panel: Panel, j: int) -> np.ndarray:
        p1 = self.fz1(panel, j)
        return np.where(panel.Z[:, j] == 1, p1, 1 - p1)

    def fa_obs(self, panel: Panel, j: int) -> np.ndarray:
        p1 = np.clip(self.fA[j].predict(panel), self.clamp, 1 - self.clamp)
        return np.where(panel.A[:, j] == 1, p1, 1 - p1)

    def _floored(self, x: np.ndarray, tag: str) -> np.ndarray:
        low = np.abs(x) < self.delta_floor
        if low.any():
            self.diagnostics[tag] = self.diagnostics.get(tag, 0) + int(low.sum())
        sign = np.where(x < 0, -1.0, 1.0)
        return np.where(low, sign * self.delta_floor, x)

    def delta_hat(self, panel: Panel, j: int) -> np.ndarray:
        return self._floored(self.delta[j].predict(panel), "delta_floor_hits")

    def delta_psi_hat(self, panel: Panel, j: int) -> np.ndarray:
        return self._floored(self.delta_psi[j].predict(panel), "delta_psi_floor_hits")

    def mA0_hat(self, panel: Panel, j: int) -> np.ndarray:
        return self.mA0[j].predict(panel)

    def residual(self, panel: Panel, j: int) -> np.ndarray:
        """epsilon_j = A(j) - E-hat[A(j) | history, Z(j)]."""
        fitted = np.clip(self.mA0_hat(panel, j) + panel.Z[:, j] * self.delta_hat(panel, j), 0.0, 1.0)
        return panel.A[:, j] - fitted

    def to_json(self) -> dict:
        return {"misspec": self.misspec.to_json(), "clamp": self.clamp,
                "delta_floor": self.delta_floor, "diagnostics": dict(self.diagnostics),
                "fZ": [m.to_json() for m in self.fZ], "mA0": [m.to_json() for m in self.mA0],
                "delta": [m.to_json() for m in self.delta],
                "delta_psi": [m.to_json() for m in self.delta_psi],
                "fA": [m.to_json() for m in self.fA], "fstar": self.fstar.to_json()}


def _z_hist(panel: Panel, j: int, omit) -> list[Var]:
    return history_vars(panel.l_columns, j, j - 1, j - 1, omit)


def fit_instrument_density(panel: Panel, misspec: MisspecPattern | None = None,
                           kind: str = "auto") -> list[CondModel]:
    """f(Z(j)=1 | L-history(j), Z-history(j-1), A-history(j-1)) for each j."""
    misspec = misspec or MisspecPattern.correct()
    omit = misspec.omitted("instrument_density")
    return [CondModel.fit(panel, _z_hist(panel, j, omit), panel.Z[:, j], kind=kind, binary=True,
                          fallback="model", j=j) for j in range(panel.J)]


def _arm_fit(panel, j, omit, kind):
    vars_ = _z_hist(panel, j, omit) + [("z", j)]
    return CondModel.fit(panel, vars_, panel.A[:, j], kind=kind, binary=True, j=j)


def fit_treatment_model(panel: Panel, misspec: MisspecPattern | None = None, kind: str = "auto",
                        delta_floor: float = DELTA_FLOOR):
    """Arm-mean models: (mA0 list, delta list), delta(j) = E[A|Z=1] - E[A|Z=0].

    Raises NumericError when the fitted instrument effect sits below the
    floor on every row at some time (instrument relevance failure).
    """
    misspec = misspec or MisspecPattern.correct()
    base, shift = [], []
    cache: dict = {}
    for j in range(panel.J):
        for flag, part, out in (("treatment_mean", "base", base), ("delta", "shift", shift)):
            omit = misspec.omitted(flag)
            key = (j, omit)
            if key not in cache:
                cache[key] = _arm_fit(panel, j, omit, kind)
            out.append(ArmModel(cache[key], j, part))
        d = shift[j].predict(panel)
        if np.all(np.abs(d[panel.w > 0]) < delta_floor):
            raise NumericError(f"instrument relevance failure: fitted delta at time {j} "
                               f"is below {delta_floor} everywhere")
    return base, shift


def fit_sra_treatment(panel: Panel, misspec: MisspecPattern | None = None,
                      kind: str = "auto") -> list[CondModel]:
    """f(A(j)=1 | L-history(j), A-history(j-1)), ignoring the instrument."""
    misspec = misspec or MisspecPattern.correct()
    omit = misspec.omitted("sra_treatment")
    return [CondModel.fit(panel, history_vars(panel.l_columns, j, None, j - 1, omit), panel.A[:, j],
                          kind=kind, binary=True, fallback="model", j=j) for j in range(panel.J)]


def fit_nuisances(panel: Panel, misspec: MisspecPattern | None = None, *, fstar="uniform",
                  kind: str = "auto", clamp: float = CLAMP,
                  delta_floor: float = DELTA_FLOOR) -> NuisanceSet:
    """Fit every nuisance used by the five estimators."""
    misspec = misspec or MisspecPattern.correct()
    misspec.check_columns(panel.l_columns)
    fZ = fit_instrument_density(panel, misspec, kind)
    mA0, delta = fit_treatment_model(panel, misspec, kind, delta_floor)
    psi_omit = misspec.omitted("psi1")
    delta_psi = [ArmModel(_arm_fit(panel, j, psi_omit, kind), j, "shift") for j in range(panel.J)]
    fA = fit_sra_treatment(panel, misspec, kind)
    if isinstance(fstar, ReferenceDensity):
        ref = fstar
    else:
        ref = set_reference_density(panel, fstar, misspec=misspec)
    return NuisanceSet(misspec, fZ, mA0, delta, delta_psi, fA, ref, clamp, delta_floor)


# -- sequential regressions ---------------------------------------------------------------

@dataclass
class PsiFit:
    """Backward regressions: gamma1[j] = Psi-tilde_j, gamma0[j] = Psi_j(z=0),
    both (n, q) per-subject evaluations; psi_obs[j] = gamma0 + Z(j) gamma1."""

    gamma1: list[np.ndarray]
    gamma0: list[np.ndarray]
    psi_obs: list[np.ndarray]
    models1: list[CondModel]
    models0: list[CondModel]


def psi_vars(panel: Panel, j: int, omit) -> list[Var]:
    return history_vars(panel.l_columns, j, j, j - 1, omit)


def psi_recursion(panel: Panel, nuis: NuisanceSet, X: np.ndarray, kind: str = "auto") -> PsiFit:
    """Run the instrument-weighted backward recursion on the columns of X.

    X holds per-subject terminal quantities (n, q).  Step J-1 regresses
    X (-1)^(1-A) f*(A) / Delta on the history (A(..J-2), L(..J-1), Z(..J-1));
    step j < J-1 does the same with Psi-tilde_{j+1} in place of X.  The
    fitted Psi_j is evaluated at both instrument values.
    """
    X = np.asarray(X, dtype=float)
    squeeze = X.ndim == 1
    X2 = X.reshape(len(X), -1)
    J = panel.J
    omit1 = nuis.misspec.omitted("psi1")
    omit0 = nuis.misspec.omitted("psi0")
    g1 = [None] * J
    g0 = [None] * J
    obs = [None] * J
    m1s = [None] * J
    m0s = [None] * J
    nxt = X2
    for j in range(J - 1, -1, -1):
        sa = 2.0 * panel.A[:, j] - 1.0
        scale = sa * nuis.fstar.prob(panel, j) / nuis.delta_psi_hat(panel, j)
        pseudo = nxt * scale[:, None]
        m1 = CondModel.fit(panel, psi_vars(panel, j, omit1), pseudo, kind=kind, j=j)
        mu1 = m1.predict(panel, {("z", j): 1})
        mu0 = m1.predict(panel, {("z", j): 0})
        if omit0 == omit1:
            m0, base = m1, mu0
        else:
            m0 = CondModel.fit(panel, psi_vars(panel, j, omit0), pseudo, kind=kind, j=j)
            base = m0.predict(panel, {("z", j): 0})
        g1[j], g0[j], m1s[j], m0s[j] = mu1 - mu0, base, m1, m0
        obs[j] = base + panel.Z[:, j, None] * g1[j]
        nxt = g1[j]
    if squeeze:
        g1 = [g[:, 0] for g in g1]
        g0 = [g[:, 0] for g in g0]
        obs = [g[:, 0] for g in obs]
    return PsiFit(g1, g0, obs, m1s, m0s)


@dataclass
class QFit:
    """Outcome regressions for the sequentially randomized augmentation:
    q_obs[j] = Q_j at the observed A(j), q_bar[j] = sum_a f*(a) Q_j(a)."""

    q_obs: list[np.ndarray]
    q_bar: list[np.ndarray]
    models: list[CondModel]


def q_vars(panel: Panel, j: int, omit) -> list[Var]:
    return history_vars(panel.l_columns, j, None, j, omit)


def cj_recursion(panel: Panel, nuis: NuisanceSet, X: np.ndarray, kind: str = "auto") -> QFit:
    """Q_{J-1} = E[X | A(..J-1), L(..J-1)];
    Q_j = E[sum_a f*(a) Q_{j+1}(.., a, ..) | A(..j), L(..j)]."""
    X = np.asarray(X, dtype=float)
    squeeze = X.ndim == 1
    target = X.reshape(len(X), -1)
    J = panel.J
    omit = nuis.misspec.omitted("outcome_regression")
    q_obs = [None] * J
    q_bar = [None] * J
    models = [None] * J
    for j in range(J - 1, -1, -1):
        m = CondModel.fit(panel, q_vars(panel, j, omit), target, kind=kind, j=j)
        q_obs[j] = m.predict(panel)
        bar = np.zeros_like(q_obs[j])
        for a in (0, 1):
            bar += nuis.fstar.prob(panel, j, a)[:, None] * m.predict(panel, {("a", j): a})
        q_bar[j] = bar
        models[j] = m
        target = bar
    if squeeze:
        q_obs = [q[:, 0] for q in q_obs]
        q_bar = [q[:, 0] for q in q_bar]
    return QFit(q_obs, q_bar, models)


def fit_psi_recursion(panel: Panel, nuis: NuisanceSet, msm, beta, kind: str = "auto") -> PsiFit:
    """Sequential instrument regressions of D_sm(beta)."""
    c, B = msm.linear_parts(panel)
    return psi_recursion(panel, nuis, c - B @ np.asarray(beta, dtype=float), kind)


def fit_cj_recursion(panel: Panel, nuis: NuisanceSet, msm, beta, kind: str = "auto") -> QFit:
    """Sequential outcome regressions of D_sm(beta) for the doubly robust estimator."""
    c, B = msm.linear_parts(panel)
    return cj_recursion(panel, nuis, c - B @ np.asarray(beta, dtype=float), kind)
