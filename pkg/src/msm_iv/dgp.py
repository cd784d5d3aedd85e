"""Discrete structural data-generating process with a latent confounder.

Per occasion j the structural order is U(j), L(j) (one binary variable per
column), Z(j), A(j); a Gaussian outcome follows the last occasion.  Each
structural table conditions on a fixed parent set, so the instrument
assumptions hold by construction:

* U(j) and L(j) never see Z, and neither does the outcome mean (exclusion);
* Z(j) never sees U (instrument independence);
* P(A(j)=1 | ...) = b[j](U, hist) + Z(j) * delta[j](hist) with delta free of U.

An optional ``delta_u`` table gives the instrument effect a U argument.  It
exists only to build negative controls for the identification checks.

Tables are numpy vectors indexed by the binary code of their parents
(first parent is the most significant bit).  JSON keys spell the parents
out, e.g. ``"u0=1,l0=0,z0=1,a0=0"``.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import ndtri

from .errors import ConfigError, SpecValidationError, StateSpaceError
from .panel import Panel, Var, moment_rows

STATE_CAP = 1 << 22


# -- structure -----------------------------------------------------------------

def _rank(var: Var, l_columns: Sequence[str]) -> tuple[int, int]:
    name, j = var
    if name == "u":
        return (j, 0)
    if name == "z":
        return (j, len(l_columns) + 1)
    if name == "a":
        return (j, len(l_columns) + 2)
    return (j, 1 + list(l_columns).index(name))


def canonical(vars_: Sequence[Var], l_columns: Sequence[str]) -> tuple[Var, ...]:
    return tuple(sorted(vars_, key=lambda v: _rank(v, l_columns)))


def _hist(l_columns, j_u=None, j_l=None, j_z=None, j_a=None) -> list[Var]:
    out: list[Var] = []
    for name, last in (("u", j_u), ("z", j_z), ("a", j_a)):
        if last is not None:
            out += [(name, k) for k in range(last + 1)]
    if j_l is not None:
        out += [(c, k) for k in range(j_l + 1) for c in l_columns]
    return out


def structural_parents(J: int, l_columns: Sequence[str]) -> dict[str, object]:
    """Parent sets of every structural table, in canonical order."""
    cols = list(l_columns)
    can = lambda vs: canonical(vs, cols)  # noqa: E731
    par = {
        "pU": [can(_hist(cols, j - 1, j - 1, None, j - 1)) for j in range(J)],
        "pL": [[can(_hist(cols, j, j - 1, None, j - 1) + [(c2, j) for c2 in cols[:i]])
                for i, _ in enumerate(cols)] for j in range(J)],
        "pZ": [can(_hist(cols, None, j, j - 1, j - 1)) for j in range(J)],
        "b": [can(_hist(cols, j, j, j - 1, j - 1)) for j in range(J)],
        "delta": [can(_hist(cols, None, j, j - 1, j - 1)) for j in range(J)],
        "delta_u": [can(_hist(cols, j, j, j - 1, j - 1)) for j in range(J)],
        "muY": can(_hist(cols, J - 1, J - 1, None, J - 1)),
        "muY_series": [can(_hist(cols, m - 1, m - 1, None, m - 1)) for m in range(1, J + 1)],
    }
    return par


def _key_name(var: Var) -> str:
    return f"{var[0]}{var[1]}"


@dataclass(frozen=True, eq=False)
class Table:
    """Function of binary parents stored as a vector over parent codes."""

    parents: tuple[Var, ...]
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).ravel()
        if vals.shape != (1 << len(self.parents),):
            raise ConfigError(f"table over {len(self.parents)} parents needs "
                              f"{1 << len(self.parents)} values, got {vals.size}")
        object.__setattr__(self, "values", vals)
        vals.setflags(write=False)

    def code(self, bits: Mapping[Var, np.ndarray]) -> np.ndarray | int:
        code = 0
        for v in self.parents:
            code = code * 2 + np.asarray(bits[v], dtype=np.int64)
        return code

    def __call__(self, bits: Mapping[Var, np.ndarray]) -> np.ndarray:
        return self.values[self.code(bits)]

    def to_json(self) -> dict[str, float]:
        out = {}
        for code, combo in enumerate(itertools.product((0, 1), repeat=len(self.parents))):
            key = ",".join(f"{_key_name(v)}={b}" for v, b in zip(self.parents, combo))
            out[key] = float(self.values[code])
        return out

    @classmethod
    def from_json(cls, parents: Sequence[Var], data: Mapping[str, float], what: str) -> "Table":
        parents = tuple(parents)
        lookup = {}
        for key, val in data.items():
            toks = {}
            for tok in filter(None, key.split(",")):
                name, _, bit = tok.strip().partition("=")
                toks[name] = int(bit)
            lookup[frozenset(toks.items())] = float(val)
        vals = np.empty(1 << len(parents))
        for code, combo in enumerate(itertools.product((0, 1), repeat=len(parents))):
            k = frozenset((_key_name(v), b) for v, b in zip(parents, combo))
            if k not in lookup:
                shown = ",".join(f"{a}={b}" for a, b in sorted(k))
                raise ConfigError(f"{what}: missing entry for history {shown!r}")
            vals[code] = lookup[k]
        if len(lookup) != len(vals):
            raise ConfigError(f"{what}: {len(lookup)} entries but parents "
                              f"{[_key_name(v) for v in parents]} give {len(vals)} histories")
        return cls(parents, vals)

    @classmethod
    def build(cls, parents: Sequence[Var], fn: Callable[[dict], float]) -> "Table":
        parents = tuple(parents)
        vals = [float(fn(dict(zip(parents, combo))))
                for combo in itertools.product((0, 1), repeat=len(parents))]
        return cls(parents, np.array(vals))


# -- specification -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DgpSpec:
    """Structural probability tables for the latent binary process."""

    J: int
    l_columns: tuple[str, ...]
    v_columns: tuple[str, ...]
    pU: list[Table]
    pL: list[list[Table]]
    pZ: list[Table]
    b: list[Table]
    delta: list[Table]
    muY: Table
    sigmaY: float = 1.0
    delta_u: list[Table] | None = None
    muY_series: list[Table] | None = None
    name: str = "custom"

    @property
    def p(self) -> int:
        return len(self.l_columns)

    def effect_table(self, j: int) -> Table:
        """Table actually used for the instrument shift at time j."""
        return self.delta_u[j] if self.delta_u is not None else self.delta[j]

    def to_json(self) -> dict:
        out = {"J": self.J, "name": self.name, "l_columns": list(self.l_columns),
               "v_columns": list(self.v_columns), "sigmaY": self.sigmaY,
               "pU": [t.to_json() for t in self.pU],
               "pL": [{c: t.to_json() for c, t in zip(self.l_columns, row)} for row in self.pL],
               "pZ": [t.to_json() for t in self.pZ], "b": [t.to_json() for t in self.b],
               "delta": [t.to_json() for t in self.delta], "muY": self.muY.to_json()}
        if self.delta_u is not None:
            out["delta_u"] = [t.to_json() for t in self.delta_u]
        if self.muY_series is not None:
            out["muY_series"] = [t.to_json() for t in self.muY_series]
        return out

    @classmethod
    def from_json(cls, data: Mapping) -> "DgpSpec":
        try:
            J = int(data["J"])
            cols = tuple(data["l_columns"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"DGP JSON needs integer J and l_columns: {exc}") from None
        _check_columns(cols)
        par = structural_parents(J, cols)

        def tabs(key, parents):
            if key not in data or len(data[key]) != J:
                raise ConfigError(f"DGP JSON needs {J} tables under {key!r}")
            return [Table.from_json(p, d, f"{key}[{j}]") for j, (p, d) in
                    enumerate(zip(parents, data[key]))]

        pL = []
        for j in range(J):
            row = data.get("pL", [None] * J)[j] if len(data.get("pL", [])) == J else None
            if row is None:
                raise ConfigError(f"DGP JSON needs {J} entries under 'pL'")
            pL.append([Table.from_json(par["pL"][j][i], row[c], f"pL[{j}][{c}]")
                       for i, c in enumerate(cols)])
        series = None
        if data.get("muY_series") is not None:
            series = [Table.from_json(p, d, f"muY_series[{m}]")
                      for m, (p, d) in enumerate(zip(par["muY_series"], data["muY_series"]))]
        return cls(J=J, l_columns=cols, v_columns=tuple(data.get("v_columns", ())),
                   pU=tabs("pU", par["pU"]), pL=pL, pZ=tabs("pZ", par["pZ"]),
                   b=tabs("b", par["b"]), delta=tabs("delta", par["delta"]),
                   muY=Table.from_json(par["muY"], data["muY"], "muY"),
                   sigmaY=float(data.get("sigmaY", 1.0)),
                   delta_u=tabs("delta_u", par["delta_u"]) if data.get("delta_u") else None,
                   muY_series=series, name=str(data.get("name", "custom")))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _check_columns(cols: Sequence[str]) -> None:
    for c in cols:
        if not c or not c.replace("_", "a").isalpha() or c in ("u", "z", "a", "y"):
            raise ConfigError(f"DGP column name {c!r} must be letters/underscores and not u, z, a, y")
    if len(set(cols)) != len(cols):
        raise ConfigError("duplicate L column names")


def load_spec(path) -> DgpSpec:
    return DgpSpec.from_json(json.loads(Path(path).read_text()))


def from_functions(J: int, l_columns: Sequence[str], *, pU, pL, pZ, b, delta, muY,
                   v_columns: Sequence[str] = (), sigmaY: float = 1.0, delta_u=None,
                   muY_series=None, name: str = "custom") -> DgpSpec:
    """Build tables by evaluating plain functions on every parent history.

    Each function receives a dict keyed by ``(name, j)`` (e.g. ``h["u", 0]``)
    plus the time index: ``pU(h, j)``, ``pL(h, j, col)``, ``pZ(h, j)``,
    ``b(h, j)``, ``delta(h, j)``, ``muY(h)``, ``muY_series(h, m)``.
    """
    cols = tuple(l_columns)
    _check_columns(cols)
    par = structural_parents(J, cols)
    per_j = lambda key, fn: [Table.build(par[key][j], lambda h, j=j: fn(h, j))  # noqa: E731
                             for j in range(J)]
    pl = [[Table.build(par["pL"][j][i], lambda h, j=j, c=c: pL(h, j, c))
           for i, c in enumerate(cols)] for j in range(J)]
    series = None
    if muY_series is not None:
        series = [Table.build(par["muY_series"][m - 1], lambda h, m=m: muY_series(h, m))
                  for m in range(1, J + 1)]
    return DgpSpec(J=J, l_columns=cols, v_columns=tuple(v_columns), pU=per_j("pU", pU), pL=pl,
                   pZ=per_j("pZ", pZ), b=per_j("b", b), delta=per_j("delta", delta),
                   muY=Table.build(par["muY"], muY), sigmaY=float(sigmaY),
                   delta_u=per_j("delta_u", delta_u) if delta_u is not None else None,
                   muY_series=series, name=name)


# -- validation -------------------------------------------------------------------

@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_json(self) -> dict:
        return {"ok": self.ok, "errors": self.errors, "warnings": self.warnings}


def validate(spec: DgpSpec, tol: float = 1e-12) -> ValidationReport:
    """Check probability ranges, instrument positivity and relevance."""
    rep = ValidationReport()
    if spec.J < 1:
        rep.errors.append("J must be at least 1")
        return rep
    bad_v = [v for v in spec.v_columns if v not in spec.l_columns]
    if bad_v:
        rep.errors.append(f"V columns {bad_v} are not L columns")
    par = structural_parents(spec.J, spec.l_columns)

    def in_unit(name, t: Table, open_=False):
        v = t.values
        if not np.isfinite(v).all():
            rep.errors.append(f"{name}: non-finite entries")
        elif open_ and ((v <= 0) | (v >= 1)).any():
            rep.errors.append(f"{name}: instrument positivity fails, values must lie in (0, 1); "
                              f"range [{v.min():.4g}, {v.max():.4g}]")
        elif ((v < -tol) | (v > 1 + tol)).any():
            rep.errors.append(f"{name}: probabilities outside [0, 1]")

    for j in range(spec.J):
        for key, t in (("pU", spec.pU[j]), ("pZ", spec.pZ[j]), ("b", spec.b[j]),
                       ("delta", spec.delta[j])):
            if t.parents != par[key][j]:
                rep.errors.append(f"{key}[{j}] has parents {t.parents}, expected {par[key][j]}")
        for i, c in enumerate(spec.l_columns):
            if spec.pL[j][i].parents != par["pL"][j][i]:
                rep.errors.append(f"pL[{j}][{c}] has wrong parents")
            in_unit(f"pL[{j}][{c}]", spec.pL[j][i])
        in_unit(f"pU[{j}]", spec.pU[j])
        in_unit(f"pZ[{j}]", spec.pZ[j], open_=True)
        in_unit(f"b[{j}]", spec.b[j])
        eff = spec.effect_table(j)
        # b + delta over b's parent set (delta's parents are a subset)
        idx = _subset_index(spec.b[j].parents, eff.parents)
        total = spec.b[j].values + eff.values[idx]
        if ((total < -tol) | (total > 1 + tol)).any():
            rep.errors.append(f"b[{j}] + delta[{j}] leaves [0, 1] for some history")
        if np.all(np.abs(eff.values) <= tol):
            rep.warnings.append(f"delta[{j}] is identically zero: instrument relevance fails at time {j}")
    if spec.muY.parents != par["muY"]:
        rep.errors.append("muY has wrong parents")
    if not np.isfinite(spec.muY.values).all():
        rep.errors.append("muY: non-finite entries")
    if not (np.isfinite(spec.sigmaY) and spec.sigmaY >= 0):
        rep.errors.append("sigmaY must be finite and non-negative")
    return rep


def _subset_index(outer: Sequence[Var], inner: Sequence[Var]) -> np.ndarray:
    """For every code over ``outer`` the matching code over ``inner`` (a subset)."""
    m = len(outer)
    codes = np.arange(1 << m)
    bits = {v: (codes >> (m - 1 - k)) & 1 for k, v in enumerate(outer)}
    code = np.zeros_like(codes)
    for v in inner:
        code = code * 2 + bits[v]
    return code


def require_valid(spec: DgpSpec) -> ValidationReport:
    rep = validate(spec)
    if not rep.ok:
        raise SpecValidationError(rep)
    return rep


# -- simulation ---------------------------------------------------------------------

def _layout(spec: DgpSpec) -> tuple[int, int]:
    per = spec.p + 3
    k = spec.J * per + (spec.J if spec.muY_series is not None else 1)
    return per, -(-k // 4) * 4


def _uniform_block(seed: int, start: int, count: int, width: int) -> np.ndarray:
    """Uniforms for subjects start..start+count-1 (independent of chunking)."""
    bg = np.random.Philox(key=int(seed) % (1 << 128))
    bg.advance(start * width // 4)
    return np.random.Generator(bg).random((count, width))


def simulate(spec: DgpSpec, n: int, seed: int, *, chunk: int = 1 << 16,
             return_latent: bool = False):
    """Draw n subjects in temporal order; U stays latent.

    Every subject consumes a fixed block of a counter-based stream keyed by
    ``seed``, so results do not depend on ``chunk``.
    """
    require_valid(spec)
    if n < 0:
        raise ConfigError("n must be non-negative")
    per, width = _layout(spec)
    J, p = spec.J, spec.p
    L = np.zeros((n, J, p))
    Z = np.zeros((n, J), dtype=np.int8)
    A = np.zeros((n, J), dtype=np.int8)
    U = np.zeros((n, J), dtype=np.int8)
    K = J if spec.muY_series is not None else 1
    Y = np.zeros((n, K))
    for s in range(0, n, chunk):
        m = min(chunk, n - s)
        u = _uniform_block(seed, s, m, width)
        bits: dict[Var, np.ndarray] = {}
        for j in range(J):
            col = j * per
            bits["u", j] = (u[:, col] < spec.pU[j](bits)).astype(np.int64)
            for i, c in enumerate(spec.l_columns):
                bits[c, j] = (u[:, col + 1 + i] < spec.pL[j][i](bits)).astype(np.int64)
            bits["z", j] = (u[:, col + p + 1] < spec.pZ[j](bits)).astype(np.int64)
            pa = spec.b[j](bits) + bits["z", j] * spec.effect_table(j)(bits)
            bits["a", j] = (u[:, col + p + 2] < pa).astype(np.int64)
        noise = ndtri(np.clip(u[:, J * per:J * per + K], 1e-300, None))
        if spec.muY_series is None:
            Y[s:s + m, 0] = spec.muY(bits) + spec.sigmaY * noise[:, 0]
        else:
            for mm, t in enumerate(spec.muY_series):
                Y[s:s + m, mm] = t(bits) + spec.sigmaY * noise[:, mm]
        for j in range(J):
            U[s:s + m, j] = bits["u", j]
            Z[s:s + m, j] = bits["z", j]
            A[s:s + m, j] = bits["a", j]
            for i, c in enumerate(spec.l_columns):
                L[s:s + m, j, i] = bits[c, j]
    panel = Panel(L, Z, A, Y if K > 1 else Y[:, 0], spec.l_columns, spec.v_columns)
    return (panel, U) if return_latent else panel


# -- exact law ---------------------------------------------------------------------

@dataclass(eq=False)
class LatentLaw:
    """Joint law of every latent-plus-observed history, by enumeration."""

    spec: DgpSpec
    variables: tuple[Var, ...]
    bits: dict[Var, np.ndarray]
    prob: np.ndarray
    mu: np.ndarray  # (N, K) structural outcome means
    regime: tuple[int, ...] | None = None

    @property
    def size(self) -> int:
        return self.prob.size

    def total_mass(self) -> float:
        return float(np.sum(self.prob))

    def codes(self, vars_: Sequence[Var]) -> np.ndarray:
        code = np.zeros(self.size, dtype=np.int64)
        for v in vars_:
            code = code * 2 + self.bits[v]
        return code

    def marginal(self, vars_: Sequence[Var]) -> np.ndarray:
        """P(vars = their value in each cell), broadcast to cells."""
        c = self.codes(vars_)
        return np.bincount(c, weights=self.prob, minlength=1 << len(vars_))[c]

    def cond_mean(self, values: np.ndarray, given: Sequence[Var]) -> np.ndarray:
        """E[values | given] broadcast to cells (0 where the condition has no mass)."""
        c = self.codes(given)
        size = 1 << len(given)
        num = np.bincount(c, weights=self.prob * values, minlength=size)
        den = np.bincount(c, weights=self.prob, minlength=size)
        return np.divide(num, den, out=np.zeros(size), where=den > 0)[c]

    def observed_vars(self) -> tuple[Var, ...]:
        return tuple(v for v in self.variables if v[0] != "u")

    def population_panel(self) -> Panel:
        """Observed law as a frequency-weighted panel.

        Each positive-mass observed history contributes 2K rows whose outcome
        values reproduce E[Y | history] and Cov(Y | history) exactly.
        """
        if self.regime is not None:
            raise ValueError("population panel is defined for the observational law only")
        obs = self.observed_vars()
        code = self.codes(obs)
        size = 1 << len(obs)
        mass = np.bincount(code, weights=self.prob, minlength=size)
        live = np.flatnonzero(mass > 0)
        pos = np.full(size, -1)
        pos[live] = np.arange(live.size)
        K = self.mu.shape[1]
        safe = mass[live]
        mean = np.stack([np.bincount(code, weights=self.prob * self.mu[:, k], minlength=size)[live]
                         for k in range(K)], 1) / safe[:, None]
        cov = np.zeros((live.size, K, K))
        row = pos[code]
        ok = row >= 0
        dev = self.mu[ok] - mean[row[ok]]
        np.add.at(cov, row[ok], self.prob[ok, None, None] * dev[:, :, None] * dev[:, None, :])
        cov /= safe[:, None, None]
        cov += self.spec.sigmaY ** 2 * np.eye(K)
        cell, Y, w = moment_rows(mean, cov, safe)
        J, p = self.spec.J, self.spec.p
        cell_codes = live[cell]
        m = len(obs)
        vals = {v: (cell_codes >> (m - 1 - k)) & 1 for k, v in enumerate(obs)}
        L = np.zeros((cell.size, J, p))
        for j in range(J):
            for i, c in enumerate(self.spec.l_columns):
                L[:, j, i] = vals[c, j]
        Z = np.stack([vals["z", j] for j in range(J)], 1)
        A = np.stack([vals["a", j] for j in range(J)], 1)
        return Panel(L, Z, A, Y if self.spec.muY_series is not None else Y[:, 0],
                     self.spec.l_columns, self.spec.v_columns, weights=w)


def conditional_tables(spec: DgpSpec, cap: int = STATE_CAP, *,
                       regime: Sequence[int] | None = None) -> LatentLaw:
    """Enumerate the joint law of (U, L, Z, A) with exact probabilities.

    With ``regime`` the treatments are fixed to that regime and the
    instruments are dropped: the result is the latent g-formula law of
    (U, L) under the intervention.
    """
    require_valid(spec)
    J, cols = spec.J, spec.l_columns
    if regime is not None:
        regime = tuple(int(a) for a in regime)
        if len(regime) != J:
            raise ConfigError(f"regime has length {len(regime)}, expected J={J}")
    variables: list[Var] = []
    for j in range(J):
        variables.append(("u", j))
        variables += [(c, j) for c in cols]
        if regime is None:
            variables += [("z", j), ("a", j)]
    m = len(variables)
    if (1 << m) > cap:
        raise StateSpaceError(f"state space 2^{m} exceeds cap {cap}")
    N = 1 << m
    codes = np.arange(N, dtype=np.int64)
    bits = {v: (codes >> (m - 1 - k)) & 1 for k, v in enumerate(variables)}
    if regime is not None:
        for j in range(J):
            bits["a", j] = np.full(N, regime[j], dtype=np.int64)
    prob = np.ones(N)

    def factor(p1, var):
        return np.where(bits[var] == 1, p1, 1.0 - p1)

    for j in range(J):
        prob *= factor(spec.pU[j](bits), ("u", j))
        for i, c in enumerate(cols):
            prob *= factor(spec.pL[j][i](bits), (c, j))
        if regime is None:
            prob *= factor(spec.pZ[j](bits), ("z", j))
            pa = spec.b[j](bits) + bits["z", j] * spec.effect_table(j)(bits)
            prob *= factor(pa, ("a", j))
    if spec.muY_series is None:
        mu = spec.muY(bits)[:, None]
    else:
        mu = np.stack([t(bits) for t in spec.muY_series], 1)
    return LatentLaw(spec, tuple(variables), bits, prob, mu, regime)


def population_panel(spec: DgpSpec, cap: int = STATE_CAP) -> Panel:
    return conditional_tables(spec, cap).population_panel()


# -- shipped processes ------------------------------------------------------------------

@dataclass(frozen=True)
class DeskParams:
    """Coefficients of the default desk process (all linear probability tables)."""

    J: int = 2
    pu0: float = 0.5
    u_stay: tuple[float, float] = (0.3, 0.4)       # U(j) = c + s U(j-1)
    l0: tuple[float, float] = (0.3, 0.4)           # L(0) = c + s U(0)
    l_next: tuple[float, float, float, float] = (0.2, 0.2, 0.3, 0.2)  # c, A(j-1), U(j), L(j-1)
    z0: tuple[float, float] = (0.3, 0.4)           # Z(0) = c + s L(0)
    z_next: tuple[float, float, float] = (0.25, 0.4, 0.1)  # c, L(j), Z(j-1)
    b: tuple[float, float, float, float] = (0.1, 0.25, 0.05, 0.05)  # c, U(j), L(j), A(j-1)
    delta: tuple[float, float] = (0.4, 0.1)        # delta(j) = c + s L(j)
    y_a: tuple[float, float] = (0.5, 0.1)          # coefficient of A(j): c + s j
    y_l: tuple[float, float] = (0.3, 0.2)          # coefficient of L(j): c + s j
    alpha_u: float = 1.0
    sigmaY: float = 1.0
    confounded: bool = True
    perfect_compliance: bool = False


def desk_dgp(params: DeskParams | None = None, **overrides) -> DgpSpec:
    """Default desk process: one binary L column ``l`` (also V), one U."""
    P = params or DeskParams()
    if overrides:
        P = DeskParams(**{**P.__dict__, **overrides})
    cu = 1.0 if P.confounded else 0.0
    l_u = P.l0[1] * cu
    lj_u = P.l_next[2] * cu

    def pU(h, j):
        return P.pu0 if j == 0 else P.u_stay[0] + P.u_stay[1] * h["u", j - 1]

    def pL(h, j, c):
        if j == 0:
            return P.l0[0] + l_u * h["u", 0]
        c0, ca, _, cl = P.l_next
        return c0 + ca * h["a", j - 1] + lj_u * h["u", j] + cl * h["l", j - 1]

    def pZ(h, j):
        if j == 0:
            return P.z0[0] + P.z0[1] * h["l", 0]
        return P.z_next[0] + P.z_next[1] * h["l", j] + P.z_next[2] * h["z", j - 1]

    def b(h, j):
        if P.perfect_compliance:
            return 0.0
        c0, cuu, cl, ca = P.b
        return c0 + cuu * cu * h["u", j] + cl * h["l", j] + (ca * h["a", j - 1] if j else 0.0)

    def delta(h, j):
        return 1.0 if P.perfect_compliance else P.delta[0] + P.delta[1] * h["l", j]

    def muY(h):
        y = 0.0
        for j in range(P.J):
            y += (P.y_a[0] + P.y_a[1] * j) * h["a", j] + (P.y_l[0] + P.y_l[1] * j) * h["l", j]
            y += P.alpha_u * cu * h["u", j]
        return y

    name = "perfect_compliance" if P.perfect_compliance else ("desk" if P.confounded else "unconfounded")
    return from_functions(P.J, ("l",), pU=pU, pL=pL, pZ=pZ, b=b, delta=delta, muY=muY,
                          v_columns=("l",), sigmaY=P.sigmaY, name=name)


def unconfounded_dgp(**overrides) -> DgpSpec:
    """Desk process with every U effect removed, so sequential randomization holds.

    Treatment leans harder on L here so that dropping L from a fit matters.
    """
    overrides.setdefault("b", (0.1, 0.0, 0.25, 0.05))
    return desk_dgp(confounded=False, **overrides)


def perfect_compliance_dgp(**overrides) -> DgpSpec:
    """Desk process with b = 0 and delta = 1, hence A(j) = Z(j)."""
    return desk_dgp(perfect_compliance=True, **overrides)


def backdoor_dgp(strength: float = 0.1, **overrides) -> DgpSpec:
    """Desk process whose instrument effect depends on U (violates compliance independence)."""
    base = desk_dgp(**overrides)
    par = structural_parents(base.J, base.l_columns)
    tabs = []
    for j in range(base.J):
        idx = _subset_index(par["delta_u"][j], base.delta[j].parents)
        ucode = _subset_index(par["delta_u"][j], [("u", j)])
        tabs.append(Table(par["delta_u"][j], base.delta[j].values[idx] + strength * (ucode - 0.5)))
    return DgpSpec(**{**base.__dict__, "delta_u": tabs, "name": "backdoor"})


def series_dgp(**overrides) -> DgpSpec:
    """Desk process with an outcome after every occasion (for the series family)."""
    base = desk_dgp(**overrides)
    J = base.J
    par = structural_parents(J, base.l_columns)

    def mu(h, m):
        return sum(0.5 * h["a", k] + 0.3 * h["l", k] + 0.8 * h["u", k] for k in range(m)) + 0.2 * m

    series = [Table.build(par["muY_series"][m - 1], lambda h, m=m: mu(h, m)) for m in range(1, J + 1)]
    return DgpSpec(**{**base.__dict__, "muY_series": series, "name": "series"})


BUILTINS: dict[str, Callable[..., DgpSpec]] = {
    "desk": desk_dgp,
    "unconfounded": unconfounded_dgp,
    "perfect_compliance": perfect_compliance_dgp,
    "backdoor": backdoor_dgp,
    "series": series_dgp,
}


# -- misspecification ---------------------------------------------------------------------

NUISANCES = ("instrument_density", "delta", "treatment_mean", "psi1", "psi0",
             "reference_density", "sra_treatment", "outcome_regression")

PATTERN_CORRECT = {
    "all_correct": NUISANCES,
    "i_only": ("instrument_density", "delta", "reference_density", "sra_treatment",
               "outcome_regression"),
    "ii_only": ("instrument_density", "psi1", "reference_density", "sra_treatment",
                "outcome_regression"),
    "iii_only": ("psi1", "psi0", "treatment_mean", "delta", "reference_density",
                 "sra_treatment", "outcome_regression"),
    "all_wrong": ("reference_density",),
    "sra_weights_wrong": tuple(n for n in NUISANCES if n != "sra_treatment"),
    "sra_outcome_wrong": tuple(n for n in NUISANCES if n != "outcome_regression"),
    "sra_both_wrong": tuple(n for n in NUISANCES if n not in ("sra_treatment", "outcome_regression")),
}

ROBUSTNESS_PATTERNS = ("all_correct", "i_only", "ii_only", "iii_only", "all_wrong")


@dataclass(frozen=True)
class MisspecPattern:
    """Per-nuisance flag: ``"correct"`` or ``"omit_covariate:<column>"``."""

    flags: tuple[tuple[str, str], ...] = ()
    name: str = "custom"

    def __post_init__(self):
        flags = dict(self.flags) if not isinstance(self.flags, dict) else self.flags
        for k, v in flags.items():
            if k not in NUISANCES:
                raise ConfigError(f"unknown nuisance {k!r}; expected one of {NUISANCES}")
            if v != "correct" and not (isinstance(v, str) and v.startswith("omit_covariate:")
                                       and v.split(":", 1)[1]):
                raise ConfigError(f"flag for {k!r} must be 'correct' or 'omit_covariate:<col>', got {v!r}")
        object.__setattr__(self, "flags", tuple(sorted(flags.items())))

    def flag(self, nuisance: str) -> str:
        return dict(self.flags).get(nuisance, "correct")

    def omitted(self, nuisance: str) -> tuple[str, ...]:
        f = self.flag(nuisance)
        return () if f == "correct" else (f.split(":", 1)[1],)

    def check_columns(self, l_columns: Sequence[str]) -> None:
        for k, v in self.flags:
            for c in self.omitted(k):
                if c not in l_columns:
                    raise ConfigError(f"misspecification of {k!r} omits unknown column {c!r}")

    @classmethod
    def named(cls, name: str, column: str = "l") -> "MisspecPattern":
        if name not in PATTERN_CORRECT:
            raise ConfigError(f"unknown pattern {name!r}; expected one of {sorted(PATTERN_CORRECT)}")
        good = set(PATTERN_CORRECT[name])
        return cls(tuple((k, "correct" if k in good else f"omit_covariate:{column}")
                         for k in NUISANCES), name)

    @classmethod
    def correct(cls) -> "MisspecPattern":
        return cls.named("all_correct")

    def to_json(self) -> dict:
        return {"name": self.name, "flags": dict(self.flags)}
