"""Marginal structural model specification with a linear predictor.

Features are small string tokens evaluated on a treatment history and V:

* ``"1"``           intercept
* ``"sum_a"``       cumulative treatment sum(a(k))
* ``"a<k>"``        a single treatment occasion, e.g. ``"a0"``
* ``"I(a=<bits>)"`` regime indicator, e.g. ``"I(a=10)"``
* ``"m=<k>"``       outcome-index dummy (series outcomes only)
* a V column name
* products of the above joined by ``*``, e.g. ``"sum_a*l"``

For a series outcome Y(m), m = 1..J, the features of component m are
evaluated on the truncated history a(0..m-1).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .panel import Panel, enumerate_regimes

FAMILIES = ("1.1", "1.4")


@dataclass(frozen=True)
class MsmSpec:
    """g(a, V; beta) = x(a, V) . beta with user-declared features.

    ``h`` optionally replaces the default index function grad_beta g for the
    terminal family: a callable ``h(A, V) -> (n, p)``.
    """

    family: str = "1.1"
    features: tuple[str, ...] | None = None
    v_columns: tuple[str, ...] = ()
    h: Callable | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown MSM family {self.family!r}; expected one of {FAMILIES}")
        feats = self.features
        if feats is None:
            feats = ("1", "sum_a", *self.v_columns)
        object.__setattr__(self, "features", tuple(feats))
        object.__setattr__(self, "v_columns", tuple(self.v_columns))
        for f in self.features:
            for tok in f.split("*"):
                self._check_token(tok)

    def _check_token(self, tok: str) -> None:
        if tok in ("1", "sum_a") or tok in self.v_columns:
            return
        if tok.startswith("a") and tok[1:].isdigit():
            return
        if tok.startswith("m=") and tok[2:].isdigit():
            if self.family != "1.4":
                raise ConfigError(f"feature {tok!r} needs the series family 1.4")
            return
        if tok.startswith("I(a=") and tok.endswith(")") and set(tok[4:-1]) <= {"0", "1"}:
            return
        raise ConfigError(f"unrecognised MSM feature token {tok!r}")

    @property
    def dim_beta(self) -> int:
        return len(self.features)

    def design(self, A: np.ndarray, V: np.ndarray, m: int | None = None) -> np.ndarray:
        """Feature matrix (n, p).  ``m`` selects a series component (1-based)."""
        A = np.asarray(A)
        V = np.asarray(V, dtype=float).reshape(A.shape[0], -1)
        J = A.shape[1]
        upto = J if m is None else m
        if self.family == "1.4" and m is None:
            raise ValueError("series family needs the component index m")
        cols = []
        for f in self.features:
            val = np.ones(A.shape[0])
            for tok in f.split("*"):
                val = val * self._token(tok, A, V, upto, m)
            cols.append(val)
        return np.stack(cols, axis=1)

    def _token(self, tok, A, V, upto, m):
        n = A.shape[0]
        if tok == "1":
            return np.ones(n)
        if tok == "sum_a":
            return A[:, :upto].sum(axis=1).astype(float)
        if tok in self.v_columns:
            return V[:, self.v_columns.index(tok)]
        if tok.startswith("m="):
            return np.full(n, float(int(tok[2:]) == m))
        if tok.startswith("I(a="):
            bits = tok[4:-1]
            if len(bits) != A.shape[1]:
                raise ConfigError(f"{tok!r} does not match J={A.shape[1]}")
            return np.all(A == np.array([int(b) for b in bits]), axis=1).astype(float)
        k = int(tok[1:])
        if k >= A.shape[1]:
            raise ConfigError(f"{tok!r} refers to an occasion beyond J={A.shape[1]}")
        return A[:, k].astype(float) if k < upto else np.zeros(n)

    def linear_parts(self, panel: Panel) -> tuple[np.ndarray, np.ndarray]:
        """Split D_sm(beta) = c - B beta into c (n, p) and B (n, p, p)."""
        return linear_parts(self, panel.A, _v(panel, self), panel.Y)


def _v(panel: Panel, msm: MsmSpec) -> np.ndarray:
    try:
        idx = [panel.l_columns.index(c) for c in msm.v_columns]
    except ValueError:
        raise ConfigError(f"MSM V columns {msm.v_columns} not all in panel columns "
                          f"{panel.l_columns}") from None
    return panel.L[:, 0, idx]


def linear_parts(msm: MsmSpec, A, V, Y) -> tuple[np.ndarray, np.ndarray]:
    A = np.asarray(A)
    Y = np.asarray(Y, dtype=float)
    if msm.family == "1.1":
        if Y.ndim != 1:
            raise ConfigError("family 1.1 needs a terminal outcome")
        x = msm.design(A, V)
        h = x if msm.h is None else np.asarray(msm.h(A, V), dtype=float)
        return h * Y[:, None], h[:, :, None] * x[:, None, :]
    if Y.ndim != 2 or Y.shape[1] != A.shape[1]:
        raise ConfigError("family 1.4 needs an outcome series Y(1..J)")
    p = msm.dim_beta
    c = np.zeros((A.shape[0], p))
    B = np.zeros((A.shape[0], p, p))
    for m in range(1, A.shape[1] + 1):
        x = msm.design(A, V, m)
        c += x * Y[:, m - 1, None]
        B += x[:, :, None] * x[:, None, :]
    return c, B


def d_sm(msm: MsmSpec, panel: Panel, beta) -> np.ndarray:
    """Per-subject MSM estimating function h(A, V) * (Y - g(A, V; beta))."""
    c, B = msm.linear_parts(panel)
    return c - B @ np.asarray(beta, dtype=float)


def regime_features(msm: MsmSpec, J: int, V: np.ndarray, m: int | None = None) -> np.ndarray:
    """x(a_c, v) for every regime c (canonical order) and row of V: (nv, C, p)."""
    V = np.asarray(V, dtype=float)
    nv = V.shape[0]
    regs = np.array([r.a for r in enumerate_regimes(J)])
    C = len(regs)
    A = np.repeat(regs[None], nv, axis=0).reshape(nv * C, J)
    Vr = np.repeat(V, C, axis=0)
    return msm.design(A, Vr, m).reshape(nv, C, -1)


def v_matrix(panel: Panel, msm: MsmSpec) -> np.ndarray:
    return _v(panel, msm)


def check_columns(msm: MsmSpec, names: Sequence[str]) -> None:
    missing = [c for c in msm.v_columns if c not in names]
    if missing:
        raise ConfigError(f"MSM V columns {missing} not among {list(names)}")
