"""Longitudinal panel container, treatment regimes and CSV ingestion.

A panel holds, per subject, covariates L(j), instrument Z(j) and treatment
A(j) for j = 0..J-1 plus the outcome.  The outcome is either a terminal
scalar Y or a series Y(1..J) (one value after each treatment).

Variables are addressed by ``(name, j)`` tuples throughout the package:
``name`` is an L column, ``"z"`` or ``"a"``.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import PanelError

Var = tuple[str, int]

RESERVED = ("u", "z", "a", "y")


def _as_binary(x, what: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise PanelError(f"{what} must be binary (0/1)")
    return arr.astype(np.int8)


@dataclass(frozen=True, eq=False)
class Panel:
    """Rectangular longitudinal data, immutable after construction.

    ``weights`` are frequency weights (default one per row).  Population
    panels built by the oracle use probabilities as weights.
    """

    L: np.ndarray  # (n, J, p)
    Z: np.ndarray  # (n, J)
    A: np.ndarray  # (n, J)
    Y: np.ndarray  # (n,) terminal, or (n, K) series
    l_columns: tuple[str, ...]
    v_columns: tuple[str, ...] = ()
    ids: np.ndarray | None = None
    weights: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float)
        Z = _as_binary(self.Z, "Z")
        A = _as_binary(self.A, "A")
        Y = np.asarray(self.Y, dtype=float)
        if Z.ndim != 2 or A.shape != Z.shape:
            raise PanelError("Z and A must both have shape (n, J)")
        n, J = Z.shape
        if J < 1:
            raise PanelError("panel needs at least one occasion")
        if L.ndim == 2 and L.size == 0:
            L = L.reshape(n, J, 0)
        if L.shape[:2] != (n, J) or L.shape[2] != len(self.l_columns):
            raise PanelError(f"L has shape {L.shape}, expected ({n}, {J}, {len(self.l_columns)})")
        if Y.shape[0] != n or Y.ndim not in (1, 2):
            raise PanelError("Y must have shape (n,) or (n, K)")
        if not np.isfinite(Y).all():
            bad = int(np.flatnonzero(~np.isfinite(Y.reshape(n, -1)).all(axis=1))[0])
            raise PanelError(f"non-finite Y for row {bad}")
        if not np.isfinite(L).all():
            raise PanelError("non-finite covariate value")
        cols = tuple(self.l_columns)
        if len(set(cols)) != len(cols) or any(c in RESERVED for c in cols):
            raise PanelError(f"L column names must be unique and avoid {RESERVED}")
        missing = [v for v in self.v_columns if v not in cols]
        if missing:
            raise PanelError(f"V columns {missing} are not L(0) columns")
        ids = np.arange(n) if self.ids is None else np.asarray(self.ids)
        w = None if self.weights is None else np.asarray(self.weights, dtype=float)
        if w is not None and (w.shape != (n,) or (w < 0).any()):
            raise PanelError("weights must be a non-negative vector of length n")
        for name, val in (("L", L), ("Z", Z), ("A", A), ("Y", Y), ("ids", ids),
                          ("weights", w), ("l_columns", cols),
                          ("v_columns", tuple(self.v_columns))):
            object.__setattr__(self, name, val)
        for arr in (L, Z, A, Y, ids, w):
            if arr is not None:
                arr.setflags(write=False)

    # -- shape -------------------------------------------------------------
    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def J(self) -> int:
        return self.Z.shape[1]

    @property
    def series(self) -> bool:
        return self.Y.ndim == 2

    @property
    def w(self) -> np.ndarray:
        if self.weights is None:
            return np.ones(self.n)
        return self.weights

    @property
    def total_weight(self) -> float:
        return float(self.n if self.weights is None else self.weights.sum())

    @property
    def V(self) -> np.ndarray:
        idx = [self.l_columns.index(c) for c in self.v_columns]
        return self.L[:, 0, idx]

    # -- variable access -----------------------------------------------------
    def column(self, var: Var) -> np.ndarray:
        name, j = var
        if not 0 <= j < self.J:
            raise KeyError(f"time {j} outside 0..{self.J - 1}")
        if name == "z":
            return self.Z[:, j]
        if name == "a":
            return self.A[:, j]
        return self.L[:, j, self.l_columns.index(name)]

    def history(self, j: int, *, l_upto: int | None = None, z_upto: int | None = None,
                a_upto: int | None = None, omit: Iterable[str] = ()) -> list[Var]:
        """Variables of the observed history in temporal order.

        ``l_upto`` etc. give the last time included (``None`` or < 0 means none).
        ``omit`` lists L columns left out at every time.
        """
        return history_vars(self.l_columns, l_upto, z_upto, a_upto, omit)

    def is_discrete(self, var: Var, max_levels: int = 64) -> bool:
        key = ("discrete", var)
        if key not in self._cache:
            self._cache[key] = len(np.unique(self.column(var))) <= max_levels
        return self._cache[key]

    # -- derived panels --------------------------------------------------------
    def replace(self, **changes) -> "Panel":
        """Copy with some fields changed.  Code caches survive when L, Z, A do."""
        keep_cache = not ({"L", "Z", "A", "l_columns"} & set(changes))
        fields = dict(L=self.L, Z=self.Z, A=self.A, Y=self.Y, l_columns=self.l_columns,
                      v_columns=self.v_columns, ids=self.ids, weights=self.weights)
        fields.update(changes)
        out = Panel(**fields)
        if keep_cache:
            object.__setattr__(out, "_cache", self._cache)
        return out

    def with_weights(self, weights) -> "Panel":
        return self.replace(weights=weights)

    def take(self, idx) -> "Panel":
        idx = np.asarray(idx)
        return Panel(self.L[idx], self.Z[idx], self.A[idx], self.Y[idx], self.l_columns,
                     self.v_columns, self.ids[idx],
                     None if self.weights is None else self.weights[idx])

    def cell_index(self) -> tuple[np.ndarray, np.ndarray]:
        """(first row of each distinct (L, Z, A) history, inverse map)."""
        if "cells" not in self._cache:
            key = np.concatenate([self.L.reshape(self.n, -1), self.Z, self.A], axis=1)
            _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
            self._cache["cells"] = (first, inv.ravel())
        return self._cache["cells"]

    def compress(self, weights=None) -> "Panel":
        """Sufficient-statistic panel for fits that are saturated in the history.

        Each distinct history becomes 2K rows whose Y values reproduce the
        within-cell mean and (ddof=0) covariance of the outcome, with total
        frequency weight equal to the cell's weight.  Any estimating function
        that is affine in Y given the history then has identical sums and
        identical sums of outer products on the compressed panel.
        """
        w = self.w if weights is None else np.asarray(weights, dtype=float)
        first, inv = self.cell_index()
        m = len(first)
        cnt = np.bincount(inv, weights=w, minlength=m)
        Y = self.Y.reshape(self.n, -1)
        K = Y.shape[1]
        safe = np.where(cnt > 0, cnt, 1.0)
        mean = np.stack([np.bincount(inv, weights=w * Y[:, k], minlength=m) for k in range(K)], 1)
        mean /= safe[:, None]
        dev = Y - mean[inv]
        cov = np.zeros((m, K, K))
        if K == 1:
            cov[:, 0, 0] = np.bincount(inv, weights=w * dev[:, 0] ** 2, minlength=m) / safe
        else:
            np.add.at(cov, inv, w[:, None, None] * dev[:, :, None] * dev[:, None, :])
            cov /= safe[:, None, None]
        cell, Ynew, wnew = moment_rows(mean, cov, cnt)
        rows = first[cell]
        if not self.series:
            Ynew = Ynew[:, 0]
        keep = wnew > 0
        out = Panel(self.L[rows][keep], self.Z[rows][keep], self.A[rows][keep], Ynew[keep],
                    self.l_columns, self.v_columns, np.arange(int(keep.sum())), wnew[keep])
        return out

    def equals(self, other: "Panel", atol: float = 0.0) -> bool:
        same = (self.l_columns == other.l_columns and self.v_columns == other.v_columns
                and self.L.shape == other.L.shape and self.Y.shape == other.Y.shape)
        if not same:
            return False
        return (np.array_equal(self.Z, other.Z) and np.array_equal(self.A, other.A)
                and np.allclose(self.L, other.L, rtol=0, atol=atol)
                and np.allclose(self.Y, other.Y, rtol=0, atol=atol)
                and np.array_equal(self.ids.astype(str), other.ids.astype(str)))


def moment_rows(mean: np.ndarray, cov: np.ndarray, mass: np.ndarray):
    """Rows reproducing given first and second moments exactly.

    For each cell with mean vector m (K,), covariance C (K, K) and mass w,
    emit 2K points m +/- sqrt(K lambda_i) e_i, each with weight w / 2K.
    Returns (cell index per row, Y rows (R, K), weights (R,)).
    """
    m, K = mean.shape
    if K == 1:
        sd = np.sqrt(np.maximum(cov[:, 0, 0], 0.0))
        offs = np.stack([sd, -sd], axis=1)[:, :, None]
    else:
        lam, vec = np.linalg.eigh(cov)
        root = (vec * np.sqrt(np.maximum(lam, 0.0) * K)[:, None, :]).transpose(0, 2, 1)
        offs = np.concatenate([root, -root], axis=1)
    reps = offs.shape[1]
    Y = (mean[:, None, :] + offs).reshape(m * reps, K)
    return np.repeat(np.arange(m), reps), Y, np.repeat(mass / reps, reps)


def history_vars(l_columns: Sequence[str], l_upto, z_upto, a_upto,
                 omit: Iterable[str] = ()) -> list[Var]:
    omit = set(omit)
    last = max(t for t in (l_upto, z_upto, a_upto, -1) if t is not None)
    out: list[Var] = []
    for k in range(last + 1):
        if l_upto is not None and k <= l_upto:
            out += [(c, k) for c in l_columns if c not in omit]
        if z_upto is not None and k <= z_upto:
            out.append(("z", k))
        if a_upto is not None and k <= a_upto:
            out.append(("a", k))
    return out


# -- regimes -------------------------------------------------------------------

@dataclass(frozen=True)
class Regime:
    """A fixed treatment history (a(0), ..., a(J-1))."""

    a: tuple[int, ...]

    def __post_init__(self):
        if any(x not in (0, 1) for x in self.a):
            raise ValueError("regime entries must be 0 or 1")

    @property
    def J(self) -> int:
        return len(self.a)

    @property
    def index(self) -> int:
        """Position in ``enumerate_regimes`` (a(0) is the most significant bit)."""
        return int("".join(map(str, self.a)), 2) if self.a else 0


def enumerate_regimes(J: int) -> list[Regime]:
    """All 2^J regimes in lexicographic order."""
    if not isinstance(J, (int, np.integer)) or not 1 <= J <= 16:
        raise ValueError(f"J must be an integer in 1..16, got {J!r}")
    return [Regime(a) for a in itertools.product((0, 1), repeat=int(J))]


def regime_index(A: np.ndarray) -> np.ndarray:
    """Canonical regime index of each row of a (n, J) treatment matrix."""
    A = np.asarray(A, dtype=np.int64)
    J = A.shape[1]
    return A @ (1 << np.arange(J - 1, -1, -1, dtype=np.int64))


# -- CSV ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PanelSchema:
    """Column mapping for long-format files.

    ``l_columns=None`` takes every column that is not id, time, Z, A or Y.
    ``outcome="terminal"`` reads Y from each subject's last row; ``"series"``
    reads Y(j+1) from the row of time j.
    """

    id: str = "subject_id"
    time: str = "time"
    z: str = "Z"
    a: str = "A"
    y: str = "Y"
    l_columns: tuple[str, ...] | None = None
    v_columns: tuple[str, ...] = ()
    outcome: str = "terminal"


def _num(s: str, what: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise PanelError(f"{what}: cannot parse {s!r} as a number") from None


def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2**53 else repr(x)


def load_panel(path, schema: PanelSchema | None = None) -> Panel:
    """Read a long-format CSV into a validated Panel (subjects sorted by id)."""
    schema = schema or PanelSchema()
    path = Path(path)
    if not path.exists():
        raise PanelError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        fixed = {schema.id, schema.time, schema.z, schema.a, schema.y}
        for col in (schema.id, schema.time, schema.z, schema.a):
            if col not in header:
                raise PanelError(f"missing column {col!r}")
        lcols = tuple(schema.l_columns) if schema.l_columns is not None else tuple(
            c for c in header if c not in fixed)
        for c in lcols:
            if c not in header:
                raise PanelError(f"missing column {c!r}")
        rows: dict[str, dict[int, dict]] = {}
        for rec in reader:
            sid = rec[schema.id]
            t = _num(rec[schema.time], f"subject {sid}, column {schema.time}")
            if not t.is_integer() or t < 0:
                raise PanelError(f"subject {sid}: time {rec[schema.time]!r} is not a non-negative integer")
            if int(t) in rows.setdefault(sid, {}):
                raise PanelError(f"subject {sid}: duplicate time {int(t)}")
            rows[sid][int(t)] = rec

    def sort_key(s):
        try:
            return (0, float(s), s)
        except ValueError:
            return (1, 0.0, s)

    sids = sorted(rows, key=sort_key)
    if not sids:
        J = 0
    else:
        J = max(max(r) for r in rows.values()) + 1
    for sid in sids:
        have = set(rows[sid])
        missing = sorted(set(range(J)) - have)
        if missing:
            raise PanelError(f"ragged panel: subject {sid} is missing time(s) {missing} (J={J})")
    n = len(sids)
    L = np.zeros((n, J, len(lcols)))
    Z = np.zeros((n, J), dtype=np.int8)
    A = np.zeros((n, J), dtype=np.int8)
    K = J if schema.outcome == "series" else 1
    Y = np.zeros((n, K))
    for i, sid in enumerate(sids):
        for t in range(J):
            rec = rows[sid][t]
            for col, dest in ((schema.z, Z), (schema.a, A)):
                v = _num(rec[col], f"subject {sid}, time {t}, column {col}")
                if v not in (0.0, 1.0):
                    raise PanelError(f"subject {sid}, time {t}: column {col} has value "
                                     f"{rec[col]!r}, expected 0 or 1")
                dest[i, t] = int(v)
            for c, col in enumerate(lcols):
                L[i, t, c] = _num(rec[col], f"subject {sid}, time {t}, column {col}")
            ycell = rec.get(schema.y, "") or ""
            if schema.outcome == "series":
                if ycell == "":
                    raise PanelError(f"subject {sid}, time {t}: missing outcome {schema.y}")
                Y[i, t] = _num(ycell, f"subject {sid}, time {t}, column {schema.y}")
            elif t == J - 1:
                if ycell == "":
                    raise PanelError(f"subject {sid}: missing terminal outcome {schema.y}")
                Y[i, 0] = _num(ycell, f"subject {sid}, column {schema.y}")
    ids = np.array(sids)
    try:
        as_int = np.array([int(s) for s in sids])
        if all(str(v) == s for v, s in zip(as_int, sids)):
            ids = as_int
    except ValueError:
        pass
    if J == 0:
        raise PanelError("panel has no rows")
    return Panel(L, Z, A, Y if schema.outcome == "series" else Y[:, 0], lcols,
                 tuple(schema.v_columns), ids)


def write_panel(panel: Panel, path, schema: PanelSchema | None = None) -> None:
    """Write a panel in the long format read by ``load_panel``."""
    schema = schema or PanelSchema()
    lines = write_rows(panel, schema)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerows(lines)


def write_rows(panel: Panel, schema: PanelSchema | None = None) -> list[list[str]]:
    schema = schema or PanelSchema()
    out = [[schema.id, schema.time, *panel.l_columns, schema.z, schema.a, schema.y]]
    for i in range(panel.n):
        sid = str(panel.ids[i])
        for t in range(panel.J):
            if panel.series:
                y = _fmt(panel.Y[i, t])
            else:
                y = _fmt(panel.Y[i]) if t == panel.J - 1 else ""
            out.append([sid, str(t), *(_fmt(x) for x in panel.L[i, t]),
                        str(int(panel.Z[i, t])), str(int(panel.A[i, t])), y])
    return out


def empty_rows(l_columns: Sequence[str], schema: PanelSchema | None = None) -> list[list[str]]:
    schema = schema or PanelSchema()
    return [[schema.id, schema.time, *l_columns, schema.z, schema.a, schema.y]]


def from_arrays(L, Z, A, Y, l_columns: Sequence[str], v_columns: Sequence[str] = (),
                weights=None) -> Panel:
    """Convenience constructor accepting lists."""
    Z = np.atleast_2d(np.asarray(Z))
    return Panel(np.asarray(L, dtype=float), Z, np.asarray(A), np.asarray(Y, dtype=float),
                 tuple(l_columns), tuple(v_columns), weights=weights)

