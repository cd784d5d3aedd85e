"""Cumulative treatment weights.

Products run over k = 0..j.  Magnitudes are accumulated on the log scale
and the sign is tracked separately, so long histories neither overflow
nor lose the sign of the instrument weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .nuisance import NuisanceSet
from .panel import Panel


@dataclass(frozen=True, eq=False)
class WeightTrack:
    """Per-subject cumulative weights; column j covers occasions 0..j.

    ``log_sra`` is log W-bar(j).  The instrument weight W-dagger(j) is
    ``iv_sign * exp(log_iv)``; ``log_iv1``/``iv1_sign`` and ``log_iv2``/``iv2_sign``
    hold the per-occasion factors W-dagger_{k,1} and W-dagger_{k,2}.
    """

    log_sra: np.ndarray | None = None
    log_iv: np.ndarray | None = None
    iv_sign: np.ndarray | None = None
    log_iv1: np.ndarray | None = None
    iv1_sign: np.ndarray | None = None
    log_iv2: np.ndarray | None = None
    iv2_sign: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    @property
    def sra(self) -> np.ndarray:
        return np.exp(self.log_sra)

    @property
    def inv_sra(self) -> np.ndarray:
        return np.exp(-self.log_sra)

    @property
    def iv(self) -> np.ndarray:
        return self.iv_sign * np.exp(self.log_iv)

    @property
    def inv_iv(self) -> np.ndarray:
        return self.iv_sign * np.exp(-self.log_iv)

    @property
    def iv1(self) -> np.ndarray:
        return self.iv1_sign * np.exp(self.log_iv1)

    @property
    def iv2(self) -> np.ndarray:
        return self.iv2_sign * np.exp(self.log_iv2)

    def merged(self, other: "WeightTrack") -> "WeightTrack":
        vals = {k: (getattr(self, k) if getattr(self, k) is not None else getattr(other, k))
                for k in ("log_sra", "log_iv", "iv_sign", "log_iv1", "iv1_sign", "log_iv2", "iv2_sign")}
        return WeightTrack(**vals, flags={**self.flags, **other.flags})


def shifted(x: np.ndarray, fill: float) -> np.ndarray:
    """Column j of the result is column j-1 of x (column 0 is ``fill``)."""
    out = np.empty_like(x)
    out[:, 0] = fill
    out[:, 1:] = x[:, :-1]
    return out


def _log_checked(p: np.ndarray, what: str) -> np.ndarray:
    if (p <= 0).any():
        raise NumericError(f"{what} has zero mass on an observed history")
    return np.log(p)


def sra_weights(panel: Panel, nuis: NuisanceSet) -> WeightTrack:
    """W-bar(j) = prod_{k<=j} f(A(k) | L(..k), A(..k-1)) / f*(A(k) | V, A(..k-1))."""
    J = panel.J
    step = np.empty((panel.n, J))
    for k in range(J):
        lf = np.log(nuis.fa_obs(panel, k))
        lstar = _log_checked(nuis.fstar.prob(panel, k), "reference density")
        step[:, k] = lf - lstar
    return WeightTrack(log_sra=np.cumsum(step, axis=1))


def iv_weights(panel: Panel, nuis: NuisanceSet) -> WeightTrack:
    """Signed instrument weights.

    W-dagger_{k,1} = f(Z(k) | ...) delta_k (-1)^(1-Z(k)),
    W-dagger_{k,2} = (-1)^(1-A(k)) / f*(A(k) | V, A(..k-1)),
    W-dagger(j) = prod_{k<=j} W-dagger_{k,1} W-dagger_{k,2}.
    """
    J = panel.J
    n = panel.n
    l1 = np.empty((n, J))
    s1 = np.empty((n, J))
    l2 = np.empty((n, J))
    s2 = np.empty((n, J))
    for k in range(J):
        d = nuis.delta_hat(panel, k)
        fz = nuis.fz_obs(panel, k)
        lstar = _log_checked(nuis.fstar.prob(panel, k), "reference density")
        l1[:, k] = np.log(fz) + np.log(np.abs(d))
        s1[:, k] = (2.0 * panel.Z[:, k] - 1.0) * np.sign(d)
        l2[:, k] = -lstar
        s2[:, k] = 2.0 * panel.A[:, k] - 1.0
    # the inverse is accumulated as log f* - log f - log|delta| (see below)
    log_inv = np.cumsum(-l2 - l1, axis=1)
    sign = np.cumprod(s1 * s2, axis=1)
    flags = {"delta_floor_hits": nuis.diagnostics.get("delta_floor_hits", 0)}
    return WeightTrack(log_iv=-log_inv, iv_sign=sign, log_iv1=l1, iv1_sign=s1, log_iv2=l2,
                       iv2_sign=s2, flags=flags)


def inverse_weights(track: WeightTrack, kind: str) -> np.ndarray:
    """1/W(j) for j = 0..J-1, with the convention 1/W(-1) = 1 prepended as column 0."""
    inv = track.inv_iv if kind == "iv" else track.inv_sra
    return np.concatenate([np.ones((inv.shape[0], 1)), inv], axis=1)


@dataclass
class WeightSummary:
    n: float
    mean_inv: float
    mean_abs_inv: float
    quantiles_abs_inv: dict
    positive_share: float
    ess: float
    floor_hits: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


def weight_diagnostics(track: WeightTrack, weights=None, kind: str = "iv") -> WeightSummary:
    """Summary of the final-time inverse weights.

    ESS = (sum |w|)^2 / sum w^2 with w the inverse weights (frequency
    weighted when ``weights`` is given).
    """
    inv = (track.inv_iv if kind == "iv" else track.inv_sra)[:, -1]
    f = np.ones(inv.size) if weights is None else np.asarray(weights, dtype=float)
    tot = f.sum()
    a = np.abs(inv)
    order = np.argsort(a)
    cum = np.cumsum(f[order]) / tot
    qs = {str(q): float(a[order][min(np.searchsorted(cum, q), a.size - 1)])
          for q in (0.01, 0.25, 0.5, 0.75, 0.99)}
    ess = (f @ a) ** 2 / (f @ a ** 2)
    return WeightSummary(n=float(tot), mean_inv=float(f @ inv / tot), mean_abs_inv=float(f @ a / tot),
                         quantiles_abs_inv=qs, positive_share=float(f @ (inv > 0) / tot),
                         ess=float(ess), floor_hits=int(track.flags.get("delta_floor_hits", 0)))
