"""Monte Carlo harness, robustness matrix and efficiency comparison."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dgp import DgpSpec, MisspecPattern, ROBUSTNESS_PATTERNS, simulate
from .errors import NumericError
from .estimators import bootstrap, compressible, fit
from .msm import MsmSpec
from . import oracle


def replication_seed(seed: int, r: int) -> int:
    """Seed of replication r: its own stream, independent of worker layout."""
    return int(np.random.SeedSequence([int(seed), int(r)]).generate_state(1, np.uint64)[0])


@dataclass
class McTask:
    spec: DgpSpec
    msm: MsmSpec
    n: int
    seed: int
    estimators: tuple[str, ...]
    misspec: MisspecPattern | None = None
    fstar: str = "uniform"
    boot: int = 0


@dataclass
class McResult:
    estimators: tuple[str, ...]
    beta0: np.ndarray
    betas: dict            # estimator -> (R, p), NaN rows for failures
    ses: dict
    boot_ci: dict = field(default_factory=dict)   # estimator -> (R, p, 2)
    failures: dict = field(default_factory=dict)

    def bias(self, est: str) -> np.ndarray:
        return np.nanmean(self.betas[est], axis=0) - self.beta0

    def mc_se(self, est: str) -> np.ndarray:
        b = self.betas[est]
        k = np.sum(~np.isnan(b[:, 0]))
        return np.nanstd(b, axis=0, ddof=1) / np.sqrt(k)

    def variance(self, est: str) -> np.ndarray:
        return np.nanvar(self.betas[est], axis=0, ddof=1)

    def coverage(self, est: str, kind: str = "sandwich", z: float = 1.959963984540054) -> np.ndarray:
        b = self.betas[est]
        if kind == "sandwich":
            lo, hi = b - z * self.ses[est], b + z * self.ses[est]
        else:
            ci = self.boot_ci[est]
            lo, hi = ci[..., 0], ci[..., 1]
        hit = (lo <= self.beta0) & (self.beta0 <= hi)
        ok = ~np.isnan(lo[:, 0])
        return hit[ok].mean(axis=0)

    def summary(self) -> dict:
        out = {}
        for e in self.estimators:
            row = {"bias": self.bias(e).tolist(), "mc_se": self.mc_se(e).tolist(),
                   "variance": self.variance(e).tolist(),
                   "coverage_sandwich": self.coverage(e).tolist(),
                   "failures": self.failures.get(e, 0)}
            if e in self.boot_ci:
                row["coverage_bootstrap"] = self.coverage(e, "bootstrap").tolist()
            out[e] = row
        return {"beta0": self.beta0.tolist(), "estimators": out}


def _one(task: McTask, r: int):
    panel = simulate(task.spec, task.n, replication_seed(task.seed, r))
    if compressible(panel):
        panel = panel.compress()
    p = task.msm.dim_beta
    out = {}
    for e in task.estimators:
        try:
            est = fit(e, panel, task.msm, misspec=task.misspec, fstar=task.fstar)
            ci = None
            if task.boot:
                bs = bootstrap(panel, task.msm, e, B=task.boot, seed=replication_seed(task.seed, r),
                               misspec=task.misspec, fstar=task.fstar)
                ci = np.column_stack([bs.lower, bs.upper])
            out[e] = (est.beta, est.se, ci)
        except (NumericError, np.linalg.LinAlgError):
            out[e] = (np.full(p, np.nan), np.full(p, np.nan), None)
    return out


def _chunk(args):
    task, rs = args
    return [_one(task, r) for r in rs]


def monte_carlo(spec: DgpSpec, msm: MsmSpec, *, n: int, reps: int, seed: int = 0,
                estimators: Sequence[str] = ("iv_ipw", "iv_mr"), misspec=None,
                fstar: str = "uniform", boot: int = 0, workers: int | None = None) -> McResult:
    """Repeated simulate-and-fit.  Replication r always uses the same seed,
    so results do not depend on ``workers``."""
    task = McTask(spec, msm, n, seed, tuple(estimators), misspec, fstar, boot)
    workers = workers or int(os.environ.get("MSM_IV_THREADS", "1"))
    if workers > 1 and reps > 1:
        blocks = [list(b) for b in np.array_split(np.arange(reps), workers * 4) if len(b)]
        with ProcessPoolExecutor(workers) as ex:
            res = [x for part in ex.map(_chunk, [(task, b) for b in blocks]) for x in part]
    else:
        res = [_one(task, r) for r in range(reps)]
    beta0 = oracle.true_beta(spec, msm, fstar)
    betas, ses, cis, fails = {}, {}, {}, {}
    for e in estimators:
        betas[e] = np.array([x[e][0] for x in res])
        ses[e] = np.array([x[e][1] for x in res])
        fails[e] = int(np.isnan(betas[e][:, 0]).sum())
        if boot:
            p = msm.dim_beta
            cis[e] = np.array([x[e][2] if x[e][2] is not None else np.full((p, 2), np.nan) for x in res])
    return McResult(tuple(estimators), beta0, betas, ses, cis, fails)


# -- robustness ------------------------------------------------------------------------------

def robustness_table(spec: DgpSpec, msm: MsmSpec, *, estimators=("iv_ipw", "iv_mr"),
                     patterns=ROBUSTNESS_PATTERNS, column: str | None = None, n: int = 0,
                     reps: int = 0, seed: int = 0, workers: int | None = None) -> list[dict]:
    """Long-format rows: one per (pattern, estimator, coefficient) with the
    probability-limit bias and, when ``reps`` > 0, Monte Carlo bias and SE."""
    column = column or spec.l_columns[0]
    rows = []
    for pat in patterns:
        mp = MisspecPattern.named(pat, column)
        mc = (monte_carlo(spec, msm, n=n, reps=reps, seed=seed, estimators=estimators,
                          misspec=mp, workers=workers) if reps else None)
        for e in estimators:
            try:
                pl = oracle.plim_solve(spec, msm, e, mp)
                plim_bias = pl.bias
            except NumericError:
                plim_bias = np.full(msm.dim_beta, np.nan)
            for k in range(msm.dim_beta):
                row = {"pattern": pat, "estimator": e, "coef": k, "plim_bias": float(plim_bias[k])}
                if mc is not None:
                    row["mc_bias"] = float(mc.bias(e)[k])
                    row["mc_se"] = float(mc.mc_se(e)[k])
                rows.append(row)
    return rows


def wide(rows: list[dict], value: str = "plim_bias") -> list[dict]:
    """Pivot long rows to one row per pattern with a column per estimator/coefficient."""
    out: dict = {}
    for r in rows:
        out.setdefault(r["pattern"], {"pattern": r["pattern"]})[f"{r['estimator']}[{r['coef']}]"] = r[value]
    return list(out.values())


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        open(path, "w").close()
        return
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, keys)
        w.writeheader()
        w.writerows(rows)


# -- efficiency -------------------------------------------------------------------------------

def efficiency_comparison(spec: DgpSpec, msm: MsmSpec, *, n: int = 0, reps: int = 0, seed: int = 0,
                          n_random: int = 20, workers: int | None = None) -> dict:
    """Exact asymptotic variances (and optionally n * MC variances) of the
    instrument estimators."""
    rep = oracle.efficiency_check(spec, msm, n_random=n_random, seed=seed)
    out = {"exact": rep.to_json(),
           "ratio_exact": (np.diag(rep.avar_eff) / np.diag(rep.avar_mr)).tolist()}
    if reps:
        mc = monte_carlo(spec, msm, n=n, reps=reps, seed=seed,
                         estimators=("iv_ipw", "iv_mr", "iv_eff"), workers=workers)
        out["mc_n_variance"] = {e: (n * mc.variance(e)).tolist() for e in mc.estimators}
        out["ratio_mc"] = (mc.variance("iv_eff") / mc.variance("iv_mr")).tolist()
        out["failures"] = mc.failures
    return out
