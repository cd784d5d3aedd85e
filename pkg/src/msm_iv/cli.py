"""Command line runner: ``msm-iv simulate|oracle|fit|robustness|efficiency``.

Every command reads one JSON scenario file (schema: ``ScenarioConfig``),
writes CSV tables plus a JSON report into ``--out``, and embeds a
provenance hash of the resolved configuration in each output.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 identity-check failure.
"""
from __future__ import annotations

import hashlib
import json
import os
import sys
import warnings
from pathlib import Path
from typing import Any, Literal, Optional, Union

import click
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from .dgp import BUILTINS, DgpSpec, MisspecPattern, NUISANCES, load_spec, simulate
from .errors import ConfigError, NumericError, PanelError, SpecValidationError, StateSpaceError
from .estimators import ESTIMATORS, bootstrap, fit as fit_estimator
from .experiments import efficiency_comparison, robustness_table, wide, write_csv
from .msm import MsmSpec
from .nuisance import fit_nuisances
from .panel import PanelSchema, empty_rows, load_panel, write_panel
from . import oracle

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IDENTITY = 0, 2, 3, 4


class DgpRef(BaseModel):
    model_config = ConfigDict(extra="forbid")
    builtin: Optional[str] = None
    params: dict[str, Any] = Field(default_factory=dict)
    path: Optional[str] = None
    spec: Optional[dict] = None

    def resolve(self, base: Path) -> DgpSpec:
        given = [x is not None for x in (self.builtin, self.path, self.spec)]
        if sum(given) != 1:
            raise ConfigError("dgp needs exactly one of 'builtin', 'path' or 'spec'")
        if self.builtin is not None:
            if self.builtin not in BUILTINS:
                raise ConfigError(f"unknown builtin DGP {self.builtin!r}; expected one of {sorted(BUILTINS)}")
            try:
                return BUILTINS[self.builtin](**self.params)
            except TypeError as exc:
                raise ConfigError(f"bad parameters for builtin {self.builtin!r}: {exc}") from exc
        if self.path is not None:
            p = Path(self.path)
            return load_spec(p if p.is_absolute() else base / p)
        return DgpSpec.from_json(self.spec)


class MsmConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    family: Literal["1.1", "1.4"] = "1.1"
    features: Optional[list[str]] = None
    v_columns: list[str] = Field(default_factory=list)

    def build(self) -> MsmSpec:
        return MsmSpec(self.family, None if self.features is None else tuple(self.features),
                       tuple(self.v_columns))


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    path: str
    id: str = "subject_id"
    time: str = "time"
    z: str = "Z"
    a: str = "A"
    y: str = "Y"
    l_columns: Optional[list[str]] = None
    v_columns: list[str] = Field(default_factory=list)
    outcome: Literal["terminal", "series"] = "terminal"

    def schema_(self) -> PanelSchema:
        return PanelSchema(self.id, self.time, self.z, self.a, self.y,
                           None if self.l_columns is None else tuple(self.l_columns),
                           tuple(self.v_columns), self.outcome)


class ScenarioConfig(BaseModel):
    """Scenario file schema.

    ``dgp`` is a builtin name, a ``{"builtin", "params"}`` / ``{"path"}`` /
    ``{"spec"}`` object.  ``misspec`` entries are pattern names or
    ``{nuisance: "correct" | "omit_covariate:<col>"}`` objects.
    """

    model_config = ConfigDict(extra="forbid")
    dgp: Union[str, DgpRef] = "desk"
    n: int = Field(1000, ge=0)
    replications: int = Field(1, ge=1)
    seed: int
    estimators: list[str] = Field(default_factory=lambda: ["iv_ipw", "iv_mr"])
    misspec: list[Union[str, dict[str, str]]] = Field(default_factory=lambda: ["all_correct"])
    misspec_column: Optional[str] = None
    msm: MsmConfig = Field(default_factory=MsmConfig)
    fstar: Literal["uniform", "fitted"] = "uniform"
    bootstrap: int = Field(0, ge=0)
    data: Optional[DataConfig] = None
    n_random_h: int = Field(20, ge=1)

    @field_validator("estimators")
    @classmethod
    def _known(cls, v):
        bad = [e for e in v if e not in ESTIMATORS]
        if bad:
            raise ValueError(f"unknown estimator(s) {bad}; expected from {list(ESTIMATORS)}")
        if not v:
            raise ValueError("at least one estimator is required")
        return v

    @field_validator("misspec")
    @classmethod
    def _patterns(cls, v):
        for m in v:
            if isinstance(m, dict):
                bad = set(m) - set(NUISANCES)
                if bad:
                    raise ValueError(f"unknown nuisance flag(s) {sorted(bad)}")
        return v

    def dgp_spec(self, base: Path) -> DgpSpec:
        ref = DgpRef(builtin=self.dgp) if isinstance(self.dgp, str) else self.dgp
        return ref.resolve(base)

    def patterns(self, column: str) -> list[MisspecPattern]:
        out = []
        for m in self.misspec:
            if isinstance(m, str):
                out.append(MisspecPattern.named(m, self.misspec_column or column))
            else:
                out.append(MisspecPattern(dict(m), name="custom"))
        return out


def load_config(path) -> tuple[ScenarioConfig, str]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"no such config file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        cfg = ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, provenance(cfg)


def provenance(cfg: ScenarioConfig) -> str:
    blob = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(f"{__version__}|{blob}".encode()).hexdigest()[:16]


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(type(x))


def _dump(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


class _Ctx:
    def __init__(self, config, out, threads, validate):
        self.cfg, self.hash = load_config(config)
        self.base = Path(config).resolve().parent
        self.out = Path(out)
        self.threads = threads or int(os.environ.get("MSM_IV_THREADS", "1") or 1)
        self.validate = validate

    def spec(self) -> DgpSpec:
        return self.cfg.dgp_spec(self.base)

    def prepare(self):
        self.out.mkdir(parents=True, exist_ok=True)

    def meta(self, **extra) -> dict:
        return {"provenance": self.hash, "seed": self.cfg.seed, "version": __version__, **extra}


def _run(body):
    """Map library exceptions to exit codes."""
    try:
        code = body()
    except (ConfigError, PanelError, SpecValidationError, StateSpaceError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (NumericError, np.linalg.LinAlgError) as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    sys.exit(code or EXIT_OK)


def _common(f):
    f = click.option("--validate", is_flag=True, help="Check the config and exit.")(f)
    f = click.option("--threads", type=int, default=None, help="Worker processes (env MSM_IV_THREADS).")(f)
    f = click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True)(f)
    f = click.option("--config", type=click.Path(dir_okay=False), required=True)(f)
    return f


@click.group()
@click.version_option(__version__)
def main():
    """IV-weighted and multiply robust MSM estimation."""


@main.command("simulate")
@_common
def cmd_simulate(config, out, threads, validate):
    """Draw a panel from the configured DGP into panel.csv."""
    def body():
        ctx = _Ctx(config, out, threads, validate)
        spec = ctx.spec()
        if validate:
            return EXIT_OK
        ctx.prepare()
        if ctx.cfg.n == 0:
            rows = empty_rows(spec.l_columns)
            (ctx.out / "panel.csv").write_text(",".join(rows[0]) + "\n", encoding="utf-8")
        else:
            write_panel(simulate(spec, ctx.cfg.n, ctx.cfg.seed), ctx.out / "panel.csv")
        _dump(ctx.out / "simulate.json", ctx.meta(spec_hash=spec.digest(), n=ctx.cfg.n, J=spec.J,
                                                   file="panel.csv"))
        return EXIT_OK
    _run(body)


@main.command("oracle")
@_common
def cmd_oracle(config, out, threads, validate):
    """Exact identity checks and plim matrix; exit 4 if any identity fails."""
    def body():
        ctx = _Ctx(config, out, threads, validate)
        spec = ctx.spec()
        msm = ctx.cfg.msm.build()
        if validate:
            return EXIT_OK
        ctx.prepare()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = oracle.identity_suite(spec, msm, ctx.cfg.fstar, ctx.cfg.misspec_column)
        rep.update(ctx.meta(spec_hash=spec.digest()))
        _dump(ctx.out / "oracle.json", rep)
        failed = [c["name"] for c in rep["checks"] if not c["pass"]]
        failed += [f"plim:{r['pattern']}" for r in rep["plim_iv_mr"] if not r["pass"]]
        for name in failed:
            click.echo(f"FAILED {name}", err=True)
        return EXIT_OK if rep["pass"] else EXIT_IDENTITY
    _run(body)


@main.command("fit")
@_common
@click.option("--data", type=click.Path(dir_okay=False), default=None, help="Panel CSV (overrides config).")
def cmd_fit(config, out, threads, validate, data):
    """Fit the requested estimators to a panel; one CSV row each."""
    def body():
        ctx = _Ctx(config, out, threads, validate)
        cfg = ctx.cfg
        dc = cfg.data or (DataConfig(path=data) if data else None)
        if dc is None:
            raise ConfigError("fit needs a panel: set 'data' in the config or pass --data")
        path = Path(data or dc.path)
        path = path if path.is_absolute() else (Path.cwd() / path if data else ctx.base / path)
        msm = cfg.msm.build()
        panel = load_panel(path, dc.schema_())
        pats = cfg.patterns(panel.l_columns[0])
        for p in pats:
            p.check_columns(panel.l_columns)
        if validate:
            return EXIT_OK
        ctx.prepare()
        rows, reports, failed = [], [], 0
        for pat in pats:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                nuis = fit_nuisances(panel, pat, fstar=cfg.fstar)
            for e in cfg.estimators:
                row = {"estimator": e, "pattern": pat.name}
                try:
                    with warnings.catch_warnings(record=True) as more:
                        warnings.simplefilter("always")
                        est = fit_estimator(e, panel, msm, nuis)
                    est.diagnostics["warnings"] = sorted({f"{w.category.__name__}: {w.message}"
                                                          for w in caught + more})
                    rep = est.to_json()
                    for k, f in enumerate(msm.features):
                        row[f"beta[{f}]"] = float(est.beta[k])
                        row[f"se[{f}]"] = float(est.se[k])
                    if cfg.bootstrap:
                        with warnings.catch_warnings():
                            warnings.simplefilter("ignore")
                            bs = bootstrap(panel, msm, e, B=cfg.bootstrap, seed=cfg.seed,
                                           misspec=pat, fstar=cfg.fstar)
                        rep["bootstrap"] = {"lower": bs.lower.tolist(), "upper": bs.upper.tolist(),
                                            "failures": bs.failures}
                        for k, f in enumerate(msm.features):
                            row[f"boot_lo[{f}]"] = float(bs.lower[k])
                            row[f"boot_hi[{f}]"] = float(bs.upper[k])
                    row["converged"] = est.converged
                    row["fingerprint"] = est.fingerprint
                    failed += not est.converged
                except (NumericError, np.linalg.LinAlgError) as exc:
                    rep = {"estimator_id": e, "error": str(exc)}
                    row["converged"] = False
                    row["error"] = str(exc)
                    failed += 1
                rep["pattern"] = pat.name
                row["provenance"] = ctx.hash
                rows.append(row)
                reports.append(rep)
        write_csv(ctx.out / "estimates.csv", rows)
        _dump(ctx.out / "estimates.json", ctx.meta(estimates=reports, data=str(path)))
        return EXIT_NUMERIC if failed else EXIT_OK
    _run(body)


@main.command("robustness")
@_common
def cmd_robustness(config, out, threads, validate):
    """Plim bias (and MC bias +- SE when replications > 1) per misspecification pattern."""
    def body():
        ctx = _Ctx(config, out, threads, validate)
        cfg = ctx.cfg
        spec = ctx.spec()
        msm = cfg.msm.build()
        pats = [m for m in cfg.misspec if isinstance(m, str)]
        if len(pats) != len(cfg.misspec):
            raise ConfigError("robustness takes named patterns only")
        if pats == ["all_correct"]:
            pats = None
        if validate:
            return EXIT_OK
        ctx.prepare()
        reps = cfg.replications if cfg.replications > 1 else 0
        kw = {} if pats is None else {"patterns": tuple(pats)}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rows = robustness_table(spec, msm, estimators=tuple(cfg.estimators), column=cfg.misspec_column,
                                    n=cfg.n, reps=reps, seed=cfg.seed, workers=ctx.threads, **kw)
        for r in rows:
            r["provenance"] = ctx.hash
        write_csv(ctx.out / "robustness_long.csv", rows)
        wrows = wide(rows)
        for r in wrows:
            r["provenance"] = ctx.hash
        write_csv(ctx.out / "robustness.csv", wrows)
        _dump(ctx.out / "robustness.json", ctx.meta(rows=rows, spec_hash=spec.digest()))
        return EXIT_OK
    _run(body)


@main.command("efficiency")
@_common
def cmd_efficiency(config, out, threads, validate):
    """Exact asymptotic variances of the instrument estimators (plus MC if replications > 1)."""
    def body():
        ctx = _Ctx(config, out, threads, validate)
        cfg = ctx.cfg
        spec = ctx.spec()
        msm = cfg.msm.build()
        if msm.family != "1.1":
            raise ConfigError("efficiency comparison is defined for the terminal-outcome family 1.1")
        if validate:
            return EXIT_OK
        ctx.prepare()
        reps = cfg.replications if cfg.replications > 1 else 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = efficiency_comparison(spec, msm, n=cfg.n, reps=reps, seed=cfg.seed,
                                        n_random=cfg.n_random_h, workers=ctx.threads)
        ex = res["exact"]
        rows = [{"estimator": "iv_eff", **{f"avar[{f}]": v for f, v in zip(msm.features, np.diag(ex["avar_eff"]))}},
                {"estimator": "iv_mr", **{f"avar[{f}]": v for f, v in zip(msm.features, np.diag(ex["avar_mr"]))}},
                {"estimator": "iv_ipw", **{f"avar[{f}]": v for f, v in zip(msm.features, np.diag(ex["avar_ipw"]))}}]
        for i, d in enumerate(ex["avar_random_diag"]):
            rows.append({"estimator": f"random_h_{i}", **{f"avar[{f}]": v for f, v in zip(msm.features, d)}})
        if "mc_n_variance" in res:
            for r in rows:
                mc = res["mc_n_variance"].get(r["estimator"])
                if mc is not None:
                    for f, v in zip(msm.features, mc):
                        r[f"n_mc_var[{f}]"] = v
        for r in rows:
            r["provenance"] = ctx.hash
        write_csv(ctx.out / "efficiency.csv", rows)
        _dump(ctx.out / "efficiency.json", ctx.meta(**res, spec_hash=spec.digest()))
        return EXIT_OK if ex["pass"] else EXIT_IDENTITY
    _run(body)


if __name__ == "__main__":  # pragma: no cover
    main()
