"""Command line entry point: run experiments, oracle suites and data export.

Subcommands::

    most run CONFIG [--out DIR] [--seed N]
    most oracle-check {ot,minnorm,hv,grad,all}
    most gen-data SPEC

Worker threads for the per-solution descent are capped by the environment
variable ``MOST_NUM_THREADS`` (default 1).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path
from typing import Annotated, Any, Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import oracles
from .core import Problem
from .descent import MinNormConfig
from .driver import RunConfig, RunRecord, extend_objectives, run, select_solutions
from .metrics import hypervolume_2d, oracle_vs_average, quantile_perf
from .problems import (
    FairnessSpec,
    FederatedLogistic,
    QuadraticProblem,
    SynthFlSpec,
    ZdtProblem,
    ZdtSpec,
    export_dataset,
    gen_fairness_problem,
    gen_synthetic_fl,
    load_dataset,
)
from .transport import CurriculumSchedule, OtConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ZdtCfg(_Strict):
    kind: Literal["zdt"] = "zdt"
    variant: Literal[1, 2, 3] = 1
    dim: int = Field(30, ge=2)


class SynthFlCfg(_Strict):
    kind: Literal["synth_fl"] = "synth_fl"
    rho1: float = Field(0.0, ge=0)
    rho2: float = Field(0.0, ge=0)
    n_clients: int = Field(30, ge=1)
    feature_dim: int = Field(60, ge=1)
    classes: int = Field(10, ge=2)
    samples_per_client: tuple[int, int] = (50, 500)
    seed: int = 0


class FairnessCfg(_Strict):
    kind: Literal["fairness"] = "fairness"
    n_samples: int = Field(2000, ge=10)
    correlation: float = Field(0.6, ge=-1, le=1)
    seed: int = 0


class QuadraticCfg(_Strict):
    kind: Literal["quadratic"] = "quadratic"
    n: int = Field(10, ge=1)
    dim: int = Field(5, ge=1)
    seed: int = 0


class DatasetCfg(_Strict):
    kind: Literal["dataset"] = "dataset"
    path: str


ProblemCfg = Annotated[
    Union[ZdtCfg, SynthFlCfg, FairnessCfg, QuadraticCfg, DatasetCfg], Field(discriminator="kind")
]

_SHORTHAND = {
    "zdt1": {"kind": "zdt", "variant": 1},
    "zdt2": {"kind": "zdt", "variant": 2},
    "zdt3": {"kind": "zdt", "variant": 3},
    "synth_fl": {"kind": "synth_fl"},
    "fairness": {"kind": "fairness"},
    "quadratic": {"kind": "quadratic"},
}


class ExtendCfg(_Strict):
    n_total: int = Field(ge=2)
    concentration: float = Field(0.5, gt=0)
    seed: int = 0


class CurriculumCfg(_Strict):
    mode: Literal["none", "linear"] = "none"
    penalty_max: float = Field(100.0, gt=0)


class OtCfg(_Strict):
    proximal_weight: float = Field(OtConfig.proximal_weight, gt=0)
    inner_iters: int = Field(OtConfig.inner_iters, ge=1)
    outer_iters: int = Field(OtConfig.outer_iters, ge=1)
    stop_tol: float = Field(OtConfig.stop_tol, gt=0)
    regularizer_max_rounds: int = Field(OtConfig.regularizer_max_rounds, ge=1)


class MinNormCfg(_Strict):
    max_iters: int = Field(MinNormConfig.max_iters, ge=1)
    gap_tol: float = Field(MinNormConfig.gap_tol, gt=0)
    support_eps: float = Field(MinNormConfig.support_eps, ge=0)


class MetricsCfg(_Strict):
    reference_point: tuple[float, float] | None = None
    quantiles: list[float] = [0.2, 0.4, 0.6, 0.8, 1.0]
    zero_tol: float = Field(1e-8, ge=0)

    @field_validator("quantiles")
    @classmethod
    def _in_unit(cls, v: list[float]) -> list[float]:
        for q in v:
            if not 0.0 < q <= 1.0:
                raise ValueError(f"quantile {q} outside (0, 1]")
        return v


class OutputCfg(_Strict):
    dir: str = "runs/out"
    emit_metrics: bool = True
    emit_plan: bool = True
    emit_solutions: bool = True


class ExperimentConfig(_Strict):
    problem: ProblemCfg
    extend: ExtendCfg | None = None
    method: Literal["most", "linearization", "mgda_restarts"] = "most"
    m: int = Field(5, ge=1)
    T: int = Field(100, ge=1)
    K: int = Field(1, ge=1)
    eta: float = Field(0.1, gt=0)
    tau: float = Field(0.0, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)
    init_scale: float = Field(1.0, ge=0)
    linearization_weights: Literal["dirichlet", "uniform"] = "dirichlet"
    curriculum: CurriculumCfg = CurriculumCfg()
    ot: OtCfg = OtCfg()
    minnorm: MinNormCfg = MinNormCfg()
    metrics: MetricsCfg = MetricsCfg()
    output: OutputCfg = OutputCfg()

    @field_validator("problem", mode="before")
    @classmethod
    def _expand_shorthand(cls, v: Any) -> Any:
        if isinstance(v, str):
            if v not in _SHORTHAND:
                raise ValueError(f"unknown problem {v!r}; expected one of {sorted(_SHORTHAND)} or a mapping")
            return dict(_SHORTHAND[v])
        return v

    @model_validator(mode="after")
    def _check_extension(self) -> ExperimentConfig:
        if self.extend is not None and isinstance(self.problem, ZdtCfg) and self.extend.n_total <= 2:
            raise ValueError("extend.n_total must exceed the base objective count")
        return self

    def run_config(self) -> RunConfig:
        return RunConfig(
            m=self.m,
            T=self.T,
            K=self.K,
            eta=self.eta,
            tau=self.tau,
            curriculum=CurriculumSchedule(self.T, self.curriculum.penalty_max, self.curriculum.mode),
            ot=OtConfig(**self.ot.model_dump()),
            minnorm=MinNormConfig(**self.minnorm.model_dump()),
            seed=self.seed,
            method=self.method,
            init_scale=self.init_scale,
            linearization_weights=self.linearization_weights,
        )


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        # drop discriminator tags pydantic inserts into the location
        path = ".".join(str(p) for p in e["loc"] if p not in ("zdt", "synth_fl", "fairness", "quadratic", "dataset"))
        lines.append(f"{path or '<root>'}: {e['msg']}")
    return "; ".join(sorted(lines))


def parse_config(text: str) -> ExperimentConfig:
    """Parse a YAML (or JSON) document into a validated config."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"<root>: not a valid document ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError("<root>: expected a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True)


def build_problem(cfg: ExperimentConfig) -> Problem:
    pc = cfg.problem
    if isinstance(pc, ZdtCfg):
        prob: Problem = ZdtProblem(ZdtSpec(pc.variant, pc.dim))
    elif isinstance(pc, SynthFlCfg):
        prob = gen_synthetic_fl(
            SynthFlSpec(pc.rho1, pc.rho2, pc.n_clients, pc.feature_dim, pc.classes, tuple(pc.samples_per_client), seed=pc.seed)
        )
    elif isinstance(pc, FairnessCfg):
        prob = gen_fairness_problem(FairnessSpec(pc.n_samples, pc.correlation, seed=pc.seed))
    elif isinstance(pc, QuadraticCfg):
        prob = QuadraticProblem.random(pc.n, pc.dim, pc.seed)
    else:
        prob = load_dataset(pc.path)
    if cfg.extend is not None:
        prob = extend_objectives(prob, cfg.extend.n_total, cfg.extend.concentration, cfg.extend.seed)
    return prob


def _num(x: float) -> str:
    # shortest decimal that round-trips
    return repr(float(x))


METRIC_COLUMNS = ["iter", "potential", "sparsity", "diversity", "plan_kl", "mean_loss", "oracle_loss"]


def metrics_rows(record: RunRecord) -> tuple[list[str], list[list[str]]]:
    m = record.initial_losses.shape[1]
    header = METRIC_COLUMNS + [f"d_norm_{j}" for j in range(m)]
    rows = []
    for it in record.iterations:
        oracle, mean = oracle_vs_average(it.losses)
        rows.append(
            [str(it.t), _num(it.potential), _num(it.sparsity), _num(it.diversity), _num(it.plan_kl), _num(mean), _num(oracle)]
            + [_num(v) for v in it.d_sq_norms]
        )
    return header, rows


def read_metrics(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {h: np.array([float(r[k]) for r in body]) for k, h in enumerate(header)}


def _selection_losses(problem: Problem, params: np.ndarray, final: np.ndarray) -> np.ndarray:
    """Loss matrix used to pick a solution per objective: validation when available."""
    if isinstance(problem, FederatedLogistic):
        return np.array([problem.split_losses(th, "val") for th in params]).T
    return final


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> int:
    """Run one experiment and write its artifacts. Returns the exit status."""
    out = Path(out_dir or cfg.output.dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {out}: {exc}", file=sys.stderr)
        return 2
    started = time.perf_counter()
    problem = build_problem(cfg)
    status = 0
    message = None
    try:
        with np.errstate(over="raise", invalid="raise", divide="ignore"):
            record = run(problem, cfg.run_config())
    except FloatingPointError as exc:
        record = None
        status, message = 3, f"numeric abort: {exc}"
    if record is not None and record.error:
        status, message = 3, record.error
    written: list[str] = []
    try:
        if record is not None and cfg.output.emit_metrics:
            header, rows = metrics_rows(record)
            with open(out / "metrics.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
            written.append("metrics.csv")
        if record is not None and cfg.output.emit_plan and record.plan is not None:
            with open(out / "final_plan.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerows([[_num(v) for v in row] for row in record.plan.entries])
            written.append("final_plan.csv")
        if record is not None and cfg.output.emit_solutions and record.solutions is not None:
            (out / "solutions.json").write_text(json.dumps(_solutions_doc(cfg, problem, record), indent=2))
            written.append("solutions.json")
    except OSError as exc:
        print(f"error: writing artifacts failed: {exc}", file=sys.stderr)
        status, message = 2, str(exc)
    manifest = {
        "config": cfg.model_dump(mode="json"),
        "wall_clock_seconds": time.perf_counter() - started,
        "files": written,
        "status": status,
        "message": message,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if message:
        print(f"error: {message}", file=sys.stderr)
    return status


def _solutions_doc(cfg: ExperimentConfig, problem: Problem, record: RunRecord) -> dict:
    params = record.solutions.params
    final = record.final_losses
    sel_losses = _selection_losses(problem, params, final)
    chosen = select_solutions(sel_losses)
    per_objective = final[np.arange(final.shape[0]), chosen]
    doc: dict[str, Any] = {
        "method": record.method,
        "seed": record.seed,
        "params": [[float(v) for v in th] for th in params],
        "selected": [int(j) for j in chosen],
        "final_losses": [float(v) for v in per_objective],
        "oracle_quantiles": [list(p) for p in quantile_perf(-per_objective, cfg.metrics.quantiles)],
    }
    if cfg.metrics.reference_point is not None and problem.n_objectives >= 2:
        pts = final[:2].T
        doc["hypervolume"] = hypervolume_2d(pts, cfg.metrics.reference_point)
    return doc


def oracle_check(suite: str) -> int:
    try:
        results = oracles.run_suites(suite)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


class GenDataSpec(_Strict):
    problem: Union[SynthFlCfg, FairnessCfg] = Field(discriminator="kind")
    out: str


def gen_data(spec_text: str) -> int:
    try:
        spec = GenDataSpec.model_validate(yaml.safe_load(spec_text))
    except ValidationError as exc:
        print(f"error: {_format_errors(exc)}", file=sys.stderr)
        return 2
    pc = spec.problem
    if isinstance(pc, SynthFlCfg):
        prob = gen_synthetic_fl(
            SynthFlSpec(pc.rho1, pc.rho2, pc.n_clients, pc.feature_dim, pc.classes, tuple(pc.samples_per_client), seed=pc.seed)
        )
    else:
        prob = gen_fairness_problem(FairnessSpec(pc.n_samples, pc.correlation, seed=pc.seed))
    Path(spec.out).parent.mkdir(parents=True, exist_ok=True)
    export_dataset(prob, spec.out)
    print(f"wrote {spec.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="most", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment from a YAML config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    p_run.add_argument("--seed", type=int, default=None, help="override the run seed")
    p_oc = sub.add_parser("oracle-check", help="compare fast paths against brute-force oracles")
    p_oc.add_argument("suite", help="one of ot, minnorm, hv, grad, all")
    p_gd = sub.add_parser("gen-data", help="export a generated dataset to a column-text file")
    p_gd.add_argument("spec")
    args = parser.parse_args(argv)

    if args.command == "run":
        try:
            text = Path(args.config).read_text()
            cfg = parse_config(text)
            if args.seed is not None:
                cfg = ExperimentConfig.model_validate({**cfg.model_dump(), "seed": args.seed})
        except (OSError, ConfigError, ValidationError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return run_experiment(cfg, args.out)
    if args.command == "oracle-check":
        return oracle_check(args.suite)
    return gen_data(Path(args.spec).read_text())


if __name__ == "__main__":
    sys.exit(main())
