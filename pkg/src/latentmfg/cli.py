"""Command-line pipeline: validate, consistency, offsets, simulate, gap.

Every stage writes its outputs to the run directory and later stages read
them back, so any stage can be re-run alone against an existing directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    BlowUp,
    ConfigError,
    ConvexityViolation,
    DimensionMismatch,
    NoConvergence,
    PathBudgetTooSmall,
    RankDeficientRegression,
    UnstableTrajectory,
)
from .meanfield import check_hurwitz, load_gains, save_gains, solve_consistency
from .model import ModelSpec, TimeGrid, bundled_model_path, load_model, validate
from .nash import gap_curve, write_gap_csv
from .offset import OffsetEstimator, martingale_diagnostics, solve_joint_offsets
from .sim import second_moments, simulate_finite, simulate_meanfield, write_cost_summary

log = logging.getLogger("latentmfg")

STAGES = ("validate", "consistency", "offsets", "simulate", "gap")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_CONSISTENCY = 4
EXIT_REGRESSION = 5
EXIT_SIMULATION = 6


@dataclass
class ExperimentConfig:
    model: str
    out: str
    seed: int
    stages: tuple[str, ...] = STAGES
    horizon: float | None = None
    steps: int | None = None
    tol: float = 1e-10
    damping: float = 0.5
    max_iter: int = 100
    offset_paths: int = 4000
    degree: int = 2
    diagnostic_paths: int = 4000
    sim_paths: int = 400
    N_schedule: tuple[int, ...] | None = None
    gap_role: str = "minor-1"
    gap_budget: int = 100
    gap_train_paths: int = 200
    gap_score_paths: int = 400
    workers: int = 1
    overwrite: bool = False
    extra: dict = field(default_factory=dict)


class StageFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def resolve_model(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    try:
        return bundled_model_path(name)
    except Exception as exc:  # unknown bundled name
        raise ConfigError(f"model {name!r} is neither a file nor a bundled model") from exc


def _prepare_out(cfg: ExperimentConfig, fresh: bool) -> Path:
    out = Path(cfg.out)
    if out.exists() and any(out.iterdir()) and fresh and not cfg.overwrite:
        raise ConfigError(f"output directory {out} is not empty; pass --overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_spec(cfg: ExperimentConfig) -> ModelSpec:
    spec = load_model(resolve_model(cfg.model))
    if cfg.horizon is not None or cfg.steps is not None:
        grid = TimeGrid(cfg.horizon if cfg.horizon is not None else spec.grid.horizon,
                        cfg.steps if cfg.steps is not None else spec.grid.steps)
        spec = spec.with_grid(grid)
    return spec


def _stage_validate(spec, cfg, out, record):
    report = validate(spec, raise_on_failure=False)
    (out / "validation.txt").write_text(report.summary() + "\n")
    record["validation"] = {c.name: {"passed": bool(c.passed), "margin": float(c.margin)}
                            for c in report.checks}
    validate(spec)


def _stage_consistency(spec, cfg, out, record):
    gains = solve_consistency(spec, tol=cfg.tol, damping=cfg.damping, max_iter=cfg.max_iter,
                              workers=cfg.workers)
    save_gains(gains, out / "gains.npz")
    gains.Pi0.to_csv(out / "riccati_major.csv")
    for k, sol in enumerate(gains.Pik):
        sol.to_csv(out / f"riccati_minor_{k + 1}.csv")
    hur = check_hurwitz(gains, spec)
    record["consistency"] = {"iterations": gains.iterations, "residual": gains.residual,
                             "hurwitz_max_real_eig": hur.max_real_eig,
                             "hurwitz_passed": bool(hur.passed)}
    return gains


def _stage_offsets(spec, cfg, out, record, gains):
    est = solve_joint_offsets(spec, gains, paths=cfg.offset_paths, seed=cfg.seed,
                              degree=cfg.degree)
    est.save(out / "offsets.npz")
    diag = martingale_diagnostics(spec, gains, est, paths=cfg.diagnostic_paths,
                                  seed=cfg.seed + 1)
    write_cost_summary(out / "offset_diagnostics.csv", [
        {"t": float(spec.grid.t[j]), "max_t": float(diag.max_t[j]),
         "threshold": float(diag.threshold[j]), "passed": int(diag.passed[j]),
         "fit_rms": float(est.fit_rms[j])} for j in range(spec.grid.steps)])
    record["offsets"] = {"paths": cfg.offset_paths, "degree": cfg.degree,
                         "basis": est.basis_description,
                         "martingale_pass_fraction": diag.pass_fraction,
                         "terminal_norm": diag.terminal_norm}
    return est


def _stage_simulate(spec, cfg, out, record, gains, est):
    schedule = list(cfg.N_schedule or spec.population.N_schedule)
    _, mf = simulate_meanfield(spec, gains, est, cfg.sim_paths, cfg.seed)
    mf.to_csv(out / "costs_meanfield.csv")
    K = spec.dims.K
    rows = []
    for N in schedule:
        batch, rep = simulate_finite(spec, gains, est, N, cfg.sim_paths, cfg.seed)
        rep.to_csv(out / f"costs_N{N}.csv")
        diff = rep.costs[:, 0] - mf.costs[:, 0]
        row = {"N": N, "J0": rep.major()[0], "J0_se": rep.major()[1],
               "J0_inf": mf.major()[0], "J0_gap": abs(float(diff.mean())),
               "J0_gap_se": float(diff.std(ddof=1) / np.sqrt(diff.size))}
        for k in range(K):
            jn, jn_se = rep.minor(k)
            ji, ji_se = mf.minor(k)
            row[f"J{k + 1}"] = jn
            row[f"J{k + 1}_inf"] = ji
            row[f"J{k + 1}_gap"] = abs(jn - ji)
            row[f"J{k + 1}_gap_se"] = float(np.hypot(jn_se, ji_se))
        for name, (v, se) in second_moments(batch).items():
            row[f"m2_{name}"] = v
            row[f"m2_{name}_se"] = se
        rows.append(row)
    write_cost_summary(out / "cost_summary.csv", rows)
    record["simulate"] = {"paths": cfg.sim_paths, "N_schedule": schedule}


def _stage_gap(spec, cfg, out, record, gains, est):
    schedule = list(cfg.N_schedule or spec.population.N_schedule)
    curve = gap_curve(spec, gains, est, schedule, role=cfg.gap_role, workers=cfg.workers,
                      budget=cfg.gap_budget, seed=cfg.seed, train_paths=cfg.gap_train_paths,
                      score_paths=cfg.gap_score_paths)
    write_gap_csv(out / "gap_curve.csv", curve)
    record["gap"] = {"role": cfg.gap_role, "budget": cfg.gap_budget,
                     "gaps": {str(e.N): e.gap for e in curve}}


def run(cfg: ExperimentConfig) -> tuple[int, dict]:
    """Run the selected stages; returns the exit status and the manifest."""
    t_start = time.perf_counter()
    manifest: dict = {
        "package": "latentmfg", "version": __version__, "python": platform.python_version(),
        "numpy": np.__version__, "config": asdict(cfg), "stages": {}, "wall_seconds": {},
        "status": "ok",
    }
    code = EXIT_OK
    out = None
    try:
        bad = [s for s in cfg.stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stage(s) {bad}; choose from {list(STAGES)}")
        out = _prepare_out(cfg, fresh="validate" in cfg.stages)
        spec = _load_spec(cfg)
        import scipy
        manifest["scipy"] = scipy.__version__
        manifest["model_name"] = spec.name
        gains = est = None
        for stage in STAGES:
            if stage not in cfg.stages:
                continue
            t0 = time.perf_counter()
            log.info("stage %s", stage)
            rec = manifest["stages"]
            if stage == "validate":
                _stage_validate(spec, cfg, out, rec)
            elif stage == "consistency":
                gains = _stage_consistency(spec, cfg, out, rec)
            else:
                if gains is None:
                    gains = load_gains(_need(out / "gains.npz", stage))
                if stage == "offsets":
                    est = _stage_offsets(spec, cfg, out, rec, gains)
                else:
                    if est is None:
                        est = OffsetEstimator.load(_need(out / "offsets.npz", stage))
                    if stage == "simulate":
                        _stage_simulate(spec, cfg, out, rec, gains, est)
                    else:
                        _stage_gap(spec, cfg, out, rec, gains, est)
            manifest["wall_seconds"][stage] = time.perf_counter() - t0
    except (ConfigError, DimensionMismatch, FileNotFoundError) as exc:
        code, manifest["status"] = EXIT_CONFIG, f"config error: {exc}"
    except ConvexityViolation as exc:
        code, manifest["status"] = EXIT_VALIDATION, f"ConvexityViolation: {exc}"
    except (NoConvergence, BlowUp) as exc:
        code, manifest["status"] = EXIT_CONSISTENCY, f"{type(exc).__name__}: {exc}"
    except (RankDeficientRegression, PathBudgetTooSmall) as exc:
        code, manifest["status"] = EXIT_REGRESSION, f"{type(exc).__name__}: {exc}"
    except UnstableTrajectory as exc:
        code, manifest["status"] = EXIT_SIMULATION, f"UnstableTrajectory: {exc}"
    manifest["exit_code"] = code
    manifest["wall_seconds"]["total"] = time.perf_counter() - t_start
    if out is not None:
        path = out / "manifest.json"
        if path.exists() and "validate" not in cfg.stages:
            old = json.loads(path.read_text())
            old["stages"].update(manifest["stages"])
            old["wall_seconds"].update(manifest["wall_seconds"])
            old["reruns"] = old.get("reruns", []) + [{"stages": list(cfg.stages),
                                                      "status": manifest["status"]}]
            old["status"], old["exit_code"] = manifest["status"], code
            manifest = old
        path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return code, manifest


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise ConfigError(f"stage {stage!r} needs {path.name}; run the earlier stages first")
    return path


def _schedule(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad N schedule {text!r}") from exc
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("N schedule needs positive integers")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentmfg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run pipeline stages and write artifacts")
    r.add_argument("model", help="model YAML path or bundled name "
                                 "(reference, decoupled, weak, nonconvex)")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, required=True, help="master seed")
    r.add_argument("--stages", default=",".join(STAGES),
                   help=f"comma-separated subset of {','.join(STAGES)}")
    r.add_argument("--workers", type=int, default=1, help="worker threads inside stages")
    r.add_argument("--overwrite", action="store_true", help="allow a non-empty output dir")
    g = r.add_argument_group("grid")
    g.add_argument("--horizon", type=float, help="override the model horizon T")
    g.add_argument("--steps", type=int, help="override the number of grid steps")
    t = r.add_argument_group("solver tolerances")
    t.add_argument("--tol", type=float, default=1e-10, help="consistency residual tolerance")
    t.add_argument("--damping", type=float, default=0.5, help="Picard damping in (0, 1]")
    t.add_argument("--max-iter", type=int, default=100, help="consistency iteration cap")
    b = r.add_argument_group("Monte Carlo budgets")
    b.add_argument("--offset-paths", type=int, default=4000)
    b.add_argument("--degree", type=int, default=2, help="regression polynomial degree")
    b.add_argument("--diagnostic-paths", type=int, default=4000)
    b.add_argument("--sim-paths", type=int, default=400)
    b.add_argument("--N-schedule", type=_schedule, help="e.g. 2,5,10,20,50")
    b.add_argument("--gap-role", default="minor-1", help="'major' or 'minor-k'")
    b.add_argument("--gap-budget", type=int, default=100, help="evaluations per search")
    b.add_argument("--gap-train-paths", type=int, default=200)
    b.add_argument("--gap-score-paths", type=int, default=400)

    sub.add_parser("models", help="list bundled models")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "models":
        from importlib import resources
        for f in sorted(resources.files("latentmfg").joinpath("models").iterdir()):
            if f.name.endswith(".yaml"):
                print(f.name[:-5])
        return EXIT_OK
    cfg = ExperimentConfig(
        model=args.model, out=args.out, seed=args.seed,
        stages=tuple(s.strip() for s in args.stages.split(",") if s.strip()),
        horizon=args.horizon, steps=args.steps, tol=args.tol, damping=args.damping,
        max_iter=args.max_iter, offset_paths=args.offset_paths, degree=args.degree,
        diagnostic_paths=args.diagnostic_paths, sim_paths=args.sim_paths,
        N_schedule=args.N_schedule, gap_role=args.gap_role, gap_budget=args.gap_budget,
        gap_train_paths=args.gap_train_paths, gap_score_paths=args.gap_score_paths,
        workers=args.workers, overwrite=args.overwrite)
    code, manifest = run(cfg)
    if code != EXIT_OK:
        print(f"latentmfg: {manifest['status']}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
