"""Command-line harness: ``collabrl {gen,run,baseline,report,completion-curve,rowwise}``.

Configs are JSON or YAML mappings::

    mode: tabular            # tabular | linear | baseline | completion-curve | rowwise
    instance: {...}          # generator parameters for the mode
    pipeline: {...}          # pipeline / baseline / estimator settings
    seeds: [0, 1, 2]
    record_timing: true      # false makes every output byte-reproducible

Exit codes: 0 ok, 2 config error, 3 schema error, 4 phase failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from . import rng as rngmod
from .baseline import BaselineConfig, run_baseline
from .completion import recovery_curve
from .errors import CollabRLError, ContractViolation, GenerationError, InstanceError, PhaseFailure
from .instances import (LinearInstance, LinearInstanceParams, TabularInstance, TabularInstanceParams,
                        bundle_from_dict, gen_linear_instance, gen_tabular_instance, linear_bundle,
                        tabular_bundle)
from .linear import LinearPipelineConfig, run_linear_pipeline
from .mdp import dumps
from .reports import (RunReport, SchemaError, aggregate, csv_columns, plot_data, read_csv,
                      report_rows, write_csv)
from .rowwise import (RowwiseConfig, SyntheticOracle, measure_dist_constants, run_estimator,
                      signed_basis_sampler, sphere_sampler)
from .tabular import PipelineConfig, run_tabular_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_SCHEMA, EXIT_PHASE = 0, 2, 3, 4
OUT_ENV = "COLLABRL_OUT"
MODES = ("tabular", "linear", "baseline", "completion-curve", "rowwise")


class ConfigError(Exception):
    pass


# ------------------------------------------------------------------ config


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        doc = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"config does not parse: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    return doc


def _build(cls, fields: dict, **overrides):
    try:
        return cls(**{**fields, **overrides})
    except (TypeError, ValueError, ContractViolation) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def resolve_seeds(args, cfg: dict) -> list[int]:
    if args.seed is not None:
        return [args.seed]
    if args.seeds is not None:
        return list(range(args.seeds))
    seeds = cfg.get("seeds", [0])
    if isinstance(seeds, int):
        return list(range(seeds))
    return [int(s) for s in seeds]


def out_dir(args, cfg: dict) -> Path:
    path = Path(args.out or cfg.get("out") or os.environ.get(OUT_ENV) or "runs")
    path.mkdir(parents=True, exist_ok=True)
    return path


def atomic_write(path: Path, text: str):
    """Write via a temp file and rename so readers never see a torn file."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


# --------------------------------------------------------------- instances


def make_instance(kind: str, params: dict, seed: int):
    if kind in ("tabular", "baseline"):
        return gen_tabular_instance(_build(TabularInstanceParams, params, seed=seed))
    if kind == "linear":
        return gen_linear_instance(_build(LinearInstanceParams, params, seed=seed))
    raise ConfigError(f"mode {kind!r} has no instance generator")


def instance_for(args, cfg: dict, mode: str, seed: int):
    if args.bundle:
        with open(args.bundle, encoding="utf-8") as fh:
            inst = bundle_from_dict(json.load(fh))
        want = LinearInstance if mode == "linear" else TabularInstance
        if not isinstance(inst, want):
            raise ConfigError(f"bundle does not match mode {mode!r}")
        return inst
    return make_instance(mode, cfg.get("instance", {}), seed)


# ---------------------------------------------------------------- commands


def cmd_gen(args, cfg: dict) -> int:
    mode = args.mode or cfg.get("mode", "tabular")
    dest = out_dir(args, cfg)
    for seed in resolve_seeds(args, cfg):
        inst = make_instance(mode, cfg.get("instance", {}), seed)
        doc = tabular_bundle(inst) if isinstance(inst, TabularInstance) else linear_bundle(inst)
        text = dumps(doc)
        path = dest / f"instance-{'linear' if mode == 'linear' else 'tabular'}-seed{seed}.json"
        atomic_write(path, text)
        print(f"{path} sha256={sha256(text)}")
    return EXIT_OK


def _write_report(dest: Path, rep: RunReport, horizon: int, stem: str):
    atomic_write(dest / f"{stem}.json", rep.to_json())
    atomic_write(dest / f"{stem}.csv", write_csv(None, csv_columns(horizon), report_rows(rep, horizon)))


def _run_one(mode: str, inst, pipeline: dict, seed: int, timing: bool) -> RunReport:
    if mode == "tabular":
        return run_tabular_pipeline(inst, _build(PipelineConfig, pipeline, seed=seed), timing)
    if mode == "linear":
        return run_linear_pipeline(inst, _build(LinearPipelineConfig, pipeline, seed=seed), timing)
    if mode == "baseline":
        return run_baseline(inst, _build(BaselineConfig, pipeline, seed=seed), timing)
    raise ConfigError(f"mode {mode!r} is not a pipeline")


def cmd_run(args, cfg: dict, mode: str | None = None) -> int:
    mode = mode or args.mode or cfg.get("mode", "tabular")
    dest = out_dir(args, cfg)
    timing = bool(cfg.get("record_timing", True))
    status = EXIT_OK
    for seed in resolve_seeds(args, cfg):
        inst = instance_for(args, cfg, mode, seed)
        stem = f"run-{mode}-seed{seed}"
        try:
            section = cfg.get("baseline", {}) if mode == "baseline" else cfg.get("pipeline", {})
            rep = _run_one(mode, inst, section, seed, timing)
        except PhaseFailure as exc:
            rep = exc.partial
            rep.extra["failure"] = f"{exc.phase}: {exc.cause}"
            status = EXIT_PHASE
        if rep.status != "ok":
            status = EXIT_PHASE
        _write_report(dest, rep, inst.mdp.horizon, stem)
        print(f"{dest / stem}.csv status={rep.status} trajectories={rep.total_trajectories} "
              f"max_subopt={rep.max_subopt:.3g}")
    return status


def cmd_baseline(args, cfg: dict) -> int:
    return cmd_run(args, cfg, mode="baseline")


def cmd_report(args, cfg: dict) -> int:
    if not args.files:
        raise SchemaError("no run files given")
    tables = []
    for f in args.files:
        header, rows = read_csv(f)
        tables.append((header, rows))
    header, rows = aggregate(tables)
    dest = out_dir(args, cfg)
    atomic_write(dest / "aggregate.csv", write_csv(None, header, rows))
    atomic_write(dest / "plot.dat", plot_data(tables))
    print(f"{dest / 'aggregate.csv'} runs={len(tables)}")
    return EXIT_OK


def cmd_completion_curve(args, cfg: dict) -> int:
    p = cfg.get("pipeline", {})
    try:
        n1, n2, r = int(p.get("n1", 30)), int(p.get("n2", 30)), int(p.get("rank", 1))
        rates = [float(x) for x in p.get("rates", [0.05, 0.07, 0.1, 0.15, 0.2, 0.3, 0.4])]
        seeds = int(p.get("seeds", 50))
        solver = p.get("solver", "fixed-rank")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"completion-curve settings: {exc}") from exc
    if solver not in ("fixed-rank", "nuclear"):
        raise ConfigError(f"unknown solver {solver!r}")
    curve = recovery_curve(n1, n2, r, rates, seeds, solver, base_seed=args.seed or 0)
    dest = out_dir(args, cfg)
    rows = [[rate, wins, trials, wins / trials] for rate, wins, trials in curve]
    text = write_csv(None, ["rate", "successes", "trials", "success_rate"], rows)
    atomic_write(dest / f"completion-curve-{n1}x{n2}-r{r}.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


SAMPLERS = {"sphere": sphere_sampler, "signed-basis": signed_basis_sampler}


def cmd_rowwise(args, cfg: dict) -> int:
    p = dict(cfg.get("pipeline", {}))
    inst = cfg.get("instance", {})
    N, d, r = int(inst.get("num_rows", 100)), int(inst.get("dim", 20)), int(inst.get("rank", 3))
    name = p.pop("sampler", "sphere")
    if name not in SAMPLERS:
        raise ConfigError(f"unknown sampler {name!r}")
    sampler = SAMPLERS[name]()
    dest = out_dir(args, cfg)
    zeta, xi = measure_dist_constants(sampler, d, rng=rngmod.stream(0, "rowwise", "measure", d))
    cols = ["t", "unknown_rows", "K_t", "fit_loss", "verified", "rejected", "cumulative_samples"]
    status = EXIT_OK
    for seed in resolve_seeds(args, cfg):
        theta = planted_rows(N, d, r, seed)
        oracle = SyntheticOracle(theta, sampler, rngmod.stream(seed, "rowwise", "oracle"))
        rcfg = _build(RowwiseConfig, p, zeta=zeta, xi=xi, seed=seed)
        try:
            est, state, total = run_estimator(oracle, N, d, r, rcfg)
            err = float(np.max(np.abs(est - theta)))
            line = f"rounds={state.t} samples={total} max_error={err:.3g}"
        except CollabRLError as exc:
            state, line, status = None, f"failed: {exc}", EXIT_PHASE
        rows = [[h[c] for c in cols] for h in (state.history if state else [])]
        atomic_write(dest / f"rowwise-seed{seed}.csv", write_csv(None, cols, rows))
        print(f"seed={seed} zeta={zeta:.4g} xi={xi:.4g} {line}")
    return status


def planted_rows(N: int, d: int, r: int, seed: int) -> np.ndarray:
    """Rank-``r`` ``N x d`` matrix with unit-norm rows."""
    g = rngmod.stream(seed, "rowwise", "theta", N, d, r)
    theta = g.standard_normal((N, r)) @ g.standard_normal((r, d))
    return theta / np.linalg.norm(theta, axis=1, keepdims=True)


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="collabrl", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON or YAML config file")
        p.add_argument("--seed", type=int, help="single seed (overrides the config)")
        p.add_argument("--seeds", type=int, help="run seeds 0..N-1")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
        p.add_argument("--mode", choices=MODES)
        return p

    common(sub.add_parser("gen", help="generate instance bundles"))
    for name in ("run", "baseline"):
        common(sub.add_parser(name, help=f"{name} on generated or bundled instances")).add_argument(
            "--bundle", help="instance bundle to run on instead of generating")
    common(sub.add_parser("report", help="aggregate run CSVs")).add_argument("files", nargs="*")
    common(sub.add_parser("completion-curve", help="matrix-completion recovery curve"))
    common(sub.add_parser("rowwise", help="row-wise estimator on synthetic measurements"))
    return ap


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "baseline": cmd_baseline, "report": cmd_report,
            "completion-curve": cmd_completion_curve, "rowwise": cmd_rowwise}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, InstanceError, GenerationError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except CollabRLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PHASE


if __name__ == "__main__":
    sys.exit(main())
