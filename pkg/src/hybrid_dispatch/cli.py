"""Command line entry point: ``hybrid-dispatch {offline,train,run,bench}``.

Every flag can also be set through an environment variable (shown in
``--help``); an explicit flag wins. Exit codes: 0 success, 1 error (invalid
config, provenance mismatch, missing prerequisites), 2 partial success.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import AppConfig, ConfigError, config_hash, load_config, parse_config, with_overrides
from .dispatch import file_digest, read_bundle, write_bundle, write_json
from .learner import KernelHyperParams, KernelReference, RegressionDataset
from .metrics import dynamic_regret, regret_decomposition, summarize, verify_bound_constants
from .online import FaultEvent, OcoModel, bundle_as_log
from .pipeline import (evaluation_scenario, fit_reference, hull_for, offline, perfect_foresight,
                       reference_source, simulate, training_scenarios)
from .scenarios import NormStats, load_timeseries, write_timeseries

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2
ENV_PREFIX = "HYBRID_DISPATCH_"
MANIFEST = "manifest.json"
TABLE_COLUMNS = ["method", "reference", "annual_cost_usd", "operating_cost_usd", "load_loss_kwh",
                 "final_soc_frac", "shortfall_kg", "contract_penalty_usd", "reference_rmse",
                 "regret_usd", "status"]


class ProvenanceError(RuntimeError):
    pass


# --------------------------------------------------------------------------- manifests

def _versions() -> dict:
    import highspy
    import scipy
    return {"hybrid_dispatch": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "highspy": getattr(highspy, "__version__", "unknown"), "python": sys.version.split()[0]}


def _canonical_digest(obj: dict) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def write_manifest(out: Path, command: str, app: AppConfig | None, inputs: dict, seeds: dict) -> dict:
    """Record digests of every file under ``out`` (the manifest itself excluded)."""
    outputs = {str(p.relative_to(out)): file_digest(p)
               for p in sorted(out.rglob("*")) if p.is_file() and p.name != MANIFEST}
    body = {"command": command, "config_hash": config_hash(app) if app is not None else None,
            "seeds": seeds, "versions": _versions(), "inputs": inputs, "outputs": outputs,
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    body["digest"] = _canonical_digest(body)
    write_json(body, out / MANIFEST)
    return body


def verify_manifest(directory) -> dict:
    """Check the manifest's own digest and every listed output file."""
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise ProvenanceError(f"{directory}: no {MANIFEST}")
    try:
        body = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ProvenanceError(f"{path}: unreadable manifest ({exc})") from exc
    stored = body.pop("digest", None)
    if stored != _canonical_digest(body):
        raise ProvenanceError(f"{path}: manifest digest mismatch (edited or corrupted)")
    for rel, digest in body.get("outputs", {}).items():
        f = directory / rel
        if not f.exists():
            raise ProvenanceError(f"{directory}: listed output {rel} is missing")
        if file_digest(f) != digest:
            raise ProvenanceError(f"{directory}: {rel} differs from its recorded digest")
    body["digest"] = stored
    return body


# --------------------------------------------------------------------------- io helpers

def _write_csv(rows, path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow(row)
    return path


def _load_app(path, seed) -> AppConfig:
    app = load_config(path) if path else parse_config({})
    return with_overrides(app, seed=seed)


def _load_faults(path) -> list[FaultEvent]:
    raw = yaml.safe_load(Path(path).read_text()) or []
    if isinstance(raw, dict):
        raw = raw.get("faults", [])
    return [FaultEvent(**dict(r)) for r in raw]


def _out_dir(path) -> Path:
    if not path:
        raise ValueError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_offline(directory: Path):
    """Scenarios, bundles and config from a verified offline output directory."""
    man = verify_manifest(directory)
    if man.get("command") != "offline":
        raise ProvenanceError(f"{directory}: not an offline output (command={man.get('command')})")
    raw = json.loads((directory / "config.json").read_text())
    if config_hash(raw) != man.get("config_hash"):
        raise ProvenanceError(f"{directory}: config.json does not match the manifest hash")
    app = parse_config(raw)
    meta = json.loads((directory / "trajectories.json").read_text())
    scen, bundles = [], []
    for sid in sorted(meta):
        scen.append(load_timeseries(directory / "scenarios" / f"{sid}.csv", scenario_id=sid))
        bundles.append(read_bundle(directory / "trajectories" / f"{sid}.csv", sid, meta[sid]))
    return app, scen, bundles, man


def _load_learner(directory: Path):
    man = verify_manifest(directory)
    if man.get("command") != "train":
        raise ProvenanceError(f"{directory}: not a train output")
    info = json.loads((directory / "learner.json").read_text())
    arr = np.load(directory / "dataset.npz")
    ds = RegressionDataset(arr["netload"], arr["soc"], float(info["soc_max"]),
                           NormStats(float(info["stats"]["mean"]), float(info["stats"]["std"])),
                           tuple(info["scenario_ids"]))
    params = KernelHyperParams(int(info["window"]), float(info["sigma"]), info["kernel"])
    return KernelReference(ds, params), info, man


# --------------------------------------------------------------------------- commands

def cmd_offline(args) -> int:
    app = _load_app(args.config, args.seed)
    out = _out_dir(args.out)
    if args.scenarios:
        files = sorted(Path(args.scenarios).glob("*.csv"))
        if not files:
            print(f"error: no scenario CSV files in {args.scenarios}", file=sys.stderr)
            return EXIT_ERROR
        scenarios = [load_timeseries(f, scenario_id=f.stem) for f in files]
        inputs = {str(f): file_digest(f) for f in files}
    else:
        scenarios = training_scenarios(app)
        inputs = {"generator": "synthetic"}
    batch = offline(app, scenarios, jobs=args.jobs)
    ok = {b.scenario_id for b in batch.bundles}
    (out / "scenarios").mkdir(exist_ok=True)
    (out / "trajectories").mkdir(exist_ok=True)
    meta = {}
    for s in scenarios:
        if s.scenario_id in ok:
            write_timeseries(s, out / "scenarios" / f"{s.scenario_id}.csv")
    for b in batch.bundles:
        write_bundle(b, out / "trajectories" / f"{b.scenario_id}.csv")
        meta[b.scenario_id] = {"total_cost": b.total_cost, "status": b.status,
                               "e_init": b.e_init, "h_init": b.h_init, "hull_m": b.hull_m}
    write_json(meta, out / "trajectories.json")
    write_json(app.raw, out / "config.json")
    if batch.failures:
        write_json([{"scenario_id": f.scenario_id, "groups": f.groups, "message": f.message}
                    for f in batch.failures], out / "failures.json")
    write_manifest(out, "offline", app, inputs, {"root": app.seed})
    for f in batch.failures:
        print(f"scenario {f.scenario_id} failed: {f.message}", file=sys.stderr)
    print(f"{len(batch.bundles)} trajectories written to {out}")
    if batch.failures:
        return EXIT_PARTIAL if batch.bundles else EXIT_ERROR
    return EXIT_OK


def cmd_train(args) -> int:
    src = Path(args.trajectories or "")
    app, scen, bundles, man = _load_offline(src)
    if args.seed is not None:
        app = with_overrides(app, seed=args.seed)
    if len(bundles) < 2:
        print(f"error: need at least two trajectories in {src}, found {len(bundles)}", file=sys.stderr)
        return EXIT_ERROR
    out = _out_dir(args.out)
    learner, report = fit_reference(app, scen, bundles)
    ds = learner.dataset
    np.savez(out / "dataset.npz", netload=ds.netload, soc=ds.soc)
    info = {"window": learner.params.window, "sigma": learner.params.sigma,
            "kernel": learner.params.kernel, "soc_max": ds.soc_max,
            "stats": {"mean": ds.stats.mean, "std": ds.stats.std},
            "scenario_ids": list(ds.scenario_ids), "source": str(src.resolve()),
            "source_digest": man["digest"]}
    write_json(info, out / "learner.json")
    write_json(report.to_json(), out / "mse_report.json")
    write_json(app.raw, out / "config.json")
    write_manifest(out, "train", app, {"trajectories": man["digest"]}, {"root": app.seed})
    print(f"selected W={learner.params.window} sigma={learner.params.sigma:.6g} "
          f"(loo mse {report.best_mse:.6g})")
    return EXIT_OK


def _prepare_reference(kind: str, learner_dir):
    if kind == "none":
        return None, None, None
    if not learner_dir:
        raise FileNotFoundError(f"reference '{kind}' needs --learner (trained learner directory)")
    learner, info, man = _load_learner(Path(learner_dir))
    return learner, info, man


def cmd_run(args) -> int:
    app = _load_app(args.config, args.seed)
    out = _out_dir(args.out)
    try:
        learner, info, lman = _prepare_reference(args.reference, args.learner)
    except (FileNotFoundError, ProvenanceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    faults = _load_faults(args.faults) if args.faults else list(app.faults)
    training = None
    if faults and info is not None:
        _, training, _, _ = _load_offline(Path(info["source"]))
        ids = set(learner.dataset.scenario_ids)
        training = [s for s in training if s.scenario_id in ids]
    scenario = evaluation_scenario(app, args.scenario)
    ref = reference_source(args.reference, learner)
    log = simulate(app, scenario, args.method, ref, training=training, faults=faults, jobs=args.jobs)
    hull = hull_for(app)
    oracle = perfect_foresight(app, scenario)
    summary = summarize(log, app.microgrid, oracle.h)
    bounds = verify_bound_constants(app.microgrid, hull, theta=log.theta, gamma0=app.oco.gamma0,
                                    load_max=float(scenario.load.max()),
                                    renewable_max=float(scenario.renewable.max()))
    _write_csv(log.csv_rows(), out / "run_log.csv")
    write_json(log.events, out / "events.json")
    body = summary.to_json()
    body.update(method=args.method, reference=args.reference, scenario=scenario.scenario_id,
                hours=log.T, theta=log.theta, hull_m=hull.m, bound_check=bounds.line(),
                regret_usd=dynamic_regret(log, oracle, app.microgrid, hull).total)
    write_json(body, out / "summary.json")
    inputs = {"learner": lman["digest"]} if lman else {}
    if args.faults:
        inputs["faults"] = file_digest(args.faults)
    write_manifest(out, "run", app, inputs, {"root": app.seed})
    print(f"{args.method}/{args.reference}: cost {summary.annual_cost:.2f} USD, "
          f"load loss {summary.load_loss:.2f} kWh, final SoC {summary.final_soc:.3f}")
    return EXIT_OK


def _table_row(method, reference, s, regret, status="ok"):
    f = lambda v: "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))
    if s is None:
        return [method, reference] + [""] * (len(TABLE_COLUMNS) - 3) + [status]
    return [method, reference, f(s.annual_cost), f(s.operating_cost), f(s.load_loss), f(s.final_soc),
            f(s.shortfall), f(s.contract_penalty), f(s.reference_rmse), f(regret), status]


def cmd_bench(args) -> int:
    app = _load_app(args.config, args.seed)
    out = _out_dir(args.out)
    methods = [m for m in args.methods.split(",") if m]
    refs = [r for r in args.references.split(",") if r]
    hull = hull_for(app)
    scenario = evaluation_scenario(app, args.scenario)
    learner = None
    training = None
    if any(r != "none" for r in refs):
        training = training_scenarios(app)
        batch = offline(app, training, jobs=args.jobs)
        learner, report = fit_reference(app, training, batch.bundles)
        write_json(report.to_json(), out / "mse_report.json")
    oracle = perfect_foresight(app, scenario)
    pf = summarize(bundle_as_log(oracle, scenario, app.microgrid, hull), app.microgrid)
    rows = [TABLE_COLUMNS, _table_row("perfect", "hindsight", pf, 0.0)]
    (out / "regret").mkdir(exist_ok=True)
    timing = {"perfect/hindsight": oracle.wall_time}
    failed = 0
    for m in methods:
        for r in refs:
            cell = f"{m}_{r}"
            try:
                log = simulate(app, scenario, m, reference_source(r, learner), training=training,
                               jobs=args.jobs)
                s = summarize(log, app.microgrid, oracle.h)
                rep = regret_decomposition(log, oracle, app.microgrid, hull, log.theta,
                                           log.reference, app.solver)
                rep.bounds = verify_bound_constants(app.microgrid, hull, theta=log.theta,
                                                    gamma0=app.oco.gamma0)
                write_json(rep.to_json(), out / "regret" / f"{cell}.json")
                _write_csv(rep.csv_rows(), out / "regret" / f"{cell}.csv")
                rows.append(_table_row(m, r, s, rep.total))
                timing[f"{m}/{r}"] = log.wall_time
            except Exception as exc:  # noqa: BLE001 - cell failures are recorded, bench continues
                failed += 1
                rows.append(_table_row(m, r, None, None, f"failed: {type(exc).__name__}"))
                write_json({"error": str(exc), "traceback": traceback.format_exc()},
                           out / "regret" / f"{cell}.error.json")
    _write_csv(rows, out / "table.csv")
    write_json(timing, out / "timing.json")
    write_manifest(out, "bench", app, {}, {"root": app.seed})
    print(f"{len(rows) - 1} rows written to {out / 'table.csv'}")
    return EXIT_PARTIAL if failed else EXIT_OK


# --------------------------------------------------------------------------- parser

def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def _env_int(name: str, default=None):
    v = _env(name)
    return int(v) if v not in (None, "") else default


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybrid-dispatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=_env("CONFIG"),
                        help="YAML configuration file [env HYBRID_DISPATCH_CONFIG]")
    common.add_argument("--out", default=_env("OUT"),
                        help="output directory [env HYBRID_DISPATCH_OUT]")
    common.add_argument("--seed", type=int, default=_env_int("SEED"),
                        help="root seed override [env HYBRID_DISPATCH_SEED]")
    common.add_argument("--jobs", type=int, default=_env_int("JOBS", 1),
                        help="worker processes for scenario batches [env HYBRID_DISPATCH_JOBS]")

    p = sub.add_parser("offline", parents=[common], help="solve hindsight trajectories")
    p.add_argument("--scenarios", default=_env("SCENARIOS"),
                   help="directory of scenario CSVs instead of the generator [env HYBRID_DISPATCH_SCENARIOS]")
    p.set_defaults(func=cmd_offline)

    p = sub.add_parser("train", parents=[common], help="fit the SoC reference learner")
    p.add_argument("--trajectories", default=_env("TRAJECTORIES"),
                   help="output directory of 'offline' [env HYBRID_DISPATCH_TRAJECTORIES]")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", parents=[common], help="closed-loop simulation of one method")
    p.add_argument("--method", choices=("oco", "mpc", "sed"), default=_env("METHOD", "oco"),
                   help="controller [env HYBRID_DISPATCH_METHOD]")
    p.add_argument("--reference", choices=("kernel", "average", "none"),
                   default=_env("REFERENCE", "kernel"),
                   help="SoC reference source [env HYBRID_DISPATCH_REFERENCE]")
    p.add_argument("--scenario", default=_env("SCENARIO"),
                   help="evaluation scenario: CSV path or generator index [env HYBRID_DISPATCH_SCENARIO]")
    p.add_argument("--faults", default=_env("FAULTS"),
                   help="YAML/JSON list of fault events [env HYBRID_DISPATCH_FAULTS]")
    p.add_argument("--learner", default=_env("LEARNER"),
                   help="output directory of 'train' [env HYBRID_DISPATCH_LEARNER]")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", parents=[common], help="methods x references comparison table")
    p.add_argument("--methods", default=_env("METHODS", "oco,mpc,sed"),
                   help="comma-separated methods [env HYBRID_DISPATCH_METHODS]")
    p.add_argument("--references", default=_env("REFERENCES", "kernel,average,none"),
                   help="comma-separated references [env HYBRID_DISPATCH_REFERENCES]")
    p.add_argument("--scenario", default=_env("SCENARIO"),
                   help="evaluation scenario: CSV path or generator index [env HYBRID_DISPATCH_SCENARIO]")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("error: invalid configuration", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v.field}: {v.rule}", file=sys.stderr)
        return EXIT_ERROR
    except ProvenanceError as exc:
        print(f"error: provenance check failed: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
