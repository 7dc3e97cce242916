"""End-to-end helpers shared by the command line and the benchmark harness."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import AppConfig
from .core import ConvexHullModel, build_ldes_hull
from .dispatch import BatchResult, TrajectoryBundle, batch_generate_trajectories, solve_oed
from .learner import KernelReference, MseReport, RegressionDataset, build_dataset, train
from .online import ReferenceSource, RunLog, run_online
from .scenarios import ScenarioSeries, load_timeseries, perturb_forecast, synthesize_one


def hull_for(app: AppConfig) -> ConvexHullModel:
    return build_ldes_hull(app.microgrid.ldes, app.m)


def training_scenarios(app: AppConfig) -> list[ScenarioSeries]:
    sc = app.scenarios
    if sc.directory is not None:
        files = sorted(Path(sc.directory).glob("*.csv"))
        if len(files) < sc.count:
            raise FileNotFoundError(f"{sc.directory}: expected {sc.count} scenario files, found {len(files)}")
        return [load_timeseries(f, scenario_id=f.stem) for f in files[: sc.count]]
    return [synthesize_one(sc.generator, i) for i in range(sc.count)]


def evaluation_scenario(app: AppConfig, spec: str | None = None) -> ScenarioSeries:
    """Held-out scenario: a CSV path, a generator index, or (default) index ``count``."""
    if spec is not None and not str(spec).lstrip("-").isdigit():
        return load_timeseries(spec, scenario_id=Path(spec).stem)
    if app.scenarios.generator is None:
        raise ValueError("no generator configured; pass a scenario CSV")
    idx = app.scenarios.test_index if spec is None else int(spec)
    idx = app.scenarios.count if idx is None else idx
    return synthesize_one(app.scenarios.generator, idx)


def offline(app: AppConfig, scenarios, jobs: int = 1) -> BatchResult:
    return batch_generate_trajectories(app.microgrid, scenarios, hull_for(app), app.solver, jobs=jobs)


def fit_reference(app: AppConfig, scenarios, bundles: list[TrajectoryBundle]
                  ) -> tuple[KernelReference, MseReport]:
    by_id = {b.scenario_id: b for b in bundles}
    keep = [s for s in scenarios if s.scenario_id in by_id]
    if len(keep) < 2:
        raise ValueError("need at least two solved trajectories to train")
    ds = build_dataset(keep, [by_id[s.scenario_id].h for s in keep], app.microgrid.ldes.soc_max)
    k = app.kernel
    params, report = train(ds, k.windows, kernel=k.kernel, sigma_multipliers=k.sigma_multipliers,
                           seed=app.seed)
    return KernelReference(ds, params), report


def reference_source(kind: str, learner: KernelReference | None,
                     dataset: RegressionDataset | None = None) -> ReferenceSource:
    if kind == "kernel":
        if learner is None:
            raise ValueError("kernel reference requires a trained learner")
        # fresh copy so runs never share the swappable dataset
        return ReferenceSource("kernel", kernel=KernelReference(learner.dataset, learner.params))
    if kind == "average":
        ds = dataset if dataset is not None else (learner.dataset if learner else None)
        return ReferenceSource("average", dataset=ds)
    return ReferenceSource("none")


def simulate(app: AppConfig, scenario: ScenarioSeries, method: str, reference: ReferenceSource, *,
             training=None, faults=None, jobs: int = 1, mape: float | None = None,
             theta: float | None = None) -> RunLog:
    mape = app.mape if mape is None else mape
    forecast = None
    if method == "mpc":
        forecast = perturb_forecast(scenario, mape, seed=app.seed)
    oco = app.oco
    if oco.horizon != scenario.T:
        from dataclasses import replace
        oco = replace(oco, horizon=scenario.T)
    if theta is None:
        theta = oco.theta if app.theta_from_schedule else app.tracking.theta
    return run_online(app.microgrid, scenario, hull_for(app), method, reference, oco=oco,
                      theta=theta, forecast=forecast, mpc_horizon=app.mpc_horizon,
                      faults=app.faults if faults is None else faults, training=training,
                      settings=app.solver, jobs=jobs)


def perfect_foresight(app: AppConfig, scenario: ScenarioSeries) -> TrajectoryBundle:
    return solve_oed(app.microgrid, scenario, hull_for(app), app.solver)


def soc_matrix(bundles) -> np.ndarray:
    return np.stack([b.h for b in bundles])
