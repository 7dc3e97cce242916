"""Acceptance criteria 1-9 at desk scale.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts the same verdict, so a red criterion is visible both ways.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from hybrid_dispatch.config import parse_config
from hybrid_dispatch.core import (
    SystemState,
    build_convex_hull,
    default_charge_curve,
    default_discharge_curve,
    hull_approximation_error,
    hull_error_bound,
)
from hybrid_dispatch.dispatch import DispatchDecision, solve_oed, solve_sed
from hybrid_dispatch.learner import smooth_map_ensemble, train
from hybrid_dispatch.metrics import dynamic_regret, summarize
from hybrid_dispatch.online import FaultEvent, HardInfeasibility, bundle_as_log, regenerate_references
from hybrid_dispatch.pipeline import (
    evaluation_scenario,
    fit_reference,
    hull_for,
    offline,
    perfect_foresight,
    reference_source,
    simulate,
    training_scenarios,
)
from hybrid_dispatch.scenarios import SyntheticGenConfig, synthesize_one

import conftest

pytestmark = pytest.mark.slow


def record(n: int, ok: bool, detail: str):
    conftest.ACCEPTANCE.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _app(horizon, *, count=8, target=None, scarcity=True, seed=11, windows=(6, 24, 48), **gen):
    base = {"horizon": horizon, "noise_level": 0.05, "level_spread": 0.15}
    if scarcity:
        base.update(scarcity_start=400, scarcity_length=336, scarcity_jitter=48)
    raw = {"seed": seed, "scenarios": {"count": count, "generator": {**base, **gen}},
           "kernel": {"windows": list(windows)}, "hull": {"m": 10}}
    if target is not None:
        raw["ldes"] = {"soc_final_target": float(target)}
    return parse_config(raw)


def _learned(app):
    tr = training_scenarios(app)
    batch = offline(app, tr)
    assert not batch.failures
    learner, _ = fit_reference(app, tr, batch.bundles)
    return tr, batch, learner


# --------------------------------------------------------------------------- 1

def test_criterion_1_hull_convergence():
    t0 = time.perf_counter()
    Ms = np.array([2, 10, 20, 40])
    slopes, within = [], True
    for curve in (default_charge_curve(), default_discharge_curve()):
        err = np.array([hull_approximation_error(curve, build_convex_hull(curve, m)) for m in Ms])
        slopes.append(np.polyfit(np.log(Ms - 1.0), np.log(err), 1)[0])
        within &= all(e <= hull_error_bound(curve, m) for e, m in zip(err, Ms))
    dt = time.perf_counter() - t0
    record(1, max(slopes) <= -1.9 and within and dt < 10,
           f"log-log slopes {np.round(slopes, 3).tolist()} (<= -1.9), bound held={within}, {dt:.1f}s (<10s)")


# --------------------------------------------------------------------------- 2

def test_criterion_2_pinned_storage_equivalence():
    t0 = time.perf_counter()
    app = _app(24, scarcity=False, target=230.0)
    cfg, hull = app.microgrid, hull_for(app)
    worst = 0.0
    for seed in range(5):
        sc = synthesize_one(SyntheticGenConfig(seed=seed, horizon=24, noise_level=0.1), 0)
        b = solve_oed(cfg, sc, hull, regularize=1e-8)
        e, h = b.e_init, b.h_init
        for t in range(sc.T):
            y = DispatchDecision(b.r[t], b.l[t], b.d[t], b.b_plus[t], b.b_minus[t], b.e[t], b.h[t],
                                 b.lam_minus[t], b.lam_plus[t])
            x = solve_sed(cfg, SystemState(t, e, h), sc.load[t], sc.renewable[t], hull, fixed_y=y,
                          regularize=1e-8)
            worst = max(worst, abs(x.r - b.r[t]), abs(x.l - b.l[t]), abs(x.d - b.d[t]))
            e, h = b.e[t], b.h[t]
    dt = time.perf_counter() - t0
    record(2, worst <= 1e-6 and dt < 60, f"max |x_SED - x_OED| = {worst:.2e} (<=1e-6), {dt:.1f}s (<60s)")


# --------------------------------------------------------------------------- 3

def test_criterion_3_kernel_learning_shapes():
    t0 = time.perf_counter()
    windows = [1, 2, 4, 6, 8, 12, 16]
    curves, best32, best64 = [], [], []
    for seed in range(10):
        p, rep = train(smooth_map_ensemble(32, 2160, seed=seed), windows)
        curves.append([rep.mse_by_window()[w] for w in windows])
        best32.append(rep.best_mse)
        best64.append(train(smooth_map_ensemble(64, 2160, seed=seed), windows)[1].best_mse)
    mean = np.mean(curves, axis=0)
    k = int(np.argmin(mean))
    u_shape = 0 < k < len(windows) - 1 and mean[k] < mean[0] and mean[k] < mean[-1]
    dt = time.perf_counter() - t0
    record(3, u_shape and np.mean(best64) <= np.mean(best32) and dt < 300,
           f"mean MSE by W {dict(zip(windows, np.round(mean, 5).tolist()))}, minimum at W={windows[k]}; "
           f"selected MSE S=32 {np.mean(best32):.5f} vs S=64 {np.mean(best64):.5f}, {dt:.0f}s (<300s)")


# --------------------------------------------------------------------------- 4

def test_criterion_4_theta_scaling():
    t0 = time.perf_counter()
    app = _app(720, target=230.0, scarcity_length=168)
    _, _, learner = _learned(app)
    sc = evaluation_scenario(app)
    target = app.microgrid.ldes.soc_final_target
    dev, short = [], []
    for mult in (1, 10, 100):
        theta = app.oco.theta * mult
        log = simulate(app, sc, "oco", reference_source("kernel", learner), theta=theta)
        ok = np.isfinite(log.reference)
        dev.append(float(np.sum((log.h[ok] - log.reference[ok]) ** 2)))
        short.append(max(0.0, target - float(log.h[-1])))
    dt = time.perf_counter() - t0
    mono = all(b <= a for a, b in zip(dev, dev[1:])) and all(b <= a + 1e-9 for a, b in zip(short, short[1:]))
    record(4, mono and dt < 300,
           f"sum (h - ref)^2 {np.round(dev, 1).tolist()}, shortfall kg {np.round(short, 3).tolist()} "
           f"for theta x (1, 10, 100), {dt:.0f}s (<300s)")


# --------------------------------------------------------------------------- 5

def test_criterion_5_sublinear_regret():
    t0 = time.perf_counter()
    regret, end_rate, quarter_rate = {}, None, None
    for T in (500, 1000, 2000):
        # contract slack so the oracle is the optimum of the realized problem
        app = _app(T, scarcity=False, target=0.0)
        _, _, learner = _learned(app)
        sc = evaluation_scenario(app)
        log = simulate(app, sc, "oco", reference_source("kernel", learner))
        rep = dynamic_regret(log, perfect_foresight(app, sc), app.microgrid, hull_for(app))
        regret[T] = rep.total
        end_rate, quarter_rate = rep.trailing_mean[-1], rep.trailing_mean[T // 4 - 1]
    ratios = [regret[1000] / regret[500], regret[2000] / regret[1000]]
    dt = time.perf_counter() - t0
    ok = all(0 < r < 2 for r in ratios) and regret[500] > 0 and end_rate <= 0.5 * quarter_rate and dt < 900
    record(5, ok, f"regret {{T: USD}} {{{', '.join(f'{k}: {v:.1f}' for k, v in regret.items())}}}, "
                  f"doubling ratios {np.round(ratios, 3).tolist()} (<2); trailing change rate at T "
                  f"{end_rate:.4f} vs 0.5 x {quarter_rate:.4f} at T/4, {dt:.0f}s (<900s)")


# --------------------------------------------------------------------------- 6

ANNUAL = dict(count=16, windows=(6, 24, 48, 96, 168))


def test_criterion_6_method_ordering():
    t0 = time.perf_counter()
    app = _app(8760, **ANNUAL)
    tr, batch, learner = _learned(app)
    sc = evaluation_scenario(app)
    pf = summarize(bundle_as_log(perfect_foresight(app, sc), sc, app.microgrid, hull_for(app)), app.microgrid)
    runs = {kind: summarize(simulate(app, sc, "oco", reference_source(kind, learner)), app.microgrid)
            for kind in ("kernel", "average", "none")}
    k, a, n = runs["kernel"], runs["average"], runs["none"]
    dt = time.perf_counter() - t0
    ok = (pf.annual_cost <= k.annual_cost <= a.annual_cost and k.annual_cost < n.annual_cost
          and k.load_loss <= n.load_loss and n.load_loss > 0 and dt < 1800)
    record(6, ok, f"cost USD perfect {pf.annual_cost:.0f}, OCO+kernel {k.annual_cost:.0f}, "
                  f"OCO+average {a.annual_cost:.0f}, OCO+none {n.annual_cost:.0f}; load loss kWh "
                  f"kernel {k.load_loss:.0f}, none {n.load_loss:.0f}; {dt:.0f}s (<1800s)")


# --------------------------------------------------------------------------- 7

def test_criterion_7_forecast_error():
    t0 = time.perf_counter()
    app = _app(720, target=230.0, scarcity_length=168)
    app = parse_config({**app.raw, "mpc": {"horizon": 24}})
    _, _, learner = _learned(app)
    sc = evaluation_scenario(app)
    mpc, oco = [], []
    for mape in (0.0, 0.2, 0.3):
        mpc.append(summarize(simulate(app, sc, "mpc", reference_source("kernel", learner), mape=mape),
                             app.microgrid).annual_cost)
        oco.append(summarize(simulate(app, sc, "oco", reference_source("kernel", learner), mape=mape),
                             app.microgrid).annual_cost)
    spread = (max(oco) - min(oco)) / min(oco)
    dt = time.perf_counter() - t0
    ok = all(b >= a for a, b in zip(mpc, mpc[1:])) and spread < 0.01 and dt < 1800
    record(7, ok, f"MPC cost {np.round(mpc, 1).tolist()} for MAPE (0, 0.2, 0.3); OCO cost spread "
                  f"{100 * spread:.3f}% (<1%), {dt:.0f}s (<1800s)")


# --------------------------------------------------------------------------- 8

def test_criterion_8_fault_adaptation():
    t0 = time.perf_counter()
    app = _app(2160, target=200.0)
    tr, batch, learner = _learned(app)
    sc = evaluation_scenario(app)
    # mid-February, clear of the built-in scarcity window
    fault = FaultEvent(1000, 336, "wind", 0.0)
    hard = None
    try:
        log = simulate(app, sc, "oco", reference_source("kernel", learner), training=tr, faults=[fault])
    except HardInfeasibility as exc:
        hard = str(exc)
        log = None
    regenerated = bool(log is not None and log.events and log.events[0].get("regenerated"))
    # paired comparison from the same live state: null fault vs outage
    k = fault.start
    state = SystemState(k, float(log.e[k - 1]), float(log.h[k - 1])) if log is not None else None
    cfg, hull = app.microgrid, hull_for(app)
    _, base = regenerate_references(FaultEvent(k, fault.duration, "wind", 1.0), state, cfg, tr, hull)
    _, hit = regenerate_references(fault, state, cfg, tr, hull)
    win = slice(0, fault.duration)
    mean_base = float(np.mean([b.h[win] for b in base.bundles]))
    mean_hit = float(np.mean([b.h[win] for b in hit.bundles]))
    target = cfg.ldes.soc_final_target
    meets = all(b.h[-1] >= target - 1e-4 for b in base.bundles + hit.bundles)
    dt = time.perf_counter() - t0
    ok = (hard is None and regenerated and not base.failures and not hit.failures
          and mean_hit <= mean_base and meets and dt < 900)
    record(8, ok, f"fault-window mean reference kg: regenerated {mean_hit:.1f} vs original {mean_base:.1f}; "
                  f"all meet target={meets}; regenerated={regenerated}; hard infeasibility={hard}; "
                  f"{dt:.0f}s (<900s)")


# --------------------------------------------------------------------------- 9

def test_criterion_9_invariant_suite():
    t0 = time.perf_counter()
    here = Path(__file__).parent
    out = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                          str(here / "test_properties.py")], capture_output=True, text=True, cwd=here.parent)
    dt = time.perf_counter() - t0
    tail = out.stdout.strip().splitlines()[-1] if out.stdout.strip() else out.stderr.strip()[-200:]
    record(9, out.returncode == 0 and dt < 120, f"property suite (100 cases per property): {tail}; {dt:.0f}s (<120s)")
