import math
from dataclasses import replace

import numpy as np
import pytest

from hybrid_dispatch.core import CostParams, MicrogridConfig, SystemState, build_ldes_hull
from hybrid_dispatch.dispatch import audit_trajectory, solve_oed, solve_sed, solve_ted
from hybrid_dispatch.learner import build_dataset
from hybrid_dispatch.online import (
    ExpertBank,
    FaultEvent,
    OcoConfig,
    OcoController,
    OcoModel,
    ReferenceSource,
    RelaxedConstraints,
    StaticSet,
    aggregate_experts,
    expert_count,
    init_experts,
    initial_weights,
    mpc_step,
    prox_step,
    regenerate_references,
    run_online,
    settle,
    surrogate_losses,
    update_virtual_queue,
)
from hybrid_dispatch.scenarios import ScenarioSeries

from conftest import flat_scenario, relaxed_contract


def box(n, lo=0.0, hi=1.0):
    return StaticSet(np.full(n, lo), np.full(n, hi), np.zeros((0, n)), np.zeros(0), np.zeros(0))


# --------------------------------------------------------------------------- schedules

def test_expert_count_formula():
    assert expert_count(1.0, 1023) == 11
    assert expert_count(0.0, 5000) == 1


def test_initial_weights_three_experts():
    np.testing.assert_allclose(initial_weights(3), [2 / 3, 2 / 9, 1 / 9], rtol=1e-15)
    assert initial_weights(3).sum() == pytest.approx(1.0, abs=1e-15)


def test_step_size_formula():
    cfg = OcoConfig(alpha0=1.0, c=0.5, kappa=0.5)
    assert cfg.alpha(2, 4) == pytest.approx(1.0)


def test_config_ranges():
    with pytest.raises(ValueError):
        OcoConfig(c=1.0)
    with pytest.raises(ValueError):
        OcoConfig(c=0.4, kappa=0.5)
    with pytest.raises(ValueError):
        OcoConfig(alpha0=0.0)


# --------------------------------------------------------------------------- queues

def _bank(N_T=100, n=3):
    cfg = OcoConfig(horizon=N_T)
    return init_experts(cfg, np.full(n, 0.5))


def test_zero_residual_leaves_queue():
    bank = _bank()
    bank.Q[0] = [0.3, 0.0]
    update_virtual_queue(bank, 0, [0.0, 0.0])
    np.testing.assert_array_equal(bank.Q[0], [0.3, 0.0])


def test_queue_arithmetic():
    bank = _bank()
    bank.cfg = replace(bank.cfg, beta0=2.0 * math.sqrt(bank.cfg.alpha(1, 1)))  # beta_{1,1} = 2
    assert bank.cfg.beta(1, 1) == pytest.approx(2.0)
    update_virtual_queue(bank, 0, [0.5, 0.0])
    assert bank.Q[0, 0] == pytest.approx(1.0)


def test_negative_residual_rejected():
    with pytest.raises(ValueError):
        update_virtual_queue(_bank(), 0, [-0.1, 0.0])


def test_init_rejects_point_outside_set():
    with pytest.raises(ValueError):
        init_experts(OcoConfig(horizon=10), np.full(2, 2.0), box(2))


# --------------------------------------------------------------------------- prox step

def test_prox_of_zero_is_identity():
    z = np.array([0.2, 0.7, 0.4])
    out = prox_step(z, np.zeros(3), 1.0, 1.0, np.zeros(2), None, box(3))
    np.testing.assert_allclose(out, z, atol=1e-7)


def test_prox_one_dimensional_closed_form():
    out = prox_step(np.array([1.0]), np.array([1.0]), 1.0, 0.0, np.zeros(0), None, box(1))
    assert out[0] == pytest.approx(0.5, abs=1e-7)


def test_prox_with_queue_matches_grid_and_reduces_imbalance():
    # z in [0,1]^2, balance u = z1 + z2 - 1 relaxed as (-u, u) <= 0
    G = np.array([[-1.0, -1.0], [1.0, 1.0]])
    rel = RelaxedConstraints(G, np.array([-1.0, 1.0]))
    z0 = np.array([0.5, 0.5])
    grad = np.array([1.0, 0.6])
    alpha, beta = 0.8, 1.0
    free = prox_step(z0, grad, alpha, beta, np.zeros(2), rel, box(2))
    Q = np.array([3.0, 0.0])
    queued = prox_step(z0, grad, alpha, beta, Q, rel, box(2))
    g = np.linspace(0, 1, 801)
    Z1, Z2 = np.meshgrid(g, g, indexing="ij")
    u = Z1 + Z2 - 1
    obj = alpha * (grad[0] * (Z1 - z0[0]) + grad[1] * (Z2 - z0[1])) \
        + alpha * beta * Q[0] * np.maximum(-u, 0) + (Z1 - z0[0]) ** 2 + (Z2 - z0[1]) ** 2
    k = np.unravel_index(np.argmin(obj), obj.shape)
    np.testing.assert_allclose(queued, [g[k[0]], g[k[1]]], atol=2e-3)
    assert abs(queued.sum() - 1) < abs(free.sum() - 1)


def test_prox_steps_contract_under_constant_data():
    z = np.array([0.9, 0.9, 0.1])
    grad = np.array([0.3, 0.1, -0.2])
    cfg = OcoConfig(alpha0=1.0, horizon=100)
    steps = []
    for t in range(1, 8):
        nz = prox_step(z, grad, cfg.alpha(1, t), 0.0, np.zeros(0), None, box(3))
        steps.append(np.linalg.norm(nz - z))
        z = nz
    assert all(b <= a + 1e-9 for a, b in zip(steps, steps[1:]))


# --------------------------------------------------------------------------- losses and weights

def _bank_with(z, rho):
    cfg = OcoConfig(horizon=10)
    return ExpertBank(cfg, np.asarray(z, float), np.zeros((len(rho), 2)), np.asarray(rho, float))


def test_loss_zero_at_aggregate():
    bank = _bank_with([[0.3, 0.6], [0.3, 0.6]], [0.5, 0.5])
    np.testing.assert_allclose(surrogate_losses(bank, [1.0, -2.0]), 0.0)


def test_weighted_losses_cancel():
    bank = _bank_with([[0.1, 0.9], [0.5, 0.2], [0.9, 0.4]], [0.2, 0.5, 0.3])
    losses = surrogate_losses(bank, [0.7, -1.3])
    assert bank.rho @ losses == pytest.approx(0.0, abs=1e-14)


def test_symmetric_experts_opposite_losses():
    bank = _bank_with([[0.2, 0.5], [0.6, 0.1]], [0.5, 0.5])
    a, b = surrogate_losses(bank, [1.0, 2.0])
    assert a == pytest.approx(-b)


def test_equal_losses_or_zero_rate_keep_weights():
    bank = _bank_with([[0.0], [1.0], [0.5]], [0.5, 0.3, 0.2])
    rho, _ = aggregate_experts(bank, [2.0, 2.0, 2.0], 0.7)
    np.testing.assert_allclose(rho, bank.rho, rtol=1e-14)
    rho, _ = aggregate_experts(bank, [1.0, -3.0, 9.0], 0.0)
    np.testing.assert_allclose(rho, bank.rho, rtol=1e-14)


def test_large_loss_gap_shrinks_ratio():
    bank = _bank_with([[0.0], [1.0]], [0.5, 0.5])
    rho, _ = aggregate_experts(bank, [0.0, 100.0], 1.0)
    assert rho[1] / rho[0] == pytest.approx(math.exp(-100.0), rel=1e-9)


def test_non_finite_losses_rejected():
    bank = _bank_with([[0.0], [1.0]], [0.5, 0.5])
    with pytest.raises(ValueError):
        aggregate_experts(bank, [0.0, np.inf], 1.0)


# --------------------------------------------------------------------------- controller

def test_fixpoint_with_zero_gradient():
    cfg = MicrogridConfig(costs=CostParams(1.0, 0.0, 0.0, 0.0, 0.0))
    hull = build_ldes_hull(cfg.ldes, 5)
    ctrl = OcoController(cfg, hull, OcoConfig(horizon=50), theta=0.0)
    x0 = ctrl.bank.aggregate.copy()
    st = SystemState.initial(cfg)
    for k in range(1, 4):
        x, _ = ctrl.step(st, None, 0.0, 0.0, k)
        np.testing.assert_allclose(x, x0, atol=1e-7)
    np.testing.assert_allclose(ctrl.bank.Q, 0.0, atol=1e-15)


def test_abundant_renewables_cost_nothing():
    cfg = relaxed_contract(MicrogridConfig())
    hull = build_ldes_hull(cfg.ldes, 5)
    log = run_online(cfg, flat_scenario(48, 60.0, 190.0), hull, "oco", oco=OcoConfig(horizon=48), theta=0.0)
    # only storage wear remains; compare with serving the load from DG
    dg_only = 48 * 60.0 * cfg.costs.dg_fuel_price
    assert log.cost.sum() <= 1e-3 * dg_only
    assert log.l.sum() <= 1e-6 and log.d.sum() <= 1e-6


def test_decision_ignores_future_data(short_config):
    hull = build_ldes_hull(short_config.ldes, 4)
    rng = np.random.default_rng(0)
    T, k = 40, 25
    L = 60 + 30 * rng.random(T)
    R = 80 * rng.random(T)
    L2, R2 = L.copy(), R.copy()
    perm = rng.permutation(np.arange(k, T))
    L2[k:], R2[k:] = L[perm], R[perm]
    runs = [run_online(short_config, ScenarioSeries("p", a, b), hull, "oco", oco=OcoConfig(horizon=T),
                       theta=0.0, keep_iterates=True) for a, b in ((L, R), (L2, R2))]
    np.testing.assert_array_equal(runs[0].iterates[:k + 1], runs[1].iterates[:k + 1])


def test_queues_and_weights_along_a_run(short_config, week_scenarios):
    hull = build_ldes_hull(short_config.ldes, 4)
    log = run_online(short_config, week_scenarios[0].window(0, 72), hull, "oco",
                     oco=OcoConfig(horizon=72), theta=0.0)
    assert np.all(log.queues >= 0)
    assert np.all(np.diff(log.queues, axis=0) >= -1e-12)
    np.testing.assert_allclose(log.rho.sum(axis=1), 1.0, atol=1e-12)
    rep = audit_trajectory(short_config, hull, log.load, log.renewable, log, log.e_init, log.h_init)
    assert rep.ok, rep.errors


def test_runs_are_deterministic(short_config, week_scenarios):
    hull = build_ldes_hull(short_config.ldes, 4)
    sc = week_scenarios[1].window(0, 48)
    a = run_online(short_config, sc, hull, "oco", oco=OcoConfig(horizon=48))
    b = run_online(short_config, sc, hull, "oco", oco=OcoConfig(horizon=48))
    assert list(a.csv_rows()) == list(b.csv_rows())


# --------------------------------------------------------------------------- settlement

def _empty_state(cfg):
    return SystemState(0, cfg.bes.soc_min, cfg.ldes.soc_min)


def _plan(dec):
    return {k: getattr(dec, k) for k in ("r", "l", "d", "b_plus", "b_minus", "lam_minus", "lam_plus")}


def _one_hour_oracle(cfg, load, renewable):
    """Grid search over DG output with storage empty and idle."""
    d = np.linspace(0, cfg.dg.p_max, 50_001)
    r = np.minimum(renewable, np.maximum(load - d, 0))
    l = load - d - r
    ok = (l >= -1e-12) & (l <= load)
    cost = cfg.costs.dg_fuel_price * d + cfg.costs.load_shed_penalty * np.maximum(l, 0)
    j = np.argmin(np.where(ok, cost, np.inf))
    return d[j], max(l[j], 0.0)


def test_balanced_plan_is_unchanged(config, hull):
    st = SystemState.initial(config)
    dec = solve_sed(config, st, 90.0, 40.0, hull)
    res = settle(config, hull, _plan(dec), 90.0, 40.0, st)
    np.testing.assert_allclose([res.decision.r, res.decision.d, res.decision.l],
                               [dec.r, dec.d, dec.l], atol=1e-9)
    np.testing.assert_allclose(res.residual, 0.0, atol=1e-9)


def test_renewable_shortfall_covered_by_dg(config, hull):
    st = _empty_state(config)
    dec = solve_sed(config, st, 90.0, 60.0, hull)
    res = settle(config, hull, _plan(dec), 90.0, 50.0, st)
    d, l = _one_hour_oracle(config, 90.0, 50.0)
    assert res.decision.d == pytest.approx(dec.d + 10.0, abs=1e-6)
    assert res.decision.d == pytest.approx(d, abs=2e-3) and res.decision.l == pytest.approx(l, abs=2e-3)
    assert res.decision.r == pytest.approx(50.0, abs=1e-6) and not res.released_ldes


def test_no_headroom_sheds_deficit(config, hull):
    st = _empty_state(config)
    dec = solve_sed(config, st, 130.0, 60.0, hull)
    res = settle(config, hull, _plan(dec), 130.0, 50.0, st)
    d, l = _one_hour_oracle(config, 130.0, 50.0)
    assert dec.d == pytest.approx(config.dg.p_max, abs=1e-6)
    assert res.decision.l - dec.l == pytest.approx(10.0, abs=1e-6)
    assert res.decision.l == pytest.approx(l, abs=2e-3)


# --------------------------------------------------------------------------- baselines

def test_one_hour_lookahead_equals_tracking_dispatch(config, hull):
    st = SystemState.initial(config)
    a = mpc_step(config, st, [80.0], [30.0], 230.0, 0.5, hull, 1)
    b = solve_ted(config, st, 80.0, 30.0, 230.0, 0.5, hull)
    np.testing.assert_allclose([a.r, a.l, a.d, a.b_plus, a.b_minus, a.h], [b.r, b.l, b.d, b.b_plus, b.b_minus, b.h],
                               atol=1e-6)


def test_full_lookahead_with_truth_is_hindsight(week_scenarios):
    cfg = relaxed_contract(MicrogridConfig(), 260.0)
    hull = build_ldes_hull(cfg.ldes, 6)
    sc = week_scenarios[2]
    oed = solve_oed(cfg, sc, hull)
    dec = mpc_step(cfg, SystemState.initial(cfg), sc.load, sc.renewable, None, 0.0, hull, sc.T,
                   contract_target=cfg.ldes.soc_final_target)
    assert dec.objective == pytest.approx(oed.total_cost, rel=1e-4)


def test_lookahead_needs_long_forecast(config, hull):
    with pytest.raises(ValueError):
        mpc_step(config, SystemState.initial(config), [1.0], [1.0], None, 0.0, hull, 3)


# --------------------------------------------------------------------------- faults

def test_fault_event_validation():
    with pytest.raises(ValueError):
        FaultEvent(0, 5, "hydro")
    with pytest.raises(ValueError):
        FaultEvent(0, 5, "wind", 1.5)
    with pytest.raises(ValueError):
        FaultEvent(10, 20, "wind").validate(25)


def test_null_fault_reproduces_references(short_config, week_scenarios):
    hull = build_ldes_hull(short_config.ldes, 4)
    train = [s.window(0, 96) for s in week_scenarios[:3]]
    orig = [solve_oed(short_config, s, hull) for s in train]
    st = SystemState.initial(short_config)
    _, batch = regenerate_references(FaultEvent(0, 24, "wind", 1.0), st, short_config, train, hull)
    for a, b in zip(orig, batch.bundles):
        np.testing.assert_allclose(b.h, a.h, atol=1e-6)
    k = 40
    st = SystemState(k, orig[0].e[k - 1], orig[0].h[k - 1])
    _, batch = regenerate_references(FaultEvent(k, 24, "wind", 1.0), st, short_config, train[:1], hull)
    assert batch.bundles[0].total_cost == pytest.approx(orig[0].period_cost[k:].sum(), rel=1e-6, abs=1e-6)


def test_fault_run_logs_window_and_regeneration(short_config, week_scenarios):
    hull = build_ldes_hull(short_config.ldes, 4)
    train = [s.window(0, 96) for s in week_scenarios[:3]]
    bundles = [solve_oed(short_config, s, hull) for s in train]
    ds = build_dataset(train, [b.h for b in bundles], short_config.ldes.soc_max)
    ref = ReferenceSource("average", dataset=ds)
    ev = FaultEvent(30, 24, "wind", 0.0)
    log = run_online(short_config, week_scenarios[3].window(0, 96), hull, "sed", ref,
                     faults=[ev], training=train, theta=0.05)
    assert log.fault_active[30:54].all() and not log.fault_active[:30].any() and not log.fault_active[54:].any()
    assert log.events and log.events[0]["hour"] == 30 and log.events[0]["regenerated"]
    assert ref.dataset is not ds
