"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed again in the terminal
summary, so ``pytest tests/test_acceptance.py -s`` gives the whole report.
"""

import numpy as np
import pytest

from distcbf.cli_io import (
    check_continuity,
    check_decomposition,
    check_gradients,
    frozen_control_gap,
    random_qp,
)
from distcbf.constraints import assemble_all
from distcbf.graph import lambda2_with_grad, neighbors
from distcbf.qp import brute_force_oracle, build_joint, kkt_residual, solve
from distcbf.runtime import LocalBlocks, Network, network_fast_update, tick_exchange
from distcbf.saddle import FastState, fast_step, merit_W


def _scenario_checks(result, params):
    rows = result.metrics
    steps = result.schedule.total_steps
    xs = result.final_x
    final = np.einsum("ia,ab,ib->i", xs, params.Sigma, xs)
    min_pair = min(r.min_pair_dist for r in rows)
    min_clear = min(r.min_obs_clearance for r in rows)
    min_lam = min(r.lambda2_binary for r in rows)
    checks = {
        "completed": not result.aborted and len(rows) == steps + 1,
        "in_target": bool(np.all(final <= 1.0)),
        "separation": min_pair >= params.comm.d0 - 1e-6,
        "clearance": min_clear >= -1e-6,
        "connected": min_lam > 0.0,
    }
    detail = (f"final x'Sx={np.array2string(final, precision=3)} min_pair={min_pair:.4f} "
              f"min_clearance={min_clear:.2e} min_lambda2_bin={min_lam:.3f} rows={len(rows)}")
    return checks, detail


@pytest.mark.slow
@pytest.mark.parametrize("number, mode", [(1, "distributed"), (2, "centralized")])
def test_scenario_reproduction(number, mode, shipped, full_run, criterion):
    result, seconds = full_run(mode)
    checks, detail = _scenario_checks(result, shipped)
    failed = [k for k, ok in checks.items() if not ok]
    title = f"shipped scenario, {mode} mode, full horizon"
    criterion(number, title, not failed, f"{detail} runtime={seconds:.0f}s failed={failed}")
    assert not failed, detail


def test_frozen_state_equivalence(shipped, criterion):
    gap, viol, _, _ = frozen_control_gap(shipped)
    passed = gap <= 1e-3 and viol <= 1e-7
    criterion(3, "local QPs at fast equilibrium vs joint optimiser", passed,
              f"control gap={gap:.2e} (<=1e-3), original-constraint violation={viol:.2e} (<=1e-7)")
    assert gap <= 1e-3
    assert viol <= 1e-7


def test_merit_monotone(shipped, rng, criterion):
    conn = lambda2_with_grad(shipped.x0, shipped.comm)
    system = build_joint(assemble_all(shipped.x0, shipped, conn), shipped.xi)
    dt = shipped.tau / 50.0
    budget = 200_000
    worst_rise, unconverged, steps_used = 0.0, 0, []
    for _ in range(10):
        f0 = FastState.zeros(system)
        nw, nz, ny = f0.w.size, f0.z.size, f0.y.size
        v = rng.normal(size=nw + nz + ny)
        v *= rng.uniform(0.0, 1.0) / np.linalg.norm(v)
        fast = FastState(v[:nw], v[nw:nw + nz], np.abs(v[nw + nz:]))
        assert fast.norm() <= 1.0
        W = merit_W(system, fast).W
        for k in range(budget):
            fast = fast_step(system, fast, dt, shipped.tau)
            W_new = merit_W(system, fast).W
            worst_rise = max(worst_rise, W_new - W)
            W = W_new
            if W < 1e-6:
                steps_used.append(k + 1)
                break
        else:
            unconverged += 1
    passed = worst_rise <= 1e-9 and unconverged == 0
    criterion(4, "merit W non-increasing and below 1e-6", passed,
              f"largest step rise={worst_rise:.2e} (<=1e-9), unconverged={unconverged}/10, "
              f"max steps={max(steps_used, default=0)} at dt=tau/50")
    assert worst_rise <= 1e-9
    assert unconverged == 0


def test_qp_oracle_battery(rng, criterion):
    worst_dv, worst_kkt, wrong = 0.0, 0.0, 0
    for _ in range(100):
        inst = random_qp(rng)
        assert inst.dim <= 6 and inst.b.size <= 12
        sol = solve(inst)
        if not sol.ok:
            wrong += 1
            continue
        worst_dv = max(worst_dv, float(np.linalg.norm(sol.v - brute_force_oracle(inst))))
        worst_kkt = max(worst_kkt, kkt_residual(inst, sol))
    for _ in range(20):
        if solve(random_qp(rng, feasible=False)).ok:
            wrong += 1
    passed = worst_dv <= 1e-6 and worst_kkt <= 1e-8 and wrong == 0
    criterion(5, "QP solver vs oracle on 100 random instances", passed,
              f"max |dv|={worst_dv:.2e} (<=1e-6), max KKT={worst_kkt:.2e} (<=1e-8), misclassified={wrong}")
    assert worst_dv <= 1e-6
    assert worst_kkt <= 1e-8
    assert wrong == 0


def test_gradient_suite(shipped, rng, criterion):
    results = check_gradients(rng, shipped, lambda2_with_grad, samples=50)
    passed = all(r.passed for r in results)
    criterion(6, "analytic gradients vs central differences", passed,
              ", ".join(f"{r.name}={r.worst:.2e}" for r in results) + " (<=1e-4)")
    for r in results:
        assert r.passed, r


def test_topology_transition_continuity(shipped, rng, criterion):
    (res,) = check_continuity(rng, shipped, assemble_all, samples=50)
    criterion(7, "block entries across the communication radius", res.passed,
              f"largest entry change={res.worst:.2e} (<=1e-7) over 50 pairs at d_c +- 1e-9")
    assert res.passed, res


def test_decomposition_identities(shipped, rng, criterion):
    results = check_decomposition(rng, shipped, assemble_all, samples=100)
    passed = all(r.passed for r in results)
    criterion(8, "local rows sum to the coupled conditions", passed,
              ", ".join(f"{r.name}={r.worst:.2e}" for r in results) + " (<=1e-10)")
    for r in results:
        assert r.passed, r


def test_tick_equals_monolithic_step(shipped, rng, criterion):
    x = shipped.x0
    conn = lambda2_with_grad(x, shipped.comm)
    blocks = assemble_all(x, shipped, conn)
    system = build_joint(blocks, shipped.xi)
    edges = neighbors(x, shipped.comm)
    assert 0 < len(edges.pairs) < shipped.N * (shipped.N - 1) // 2  # some links present, some absent
    lb = LocalBlocks.build(blocks, edges)
    f0 = FastState.zeros(system)
    fast = FastState(rng.normal(size=f0.w.size), rng.normal(size=f0.z.size), np.abs(rng.normal(size=f0.y.size)))
    dt = shipped.schedule.dt_fast
    net = Network(shipped, x)
    net.load_joint(fast)
    tick_exchange(net, edges)
    network_fast_update(net, lb, dt / shipped.tau)
    ref = fast_step(system, fast, dt, shipped.tau)
    gap = net.to_joint().max_abs_diff(ref)
    criterion(9, "one message-passing tick vs joint fast step", gap <= 1e-12, f"max abs diff={gap:.2e} (<=1e-12)")
    assert gap <= 1e-12
