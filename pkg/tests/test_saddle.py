import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distcbf.cli_io import random_qp
from distcbf.constraints import BlockStack, RowLayout, assemble_all, eval_local
from distcbf.graph import lambda2_with_grad, neighbors
from distcbf.qp import build_joint, solve, solve_centralized
from distcbf.saddle import (
    FastState,
    IntegrationError,
    NonConvergenceError,
    fast_derivatives,
    fast_step,
    generic_saddle_flow,
    integrate,
    merit_W,
    residual,
    run_to_equilibrium,
)


@pytest.fixture(scope="module")
def shipped_system(shipped):
    conn = lambda2_with_grad(shipped.x0, shipped.comm)
    return build_joint(assemble_all(shipped.x0, shipped, conn), shipped.xi)


@pytest.fixture(scope="module")
def shipped_equilibrium(shipped, shipped_system):
    fast, _ = run_to_equilibrium(shipped_system, None, shipped.tau, tol=1e-11)
    return fast


def toy_system():
    """min 0.5 v^2 subject to v >= 1, as a one-agent block with a single obstacle-like row."""
    rows = RowLayout(1, 1, 1)
    Psi = np.zeros((1, rows.size, 1))
    phi = np.zeros((1, rows.size))
    Psi[0, 0, 0], phi[0, 0] = -1.0, 1.0
    Psi[0, rows.bounds, 0] = [1.0, -1.0]
    phi[0, rows.bounds] = -100.0
    bs = BlockStack(Psi, np.zeros((1, rows.size, 2)), phi, np.zeros((1, 1)), np.zeros(1), rows)
    return build_joint(bs, 1.0)


def toy_state(v, y_row):
    y = np.zeros(5)
    y[0] = y_row
    return FastState(np.array([float(v)]), np.zeros(2), y)


def random_fast(rng, system, scale=1.0):
    f0 = FastState.zeros(system)
    return FastState(scale * rng.normal(size=f0.w.size), scale * rng.normal(size=f0.z.size),
                     scale * np.abs(rng.normal(size=f0.y.size)))


def test_derivatives_vanish_at_saddle(shipped, shipped_system, shipped_equilibrium):
    d = fast_derivatives(shipped_system, shipped_equilibrium, shipped.tau)
    assert np.max(np.abs(d.vector())) * shipped.tau <= 1e-10


def test_isolated_pair_only_decays(shipped, shipped_system, rng):
    lay = shipped_system.layout
    edges = neighbors(shipped.x0, shipped.comm)
    assert not edges.has(0, 1)
    fast = random_fast(rng, shipped_system)
    d = fast_derivatives(shipped_system, fast, shipped.tau)
    for i, j in ((0, 1), (1, 0)):
        k = lay.pair(i, j)
        assert d.z[k] == pytest.approx(-shipped.xi * fast.z[k] / shipped.tau, rel=1e-14)
    M = shipped_system.phi.size // shipped.N
    # agent 0's pair row for agent 1 is identically zero, so its dual does not move
    assert d.y[0 * M + 0] == 0.0
    assert d.y[1 * M + 0] == 0.0


def test_coupling_terms_telescope(shipped, shipped_system, rng):
    lay = shipped_system.layout
    y = np.abs(rng.normal(size=shipped_system.phi.size))
    coupling = shipped_system.Theta.T @ y
    assert abs(coupling[lay.conn(0):lay.conn(0) + shipped.N].sum()) <= 1e-12
    assert abs(coupling[lay.clf(0):lay.clf(0) + shipped.N].sum()) <= 1e-12


@pytest.mark.parametrize("scheme", ["euler", "semi_implicit"])
def test_fixed_point_is_kept(shipped, shipped_system, shipped_equilibrium, scheme):
    nxt = fast_step(shipped_system, shipped_equilibrium, shipped.tau / 10, shipped.tau, scheme)
    assert nxt.max_abs_diff(shipped_equilibrium) <= 1e-12


def test_free_variable_decays_exponentially(shipped, shipped_system):
    lay = shipped_system.layout
    k = lay.pair(0, 1)  # not coupled to any row at the shipped start
    f0 = FastState.zeros(shipped_system)
    z = f0.z.copy()
    z[k] = 1.0
    fast = FastState(f0.w, z, f0.y)
    dt = shipped.tau / 20.0
    fast = integrate(shipped_system, fast, dt, shipped.tau, 20, "euler")
    exact = math.exp(-shipped.xi * 20 * dt / shipped.tau)
    assert abs(fast.z[k] - exact) <= 0.02 * exact


@pytest.mark.parametrize("scheme", ["euler", "semi_implicit"])
def test_duals_stay_nonnegative(shipped, shipped_system, rng, scheme):
    fast = random_fast(rng, shipped_system)
    for _ in range(10_000):
        fast = fast_step(shipped_system, fast, shipped.tau / 20.0, shipped.tau, scheme)
        assert np.all(fast.y >= 0.0)


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_step_validation(shipped, shipped_system):
    f0 = FastState.zeros(shipped_system)
    with pytest.raises(ValueError):
        fast_step(shipped_system, f0, 0.0, shipped.tau)
    with pytest.raises(ValueError):
        fast_step(shipped_system, f0, 1e-4, shipped.tau, "rk4")
    bad = FastState(f0.w + np.inf, f0.z, f0.y)
    with pytest.raises(IntegrationError, match="w"):
        fast_step(shipped_system, bad, 1e-4, shipped.tau, "euler")


def test_integrate_matches_repeated_steps(shipped, shipped_system, rng):
    fast = random_fast(rng, shipped_system)
    ref = fast
    for _ in range(7):
        ref = fast_step(shipped_system, ref, shipped.tau / 10, shipped.tau)
    assert integrate(shipped_system, fast, shipped.tau / 10, shipped.tau, 7).max_abs_diff(ref) == 0.0


# -- merit function ---------------------------------------------------------------


def test_merit_zero_at_saddle(shipped_system, shipped_equilibrium):
    assert merit_W(shipped_system, shipped_equilibrium).W <= 1e-10


def test_toy_merit():
    system = toy_system()
    assert merit_W(system, toy_state(1.0, 1.0)).W == pytest.approx(0.0, abs=1e-15)
    rep = merit_W(system, toy_state(2.0, 1.0))
    assert rep.W > 0.0
    # primal v = 2 is slack with a positive dual: stationarity is off by one
    assert rep.stationarity_norm == pytest.approx(1.0)
    with_ref = merit_W(system, toy_state(2.0, 1.0), reference=toy_state(1.0, 1.0))
    assert with_ref.W == pytest.approx(rep.W + 0.5)


def test_toy_exclusion_set():
    system = toy_system()
    rep = merit_W(system, toy_state(1.0, 0.0))
    # bound rows are strictly satisfied with zero duals; the binding row is not excluded
    assert 0 not in rep.J
    assert {3, 4} <= set(rep.J)


def test_per_agent_merit_sums_to_total(shipped_system, rng):
    fast = random_fast(rng, shipped_system)
    rep = merit_W(shipped_system, fast)
    assert rep.per_agent.sum() == pytest.approx(rep.W, rel=1e-12)


def test_merit_non_increasing_along_flow(shipped, shipped_system, rng):
    fast = random_fast(rng, shipped_system, scale=0.3)
    W = merit_W(shipped_system, fast).W
    rises = 0
    for _ in range(2000):
        fast = fast_step(shipped_system, fast, shipped.tau / 50.0, shipped.tau)
        W_new = merit_W(shipped_system, fast).W
        rises += W_new > W + 1e-9
        W = W_new
    assert rises == 0
    assert W < 1e-6


# -- equilibrium ---------------------------------------------------------------------


def test_equilibrium_returns_immediately_from_saddle(shipped, shipped_system, shipped_equilibrium):
    fast, it = run_to_equilibrium(shipped_system, shipped_equilibrium, shipped.tau, tol=1e-10)
    assert it == 0
    assert fast is shipped_equilibrium


def test_toy_equilibrium():
    system = toy_system()
    fast, _ = run_to_equilibrium(system, toy_state(0.0, 0.0), 1.0, tol=1e-6)
    assert fast.w[0] == pytest.approx(1.0, abs=1e-5)
    assert fast.y[0] == pytest.approx(1.0, abs=1e-5)


def test_equilibrium_matches_joint_optimiser(shipped, shipped_system, shipped_equilibrium):
    conn = lambda2_with_grad(shipped.x0, shipped.comm)
    cs = solve_centralized(shipped.x0, shipped, conn)
    assert np.max(np.abs(shipped_equilibrium.w - cs.u.reshape(-1))) <= 1e-3
    assert np.max(np.abs(shipped_equilibrium.z - cs.z)) <= 1e-6


def test_equilibrium_is_kkt_point(shipped, shipped_system, shipped_equilibrium):
    lay = shipped_system.layout
    bs = shipped_system.blocks
    M = shipped_system.phi.size // shipped.N
    for i in range(shipped.N):
        g = eval_local(bs.block(i), shipped_equilibrium.w[lay.u(i)], lay.local_z(i, shipped_equilibrium.z))
        assert np.max(g) <= 1e-6
        assert abs(shipped_equilibrium.y[i * M:(i + 1) * M] @ g) <= 1e-6


def test_non_convergence_reports_merit(shipped, shipped_system, rng):
    with pytest.raises(NonConvergenceError) as info:
        run_to_equilibrium(shipped_system, random_fast(rng, shipped_system), shipped.tau, tol=1e-12, max_iter=100)
    assert info.value.W > 0.0
    assert residual(shipped_system, info.value.state) > 1e-12


# -- generic flow -----------------------------------------------------------------------


def test_generic_equality_toy():
    res = generic_saddle_flow([[1.0]], [0.0], E=[[1.0]], e=[1.0], dt=0.05)
    assert res.converged
    assert res.x[0] == pytest.approx(1.0, abs=1e-8)
    assert res.mu[0] == pytest.approx(-1.0, abs=1e-8)


def test_generic_inequality_toy():
    res = generic_saddle_flow([[1.0]], [0.0], A=[[-1.0]], b=[-1.0], dt=0.05)
    assert res.converged
    assert res.x[0] == pytest.approx(1.0, abs=1e-8)
    assert res.y[0] == pytest.approx(1.0, abs=1e-8)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_generic_flow_matches_qp_solver(seed):
    inst = random_qp(np.random.default_rng(seed))
    sol = solve(inst)
    H = np.diag(inst.weights)
    dt = 0.5 / max(np.max(inst.weights), np.linalg.norm(inst.A, 2) ** 2)
    res = generic_saddle_flow(H, None, A=inst.A, b=inst.b, dt=dt, steps=400_000, tol=1e-9)
    assert res.converged
    assert np.max(np.abs(res.x - sol.v)) <= 1e-4
