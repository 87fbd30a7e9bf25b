import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distcbf.cli_io import random_qp
from distcbf.constraints import RowLayout, ScenarioParams, ZLayout, ConstraintBlock, assemble_all
from distcbf.graph import CommParams, lambda2_with_grad
from distcbf.qp import (
    InfeasibleError,
    QPInstance,
    QPSolution,
    brute_force_oracle,
    kkt_residual,
    solve,
    solve_centralized,
    solve_local,
    solve_original,
)

COMM = CommParams(d_c=0.9, eps_c=0.1, d0=0.1)


def test_unconstrained():
    inst = QPInstance(np.ones(3), np.zeros((0, 3)), np.zeros(0))
    sol = solve(inst)
    assert sol.ok
    np.testing.assert_array_equal(sol.v, 0.0)
    np.testing.assert_array_equal(brute_force_oracle(inst), 0.0)


def test_single_active_row():
    inst = QPInstance(np.ones(3), [[-1.0, 0.0, 0.0]], [-1.0])
    sol = solve(inst)
    np.testing.assert_allclose(sol.v, [1.0, 0.0, 0.0], atol=1e-14)
    np.testing.assert_allclose(sol.duals, [1.0], atol=1e-14)
    np.testing.assert_allclose(brute_force_oracle(inst), [1.0, 0.0, 0.0], atol=1e-9)


def test_random_battery(rng):
    for _ in range(100):
        inst = random_qp(rng)
        sol = solve(inst)
        assert sol.ok
        assert kkt_residual(inst, sol) <= 1e-8
        assert np.all(inst.A @ sol.v <= inst.b + 1e-8)
        assert np.all(sol.duals >= 0.0)
        assert np.linalg.norm(sol.v - brute_force_oracle(inst)) <= 1e-6


def test_infeasible_is_reported(rng):
    for _ in range(20):
        sol = solve(random_qp(rng, feasible=False))
        assert sol.status == "infeasible"
        assert sol.worst_row >= 0 and sol.worst_violation > 0.0


def test_zero_rows_are_ignored_unless_violated():
    inst = QPInstance(np.ones(2), [[0.0, 0.0], [-1.0, 0.0]], [0.0, -0.5])
    sol = solve(inst)
    np.testing.assert_allclose(sol.v, [0.5, 0.0])
    assert not solve(QPInstance(np.ones(2), [[0.0, 0.0]], [-1.0])).ok


def test_oracle_idempotent_from_optimum(rng):
    inst = random_qp(rng)
    sol = solve(inst)
    again = brute_force_oracle(inst, y0=sol.duals)
    assert np.linalg.norm(again - sol.v) <= 1e-9


def test_oracle_beats_random_feasible_points(rng):
    for _ in range(5):
        d = 3
        A = rng.normal(size=(6, d))
        v0 = rng.normal(size=d)
        b = A @ v0 + rng.uniform(0.0, 1.0, size=6)
        inst = QPInstance(rng.uniform(0.5, 2.0, size=d), A, b)
        best = inst.objective(brute_force_oracle(inst))
        samples = v0 + rng.normal(scale=2.0, size=(20000, d))
        feasible = samples[np.all(samples @ A.T <= b, axis=1)][:1000]
        assert len(feasible) >= 100
        for v in feasible:
            assert best <= inst.objective(v) + 1e-12


def test_kkt_residual_examples():
    inst = QPInstance(np.ones(2), [[-1.0, 0.0]], [-1.0])
    exact = QPSolution(np.array([1.0, 0.0]), np.array([1.0]), "solved", 0.0)
    assert kkt_residual(inst, exact) <= 1e-12
    bumped = QPSolution(np.array([1.0 - 1e-3, 0.0]), np.array([1.0]), "solved", 0.0)
    assert kkt_residual(inst, bumped) >= 1e-4


def test_instance_validation():
    with pytest.raises(ValueError):
        QPInstance(np.array([1.0, 0.0]), np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        QPInstance(np.ones(2), np.zeros((2, 2)), np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100.0))
def test_scaling_rows_keeps_argmin_and_scales_duals(seed, alpha):
    inst = random_qp(np.random.default_rng(seed))
    base = solve(inst)
    scaled = solve(QPInstance(inst.weights, alpha * inst.A, alpha * inst.b))
    assert np.max(np.abs(base.v - scaled.v)) <= 1e-8 * max(1.0, np.max(np.abs(base.v)))
    np.testing.assert_allclose(alpha * scaled.duals, base.duals, rtol=1e-6, atol=1e-8)


# -- controller problems -------------------------------------------------------


def block_with(row_psi, row_phi, m=2):
    """Single-agent block: one extra row, empty connectivity and target rows, bounds at 2."""
    rows = RowLayout(1, 1, m)
    Psi = np.vstack([np.reshape(row_psi, (1, m)), np.zeros((2, m)), np.eye(m), -np.eye(m)])
    phi = np.concatenate([row_phi, [0.0, 0.0], np.full(2 * m, -2.0)])
    return ConstraintBlock(0, Psi, np.zeros((phi.size, 2)), phi, rows, ZLayout(0, 1))


def test_local_examples():
    slack = block_with([[1.0, 0.0]], [-1.0])
    np.testing.assert_array_equal(solve_local(slack, np.zeros(2)), 0.0)
    tight = block_with([[-1.0, 0.0]], [0.5])
    np.testing.assert_allclose(solve_local(tight, np.zeros(2)), [0.5, 0.0], atol=1e-14)
    impossible = block_with([[-1.0, 0.0]], [3.0])  # needs u_1 >= 3 > c
    with pytest.raises(InfeasibleError, match="worst row"):
        solve_local(impossible, np.zeros(2))


def test_local_matches_generic_solver(shipped, rng):
    conn = lambda2_with_grad(shipped.x0, shipped.comm)
    bs = assemble_all(shipped.x0, shipped, conn)
    for _ in range(20):
        i = int(rng.integers(shipped.N))
        blk = bs.block(i)
        z = rng.normal(scale=0.3, size=blk.Theta.shape[1])
        ref = solve(QPInstance(np.ones(2), blk.Psi, -(blk.Theta @ z) - blk.phi))
        if not ref.ok:
            continue
        u = solve_local(blk, z)
        np.testing.assert_allclose(u, ref.v, atol=1e-12)
        assert np.max(np.abs(u)) <= shipped.c + 1e-8


def test_centralized_at_goal_is_zero():
    x = np.array([[0.0, 0.0], [0.3, 0.0], [0.0, 0.3]])
    p = ScenarioParams(comm=COMM, x0=x)
    conn = lambda2_with_grad(x, COMM)
    assert conn.lambda2 > 10 * p.chi
    cs = solve_centralized(x, p, conn)
    np.testing.assert_array_equal(cs.u, 0.0)
    np.testing.assert_array_equal(cs.z, 0.0)


def test_two_agent_toy_against_coupled_problem():
    # both agents outside their targets and close enough that the pair barrier binds
    x = np.array([[1.0, 0.2], [1.0, -0.15]])
    conn = lambda2_with_grad(x, COMM)
    gaps = []
    for xi in (0.5, 1e-2, 1e-6):
        p = ScenarioParams(comm=COMM, x0=x, gamma1=0.2, gamma3=5.0, xi=xi)
        cs = solve_centralized(x, p, conn)
        u_orig = solve_original(x, p, conn)
        assert cs.original_violation <= 1e-7
        # the mismatch penalty can only cost control effort, never feasibility
        assert 0.5 * np.sum(u_orig ** 2) <= 0.5 * np.sum(cs.u ** 2) + 1e-12
        gaps.append(float(np.max(np.abs(cs.u - u_orig))))
    assert gaps[0] >= gaps[1] >= gaps[2]
    assert gaps[2] <= 1e-5


def test_shipped_start_feasible(shipped):
    conn = lambda2_with_grad(shipped.x0, shipped.comm)
    cs = solve_centralized(shipped.x0, shipped, conn)
    assert cs.solution.ok
    assert cs.original_violation <= 1e-7
    assert cs.solution.kkt_residual <= 1e-8


def test_local_at_joint_mismatch_reproduces_joint_controls(shipped):
    conn = lambda2_with_grad(shipped.x0, shipped.comm)
    cs = solve_centralized(shipped.x0, shipped, conn)
    lay = cs.system.layout
    for i in range(shipped.N):
        u = solve_local(cs.system.blocks.block(i), lay.local_z(i, cs.z))
        np.testing.assert_allclose(u, cs.u[i], atol=1e-6)
