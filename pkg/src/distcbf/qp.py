"""Strictly convex QPs with a diagonal Hessian and linear inequalities.

    minimise  0.5 * sum_k w_k v_k**2   subject to  A v <= b

:func:`solve` is a dual active-set method (Goldfarb and Idnani).  It starts
from the unconstrained minimiser ``v = 0`` and adds violated rows one at a
time, so no feasible starting point is needed and an infeasible problem is
detected when a violated row cannot be reached by any dual step.

The module also builds the three problems the controller works with: one
agent's local problem, the joint problem over all controls and mismatch
variables, and the original coupled problem over the controls alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constraints import (
    BlockStack,
    ConstraintBlock,
    ScenarioParams,
    assemble_all,
    g_clf,
    g_conn,
    g_inter,
    g_obs,
    hV_all,
)
from .graph import ConnectivityInfo, neighbors

FEAS_TOL = 1e-8
ZERO_ROW = 1e-14


class InfeasibleError(RuntimeError):
    """Raised by the convenience wrappers when a QP has no feasible point."""

    def __init__(self, message: str, solution: "QPSolution | None" = None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class QPInstance:
    weights: np.ndarray
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if A.ndim != 2:
            A = A.reshape(-1, w.size)
        if A.shape[1] != w.size:
            raise ValueError(f"A has {A.shape[1]} columns, expected {w.size}")
        if A.shape[0] != b.size:
            raise ValueError(f"A has {A.shape[0]} rows but b has {b.size} entries")
        if not np.all(w > 0.0):
            raise ValueError("all quadratic weights must be positive")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b)) and np.all(np.isfinite(w))):
            raise ValueError("QP data must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.weights.size

    def objective(self, v) -> float:
        v = np.asarray(v, dtype=float)
        return 0.5 * float(np.sum(self.weights * v * v))


@dataclass(frozen=True)
class QPSolution:
    v: np.ndarray
    duals: np.ndarray
    status: str
    kkt_residual: float
    iterations: int = 0
    active: tuple[int, ...] = ()
    worst_row: int = -1
    worst_violation: float = 0.0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "solved"


def kkt_residual(instance: QPInstance, solution) -> float:
    """Largest of stationarity, primal violation, dual negativity and complementarity."""
    v = np.asarray(solution.v if hasattr(solution, "v") else solution[0], dtype=float)
    mu = np.asarray(solution.duals if hasattr(solution, "duals") else solution[1], dtype=float)
    r = instance.A @ v - instance.b
    stat = instance.weights * v + instance.A.T @ mu
    parts = [
        float(np.max(np.abs(stat))) if stat.size else 0.0,
        float(max(0.0, np.max(r))) if r.size else 0.0,
        float(max(0.0, -np.min(mu))) if mu.size else 0.0,
        float(np.max(np.abs(mu * r))) if r.size else 0.0,
    ]
    return max(parts)


def solve(instance: QPInstance, tol: float = 1e-12, max_iter: int | None = None) -> QPSolution:
    """Global minimiser by the Goldfarb-Idnani dual active-set method.

    Rows with a zero coefficient vector are checked for ``0 <= b`` and
    otherwise ignored.  Among violated rows the most violated enters first,
    ties going to the lowest index.  An infeasible instance returns
    ``status="infeasible"`` together with the most violated row at the last
    iterate.
    """
    w = instance.weights
    A, b = instance.A, instance.b
    n, mrows = instance.dim, b.size
    scale = 1.0 / np.sqrt(w)
    At = A * scale[None, :]  # constraints on q = sqrt(w) * v
    norms = np.sqrt(np.sum(At * At, axis=1))
    live = norms > ZERO_ROW * max(1.0, float(np.max(norms)) if mrows else 1.0)
    for j in np.flatnonzero(~live):
        if b[j] < -FEAS_TOL:
            return QPSolution(np.zeros(n), np.zeros(mrows), "infeasible", np.inf, 0, (), int(j), float(-b[j]),
                              f"row {j} reads 0 <= {b[j]:.6g}")
    nrm = np.where(live, norms, 1.0)
    Nn = -(At / nrm[:, None])  # normals of n_j' q >= d_j
    d = -b / nrm
    max_iter = max_iter if max_iter is not None else 10 * (n + mrows) + 50

    q = np.zeros(n)
    active: list[int] = []
    u = np.zeros(0)
    it = 0
    while mrows:
        s = Nn @ q - d
        s[~live] = 0.0
        p = int(np.argmin(s))
        if s[p] >= -tol:
            break
        up = 0.0
        while True:
            it += 1
            if it > max_iter:
                return _finish(instance, q * scale, active, u, nrm, "max-iter", it)
            npv = Nn[p]
            if active:
                Q, R = np.linalg.qr(Nn[active].T)
                proj = Q.T @ npv
                z = npv - Q @ proj
                r = np.linalg.solve(R, proj)
            else:
                z = npv.copy()
                r = np.zeros(0)
            zn = float(z @ npv)
            t2 = -float(npv @ q - d[p]) / zn if float(np.linalg.norm(z)) > 1e-12 else np.inf
            t1, k = np.inf, -1
            for idx in range(len(active)):
                if r[idx] > 1e-14:
                    ratio = u[idx] / r[idx]
                    if ratio < t1:
                        t1, k = ratio, idx
            t = min(t1, t2)
            if not np.isfinite(t):
                res = Nn @ q - d
                res[~live] = 0.0
                worst = int(np.argmin(res))
                sol = _finish(instance, q * scale, active, u, nrm, "infeasible", it)
                viol = float(-(res[worst]) * nrm[worst])
                return QPSolution(sol.v, sol.duals, "infeasible", sol.kkt_residual, it, sol.active, worst, viol,
                                  f"row {p} cannot be satisfied together with rows {sorted(active)}")
            if np.isfinite(t2):
                q = q + t * z
            if active:
                u = u - t * r
            up += t
            if t == t2:
                active.append(p)
                u = np.append(u, up)
                break
            # drop the blocking row and retry with the same violated row
            del active[k]
            u = np.delete(u, k)
    return _finish(instance, q * scale, active, u, nrm, "solved", it)


def _finish(instance, v, active, u, nrm, status, it) -> QPSolution:
    mu = np.zeros(instance.b.size)
    for idx, j in enumerate(active):
        mu[j] = u[idx] / nrm[j]
    res = kkt_residual(instance, (v, mu))
    return QPSolution(v, mu, status, res, it, tuple(sorted(active)))


def brute_force_oracle(instance: QPInstance, tol: float = 1e-10, max_iter: int = 200000,
                       y0: np.ndarray | None = None) -> np.ndarray:
    """Minimiser by accelerated projected gradient on the dual.

    Independent of :func:`solve`: it maximises the concave dual
    ``-0.5 * y' A W^-1 A' y - b' y`` over ``y >= 0`` with a constant step
    ``1/L`` and restarts, stopping once the projected-gradient stationarity
    of the dual drops below ``tol``.
    """
    winv = 1.0 / instance.weights
    A, b = instance.A, instance.b
    if b.size == 0:
        return np.zeros(instance.dim)
    H = (A * winv[None, :]) @ A.T
    L = max(float(np.linalg.norm(H, 2)), 1e-300)
    y = np.zeros(b.size) if y0 is None else np.maximum(np.asarray(y0, float), 0.0)
    yk, tk, prev = y.copy(), 1.0, y.copy()
    for _ in range(max_iter):
        grad = H @ yk + b  # gradient of the dual objective being minimised
        y_new = np.maximum(yk - grad / L, 0.0)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        if float((y_new - prev) @ (yk - y_new)) > 0.0:  # restart when momentum points uphill
            t_new, yk = 1.0, y_new.copy()
        else:
            yk = y_new + ((tk - 1.0) / t_new) * (y_new - prev)
        prev, tk = y_new, t_new
        g = H @ y_new + b
        pg = np.where(y_new > 0.0, g, np.minimum(g, 0.0))
        if float(np.max(np.abs(pg))) <= tol:
            break
    return -winv * (A.T @ prev)


# ---------------------------------------------------------------------------
# local problem


def solve_local(block: ConstraintBlock, z_i) -> np.ndarray:
    """Agent's control: min 0.5*|u|^2 subject to ``Psi u <= -Theta z - phi``."""
    sol = solve_local_full(block, z_i)
    return sol.v


def solve_local_full(block: ConstraintBlock, z_i) -> QPSolution:
    z = np.asarray(z_i, dtype=float)
    rhs = -(block.Theta @ z) - block.phi
    if np.all(rhs >= 0.0):
        m = block.Psi.shape[1]
        return QPSolution(np.zeros(m), np.zeros(rhs.size), "solved", 0.0)
    inst = QPInstance(np.ones(block.Psi.shape[1]), block.Psi, rhs)
    sol = solve(inst)
    if not sol.ok:
        raise InfeasibleError(f"local problem of agent {block.i} is {sol.status}: worst row "
                              f"{sol.worst_row} violated by {sol.worst_violation:.3e}", sol)
    return sol


# ---------------------------------------------------------------------------
# joint problem


@dataclass(frozen=True)
class JointLayout:
    """Positions of controls and mismatch variables in the joint vector.

    Controls come first, agent by agent.  Then one pair variable per ordered
    pair ``(i, j)``, grouped by ``i`` with ``j`` ascending, then ``N``
    connectivity and ``N`` target variables.
    """

    N: int
    m: int

    @property
    def n_u(self) -> int:
        return self.N * self.m

    @property
    def n_pair(self) -> int:
        return self.N * (self.N - 1)

    @property
    def n_z(self) -> int:
        return self.n_pair + 2 * self.N

    @property
    def size(self) -> int:
        return self.n_u + self.n_z

    def u(self, i: int) -> slice:
        return slice(i * self.m, (i + 1) * self.m)

    def pair(self, i: int, j: int) -> int:
        """Index of agent ``i``'s pair variable for the link with ``j`` inside ``z``."""
        return i * (self.N - 1) + (j if j < i else j - 1)

    def conn(self, i: int) -> int:
        return self.n_pair + i

    def clf(self, i: int) -> int:
        return self.n_pair + self.N + i

    def selection(self, i: int) -> np.ndarray:
        """Indices into ``z`` of agent ``i``'s local mismatch vector."""
        idx = []
        for j in range(self.N):
            if j != i:
                idx += [self.pair(i, j), self.pair(j, i)]
        idx += [self.conn(j) for j in range(self.N)]
        idx += [self.clf(j) for j in range(self.N)]
        return np.array(idx, dtype=int)

    def pair_matrix(self, z: np.ndarray) -> np.ndarray:
        """``out[i, j]`` = agent ``i``'s pair variable for ``j`` (zero diagonal)."""
        out = np.zeros((self.N, self.N))
        for i in range(self.N):
            for j in range(self.N):
                if i != j:
                    out[i, j] = z[self.pair(i, j)]
        return out

    def local_z(self, i: int, z: np.ndarray) -> np.ndarray:
        return np.asarray(z)[self.selection(i)]


@dataclass(frozen=True)
class JointSystem:
    """All agents' rows over the joint variables: ``Psi_blk w + Theta_g z + phi <= 0``."""

    layout: JointLayout
    Psi: np.ndarray  # (N*M, N*m) block diagonal
    Theta: np.ndarray  # (N*M, n_z)
    phi: np.ndarray  # (N*M,)
    blocks: BlockStack
    xi: float

    @property
    def A(self) -> np.ndarray:
        return np.hstack([self.Psi, self.Theta])

    def instance(self) -> QPInstance:
        lay = self.layout
        weights = np.concatenate([np.ones(lay.n_u), np.full(lay.n_z, self.xi)])
        return QPInstance(weights, self.A, -self.phi)

    def g(self, w: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.Psi @ w + self.Theta @ z + self.phi


def build_joint(blocks: BlockStack, xi: float) -> JointSystem:
    N = len(blocks)
    m = blocks.Psi.shape[2]
    M = blocks.Psi.shape[1]
    lay = JointLayout(N, m)
    Psi = np.zeros((N * M, N * m))
    Theta = np.zeros((N * M, lay.n_z))
    for i in range(N):
        rows = slice(i * M, (i + 1) * M)
        Psi[rows, lay.u(i)] = blocks.Psi[i]
        np.add.at(Theta, (np.arange(i * M, (i + 1) * M)[:, None], lay.selection(i)[None, :]), blocks.Theta[i])
    return JointSystem(lay, Psi, Theta, blocks.phi.reshape(-1).copy(), blocks, float(xi))


def joint_system(x, params: ScenarioParams, conn: ConnectivityInfo) -> JointSystem:
    return build_joint(assemble_all(x, params, conn), params.xi)


@dataclass(frozen=True)
class CentralSolution:
    u: np.ndarray  # (N, m)
    z: np.ndarray  # joint mismatch vector
    duals: np.ndarray  # (N, M)
    solution: QPSolution
    system: JointSystem
    original_violation: float = 0.0
    details: dict = field(default_factory=dict)


def original_violation(x, u, params: ScenarioParams, conn: ConnectivityInfo) -> tuple[float, dict]:
    """Largest violation of the coupled problem's constraints by controls ``u``."""
    xs = np.asarray(x, float)
    us = np.asarray(u, float).reshape(params.N, params.m)
    P = params.dynamics.position(xs)
    edges = neighbors(P, params.comm)
    worst = {}
    pair = max([-g_inter(us[i], us[j], xs[i], xs[j], params) for i, j in edges.pairs], default=-np.inf)
    worst["inter"] = pair
    worst["obs"] = max([-g_obs(us[i], xs[i], k, params) for i in range(params.N) for k in range(params.K)],
                       default=-np.inf)
    worst["conn"] = -g_conn(xs, us, params, conn) if params.N > 1 else -np.inf
    worst["clf"] = g_clf(xs, us, params)
    worst["bounds"] = float(np.max(np.abs(us))) - params.c
    return max(0.0, max(worst.values())), worst


def solve_centralized(x, params: ScenarioParams, conn: ConnectivityInfo,
                      blocks: BlockStack | None = None, check: bool = True) -> CentralSolution:
    """Joint optimiser over all controls and mismatch variables.

    With ``check`` the returned controls are also verified against the
    original coupled constraints; ``original_violation`` holds the largest
    violation found.  Infeasibility raises :class:`InfeasibleError`.
    """
    blocks = blocks if blocks is not None else assemble_all(x, params, conn)
    system = build_joint(blocks, params.xi)
    sol = solve(system.instance())
    if not sol.ok:
        N, M = len(blocks), blocks.Psi.shape[1]
        agent, row = divmod(sol.worst_row, M) if sol.worst_row >= 0 else (-1, -1)
        raise InfeasibleError(f"joint problem is {sol.status}: agent {agent} row {row} violated by "
                              f"{sol.worst_violation:.3e}", sol)
    lay = system.layout
    u = sol.v[:lay.n_u].reshape(params.N, params.m)
    z = sol.v[lay.n_u:]
    viol, details = original_violation(x, u, params, conn) if check else (0.0, {})
    return CentralSolution(u, z, sol.duals.reshape(params.N, -1), sol, system, viol, details)


def original_instance(x, params: ScenarioParams, conn: ConnectivityInfo) -> QPInstance:
    """The coupled problem over the stacked controls, rows in ``<= 0`` form."""
    xs = np.asarray(x, float)
    N, m = params.N, params.m
    dyn = params.dynamics
    P = dyn.position(xs)
    Fs, Gs = dyn.F_all(xs), dyn.G_all(xs)
    rows, rhs = [], []

    def grad_full(gp):
        g = np.zeros(dyn.n)
        g[: dyn.l] = gp
        return g

    for i, j in neighbors(P, params.comm).pairs:
        gi = grad_full(2.0 * (P[i] - P[j]))
        r = np.zeros(N * m)
        r[i * m:(i + 1) * m] = -(gi @ Gs[i])
        r[j * m:(j + 1) * m] = gi @ Gs[j]
        h = float((P[i] - P[j]) @ (P[i] - P[j])) - params.comm.d0 ** 2
        rows.append(r)
        rhs.append(gi @ Fs[i] - gi @ Fs[j] + params.alpha1(h))
    C, R = params.obstacle_centers, params.obstacle_radii
    for i in range(N):
        for k in range(params.K):
            g = grad_full(2.0 * (P[i] - C[k]))
            r = np.zeros(N * m)
            r[i * m:(i + 1) * m] = -(g @ Gs[i])
            h = float((P[i] - C[k]) @ (P[i] - C[k])) - R[k] ** 2
            rows.append(r)
            rhs.append(g @ Fs[i] + params.alpha2(h))
    if N > 1:
        r = np.zeros(N * m)
        for i in range(N):
            g = grad_full(conn.grad[i])
            r[i * m:(i + 1) * m] = -(g @ Gs[i])
        rows.append(r)
        rhs.append(sum(grad_full(conn.grad[i]) @ Fs[i] for i in range(N))
                   + params.gamma4 * (conn.lambda2 - params.chi))
    _, hv, vg = hV_all(xs, params)
    r = np.zeros(N * m)
    for i in range(N):
        r[i * m:(i + 1) * m] = vg[i] @ Gs[i]
    rows.append(r)
    rhs.append(-(float(np.sum(vg * Fs)) + params.gamma3 * float(hv.sum())))
    eye = np.eye(N * m)
    A = np.vstack([np.array(rows).reshape(-1, N * m), eye, -eye])
    b = np.concatenate([np.array(rhs, dtype=float), np.full(2 * N * m, params.c)])
    return QPInstance(np.ones(N * m), A, b)


def solve_original(x, params: ScenarioParams, conn: ConnectivityInfo) -> np.ndarray:
    """Minimum-norm controls of the coupled problem (no mismatch variables)."""
    sol = solve(original_instance(x, params, conn))
    if not sol.ok:
        raise InfeasibleError(f"coupled problem is {sol.status}: row {sol.worst_row} violated by "
                              f"{sol.worst_violation:.3e}", sol)
    return sol.v.reshape(params.N, params.m)
