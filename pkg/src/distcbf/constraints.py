"""Barrier and Lyapunov-like constraints of the reach-avoid problem.

Scalar builders (``g_inter``, ``g_obs``, ``g_conn``, ``g_clf``) keep their
native sign: the barrier conditions hold when the value is non-negative and
the Lyapunov decrease condition holds when it is non-positive.  The per-agent
block returned by :func:`assemble_block` stores every row in ``<= 0`` form::

    g_i(u_i; z_i, x) = Psi_i @ u_i + Theta_i @ z_i + phi_i <= 0

with rows ordered as pair rows (other agents ascending), obstacle rows, the
connectivity row, the target row and finally ``2m`` control-bound rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .graph import CommParams, ConnectivityInfo, lambda2_with_grad, truncation_matrix


# ---------------------------------------------------------------------------
# dynamics


class ControlAffine:
    """``x' = F(x) + G(x) u`` with the position stored in the first ``l`` states."""

    n: int = 2
    m: int = 2
    l: int = 2

    def F(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def G(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def position(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., : self.l]

    def F_all(self, xs: np.ndarray) -> np.ndarray:
        return np.stack([self.F(x) for x in xs])

    def G_all(self, xs: np.ndarray) -> np.ndarray:
        return np.stack([self.G(x) for x in xs])


class SingleIntegrator(ControlAffine):
    """``x' = u`` in ``dim`` dimensions."""

    def __init__(self, dim: int = 2):
        self.n = self.m = self.l = int(dim)

    def F(self, x):
        return np.zeros(self.n)

    def G(self, x):
        return np.eye(self.n)

    def F_all(self, xs):
        return np.zeros((len(xs), self.n))

    def G_all(self, xs):
        return np.broadcast_to(np.eye(self.n), (len(xs), self.n, self.n))

    def __eq__(self, other):
        return type(other) is SingleIntegrator and other.n == self.n

    def __hash__(self):
        return hash(("SingleIntegrator", self.n))


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        if not self.radius > 0.0:
            raise ValueError(f"obstacle radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))


@dataclass(frozen=True)
class Schedule:
    """Time stepping of the closed loop.

    ``dt_fast = dt_slow / substeps`` must resolve the fast time scale, i.e.
    stay at or below ``tau / 10``.
    """

    dt_slow: float = 0.01
    substeps: int = 50
    horizon: float = 600.0
    warm_start: bool = True
    scheme: str = "semi_implicit"
    slow_method: str = "euler"

    def __post_init__(self):
        if not self.dt_slow > 0.0:
            raise ValueError("dt_slow must be positive")
        if int(self.substeps) < 10:
            raise ValueError("need at least 10 fast substeps per slow step")
        if not self.horizon >= 0.0:
            raise ValueError("horizon must be non-negative")
        if self.scheme not in ("euler", "semi_implicit"):
            raise ValueError(f"unknown fast scheme {self.scheme!r}")
        if self.slow_method not in ("euler", "rk4"):
            raise ValueError(f"unknown slow method {self.slow_method!r}")
        object.__setattr__(self, "substeps", int(self.substeps))

    @property
    def dt_fast(self) -> float:
        return self.dt_slow / self.substeps

    @property
    def total_steps(self) -> int:
        return int(round(self.horizon / self.dt_slow))

    def for_tau(self, tau: float) -> "Schedule":
        """Same schedule with enough substeps that ``dt_fast <= tau / 10``."""
        k = max(self.substeps, math.ceil(self.dt_slow / (tau / 10.0) - 1e-9))
        return Schedule(self.dt_slow, k, self.horizon, self.warm_start, self.scheme, self.slow_method)


def _arr_eq(a, b) -> bool:
    return np.shape(a) == np.shape(b) and bool(np.array_equal(a, b))


@dataclass(frozen=True, eq=False)
class ScenarioParams:
    """Everything the controller needs besides the current state.

    ``class_k1`` / ``class_k2`` optionally replace the linear decay terms
    ``gamma1 * h`` and ``gamma2 * h`` of the pair and obstacle barriers.
    """

    comm: CommParams
    x0: np.ndarray
    obstacles: tuple[Obstacle, ...] = ()
    Sigma: np.ndarray = field(default_factory=lambda: np.diag([2.0, 0.25]))
    epsilon: float = 0.5
    gamma1: float = 2.0
    gamma2: float = 2.0
    gamma3: float = 0.01
    gamma4: float = 1.0
    chi: float = 0.1
    xi: float = 0.5
    tau: float = 0.002
    c: float = 2.0
    schedule: Schedule = field(default_factory=Schedule)
    dynamics: ControlAffine = field(default_factory=SingleIntegrator)
    class_k1: Callable[[float], float] | None = None
    class_k2: Callable[[float], float] | None = None

    def __post_init__(self):
        x0 = np.array(self.x0, dtype=float)
        sig = np.array(self.Sigma, dtype=float)
        if x0.ndim != 2 or x0.shape[0] < 1:
            raise ValueError(f"x0 must be (N, n), got shape {x0.shape}")
        if x0.shape[1] != self.dynamics.n:
            raise ValueError(f"x0 has state dimension {x0.shape[1]}, dynamics expect {self.dynamics.n}")
        if not np.all(np.isfinite(x0)):
            raise ValueError("x0 has non-finite entries")
        if sig.shape != (self.dynamics.n, self.dynamics.n):
            raise ValueError(f"Sigma must be {self.dynamics.n}x{self.dynamics.n}")
        if np.max(np.abs(sig - sig.T)) > 1e-12 or np.min(np.linalg.eigvalsh(0.5 * (sig + sig.T))) <= 0.0:
            raise ValueError("Sigma must be symmetric positive definite")
        for name in ("gamma3", "gamma4", "xi", "tau", "c"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("gamma1", "gamma2"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        for ob in self.obstacles:
            if len(ob.center) != self.dynamics.l:
                raise ValueError("obstacle centre dimension does not match the position dimension")
        x0.flags.writeable = False
        sig.flags.writeable = False
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "Sigma", sig)
        object.__setattr__(self, "obstacles", tuple(self.obstacles))

    def __eq__(self, other):
        if not isinstance(other, ScenarioParams):
            return NotImplemented
        for name in self.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if not _arr_eq(a, b):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None

    @property
    def N(self) -> int:
        return self.x0.shape[0]

    @property
    def K(self) -> int:
        return len(self.obstacles)

    @property
    def m(self) -> int:
        return self.dynamics.m

    @property
    def n(self) -> int:
        return self.dynamics.n

    @property
    def M(self) -> int:
        """Rows of one agent's constraint block."""
        return self.N + self.K + 1 + 2 * self.m

    @property
    def obstacle_centers(self) -> np.ndarray:
        if not self.obstacles:
            return np.zeros((0, self.dynamics.l))
        return np.array([ob.center for ob in self.obstacles])

    @property
    def obstacle_radii(self) -> np.ndarray:
        return np.array([ob.radius for ob in self.obstacles], dtype=float)

    def alpha1(self, h):
        return self.class_k1(h) if self.class_k1 is not None else self.gamma1 * h

    def alpha2(self, h):
        return self.class_k2(h) if self.class_k2 is not None else self.gamma2 * h

    def replace(self, **changes) -> "ScenarioParams":
        kw = {name: getattr(self, name) for name in self.__dataclass_fields__}
        kw.update(changes)
        return ScenarioParams(**kw)


# ---------------------------------------------------------------------------
# z layout


@dataclass(frozen=True)
class ZLayout:
    """Index map of one agent's mismatch vector (length ``4N - 2``).

    For every other agent ``j`` (ascending) the pair ``(own, copy)`` holds the
    agent's own pair variable and its copy of ``j``'s variable for the same
    link; then ``N`` connectivity entries and ``N`` target entries, indexed by
    agent id.
    """

    i: int
    N: int

    @property
    def size(self) -> int:
        return 4 * self.N - 2

    def slot(self, j: int) -> int:
        if j == self.i or not 0 <= j < self.N:
            raise IndexError(f"no pair slot for j={j} in agent {self.i}'s layout")
        return j if j < self.i else j - 1

    def own(self, j: int) -> int:
        return 2 * self.slot(j)

    def copy(self, j: int) -> int:
        return 2 * self.slot(j) + 1

    def conn(self, j: int) -> int:
        return 2 * (self.N - 1) + j

    def clf(self, j: int) -> int:
        return 2 * (self.N - 1) + self.N + j

    @property
    def others(self) -> list[int]:
        return [j for j in range(self.N) if j != self.i]


@dataclass(frozen=True)
class RowLayout:
    """Row offsets inside one agent's block."""

    N: int
    K: int
    m: int

    @property
    def inter(self) -> slice:
        return slice(0, self.N - 1)

    @property
    def obs(self) -> slice:
        return slice(self.N - 1, self.N - 1 + self.K)

    @property
    def conn(self) -> int:
        return self.N - 1 + self.K

    @property
    def clf(self) -> int:
        return self.N + self.K

    @property
    def bounds(self) -> slice:
        return slice(self.N + self.K + 1, self.N + self.K + 1 + 2 * self.m)

    @property
    def size(self) -> int:
        return self.N + self.K + 1 + 2 * self.m


@dataclass(frozen=True)
class ConstraintBlock:
    i: int
    Psi: np.ndarray
    Theta: np.ndarray
    phi: np.ndarray
    rows: RowLayout
    layout: ZLayout

    @property
    def M(self) -> int:
        return self.phi.size


# ---------------------------------------------------------------------------
# scalar pieces


def V_i(x_i, params: ScenarioParams) -> tuple[float, np.ndarray]:
    """Clamped target function ``max(0, x' Sigma x - 1 + eps)`` and its gradient."""
    x = np.asarray(x_i, dtype=float)
    q = float(x @ params.Sigma @ x) - 1.0 + params.epsilon
    if q <= 0.0:
        return 0.0, np.zeros_like(x)
    return q, 2.0 * params.Sigma @ x


def hV_product(x_i, params: ScenarioParams) -> tuple[float, np.ndarray]:
    """``exp(-1/V) * V`` and its gradient; both vanish smoothly on the target set."""
    v, dv = V_i(x_i, params)
    if v == 0.0:
        return 0.0, dv
    h = math.exp(-1.0 / v)
    return h * v, h * (1.0 + 1.0 / v) * dv


def hV_all(xs: np.ndarray, params: ScenarioParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised ``(h_i, h_i V_i, grad(h_i V_i))`` for every agent."""
    xs = np.asarray(xs, dtype=float)
    q = np.einsum("ia,ab,ib->i", xs, params.Sigma, xs) - 1.0 + params.epsilon
    out = q > 0.0
    v = np.where(out, q, 1.0)
    h = np.where(out, np.exp(-1.0 / v), 0.0)
    hv = np.where(out, h * q, 0.0)
    coef = np.where(out, h * (1.0 + 1.0 / v), 0.0)
    grad = coef[:, None] * 2.0 * (xs @ params.Sigma.T)
    return h, hv, grad


def _pos_grad(params: ScenarioParams, gp: np.ndarray) -> np.ndarray:
    # lift a gradient w.r.t. position to one w.r.t. the full state
    n, l = params.dynamics.n, params.dynamics.l
    if n == l:
        return gp
    out = np.zeros(gp.shape[:-1] + (n,))
    out[..., :l] = gp
    return out


def h_inter(x_i, x_j, params: ScenarioParams) -> float:
    dyn = params.dynamics
    d = dyn.position(np.asarray(x_i, float)) - dyn.position(np.asarray(x_j, float))
    return float(d @ d) - params.comm.d0 ** 2


def g_inter(u_i, u_j, x_i, x_j, params: ScenarioParams) -> float:
    """Pair barrier condition; safe when the value is non-negative."""
    dyn = params.dynamics
    xi, xj = np.asarray(x_i, float), np.asarray(x_j, float)
    grad_i = _pos_grad(params, 2.0 * (dyn.position(xi) - dyn.position(xj)))
    fi = dyn.F(xi) + dyn.G(xi) @ np.asarray(u_i, float)
    fj = dyn.F(xj) + dyn.G(xj) @ np.asarray(u_j, float)
    return float(grad_i @ fi - grad_i @ fj + params.alpha1(h_inter(xi, xj, params)))


def h_obs(x_i, k: int, params: ScenarioParams) -> float:
    if not 0 <= k < params.K:
        raise IndexError(f"obstacle index {k} out of range for K={params.K}")
    d = params.dynamics.position(np.asarray(x_i, float)) - params.obstacle_centers[k]
    return float(d @ d) - params.obstacles[k].radius ** 2


def g_obs(u_i, x_i, k: int, params: ScenarioParams) -> float:
    """Obstacle barrier condition; safe when the value is non-negative."""
    h = h_obs(x_i, k, params)
    dyn = params.dynamics
    x = np.asarray(x_i, float)
    grad = _pos_grad(params, 2.0 * (dyn.position(x) - params.obstacle_centers[k]))
    return float(grad @ (dyn.F(x) + dyn.G(x) @ np.asarray(u_i, float)) + params.alpha2(h))


def connectivity(x, params: ScenarioParams, guess=None) -> ConnectivityInfo:
    return lambda2_with_grad(params.dynamics.position(np.asarray(x, float)), params.comm, guess=guess)


def g_conn(x, u, params: ScenarioParams, conn: ConnectivityInfo) -> float:
    """Connectivity barrier condition; satisfied when non-negative."""
    xs = np.asarray(x, float)
    us = np.asarray(u, float).reshape(params.N, params.m)
    dyn = params.dynamics
    grad = _pos_grad(params, conn.grad)
    flow = dyn.F_all(xs) + np.einsum("inm,im->in", dyn.G_all(xs), us)
    return float(np.sum(grad * flow) + params.gamma4 * (conn.lambda2 - params.chi))


def g_clf(x, u, params: ScenarioParams) -> float:
    """Aggregate target condition; satisfied when non-positive."""
    xs = np.asarray(x, float)
    us = np.asarray(u, float).reshape(params.N, params.m)
    dyn = params.dynamics
    total = 0.0
    for i in range(params.N):
        hv, grad = hV_product(xs[i], params)
        total += float(grad @ (dyn.F(xs[i]) + dyn.G(xs[i]) @ us[i])) + params.gamma3 * hv
    return total


# ---------------------------------------------------------------------------
# local (mismatch) forms, all "<= 0 feasible"


def g_local_inter(i, j, u_i, z_own, z_other, x, params: ScenarioParams) -> float:
    """Agent ``i``'s share of the pair condition with ``j``."""
    xs = np.asarray(x, float)
    dyn = params.dynamics
    pi, pj = dyn.position(xs[i]), dyn.position(xs[j])
    hij = truncation_matrix(dyn.position(xs), params.comm)[i, j]
    grad = _pos_grad(params, 2.0 * (pi - pj))
    lf = float(grad @ dyn.F(xs[i]))
    lg = grad @ dyn.G(xs[i])
    h = h_inter(xs[i], xs[j], params)
    return hij * (-lf - float(lg @ np.asarray(u_i, float)) - 0.5 * params.alpha1(h) + (z_own - z_other))


def g_local_conn(i, u_i, z_c, x, params: ScenarioParams, conn: ConnectivityInfo) -> float:
    xs = np.asarray(x, float)
    dyn = params.dynamics
    hmat = truncation_matrix(dyn.position(xs), params.comm)
    grad = _pos_grad(params, conn.grad[i])
    zc = np.asarray(z_c, float)
    hc = conn.lambda2 - params.chi
    mix = float(np.sum(hmat[i] * (zc[i] - zc)))
    return (-float(grad @ dyn.F(xs[i])) - float(grad @ dyn.G(xs[i]) @ np.asarray(u_i, float))
            - params.gamma4 * hc / params.N + mix)


def g_local_clf(i, u_i, z_clf, x, params: ScenarioParams) -> float:
    xs = np.asarray(x, float)
    dyn = params.dynamics
    hmat = truncation_matrix(dyn.position(xs), params.comm)
    hs, _, _ = hV_all(xs, params)
    hv, grad = hV_product(xs[i], params)
    zc = np.asarray(z_clf, float)
    mix = float(np.sum(hmat[i] * hs[i] * hs * (zc[i] - zc)))
    return (float(grad @ dyn.F(xs[i])) + float(grad @ dyn.G(xs[i]) @ np.asarray(u_i, float))
            + params.gamma3 * hv + mix)


# ---------------------------------------------------------------------------
# block assembly


@dataclass(frozen=True)
class BlockStack:
    """All agents' blocks stacked along the first axis.

    ``Psi`` is ``(N, M, m)``, ``Theta`` is ``(N, M, 4N-2)`` and ``phi`` is
    ``(N, M)``.  ``hmat`` holds the truncation weights and ``hs`` the target
    smoothing factors the blocks were built from.
    """

    Psi: np.ndarray
    Theta: np.ndarray
    phi: np.ndarray
    hmat: np.ndarray
    hs: np.ndarray
    rows: RowLayout

    def block(self, i: int) -> ConstraintBlock:
        return ConstraintBlock(i, self.Psi[i], self.Theta[i], self.phi[i], self.rows,
                               ZLayout(i, self.Psi.shape[0]))

    def __len__(self):
        return self.Psi.shape[0]


def other_index(N: int) -> np.ndarray:
    """``others[i, s]`` is the agent sitting in pair slot ``s`` of agent ``i``."""
    return np.array([[j for j in range(N) if j != i] for i in range(N)], dtype=int).reshape(N, N - 1)


def assemble_all(x, params: ScenarioParams, conn: ConnectivityInfo) -> BlockStack:
    """Constraint blocks of every agent at state ``x``."""
    xs = np.asarray(x, dtype=float)
    N, K, m = params.N, params.K, params.m
    if xs.shape != (N, params.n):
        raise ValueError(f"state must be ({N}, {params.n}), got {xs.shape}")
    dyn = params.dynamics
    rows = RowLayout(N, K, m)
    M = rows.size
    nz = 4 * N - 2
    Psi = np.zeros((N, M, m))
    Theta = np.zeros((N, M, nz))
    phi = np.zeros((N, M))

    P = dyn.position(xs)
    Fs = dyn.F_all(xs)
    Gs = dyn.G_all(xs)
    hmat = truncation_matrix(P, params.comm)
    others = other_index(N)
    ar = np.arange(N)[:, None]

    if N > 1:
        diff = P[:, None, :] - P[others]  # (N, N-1, l): p_i - p_j
        grad = _pos_grad(params, 2.0 * diff)
        hint = np.sum(diff * diff, axis=-1) - params.comm.d0 ** 2
        hw = hmat[ar, others]
        lf = np.einsum("isn,in->is", grad, Fs)
        lg = np.einsum("isn,inm->ism", grad, Gs)
        Psi[:, rows.inter, :] = -hw[:, :, None] * lg
        phi[:, rows.inter] = -hw * (lf + 0.5 * params.alpha1(hint))
        s = np.arange(N - 1)
        Theta[:, s, 2 * s] = hw
        Theta[:, s, 2 * s + 1] = -hw

    if K > 0:
        d = P[:, None, :] - params.obstacle_centers[None, :, :]
        grad = _pos_grad(params, 2.0 * d)
        hob = np.sum(d * d, axis=-1) - params.obstacle_radii[None, :] ** 2
        Psi[:, rows.obs, :] = -np.einsum("ikn,inm->ikm", grad, Gs)
        phi[:, rows.obs] = -np.einsum("ikn,in->ik", grad, Fs) - params.alpha2(hob)

    hc = conn.lambda2 - params.chi
    cgrad = _pos_grad(params, conn.grad)
    Psi[:, rows.conn, :] = -np.einsum("in,inm->im", cgrad, Gs)
    phi[:, rows.conn] = -np.einsum("in,in->i", cgrad, Fs) - params.gamma4 * hc / N
    lhat = -hmat.copy()
    np.fill_diagonal(lhat, hmat.sum(axis=1))
    off = 2 * (N - 1)
    Theta[:, rows.conn, off:off + N] = lhat

    hs, hv, vgrad = hV_all(xs, params)
    Psi[:, rows.clf, :] = np.einsum("in,inm->im", vgrad, Gs)
    phi[:, rows.clf] = np.einsum("in,in->i", vgrad, Fs) + params.gamma3 * hv
    wt = hmat * hs[:, None] * hs[None, :]
    ltil = -wt
    np.fill_diagonal(ltil, wt.sum(axis=1))
    Theta[:, rows.clf, off + N:off + 2 * N] = ltil

    b = rows.bounds.start
    eye = np.eye(m)
    Psi[:, b:b + m, :] = eye
    Psi[:, b + m:b + 2 * m, :] = -eye
    phi[:, b:b + 2 * m] = -params.c
    return BlockStack(Psi, Theta, phi, hmat, hs, rows)


def assemble_block(i: int, x, params: ScenarioParams, conn: ConnectivityInfo) -> ConstraintBlock:
    """Agent ``i``'s block; see the module docstring for the row order."""
    if not 0 <= i < params.N:
        raise IndexError(f"agent index {i} out of range")
    return assemble_all(x, params, conn).block(i)


def eval_local(block: ConstraintBlock, u_i, z_i) -> np.ndarray:
    u = np.asarray(u_i, dtype=float)
    z = np.asarray(z_i, dtype=float)
    if u.shape != (block.Psi.shape[1],):
        raise ValueError(f"u_i must have length {block.Psi.shape[1]}, got shape {u.shape}")
    if z.shape != (block.Theta.shape[1],):
        raise ValueError(f"z_i must have length {block.Theta.shape[1]}, got shape {z.shape}")
    return block.Psi @ u + block.Theta @ z + block.phi


def local_z(i: int, N: int, pair: np.ndarray, zc: np.ndarray, zclf: np.ndarray) -> np.ndarray:
    """Agent ``i``'s mismatch vector from global values.

    ``pair[a, b]`` is agent ``a``'s pair variable for the link with ``b``.
    """
    lay = ZLayout(i, N)
    z = np.zeros(lay.size)
    for j in lay.others:
        z[lay.own(j)] = pair[i, j]
        z[lay.copy(j)] = pair[j, i]
    z[2 * (N - 1):2 * (N - 1) + N] = zc
    z[2 * (N - 1) + N:] = zclf
    return z


def initial_state_report(x, params: ScenarioParams, conn: ConnectivityInfo | None = None) -> list[str]:
    """Problems with a state as a starting point; an empty list means it is admissible."""
    xs = np.asarray(x, float)
    dyn = params.dynamics
    P = dyn.position(xs)
    issues = []
    for i in range(params.N):
        for j in range(i + 1, params.N):
            d = float(np.linalg.norm(P[i] - P[j]))
            if d < params.comm.d0:
                issues.append(f"agents {i} and {j} are {d:.6g} apart, below d0={params.comm.d0:g}")
        for k, ob in enumerate(params.obstacles):
            d = float(np.linalg.norm(P[i] - np.asarray(ob.center)))
            if d < ob.radius:
                issues.append(f"agent {i} is inside obstacle {k} (distance {d:.6g} < radius {ob.radius:g})")
    if params.N > 1:
        conn = conn if conn is not None else connectivity(xs, params)
        if conn.lambda2 < params.chi:
            issues.append(f"connectivity lambda2={conn.lambda2:.6g} is below chi={params.chi:g}")
    return issues

