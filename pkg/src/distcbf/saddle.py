"""Fast primal-dual dynamics of the joint problem.

For frozen slow state the fast variables follow the projected saddle-point
flow of

    L(w, z, y) = 0.5*|w|^2 + 0.5*xi*|z|^2 + y' (Psi w + Theta z + phi)

scaled by ``1/tau``: primal descent on ``(w, z)`` and projected ascent on
``y >= 0``.  Its equilibrium is the KKT point of the joint QP.

Two discretisations are offered.  ``"euler"`` is the plain explicit step.
``"semi_implicit"`` updates the duals first and then uses the new duals in
the ``w`` update (the ``z`` update keeps the old duals, which is what a node
has after exchanging messages).  It has the same fixed points as the flow
but stays stable for step ratios ``dt/tau`` where explicit Euler diverges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qp import JointSystem

SCHEMES = ("euler", "semi_implicit")


class IntegrationError(FloatingPointError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, state: "FastState", W: float):
        super().__init__(message)
        self.state = state
        self.W = W


@dataclass(frozen=True)
class FastState:
    """Joint fast variables: ``w`` (N*m), ``z`` (joint mismatch vector), ``y`` (N*M)."""

    w: np.ndarray
    z: np.ndarray
    y: np.ndarray

    @staticmethod
    def zeros(system: JointSystem) -> "FastState":
        lay = system.layout
        return FastState(np.zeros(lay.n_u), np.zeros(lay.n_z), np.zeros(system.phi.size))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.w, self.z, self.y])

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector()))

    def max_abs_diff(self, other: "FastState") -> float:
        return float(np.max(np.abs(self.vector() - other.vector())))


@dataclass(frozen=True)
class MeritReport:
    W: float
    J: tuple[int, ...]
    stationarity_norm: float
    primal_norm: float
    per_agent: np.ndarray


def projected(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``[g]^+_y``: ``g`` where ``y > 0``, ``max(g, 0)`` where ``y = 0``."""
    return np.where(y > 0.0, g, np.maximum(g, 0.0))


def fast_derivatives(system: JointSystem, fast: FastState, tau: float) -> FastState:
    g = system.g(fast.w, fast.z)
    dw = (-fast.w - system.Psi.T @ fast.y) / tau
    dz = (-system.xi * fast.z - system.Theta.T @ fast.y) / tau
    dy = projected(g, fast.y) / tau
    return FastState(dw, dz, dy)


def _check_finite(**arrays):
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise IntegrationError(f"fast variable {name} became non-finite")


def fast_step(system: JointSystem, fast: FastState, dt: float, tau: float,
              scheme: str = "semi_implicit") -> FastState:
    """One step of length ``dt``; duals are clamped at zero afterwards."""
    return integrate(system, fast, dt, tau, 1, scheme)


def integrate(system: JointSystem, fast: FastState, dt: float, tau: float, steps: int,
              scheme: str = "semi_implicit") -> FastState:
    """``steps`` consecutive :func:`fast_step` calls without intermediate objects."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    r = dt / tau
    nw = fast.w.size
    A = np.hstack([system.Psi, system.Theta])
    phi = system.phi
    # w is driven by the duals of the current step, z by those of the previous one
    B_new = np.zeros((A.shape[1], A.shape[0]))
    B_old = np.zeros_like(B_new)
    B_new[:nw] = system.Psi.T
    B_old[nw:] = system.Theta.T
    if scheme == "euler":
        B_old, B_new = B_old + B_new, np.zeros_like(B_new)
    decay = np.concatenate([np.ones(nw), np.full(fast.z.size, system.xi)])
    v = np.concatenate([fast.w, fast.z])
    y = fast.y
    for _ in range(steps):
        y_new = np.maximum(y + r * (A @ v + phi), 0.0)
        v = v + r * (-decay * v - (B_new @ y_new + B_old @ y))
        y = y_new
    w, z = v[:nw], v[nw:]
    _check_finite(w=w, z=z, y=y)
    return FastState(w, z, y)


def _owners(system: JointSystem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lay = system.layout
    M = system.phi.size // lay.N
    own_w = np.repeat(np.arange(lay.N), lay.m)
    own_z = np.empty(lay.n_z, dtype=int)
    own_z[: lay.n_pair] = np.repeat(np.arange(lay.N), lay.N - 1)
    own_z[lay.n_pair:lay.n_pair + lay.N] = np.arange(lay.N)
    own_z[lay.n_pair + lay.N:] = np.arange(lay.N)
    own_y = np.repeat(np.arange(lay.N), M)
    return own_w, own_z, own_y


def merit_W(system: JointSystem, fast: FastState, reference: FastState | None = None) -> MeritReport:
    """Merit function of the saddle flow.

    ``W = 0.5*|grad_(w,z) L|^2 + 0.5*sum_(j not in J) g_j^2`` where ``J`` holds
    the rows with ``y_j = 0`` and ``g_j < 0``.  It is zero exactly at the
    saddle point.  With a ``reference`` point the squared distance to it is
    added with weight one half.  ``per_agent`` splits ``W`` (without the
    distance term) by the agent owning each variable.
    """
    g = system.g(fast.w, fast.z)
    gw = fast.w + system.Psi.T @ fast.y
    gz = system.xi * fast.z + system.Theta.T @ fast.y
    in_J = (fast.y == 0.0) & (g < 0.0)
    gy = np.where(in_J, 0.0, g)
    stat = float(gw @ gw + gz @ gz)
    prim = float(gy @ gy)
    W = 0.5 * (stat + prim)
    own_w, own_z, own_y = _owners(system)
    N = system.layout.N
    per = 0.5 * (np.bincount(own_w, gw * gw, N) + np.bincount(own_z, gz * gz, N) + np.bincount(own_y, gy * gy, N))
    if reference is not None:
        diff = fast.vector() - reference.vector()
        W += 0.5 * float(diff @ diff)
    return MeritReport(W, tuple(int(j) for j in np.flatnonzero(in_J)), float(np.sqrt(stat)), float(np.sqrt(prim)), per)


def residual(system: JointSystem, fast: FastState) -> float:
    """Largest entry of the (unscaled) vector field; zero at the saddle point."""
    d = fast_derivatives(system, fast, 1.0)
    return float(np.max(np.abs(d.vector())))


def run_to_equilibrium(system: JointSystem, fast0: FastState | None, tau: float, tol: float = 1e-10,
                       dt: float | None = None, max_iter: int = 2_000_000, scheme: str = "semi_implicit",
                       check_every: int = 50) -> tuple[FastState, int]:
    """Iterate :func:`fast_step` until the vector field is below ``tol``.

    The stopping test uses ``tau`` times the derivative, so ``tol`` does not
    depend on the time scale.  Returns the final state and the step count;
    raises :class:`NonConvergenceError` when ``max_iter`` is exhausted.
    """
    fast = fast0 if fast0 is not None else FastState.zeros(system)
    dt = dt if dt is not None else tau / 10.0
    it = 0
    while it <= max_iter:
        if residual(system, fast) <= tol:
            return fast, it
        fast = integrate(system, fast, dt, tau, check_every, scheme)
        it += check_every
    W = merit_W(system, fast).W
    raise NonConvergenceError(f"fast dynamics did not settle within {max_iter} steps (W={W:.3e})", fast, W)


@dataclass(frozen=True)
class FlowResult:
    x: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    steps: int
    converged: bool
    trajectory: list


def generic_saddle_flow(H, f, A=None, b=None, E=None, e=None, x0=None, y0=None, mu0=None, dt: float = 0.01,
                        steps: int = 100_000, tol: float = 1e-10, record_every: int = 0) -> FlowResult:
    """Projected saddle-point flow of ``0.5 x'Hx + f'x`` with ``Ax <= b`` and ``Ex = e``.

    ``x' = -(Hx + f + A'y + E'mu)``, ``y' = [Ax - b]^+_y``, ``mu' = Ex - e``,
    integrated with explicit Euler and the duals clamped at zero.  Stops once
    every derivative is below ``tol``.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = H.shape[0]
    f = np.zeros(n) if f is None else np.asarray(f, dtype=float)
    A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    b = np.zeros(0) if b is None else np.atleast_1d(np.asarray(b, dtype=float))
    E = np.zeros((0, n)) if E is None else np.atleast_2d(np.asarray(E, dtype=float))
    e = np.zeros(0) if e is None else np.atleast_1d(np.asarray(e, dtype=float))
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    y = np.zeros(b.size) if y0 is None else np.maximum(np.array(y0, dtype=float), 0.0)
    mu = np.zeros(e.size) if mu0 is None else np.array(mu0, dtype=float)
    traj = []
    for k in range(steps):
        dx = -(H @ x + f + A.T @ y + E.T @ mu)
        dy = projected(A @ x - b, y)
        dmu = E @ x - e
        if record_every and k % record_every == 0:
            traj.append(np.concatenate([x, y, mu]))
        if max(np.max(np.abs(dx), initial=0.0), np.max(np.abs(dy), initial=0.0),
               np.max(np.abs(dmu), initial=0.0)) <= tol:
            return FlowResult(x, y, mu, k, True, traj)
        x = x + dt * dx
        y = np.maximum(y + dt * dy, 0.0)
        mu = mu + dt * dmu
        _check_finite(x=x, y=y, mu=mu)
    return FlowResult(x, y, mu, steps, False, traj)
