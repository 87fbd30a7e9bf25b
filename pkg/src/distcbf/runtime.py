"""Closed-loop simulation.

The distributed controller is simulated as a synchronous network.  Row ``i``
of every array in :class:`Network` is agent ``i``'s private memory: its own
fast variables plus its copies of the neighbour values it needs.  A tick is

1. :func:`tick_exchange` snapshots every sender's outgoing values along the
   current edges and overwrites the receivers' copies,
2. every agent advances its own fast variables using only its own row.

Copies of agents that are out of range are not refreshed; the owner of such
a pair variable and the holder of the copy both apply the same closed-form
decay, so they stay equal without communication.  Each slow step runs a
number of ticks, one more exchange, the local QPs and one step of the agent
dynamics.  The centralized mode solves the joint QP at every slow step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constraints import (
    BlockStack,
    ScenarioParams,
    Schedule,
    assemble_all,
    connectivity,
    hV_all,
    initial_state_report,
    other_index,
)
from .graph import ConnectivityInfo, EdgeSet, binary_lambda2, neighbors, pairwise_distances
from .qp import InfeasibleError, JointLayout, build_joint, solve_centralized, solve_local
from .saddle import FastState, integrate, run_to_equilibrium


class InitialStateError(ValueError):
    pass


class RunAborted(RuntimeError):
    """The closed loop stopped early; ``state`` holds the last slow state."""

    def __init__(self, message: str, state: "SlowState | None" = None):
        super().__init__(message)
        self.state = state


# copy channels: what a receiver stores about each sender
CH_PAIR, CH_YPAIR, CH_ZC, CH_YC, CH_ZCLF, CH_YCLF = range(6)
N_CH = 6


def message_dtype(n: int) -> np.dtype:
    return np.dtype([
        ("sender", np.int64),
        ("receiver", np.int64),
        ("x_sender", np.float64, (n,)),
        ("z_pair", np.float64),
        ("y_pair", np.float64),
        ("z_c", np.float64),
        ("y_c", np.float64),
        ("z_clf", np.float64),
        ("y_clf", np.float64),
        ("h_c", np.float64),
    ])


@dataclass(frozen=True)
class Mailbox:
    """All messages of one exchange, one record per directed edge.

    A record from ``sender`` to ``receiver`` carries the sender's state, its
    pair variable and dual for the link with the receiver, its connectivity
    and target mismatch variables and duals, and the connectivity value.
    """

    messages: np.ndarray

    def inbox(self, i: int) -> np.ndarray:
        return self.messages[self.messages["receiver"] == i]

    def outbox(self, i: int) -> np.ndarray:
        return self.messages[self.messages["sender"] == i]

    def __len__(self):
        return self.messages.size


@dataclass(frozen=True)
class LocalBlocks:
    """One slow step's constraint data split the way the nodes use it.

    Pair rows are kept as full ``(N, N)`` arrays indexed by the other agent
    (zero on the diagonal) and the remaining rows as ``(N, R)``.
    """

    blocks: BlockStack
    psi_pair: np.ndarray  # (N, N, m)
    phi_pair: np.ndarray  # (N, N)
    psi_rest: np.ndarray  # (N, R, m)
    phi_rest: np.ndarray  # (N, R)
    hmat: np.ndarray
    wclf: np.ndarray  # h_ij * h_i * h_j
    mask: np.ndarray  # current neighbours
    senders: np.ndarray
    receivers: np.ndarray

    @staticmethod
    def build(blocks: BlockStack, edges: EdgeSet) -> "LocalBlocks":
        N = len(blocks)
        others = other_index(N) if N > 1 else np.zeros((N, 0), dtype=int)
        ar = np.arange(N)[:, None]
        m = blocks.Psi.shape[2]
        psi_pair = np.zeros((N, N, m))
        phi_pair = np.zeros((N, N))
        psi_pair[ar, others] = blocks.Psi[:, : N - 1]
        phi_pair[ar, others] = blocks.phi[:, : N - 1]
        hm = blocks.hmat
        directed = edges.directed()
        s = np.array([d[0] for d in directed], dtype=int)
        r = np.array([d[1] for d in directed], dtype=int)
        return LocalBlocks(blocks, psi_pair, phi_pair, np.ascontiguousarray(blocks.Psi[:, N - 1:]),
                           np.ascontiguousarray(blocks.phi[:, N - 1:]), hm,
                           hm * blocks.hs[:, None] * blocks.hs[None, :], edges.mask(), s, r)


class Network:
    """Memory of all agents; row ``i`` of every array belongs to agent ``i``.

    Owned values: ``w``; pair duals ``ypair[i, j]`` and pair variables
    ``pair[i, j]`` for the link with ``j``; the other duals ``yrest`` (obstacle,
    connectivity, target and bound rows, in block order); ``zc`` and ``zclf``.
    ``cp[i, j, ch]`` is agent ``i``'s copy of agent ``j``'s value on channel
    ``ch``: j's pair variable and dual for the link with i, j's connectivity
    variable and dual, j's target variable and dual.  ``x_seen[i, j]`` is the
    last state of ``j`` that ``i`` received.
    """

    def __init__(self, params: ScenarioParams, x=None):
        N, m, M, n = params.N, params.m, params.M, params.n
        self.params = params
        self.N, self.m, self.M = N, m, M
        self.R = M - (N - 1)
        self.row_conn = params.K
        self.row_clf = params.K + 1
        self.x = np.array(params.x0 if x is None else x, dtype=float)
        self.x_seen = np.repeat(self.x[None, :, :], N, axis=0)
        self.w = np.zeros((N, m))
        self.ypair = np.zeros((N, N))
        self.yrest = np.zeros((N, self.R))
        self.pair = np.zeros((N, N))
        self.zc = np.zeros(N)
        self.zclf = np.zeros(N)
        self.cp = np.zeros((N, N, N_CH))
        self.hc_seen = np.zeros(N)
        self.others = other_index(N) if N > 1 else np.zeros((N, 0), dtype=int)
        self.dtype = message_dtype(n)

    # -- views --------------------------------------------------------------

    def node(self, i: int) -> "AgentNode":
        return AgentNode(self, i)

    @property
    def y(self) -> np.ndarray:
        """Every agent's duals in block row order, shape (N, M)."""
        ar = np.arange(self.N)[:, None]
        return np.hstack([self.ypair[ar, self.others], self.yrest])

    def local_z(self) -> np.ndarray:
        """Every agent's mismatch vector in block column order, shape (N, 4N-2)."""
        N = self.N
        out = np.zeros((N, 4 * N - 2))
        if N > 1:
            ar = np.arange(N)[:, None]
            out[:, 0:2 * (N - 1):2] = self.pair[ar, self.others]
            out[:, 1:2 * (N - 1):2] = self.cp[ar, self.others, CH_PAIR]
        off = 2 * (N - 1)
        d = np.arange(N)
        zc = self.cp[:, :, CH_ZC].copy()
        zc[d, d] = self.zc
        zclf = self.cp[:, :, CH_ZCLF].copy()
        zclf[d, d] = self.zclf
        out[:, off:off + N] = zc
        out[:, off + N:] = zclf
        return out

    # -- joint representation ---------------------------------------------

    def to_joint(self) -> FastState:
        """Owned values gathered into the joint layout (copies are ignored)."""
        ar = np.arange(self.N)[:, None]
        z = np.concatenate([self.pair[ar, self.others].reshape(-1), self.zc, self.zclf])
        return FastState(self.w.reshape(-1).copy(), z, self.y.reshape(-1).copy())

    def store_owned(self, fast: FastState, lay: JointLayout | None = None) -> None:
        """Set owned values from the joint layout; copies are left alone."""
        lay = lay if lay is not None else JointLayout(self.N, self.m)
        N = self.N
        ar = np.arange(N)[:, None]
        self.w = fast.w.reshape(N, self.m).copy()
        y = fast.y.reshape(N, self.M)
        self.ypair = np.zeros((N, N))
        self.ypair[ar, self.others] = y[:, : N - 1]
        self.yrest = y[:, N - 1:].copy()
        self.pair = np.zeros((N, N))
        self.pair[ar, self.others] = fast.z[: lay.n_pair].reshape(N, N - 1)
        self.zc = fast.z[lay.n_pair:lay.n_pair + N].copy()
        self.zclf = fast.z[lay.n_pair + N:].copy()

    def load_joint(self, fast: FastState) -> None:
        """Set owned values and make every copy agree with its owner."""
        self.store_owned(fast)
        self.cp = self._outgoing().transpose(1, 0, 2).copy()
        d = np.arange(self.N)
        self.cp[d, d, :] = 0.0

    def _outgoing(self) -> np.ndarray:
        """``out[s, r, ch]``: what sender ``s`` would send to receiver ``r``."""
        N = self.N
        out = np.empty((N, N, N_CH))
        out[:, :, CH_PAIR] = self.pair
        out[:, :, CH_YPAIR] = self.ypair
        out[:, :, CH_ZC] = self.zc[:, None]
        out[:, :, CH_YC] = self.yrest[:, self.row_conn][:, None]
        out[:, :, CH_ZCLF] = self.zclf[:, None]
        out[:, :, CH_YCLF] = self.yrest[:, self.row_clf][:, None]
        return out

    def copy(self) -> "Network":
        other = Network.__new__(Network)
        other.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})
        return other


@dataclass
class AgentNode:
    """Agent ``i``'s slice of a :class:`Network`."""

    net: Network
    id: int

    @property
    def x(self) -> np.ndarray:
        return self.net.x[self.id]

    @property
    def w(self) -> np.ndarray:
        return self.net.w[self.id]

    @property
    def y(self) -> np.ndarray:
        return self.net.y[self.id]

    def z_local(self) -> np.ndarray:
        return self.net.local_z()[self.id]


# ---------------------------------------------------------------------------
# exchange and fast updates


def exchange(net: Network, senders: np.ndarray, receivers: np.ndarray, h_c: float = 0.0) -> np.ndarray:
    """Deliver one message per directed edge; returns the payload rows.

    All payloads are read before anything is written, so no receiver sees a
    value delivered in the same exchange.
    """
    out = net._outgoing()
    payload = out[senders, receivers]
    xs = net.x[senders]
    net.cp[receivers, senders] = payload
    net.x_seen[receivers, senders] = xs
    net.hc_seen[receivers] = h_c
    return payload


def tick_exchange(net: Network, edges: EdgeSet, h_c: float = 0.0) -> Mailbox:
    """Exchange along every current edge and return the delivered messages."""
    directed = edges.directed()
    s = np.array([d[0] for d in directed], dtype=int)
    r = np.array([d[1] for d in directed], dtype=int)
    xs = net.x[s].copy()
    payload = exchange(net, s, r, h_c)
    msgs = np.zeros(len(directed), dtype=net.dtype)
    msgs["sender"], msgs["receiver"] = s, r
    msgs["x_sender"] = xs
    for name, ch in (("z_pair", CH_PAIR), ("y_pair", CH_YPAIR), ("z_c", CH_ZC), ("y_c", CH_YC),
                     ("z_clf", CH_ZCLF), ("y_clf", CH_YCLF)):
        msgs[name] = payload[:, ch]
    msgs["h_c"] = h_c
    return Mailbox(msgs)


def agent_fast_update(net: Network, i: int, lb: LocalBlocks, r: float, scheme: str = "semi_implicit") -> None:
    """Advance agent ``i``'s fast variables by one step of ratio ``r = dt/tau``.

    Reads nothing but row ``i`` of the network.  Copies held for agents out
    of range decay in closed form; their duals stay frozen.
    """
    xi = net.params.xi
    hm = lb.hmat[i]
    cp = net.cp[i]
    w = net.w[i]
    g_pair = lb.psi_pair[i] @ w + lb.phi_pair[i] + hm * (net.pair[i] - cp[:, CH_PAIR])
    g_rest = lb.psi_rest[i] @ w + lb.phi_rest[i]
    g_rest[net.row_conn] += np.sum(hm * (net.zc[i] - cp[:, CH_ZC]))
    g_rest[net.row_clf] += np.sum(lb.wclf[i] * (net.zclf[i] - cp[:, CH_ZCLF]))
    yp_old, yr_old = net.ypair[i].copy(), net.yrest[i].copy()
    yp_new = np.maximum(yp_old + r * g_pair, 0.0)
    yr_new = np.maximum(yr_old + r * g_rest, 0.0)
    yp_w, yr_w = (yp_new, yr_new) if scheme == "semi_implicit" else (yp_old, yr_old)
    w_new = w + r * (-w - (yp_w @ lb.psi_pair[i] + yr_w @ lb.psi_rest[i]))
    pair = net.pair[i]
    pair_new = pair + r * (-xi * pair - hm * (yp_old - cp[:, CH_YPAIR]))
    cpp = cp[:, CH_PAIR]
    cp_new = np.where(lb.mask[i], cpp, cpp + r * (-xi * cpp - 0.0))
    zc_new = net.zc[i] + r * (-xi * net.zc[i] - np.sum(hm * (yr_old[net.row_conn] - cp[:, CH_YC])))
    zclf_new = net.zclf[i] + r * (-xi * net.zclf[i] - np.sum(lb.wclf[i] * (yr_old[net.row_clf] - cp[:, CH_YCLF])))
    net.w[i] = w_new
    net.ypair[i] = yp_new
    net.yrest[i] = yr_new
    net.pair[i] = pair_new
    net.pair[i, i] = 0.0
    net.cp[i, :, CH_PAIR] = cp_new
    net.zc[i] = zc_new
    net.zclf[i] = zclf_new


# Fast-variable fields in packing order; ``cp`` holds every copy channel.
FIELDS = ("w", "ypair", "yrest", "pair", "zc", "zclf", "cp")


def _dual_input(f: dict, lb: LocalBlocks, r: float, conn: int, clf: int) -> tuple[np.ndarray, np.ndarray]:
    """``y + r*g`` for every dual, before clamping.

    ``f`` maps field names to arrays that may carry extra leading axes.
    """
    hm, cp = lb.hmat, f["cp"]
    g_pair = (np.einsum("ijk,...ik->...ij", lb.psi_pair, f["w"]) + lb.phi_pair
              + hm * (f["pair"] - cp[..., CH_PAIR]))
    g_rest = np.einsum("ijk,...ik->...ij", lb.psi_rest, f["w"]) + lb.phi_rest
    g_rest[..., conn] += np.sum(hm * (f["zc"][..., :, None] - cp[..., CH_ZC]), axis=-1)
    g_rest[..., clf] += np.sum(lb.wclf * (f["zclf"][..., :, None] - cp[..., CH_ZCLF]), axis=-1)
    return f["ypair"] + r * g_pair, f["yrest"] + r * g_rest


def _primal_update(f: dict, yp_new: np.ndarray, yr_new: np.ndarray, lb: LocalBlocks, r: float, xi: float,
                   conn: int, clf: int, scheme: str) -> dict:
    """New fast fields given the clamped duals; mirrors :func:`agent_fast_update`."""
    hm, cp = lb.hmat, f["cp"]
    w, pair = f["w"], f["pair"]
    yp_w, yr_w = (yp_new, yr_new) if scheme == "semi_implicit" else (f["ypair"], f["yrest"])
    w_new = w + r * (-w - (np.einsum("...ij,ijk->...ik", yp_w, lb.psi_pair)
                           + np.einsum("...ij,ijk->...ik", yr_w, lb.psi_rest)))
    pair_new = pair + r * (-xi * pair - hm * (f["ypair"] - cp[..., CH_YPAIR]))
    cpp = cp[..., CH_PAIR]
    cp_pair = np.where(lb.mask, cpp, cpp + r * (-xi * cpp - 0.0))
    yc = f["yrest"][..., conn]
    yl = f["yrest"][..., clf]
    zc_new = f["zc"] + r * (-xi * f["zc"] - np.sum(hm * (yc[..., :, None] - cp[..., CH_YC]), axis=-1))
    zclf_new = f["zclf"] + r * (-xi * f["zclf"] - np.sum(lb.wclf * (yl[..., :, None] - cp[..., CH_YCLF]), axis=-1))
    N = hm.shape[0]
    off = ~np.eye(N, dtype=bool)
    cp_new = cp.copy()
    cp_new[..., CH_PAIR] = np.where(off, cp_pair, 0.0)
    return {"w": w_new, "ypair": yp_new, "yrest": yr_new, "pair": np.where(off, pair_new, 0.0),
            "zc": zc_new, "zclf": zclf_new, "cp": cp_new}


def network_fast_update(net: Network, lb: LocalBlocks, r: float, scheme: str = "semi_implicit") -> None:
    """Every agent's :func:`agent_fast_update`, evaluated for all rows at once."""
    f = {k: getattr(net, k) for k in FIELDS}
    qp_, qr_ = _dual_input(f, lb, r, net.row_conn, net.row_clf)
    new = _primal_update(f, np.maximum(qp_, 0.0), np.maximum(qr_, 0.0), lb, r, net.params.xi,
                         net.row_conn, net.row_clf, scheme)
    for k in FIELDS:
        setattr(net, k, new[k])


def joint_ticks(net: Network, lb: LocalBlocks, r: float, ticks: int, scheme: str = "semi_implicit",
                h_c: float = 0.0) -> None:
    """``ticks`` rounds of :func:`exchange` plus :func:`network_fast_update`, computed jointly.

    After an exchange every copy an agent actually uses equals the owner's
    value, and copies of agents out of range enter only with weight zero.  The
    owned variables therefore follow the joint fast step exactly; this
    integrates them with the joint matrices, applies the closed-form decay to
    the out-of-range pair copies and delivers the last round of messages.
    Agrees with the message-passing loop up to rounding.
    """
    if ticks <= 0:
        return
    lay = JointLayout(net.N, net.m)
    system = build_joint(lb.blocks, net.params.xi)
    fast = integrate(system, net.to_joint(), r, 1.0, ticks - 1, scheme) if ticks > 1 else net.to_joint()
    stale = ~lb.mask
    np.fill_diagonal(stale, False)
    cpp = net.cp[:, :, CH_PAIR][stale]
    xi = net.params.xi
    for _ in range(ticks - 1):
        cpp = cpp + r * (-xi * cpp - 0.0)
    net.cp[:, :, CH_PAIR][stale] = cpp
    net.store_owned(fast, lay)
    exchange(net, lb.senders, lb.receivers, h_c)
    network_fast_update(net, lb, r, scheme)


def check_finite(net: Network) -> None:
    for name in ("w", "ypair", "yrest", "pair", "zc", "zclf"):
        if not np.all(np.isfinite(getattr(net, name))):
            raise FloatingPointError(f"fast variable {name} became non-finite")


def agent_control(net: Network, i: int, blocks: BlockStack) -> np.ndarray:
    """Agent ``i``'s applied control from its local QP and current memory."""
    return solve_local(blocks.block(i), net.local_z()[i])


def agent_merit(net: Network, lb: LocalBlocks) -> np.ndarray:
    """Each agent's share of the merit function, computed from its own memory."""
    xi = net.params.xi
    hm = lb.hmat
    cp = net.cp
    w = net.w
    g_pair = np.einsum("ijk,ik->ij", lb.psi_pair, w) + lb.phi_pair + hm * (net.pair - cp[:, :, CH_PAIR])
    g_rest = np.einsum("ijk,ik->ij", lb.psi_rest, w) + lb.phi_rest
    g_rest[:, net.row_conn] += np.sum(hm * (net.zc[:, None] - cp[:, :, CH_ZC]), axis=1)
    g_rest[:, net.row_clf] += np.sum(lb.wclf * (net.zclf[:, None] - cp[:, :, CH_ZCLF]), axis=1)
    gw = w + np.einsum("ij,ijk->ik", net.ypair, lb.psi_pair) + np.einsum("ij,ijk->ik", net.yrest, lb.psi_rest)
    offd = ~np.eye(net.N, dtype=bool)
    gyp = np.where(((net.ypair == 0.0) & (g_pair < 0.0)) | ~offd, 0.0, g_pair)
    gyr = np.where((net.yrest == 0.0) & (g_rest < 0.0), 0.0, g_rest)
    gp = np.where(offd, xi * net.pair + hm * (net.ypair - cp[:, :, CH_YPAIR]), 0.0)
    gc = xi * net.zc + np.sum(hm * (net.yrest[:, net.row_conn][:, None] - cp[:, :, CH_YC]), axis=1)
    gl = xi * net.zclf + np.sum(lb.wclf * (net.yrest[:, net.row_clf][:, None] - cp[:, :, CH_YCLF]), axis=1)
    return 0.5 * (np.sum(gw * gw, axis=1) + np.sum(gyp * gyp, axis=1) + np.sum(gyr * gyr, axis=1)
                  + np.sum(gp * gp, axis=1) + gc * gc + gl * gl)


# ---------------------------------------------------------------------------
# slow dynamics and metrics


@dataclass(frozen=True)
class SlowState:
    t: float
    x: np.ndarray
    edges: EdgeSet
    conn: ConnectivityInfo


def make_slow_state(t: float, x, params: ScenarioParams, guess=None) -> SlowState:
    xs = np.asarray(x, dtype=float)
    P = params.dynamics.position(xs)
    conn = connectivity(xs, params, guess=guess)
    return SlowState(t, xs, neighbors(P, params.comm), conn)


def slow_step(state: SlowState, controls, dt: float, params: ScenarioParams, method: str = "euler") -> SlowState:
    """Advance the agents by ``dt`` with the controls held constant.

    ``"euler"`` is one explicit Euler step; ``"rk4"`` integrates the same
    zero-order-hold system with the classical Runge-Kutta scheme.
    """
    dyn = params.dynamics
    u = np.asarray(controls, dtype=float).reshape(params.N, params.m)

    def f(x):
        return dyn.F_all(x) + np.einsum("inm,im->in", dyn.G_all(x), u)

    x = state.x
    if method == "euler":
        x_new = x + dt * f(x)
    elif method == "rk4":
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x_new = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.all(np.isfinite(x_new)):
        raise RunAborted("agent state became non-finite", state)
    return make_slow_state(state.t + dt, x_new, params, guess=state.conn.eigenvectors)


METRIC_FIELDS = ("t", "lambda2_binary", "min_pair_dist", "min_obs_clearance", "V", "max_target_residual",
                 "max_W")


@dataclass(frozen=True)
class MetricsRow:
    t: float
    lambda2_binary: float
    min_pair_dist: float
    min_obs_clearance: float
    V: float
    max_target_residual: float
    max_W: float
    lambda2: float = math.nan
    max_u: float = 0.0
    per_agent_W: tuple = ()
    violation: bool = False

    def values(self) -> tuple:
        return tuple(getattr(self, f) for f in METRIC_FIELDS)


def collect_metrics(state: SlowState, params: ScenarioParams, per_agent_W=None, controls=None) -> MetricsRow:
    xs = state.x
    P = params.dynamics.position(xs)
    N = params.N
    if N > 1:
        dist = pairwise_distances(P)
        min_pair = float(np.min(dist[np.triu_indices(N, 1)]))
        lam_b = binary_lambda2(P, params.comm.d_c)
    else:
        min_pair, lam_b = math.inf, 0.0
    if params.K:
        d = np.linalg.norm(P[:, None, :] - params.obstacle_centers[None], axis=-1) - params.obstacle_radii[None]
        clearance = float(np.min(d))
    else:
        clearance = math.inf
    _, hv, _ = hV_all(xs, params)
    res = np.einsum("ia,ab,ib->i", xs, params.Sigma, xs) - 1.0
    W = np.zeros(N) if per_agent_W is None else np.asarray(per_agent_W, dtype=float)
    umax = 0.0 if controls is None else float(np.max(np.abs(controls)))
    viol = (min_pair < params.comm.d0 - 1e-6) or (clearance < -1e-6) or (N > 1 and lam_b <= 0.0)
    return MetricsRow(state.t, lam_b, min_pair, clearance, float(hv.sum()), float(res.max()), float(W.max()),
                      state.conn.lambda2, umax, tuple(float(v) for v in W), bool(viol))


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class Trajectory:
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    u: list = field(default_factory=list)

    def append(self, t, x, u):
        self.t.append(float(t))
        self.x.append(np.array(x, dtype=float))
        self.u.append(np.array(u, dtype=float))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.array(self.t), np.array(self.x), np.array(self.u)


@dataclass
class RunResult:
    trajectory: Trajectory
    metrics: list
    mode: str
    params: ScenarioParams
    schedule: Schedule
    network: Network | None = None
    aborted: str = ""

    @property
    def final_x(self) -> np.ndarray:
        return self.trajectory.x[-1]

    def summary(self) -> dict:
        xs = self.final_x
        res = np.einsum("ia,ab,ib->i", xs, self.params.Sigma, xs)
        m = self.metrics
        return {
            "mode": self.mode,
            "steps": int(round(m[-1].t / self.schedule.dt_slow)) if m else 0,
            "final_time": m[-1].t if m else 0.0,
            "final_target_values": [float(v) for v in res],
            "all_in_target": bool(np.all(res <= 1.0)),
            "min_pair_dist": min(r.min_pair_dist for r in m),
            "min_obs_clearance": min(r.min_obs_clearance for r in m),
            "min_lambda2_binary": min(r.lambda2_binary for r in m),
            "max_abs_u": max(r.max_u for r in m),
            "violations": sum(r.violation for r in m),
            "aborted": self.aborted,
        }

    @property
    def ok(self) -> bool:
        s = self.summary()
        return not self.aborted and s["violations"] == 0


def warm_start(net: Network, params: ScenarioParams, blocks: BlockStack) -> int:
    """Put the fast variables at the equilibrium of the current state."""
    system = build_joint(blocks, params.xi)
    fast, it = run_to_equilibrium(system, net.to_joint(), params.tau, tol=1e-11,
                                  scheme=params.schedule.scheme)
    net.load_joint(fast)
    return it


ENGINES = ("joint", "messages")


def run(params: ScenarioParams, mode: str = "distributed", schedule: Schedule | None = None,
        progress=None, record_every: int = 1, engine: str = "joint") -> RunResult:
    """Simulate the closed loop for the schedule's horizon.

    ``mode`` is ``"distributed"`` (message passing and fast dynamics) or
    ``"centralized"`` (joint QP at every step).  Safety violations are flagged
    in the metrics and the run continues; an infeasible QP or a non-finite
    state stops it with :class:`RunAborted`.

    ``engine`` picks how the distributed ticks are computed: ``"messages"``
    loops over :func:`exchange` and :func:`network_fast_update`, ``"joint"``
    uses :func:`joint_ticks`, which gives the same values much faster.
    """
    if mode not in ("distributed", "centralized"):
        raise ValueError(f"unknown mode {mode!r}")
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}")
    schedule = schedule if schedule is not None else params.schedule
    if mode == "distributed" and schedule.dt_fast > params.tau / 10.0 * (1 + 1e-12):
        raise ValueError(f"dt_fast={schedule.dt_fast:g} does not resolve tau={params.tau:g}; "
                         f"use at least {math.ceil(schedule.dt_slow / (params.tau / 10))} substeps")
    state = make_slow_state(0.0, params.x0, params)
    issues = initial_state_report(state.x, params, state.conn)
    if issues:
        raise InitialStateError("initial state rejected: " + "; ".join(issues))

    traj = Trajectory()
    metrics: list[MetricsRow] = []
    net = Network(params, state.x) if mode == "distributed" else None
    r = schedule.dt_fast / params.tau
    steps = schedule.total_steps
    hc = 0.0
    for k in range(steps + 1):
        state = SlowState(k * schedule.dt_slow, state.x, state.edges, state.conn)
        try:
            blocks = assemble_all(state.x, params, state.conn)
            hc = state.conn.lambda2 - params.chi
            if mode == "distributed":
                net.x = state.x.copy()
                if k == 0 and schedule.warm_start:
                    warm_start(net, params, blocks)
                lb = LocalBlocks.build(blocks, state.edges)
                if engine == "messages":
                    for _ in range(schedule.substeps):
                        exchange(net, lb.senders, lb.receivers, hc)
                        network_fast_update(net, lb, r, schedule.scheme)
                else:
                    joint_ticks(net, lb, r, schedule.substeps, schedule.scheme, hc)
                check_finite(net)
                exchange(net, lb.senders, lb.receivers, hc)
                Z = net.local_z()
                u = np.stack([solve_local(blocks.block(i), Z[i]) for i in range(params.N)])
                W = agent_merit(net, lb)
            else:
                cs = solve_centralized(state.x, params, state.conn, blocks, check=False)
                u = cs.u
                W = np.zeros(params.N)
        except InfeasibleError as exc:
            return RunResult(traj, metrics, mode, params, schedule, net, f"t={state.t:.4f}: {exc}")
        if k % record_every == 0 or k == steps:
            traj.append(state.t, state.x, u)
            metrics.append(collect_metrics(state, params, W, u))
        if progress is not None:
            progress(k, steps, metrics[-1] if metrics else None)
        if k == steps:
            break
        state = slow_step(state, u, schedule.dt_slow, params, schedule.slow_method)
    return RunResult(traj, metrics, mode, params, schedule, net)
