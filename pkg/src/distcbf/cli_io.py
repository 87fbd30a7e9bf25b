"""Scenario files, result files, the property suite and the command line.

Scenario files are TOML with the sections ``[agents]``, ``[obstacles]``,
``[target]``, ``[gains]``, ``[comm]``, ``[fast]``, ``[bounds]`` and
``[schedule]``.  Trajectories and metrics are written as comma-separated
text with a header row and every number printed with 17 significant digits,
so they read back to the same doubles.

Exit codes of the command line: 0 success, 1 safety violation, refused
initial state or infeasible QP, 2 usage or scenario errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .constraints import (
    Obstacle,
    ScenarioParams,
    Schedule,
    SingleIntegrator,
    assemble_all,
    eval_local,
    g_clf,
    g_conn,
    g_inter,
    hV_product,
)
from .graph import CommParams, adjacency_weight, lambda2_with_grad, neighbors
from .numerics import finite_diff_grad
from .qp import (
    JointLayout,
    QPInstance,
    brute_force_oracle,
    build_joint,
    kkt_residual,
    solve,
    solve_centralized,
    solve_local,
)
from .runtime import METRIC_FIELDS, InitialStateError, LocalBlocks, Network, RunResult, exchange
from .runtime import network_fast_update, run
from .saddle import FastState, fast_step, merit_W, run_to_equilibrium

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("distcbf")

SCENARIO_DIR = Path(__file__).parent / "scenarios"

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


class ScenarioError(ValueError):
    """Invalid scenario file; ``line`` is the 1-based line of the offending entry, if known."""

    def __init__(self, message: str, path: str = "<scenario>", line: int | None = None):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.line = line


# ---------------------------------------------------------------------------
# scenario files

_REQUIRED = object()
_PARAM_DEFAULTS = {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
                   for f in dataclasses.fields(ScenarioParams)
                   if f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING}
_SCHEDULE_DEFAULTS = {f.name: f.default for f in dataclasses.fields(Schedule)}

SECTIONS: dict[str, dict[str, object]] = {
    "agents": {"x0": _REQUIRED},
    "obstacles": {"centers": [], "radii": []},
    "target": {"Sigma": _PARAM_DEFAULTS["Sigma"].tolist(), "epsilon": _PARAM_DEFAULTS["epsilon"]},
    "gains": {k: _PARAM_DEFAULTS[k] for k in ("gamma1", "gamma2", "gamma3", "gamma4", "chi")},
    "comm": {"d_c": _REQUIRED, "eps_c": _REQUIRED, "sigma": "auto", "d0": _REQUIRED},
    "fast": {"tau": _PARAM_DEFAULTS["tau"], "xi": _PARAM_DEFAULTS["xi"]},
    "bounds": {"c": _PARAM_DEFAULTS["c"]},
    "schedule": dict(_SCHEDULE_DEFAULTS),
}


def _key_lines(text: str) -> dict:
    """Line number of every ``[section]`` header and ``key =`` entry."""
    lines: dict = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if s.startswith("[") and not s.startswith("[["):
            section = s.strip("[]").strip()
            lines.setdefault((section, None), no)
        elif "=" in s and not s.startswith("#") and section is not None:
            key = s.split("=", 1)[0].strip().strip('"')
            lines.setdefault((section, key), no)
    return lines


def _number(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError(f"{what} must be a number, got {value!r}")
    return float(value)


def _matrix(value, what: str) -> np.ndarray:
    if not isinstance(value, list) or not all(isinstance(r, list) for r in value):
        raise TypeError(f"{what} must be a list of rows")
    arr = np.array([[_number(v, what) for v in row] for row in value], dtype=float)
    if arr.ndim != 2:
        raise TypeError(f"{what} rows must all have the same length")
    return arr


def _first_key(msg: str, candidates) -> tuple:
    """The ``(section, key)`` whose key is named earliest in ``msg`` as a whole word."""
    best, pos = (None, None), len(msg) + 1
    for section, key in candidates:
        m = re.search(rf"\b{re.escape(key)}\b", msg)
        if m and m.start() < pos:
            best, pos = (section, key), m.start()
    return best


def parse_scenario(text: str, path: str = "<scenario>") -> ScenarioParams:
    """Validate scenario text and build the parameters it describes."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        if line is None:
            m = re.search(r"line (\d+)", str(exc))
            line = int(m.group(1)) if m else None
        raise ScenarioError(f"not valid TOML: {exc}", path, line) from None
    lines = _key_lines(text)

    def fail(msg, section, key=None):
        line = lines.get((section, key)) or lines.get((section, None))
        raise ScenarioError(msg, path, line)

    for section, body in doc.items():
        if section not in SECTIONS:
            fail(f"unknown section [{section}]", section)
        if not isinstance(body, dict):
            fail(f"[{section}] must be a table", section)
        for key in body:
            if key not in SECTIONS[section]:
                fail(f"unknown key {key!r} in [{section}]", section, key)
    vals: dict[str, dict] = {}
    for section, spec in SECTIONS.items():
        body = doc.get(section, {})
        vals[section] = {}
        for key, default in spec.items():
            if key in body:
                vals[section][key] = body[key]
            elif default is _REQUIRED:
                fail(f"missing required key {key!r} in [{section}]", section)
            else:
                log.info("%s: [%s] %s not given, using %r", path, section, key, default)
                vals[section][key] = default

    def build(section, fn):
        try:
            return fn(vals[section])
        except (TypeError, ValueError) as exc:
            msg = str(exc)
            fail(msg, section, _first_key(msg, [(section, k) for k in SECTIONS[section]])[1])

    x0 = build("agents", lambda v: _matrix(v["x0"], "x0"))

    def obstacles(v):
        centers, radii = v["centers"], v["radii"]
        if not isinstance(centers, list) or not isinstance(radii, list) or len(centers) != len(radii):
            raise ValueError("centers and radii must be lists of the same length")
        if not centers:
            return ()
        c = _matrix(centers, "centers")
        return tuple(Obstacle(tuple(ci), _number(r, "radii")) for ci, r in zip(c, radii))

    obs = build("obstacles", obstacles)

    def comm(v):
        sigma = v["sigma"]
        if sigma == "auto":
            sigma = None
        elif isinstance(sigma, str):
            raise ValueError(f'sigma must be a number or "auto", got {sigma!r}')
        else:
            sigma = _number(sigma, "sigma")
        return CommParams(_number(v["d_c"], "d_c"), _number(v["eps_c"], "eps_c"), _number(v["d0"], "d0"), sigma)

    cp = build("comm", comm)

    def schedule(v):
        sub = v["substeps"]
        if isinstance(sub, bool) or not isinstance(sub, int):
            raise TypeError(f"substeps must be an integer, got {sub!r}")
        if not isinstance(v["warm_start"], bool):
            raise TypeError("warm_start must be true or false")
        for key in ("scheme", "slow_method"):
            if not isinstance(v[key], str):
                raise TypeError(f"{key} must be a string")
        return Schedule(_number(v["dt_slow"], "dt_slow"), sub, _number(v["horizon"], "horizon"),
                        v["warm_start"], v["scheme"], v["slow_method"])

    sched = build("schedule", schedule)
    target = build("target", lambda v: (_matrix(v["Sigma"], "Sigma"), _number(v["epsilon"], "epsilon")))
    gains = build("gains", lambda v: {k: _number(v[k], k) for k in v})
    fast = build("fast", lambda v: {k: _number(v[k], k) for k in v})
    c = build("bounds", lambda v: _number(v["c"], "c"))

    kwargs = dict(comm=cp, x0=x0, obstacles=obs, Sigma=target[0], epsilon=target[1], c=c, schedule=sched,
                  dynamics=SingleIntegrator(x0.shape[1]), **gains, **fast)
    try:
        return ScenarioParams(**kwargs)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        section, key = _first_key(msg, [(s, k) for s, spec in SECTIONS.items() for k in spec])
        if section is not None:
            fail(msg, section, key)
        raise ScenarioError(msg, path) from None


def load_scenario(path) -> ScenarioParams:
    """Read a scenario file; a bare name refers to a shipped scenario."""
    p = Path(path)
    if not p.exists() and (SCENARIO_DIR / f"{path}.toml").exists():
        p = SCENARIO_DIR / f"{path}.toml"
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read file: {exc.strerror}", str(path)) from None
    return parse_scenario(text, str(p))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(x) for x in (v.tolist() if isinstance(v, np.ndarray) else v)) + "]"
    if isinstance(v, np.floating):
        return repr(float(v))
    raise TypeError(f"cannot write {v!r}")


def format_scenario(params: ScenarioParams) -> str:
    """Scenario text that :func:`parse_scenario` turns back into ``params``."""
    if params.class_k1 is not None or params.class_k2 is not None:
        raise ValueError("custom class-K functions cannot be written to a scenario file")
    if params.dynamics != SingleIntegrator(params.n):
        raise ValueError("only single-integrator scenarios can be written")
    s = params.schedule
    sections = {
        "agents": {"x0": params.x0},
        "obstacles": {"centers": [list(o.center) for o in params.obstacles],
                      "radii": [float(o.radius) for o in params.obstacles]},
        "target": {"Sigma": params.Sigma, "epsilon": float(params.epsilon)},
        "gains": {k: float(getattr(params, k)) for k in SECTIONS["gains"]},
        "comm": {"d_c": float(params.comm.d_c), "eps_c": float(params.comm.eps_c),
                 "sigma": "auto" if params.comm.sigma is None else float(params.comm.sigma),
                 "d0": float(params.comm.d0)},
        "fast": {k: float(getattr(params, k)) for k in SECTIONS["fast"]},
        "bounds": {"c": float(params.c)},
        "schedule": {"dt_slow": float(s.dt_slow), "substeps": int(s.substeps), "horizon": float(s.horizon),
                     "warm_start": bool(s.warm_start), "scheme": s.scheme, "slow_method": s.slow_method},
    }
    out = []
    for name, body in sections.items():
        out.append(f"[{name}]")
        out.extend(f"{k} = {_fmt(v)}" for k, v in body.items())
        out.append("")
    return "\n".join(out)


def write_scenario(params: ScenarioParams, path) -> None:
    Path(path).write_text(format_scenario(params))


# ---------------------------------------------------------------------------
# result files


def _num(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectory(path, result: RunResult) -> None:
    """One row per agent per recorded step: ``t, agent_id, x..., u...``."""
    t, x, u = result.trajectory.arrays()
    n, m = result.params.n, result.params.m
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "agent_id"] + [f"x{k}" for k in range(n)] + [f"u{k}" for k in range(m)])
        for k in range(len(t)):
            for i in range(result.params.N):
                w.writerow([_num(t[k]), i] + [_num(v) for v in x[k, i]] + [_num(v) for v in u[k, i]])


def read_trajectory(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Times ``(T,)``, states ``(T, N, n)`` and controls ``(T, N, m)`` from a trajectory file."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n = sum(h.startswith("x") for h in header)
    data = np.array([[float(v) for v in r] for r in body])
    if data.size == 0:
        return np.zeros(0), np.zeros((0, 0, n)), np.zeros((0, 0, len(header) - 2 - n))
    N = int(data[:, 1].max()) + 1
    T = data.shape[0] // N
    data = data.reshape(T, N, -1)
    return data[:, 0, 0], data[:, :, 2:2 + n], data[:, :, 2 + n:]


def write_metrics(path, result: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in result.metrics:
            w.writerow([_num(v) for v in row.values()])


def read_metrics(path) -> np.ndarray:
    """Metrics rows as an array with columns in ``METRIC_FIELDS`` order."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != tuple(METRIC_FIELDS):
        raise ValueError(f"unexpected metrics header {rows[0]}")
    return np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(METRIC_FIELDS))


def run_summary(result: RunResult) -> dict:
    s = result.summary()
    d0 = result.params.comm.d0
    s["flags"] = {
        "collision": s["min_pair_dist"] < d0 - 1e-6,
        "obstacle": s["min_obs_clearance"] < -1e-6,
        "disconnected": result.params.N > 1 and s["min_lambda2_binary"] <= 0.0,
        "aborted": bool(result.aborted),
    }
    s["final_target_residuals"] = [v - 1.0 for v in s.pop("final_target_values")]
    return s


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# property suite


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    limit: float
    detail: str = ""

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


MUTATIONS = ("phi_clf_sign", "lambda2_grad")


def _rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


def default_params() -> ScenarioParams:
    return load_scenario(SCENARIO_DIR / "obstacle_field.toml")


def _hooks(mutation: str | None):
    """Assembler and connectivity functions, optionally with a planted defect."""
    if mutation is not None and mutation not in MUTATIONS:
        raise ValueError(f"unknown mutation {mutation!r}; choose from {MUTATIONS}")

    def assemble(x, params, conn):
        bs = assemble_all(x, params, conn)
        if mutation == "phi_clf_sign":
            phi = bs.phi.copy()
            phi[:, bs.rows.clf] *= -1.0
            bs = dataclasses.replace(bs, phi=phi)
        return bs

    def lam(positions, comm, **kw):
        info = lambda2_with_grad(positions, comm, **kw)
        if mutation == "lambda2_grad":
            info = dataclasses.replace(info, grad=1.01 * info.grad)
        return info

    return assemble, lam


def _random_connected(rng, params: ScenarioParams, min_gap: float, spread: float = 0.5) -> np.ndarray:
    while True:
        p = rng.uniform(-spread, spread, size=(params.N, params.dynamics.l))
        if lambda2_with_grad(p, params.comm, warn=False).eigengap >= min_gap:
            return p


def check_gradients(rng, params: ScenarioParams, lam, samples: int = 50) -> list[CheckResult]:
    """Analytic gradients against central differences."""
    comm = params.comm
    worst_l2 = 0.0
    for _ in range(samples):
        p = _random_connected(rng, params, 0.1)
        info = lam(p, comm, warn=False)
        fd = finite_diff_grad(lambda q: lambda2_with_grad(q, comm, warn=False).lambda2, p)
        worst_l2 = max(worst_l2, _rel_err(info.grad, fd))
    worst_a = 0.0
    for _ in range(samples):
        pj = rng.normal(size=2)
        d = rng.uniform(0.05, 0.98 * comm.r_adj) * (lambda v: v / np.linalg.norm(v))(rng.normal(size=2))
        pi = pj + d
        _, ga = adjacency_weight(pi, pj, comm)
        fd = finite_diff_grad(lambda q: adjacency_weight(q, pj, comm)[0], pi)
        worst_a = max(worst_a, _rel_err(ga, fd))
    worst_h = 0.0
    for _ in range(samples):
        x = rng.uniform(-3.0, 3.0, size=params.n)
        _, g = hV_product(x, params)
        fd = finite_diff_grad(lambda q: hV_product(q, params)[0], x)
        worst_h = max(worst_h, _rel_err(g, fd))
    lim = 1e-4
    return [CheckResult("lambda2_gradient", worst_l2 <= lim, worst_l2, lim),
            CheckResult("adjacency_gradient", worst_a <= lim, worst_a, lim),
            CheckResult("target_gradient", worst_h <= lim, worst_h, lim)]


def random_qp(rng, feasible: bool = True) -> QPInstance:
    """Random diagonal-weight QP; feasible ones contain a known interior point."""
    d = int(rng.integers(1, 7))
    rows = int(rng.integers(1, 13))
    A = rng.normal(size=(rows, d))
    if feasible:
        v0 = rng.normal(size=d)
        b = A @ v0 + rng.uniform(0.0, 1.0, size=rows)
    else:
        b = rng.normal(size=rows)
        a = rng.normal(size=d)
        A = np.vstack([A, a, -a])
        b = np.concatenate([b, [-1.0, -1.0]])  # a.v <= -1 and a.v >= 1
    return QPInstance(rng.uniform(0.2, 5.0, size=d), A, b)


def check_qp(rng, instances: int = 100) -> list[CheckResult]:
    worst_dv, worst_kkt, wrong = 0.0, 0.0, 0
    for _ in range(instances):
        inst = random_qp(rng)
        sol = solve(inst)
        if not sol.ok:
            wrong += 1
            continue
        ref = brute_force_oracle(inst)
        worst_dv = max(worst_dv, float(np.linalg.norm(sol.v - ref)))
        worst_kkt = max(worst_kkt, kkt_residual(inst, sol))
    for _ in range(instances // 5):
        if solve(random_qp(rng, feasible=False)).ok:
            wrong += 1
    return [CheckResult("qp_vs_oracle", worst_dv <= 1e-6, worst_dv, 1e-6),
            CheckResult("qp_kkt", worst_kkt <= 1e-8, worst_kkt, 1e-8),
            CheckResult("qp_infeasible_classification", wrong == 0, float(wrong), 0.0)]


def check_merit(rng, params: ScenarioParams, runs: int = 10, max_steps: int = 200_000) -> list[CheckResult]:
    """W is non-increasing along the fast flow and reaches 1e-6."""
    conn = lambda2_with_grad(params.dynamics.position(params.x0), params.comm)
    system = build_joint(assemble_all(params.x0, params, conn), params.xi)
    worst_rise, unconverged = 0.0, 0
    # monotonicity belongs to the flow; coarser steps overshoot right after duals clamp to zero
    dt = params.tau / 50.0
    for _ in range(runs):
        f = FastState.zeros(system)
        v = rng.normal(size=f.w.size + f.z.size + f.y.size)
        v *= rng.uniform(0.0, 1.0) / np.linalg.norm(v)
        nw, nz = f.w.size, f.z.size
        fast = FastState(v[:nw], v[nw:nw + nz], np.abs(v[nw + nz:]))
        W = merit_W(system, fast).W
        for _ in range(max_steps):
            fast = fast_step(system, fast, dt, params.tau, params.schedule.scheme)
            W_new = merit_W(system, fast).W
            worst_rise = max(worst_rise, W_new - W)
            W = W_new
            if W < 1e-6:
                break
        else:
            unconverged += 1
    return [CheckResult("merit_monotone", worst_rise <= 1e-9, worst_rise, 1e-9),
            CheckResult("merit_converges", unconverged == 0, float(unconverged), 0.0)]


def decomposition_gaps(x, u, z, params: ScenarioParams, conn, blocks) -> tuple[float, float, float]:
    """Largest mismatch of the pair, connectivity and target splittings at ``(x, u, z)``.

    The agents' local rows are evaluated from the assembled blocks; their
    sums must reproduce the weighted pair conditions, the negated
    connectivity condition and the target condition.
    """
    N = params.N
    lay = JointLayout(N, params.m)
    rows = np.stack([eval_local(blocks.block(i), u[i], lay.local_z(i, z)) for i in range(N)])
    rl = blocks.rows
    pair = 0.0
    for i in range(N):
        for j in range(i + 1, N):
            # agent i's pair row for j sits at slot j, shifted past i itself
            lhs = rows[i, j - 1] + rows[j, i]
            rhs = -blocks.hmat[i, j] * g_inter(u[i], u[j], x[i], x[j], params)
            pair = max(pair, abs(lhs - rhs))
    c = abs(float(np.sum(rows[:, rl.conn])) + g_conn(x, u, params, conn))
    t = abs(float(np.sum(rows[:, rl.clf])) - g_clf(x, u, params))
    return pair, c, t


def check_decomposition(rng, params: ScenarioParams, assemble, samples: int = 100) -> list[CheckResult]:
    lay = JointLayout(params.N, params.m)
    worst = np.zeros(3)
    for _ in range(samples):
        p = _random_connected(rng, params, 1e-3, spread=0.6)
        x = p + rng.uniform(-1.0, 1.0, size=(1, p.shape[1])) * 2.0
        conn = lambda2_with_grad(x, params.comm, warn=False)
        blocks = assemble(x, params, conn)
        u = rng.normal(size=(params.N, params.m))
        z = rng.normal(size=lay.n_z)
        worst = np.maximum(worst, decomposition_gaps(x, u, z, params, conn, blocks))
    lim = 1e-10
    return [CheckResult(f"decomposition_{name}", bool(w <= lim), float(w), lim)
            for name, w in zip(("pair", "connectivity", "target"), worst)]


def check_continuity(rng, params: ScenarioParams, assemble, samples: int = 50) -> list[CheckResult]:
    """Blocks barely change while a pair crosses the communication radius."""
    worst = 0.0
    d_c = params.comm.d_c
    for _ in range(samples):
        while True:
            p = rng.uniform(-1.0, 1.0, size=(params.N, params.dynamics.l))
            i, j = rng.choice(params.N, size=2, replace=False)
            e = rng.normal(size=p.shape[1])
            e /= np.linalg.norm(e)
            inside, outside = p.copy(), p.copy()
            inside[j] = p[i] + (d_c - 1e-9) * e
            outside[j] = p[i] + (d_c + 1e-9) * e
            ci = lambda2_with_grad(inside, params.comm, warn=False)
            if ci.eigengap >= 1e-3:
                break
        co = lambda2_with_grad(outside, params.comm, warn=False)
        a, b = assemble(inside, params, ci), assemble(outside, params, co)
        gap = max(np.max(np.abs(a.Psi - b.Psi)), np.max(np.abs(a.Theta - b.Theta)), np.max(np.abs(a.phi - b.phi)))
        worst = max(worst, float(gap))
    return [CheckResult("continuity_at_range", worst <= 1e-7, worst, 1e-7)]


def check_tick(rng, params: ScenarioParams, assemble) -> list[CheckResult]:
    """One message-passing tick against the joint fast step."""
    x = params.x0
    conn = lambda2_with_grad(params.dynamics.position(x), params.comm)
    blocks = assemble(x, params, conn)
    system = build_joint(blocks, params.xi)
    f0 = FastState.zeros(system)
    fast = FastState(rng.normal(size=f0.w.size), rng.normal(size=f0.z.size), np.abs(rng.normal(size=f0.y.size)))
    net = Network(params, x)
    net.load_joint(fast)
    edges = neighbors(params.dynamics.position(x), params.comm)
    lb = LocalBlocks.build(blocks, edges)
    dt = params.tau / 10.0
    exchange(net, lb.senders, lb.receivers)
    network_fast_update(net, lb, dt / params.tau, params.schedule.scheme)
    ref = fast_step(system, fast, dt, params.tau, params.schedule.scheme)
    gap = net.to_joint().max_abs_diff(ref)
    return [CheckResult("tick_equals_joint_step", gap <= 1e-12, gap, 1e-12)]


def frozen_control_gap(params: ScenarioParams, x=None) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Local QPs at the fast equilibrium against the joint optimiser, state held fixed.

    Returns the largest control difference, the joint controls' violation of
    the original coupled constraints, and both control arrays.
    """
    x = params.x0 if x is None else np.asarray(x, float)
    conn = lambda2_with_grad(params.dynamics.position(x), params.comm)
    blocks = assemble_all(x, params, conn)
    system = build_joint(blocks, params.xi)
    fast, _ = run_to_equilibrium(system, None, params.tau, tol=1e-11, scheme=params.schedule.scheme)
    net = Network(params, x)
    net.load_joint(fast)
    Z = net.local_z()
    u_loc = np.stack([solve_local(blocks.block(i), Z[i]) for i in range(params.N)])
    cs = solve_centralized(x, params, conn, blocks)
    return float(np.max(np.abs(u_loc - cs.u))), max(cs.original_violation, 0.0), u_loc, cs.u


def check_equivalence(params: ScenarioParams) -> list[CheckResult]:
    gap, viol, _, _ = frozen_control_gap(params)
    return [CheckResult("frozen_control_gap", gap <= 1e-3, gap, 1e-3),
            CheckResult("joint_controls_original_feasible", viol <= 1e-7, viol, 1e-7)]


def run_checks(seed: int = 0, mutation: str | None = None, quick: bool = False) -> list[CheckResult]:
    """The whole property suite; ``mutation`` plants a known defect."""
    rng = np.random.default_rng(seed)
    params = default_params()
    assemble, lam = _hooks(mutation)
    scale = 5 if quick else 1
    out = []
    out += check_gradients(rng, params, lam, 50 // scale)
    out += check_qp(rng, 100 // scale)
    out += check_merit(rng, params, max(1, 10 // scale))
    out += check_decomposition(rng, params, assemble, 100 // scale)
    out += check_continuity(rng, params, assemble, 50 // scale)
    out += check_tick(rng, params, assemble)
    out += check_equivalence(params)
    return out


# ---------------------------------------------------------------------------
# commands


def apply_overrides(params: ScenarioParams, dt=None, substeps=None, horizon=None, tau=None,
                    warm_start=False) -> ScenarioParams:
    s = params.schedule
    sched = Schedule(dt if dt is not None else s.dt_slow, substeps if substeps is not None else s.substeps,
                     horizon if horizon is not None else s.horizon, s.warm_start or warm_start, s.scheme,
                     s.slow_method)
    return params.replace(schedule=sched, **({"tau": tau} if tau is not None else {}))


def _progress(stream):
    def report(k, steps, row):
        if steps >= 10 and k % max(1, steps // 10) == 0 and row is not None:
            print(f"  t={row.t:9.3f}  lambda2_bin={row.lambda2_binary:.3f}  min_pair={row.min_pair_dist:.4f}  "
                  f"clearance={row.min_obs_clearance:.4f}  max_residual={row.max_target_residual:.4f}",
                  file=stream, flush=True)
    return report


def cmd_run(params: ScenarioParams, mode: str, out, verbose: bool = False) -> int:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = run(params, mode, progress=_progress(sys.stderr) if verbose else None)
    except InitialStateError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    write_trajectory(out / f"trajectory_{mode}.csv", result)
    write_metrics(out / f"metrics_{mode}.csv", result)
    summary = run_summary(result)
    write_summary(out / f"summary_{mode}.json", summary)
    print(json.dumps(summary, sort_keys=True))
    if result.aborted:
        print(f"aborted: {result.aborted}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_VIOLATION


def trajectory_gap(a: RunResult, b: RunResult) -> float:
    """Largest distance between the two runs' agent states at common recorded times."""
    ta, xa, _ = a.trajectory.arrays()
    tb, xb, _ = b.trajectory.arrays()
    k = min(len(ta), len(tb))
    if k == 0:
        return 0.0
    return float(np.max(np.linalg.norm(xa[:k] - xb[:k], axis=-1)))


def compare(params: ScenarioParams, progress=None) -> tuple[dict, RunResult, RunResult]:
    dist = run(params, "distributed", progress=progress)
    cent = run(params, "centralized", progress=progress)
    gap, viol, _, _ = frozen_control_gap(params)
    report = {
        "max_trajectory_gap": trajectory_gap(dist, cent),
        "frozen_control_gap": gap,
        "joint_controls_original_violation": viol,
        "distributed": run_summary(dist),
        "centralized": run_summary(cent),
    }
    return report, dist, cent


def cmd_compare(params: ScenarioParams, out, verbose: bool = False) -> int:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        report, dist, cent = compare(params, _progress(sys.stderr) if verbose else None)
    except InitialStateError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    for res in (dist, cent):
        write_trajectory(out / f"trajectory_{res.mode}.csv", res)
        write_metrics(out / f"metrics_{res.mode}.csv", res)
    write_summary(out / "compare.json", report)
    print(json.dumps({k: report[k] for k in ("max_trajectory_gap", "frozen_control_gap")}, sort_keys=True))
    return EXIT_OK if dist.ok and cent.ok else EXIT_VIOLATION


def cmd_check(seed: int = 0, mutation: str | None = None, stream=None) -> int:
    stream = stream if stream is not None else sys.stdout
    results = run_checks(seed, mutation)
    for r in results:
        print(json.dumps(r.as_dict(), sort_keys=True), file=stream)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="distcbf", description="Simulate and check distributed safe reach-avoid control.")
    sub = ap.add_subparsers(dest="command", required=True)

    def sim_flags(p, with_mode: bool):
        p.add_argument("--scenario", default="obstacle_field", help="scenario file or shipped scenario name")
        if with_mode:
            p.add_argument("--mode", choices=("distributed", "centralized"), default="distributed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--dt", type=float, help="slow time step")
        p.add_argument("--substeps", type=int, help="fast substeps per slow step")
        p.add_argument("--horizon", type=float, help="simulated time")
        p.add_argument("--tau", type=float, help="fast time-scale parameter")
        p.add_argument("--warm-start", action="store_true", help="start the fast variables at equilibrium")
        p.add_argument("--seed", type=int, default=0, help="unused by simulations, which are deterministic")
        p.add_argument("-v", "--verbose", action="store_true", help="print progress to stderr")

    sim_flags(sub.add_parser("run", help="simulate one controller"), True)
    sim_flags(sub.add_parser("compare", help="simulate both controllers and compare them"), False)
    chk = sub.add_parser("check", help="run the property suite")
    chk.add_argument("--seed", type=int, default=0, help="seed for the random test instances")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    if args.command == "check":
        return cmd_check(args.seed)
    try:
        params = apply_overrides(load_scenario(args.scenario), args.dt, args.substeps, args.horizon, args.tau,
                                 args.warm_start)
        if params.schedule.dt_fast > params.tau / 10.0 * (1 + 1e-12):
            raise ValueError(f"dt/substeps = {params.schedule.dt_fast:g} does not resolve tau = {params.tau:g}; "
                             f"need dt/substeps <= tau/10")
    except (ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "run":
        return cmd_run(params, args.mode, args.out, args.verbose)
    return cmd_compare(params, args.out, args.verbose)


if __name__ == "__main__":
    sys.exit(main())
