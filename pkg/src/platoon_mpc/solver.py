"""Distributed solution of the horizon control problem.

One agent runs per controlled vehicle.  An agent owns its control sequence
and keeps working copies of its neighbors'; agreement between copies is
reached by Douglas-Rachford splitting over the consensus subspace, with
every cross-agent read carried by a message fabric that only links adjacent
positions.  For a one-step horizon the problem is a convex QCQP and a
single splitting run solves it.  For longer horizons the nonconvex speed
and safety rows are replaced by quadratic majorants around the current
iterate and the resulting convex subproblems are re-solved until the
iterates settle; the first iterate comes from the loss-free cost minimized
over inner convex restrictions of the true constraint sets, so every later
iterate inherits feasibility.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import (DecomposedModel, LocalObjective, QuadraticModel,
                       StructuralMatrices, WeightSchedule,
                       assemble_quadratic_model, build_local_objectives,
                       build_structural, decompose_model, local_objective,
                       local_objective_hessian, restricted_convex_sets,
                       safety_constraint_fn, safety_constraint_hessians,
                       speed_constraint_fn)
from .convex import (ConvexQcqp, QcqpInfeasibleError, QcqpResult, box_prox,
                     qcqp_prox, qcqp_solve)
from .platoon import GRAVITY, PlatoonConfig, PlatoonState, VehicleParams

# splitting tolerances per horizon length; the p = 1 entry is the single
# convex run and is kept tight because the closed-loop stationary offsets
# inherit any solver bias roughly 17-fold, the rest split into outer
# (linearization) and inner rounds
OUTER_TOL = {1: 1.0e-5, 2: 6.5e-3, 3: 7.5e-3, 4: 1.0e-2, 5: 1.25e-2}
INNER_TOL = {2: 4.0e-3, 3: 5.0e-3, 4: 7.5e-3, 5: 1.0e-2}
# curvature scaling of the local cost majorants
NU = {2: 0.8, 3: 0.8, 4: 0.9, 5: 0.9}


class LocalityError(RuntimeError):
    """Raised when an agent tries to read or write beyond its neighbors."""


class WarmStartError(RuntimeError):
    """Raised when no feasible first iterate can be produced."""


@dataclass
class SolverConfig:
    """Knobs of the splitting scheme.  Tolerances default to the per-p
    tables above; lip_factor scales the constraint-row majorants and nu
    the cost majorant (1.0 makes both provably global for the row
    curvatures at hand, smaller trades margin for speed)."""

    alpha: float = 0.9
    rho: float = 0.1
    tol_outer: float | None = None
    tol_inner: float | None = None
    lin_tol: float = 1e-5
    warm_tol: float = 1e-7
    max_outer: int = 60
    max_inner: int = 500
    lip_factor: float = 0.9
    nu: float | None = None
    freeze_step: float = 1e-9
    freeze_rounds: int = 2
    guard_tol: float = 1e-8
    feas_tol: float = 1e-6
    # safety rows couple neighbouring blocks, so the assembled plan can sit a
    # consensus gap away from each owner's feasible prox point; every retry
    # tightens the round tolerance tenfold until the gap is immaterial
    guard_retries: int = 6

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.rho <= 0.0:
            raise ValueError("rho must be positive")

    def outer_tol_for(self, p: int) -> float:
        return self.tol_outer if self.tol_outer is not None else OUTER_TOL[p]

    def inner_tol_for(self, p: int) -> float:
        return self.tol_inner if self.tol_inner is not None else INNER_TOL[p]

    def nu_for(self, p: int) -> float:
        return self.nu if self.nu is not None else NU.get(p, 0.9)


class LocalExchange:
    """Message fabric between agents.  Every cross-agent read passes
    through transfer(), which refuses non-adjacent pairs and counts
    traffic for the diagnostics."""

    def __init__(self, n: int):
        self.n = n
        self.messages = 0
        self.floats = 0

    def transfer(self, src: int, dst: int, payload: np.ndarray) -> np.ndarray:
        if not (1 <= src <= self.n and 1 <= dst <= self.n):
            raise LocalityError(f"agent index out of range: {src} -> {dst}")
        if abs(src - dst) > 1:
            raise LocalityError(
                f"agents {src} and {dst} are not adjacent")
        self.messages += 1
        self.floats += payload.size
        return np.array(payload, copy=True)


@dataclass
class SharedContext:
    """Problem data common to all agents for the current step.  The
    quadratic weights and their decomposition never change between steps;
    the linear terms and local costs follow the state."""

    config: PlatoonConfig
    weights: WeightSchedule
    struct: StructuralMatrices
    dec: DecomposedModel
    model: QuadraticModel
    objectives: list[LocalObjective]
    state: PlatoonState


@dataclass
class AgentState:
    """One agent: vehicle index, the stacked local vector (own block plus
    neighbor copies, blocks ascending), splitting iterates and the data of
    the current convex subproblem."""

    i: int
    span: tuple[int, int]
    p: int
    lo: np.ndarray
    hi: np.ndarray
    shared: SharedContext
    u_hat: np.ndarray = None
    z: np.ndarray = None
    w: np.ndarray | None = None
    w_prev: np.ndarray | None = None
    y_last: np.ndarray | None = None
    base: np.ndarray = None
    olo: np.ndarray = None
    ohi: np.ndarray = None
    problem: ConvexQcqp | None = None
    prox_lin: np.ndarray | None = None
    prox_curv: float = 0.0
    grad_J: np.ndarray | None = None
    L_J: float = 0.0
    row_grads: list | None = None
    L_rows: list | None = None
    warm: QcqpResult | None = None
    carry_z: np.ndarray | None = None
    frozen: bool = False
    still: int = 0
    prox_calls: int = 0
    prox_time: float = 0.0

    def __post_init__(self) -> None:
        d = self.lo.size
        if self.u_hat is None:
            self.u_hat = np.zeros(d)
        if self.z is None:
            self.z = np.zeros(d)
        if self.base is None:
            self.base = np.zeros(d)
        if self.olo is None:
            self.olo = self.lo.copy()
        if self.ohi is None:
            self.ohi = self.hi.copy()

    @property
    def blocks(self) -> list[int]:
        return list(range(self.span[0], self.span[1] + 1))

    @property
    def own_pos(self) -> int:
        return self.i - self.span[0]

    @property
    def dim(self) -> int:
        return self.lo.size

    def sl(self, pos: int) -> slice:
        return slice(pos * self.p, (pos + 1) * self.p)

    def own(self, vec: np.ndarray) -> np.ndarray:
        return vec[self.sl(self.own_pos)]


# ---------------------------------------------------------------------------
# formulation

def formulate_local(config: PlatoonConfig, weights: WeightSchedule,
                    state: PlatoonState,
                    options: SolverConfig | None = None) -> list[AgentState]:
    """Build the agent graph for one platoon.  The agents persist across
    steps; call solve_mpc with a new state to re-linearize around it."""
    p, n = weights.p, config.n
    struct = build_structural(n, p)
    model = assemble_quadratic_model(config, weights, state=state)
    dec = decompose_model(model)
    objectives = build_local_objectives(config, model, dec, state)
    shared = SharedContext(config=config, weights=weights, struct=struct,
                           dec=dec, model=model, objectives=objectives,
                           state=state.copy())
    agents = []
    for i in range(1, n + 1):
        span = dec.spans[i - 1]
        pars = [config.vehicles[j - 1] for j in range(span[0], span[1] + 1)]
        lo = np.concatenate([np.full(p, v.accel_min) for v in pars])
        hi = np.concatenate([np.full(p, v.accel_max) for v in pars])
        agents.append(AgentState(i=i, span=span, p=p, lo=lo, hi=hi,
                                 shared=shared))
    return agents


def _refresh(agents: list[AgentState], state: PlatoonState) -> None:
    sh = agents[0].shared
    sh.model = assemble_quadratic_model(sh.config, sh.weights, state=state)
    sh.objectives = build_local_objectives(sh.config, sh.model, sh.dec, state)
    sh.state = state.copy()


def _prev_of(config: PlatoonConfig, i: int) -> VehicleParams:
    return config.leader if i == 1 else config.vehicles[i - 2]


def _tracking(sh: SharedContext, i: int):
    """State pieces entering vehicle i's constraint rows."""
    st = sh.state
    z = st.spacing_error(sh.config.gap)
    zp = st.rel_speed()
    return (float(st.v[i]), float(st.v[i - 1]), float(z[i - 1]),
            float(zp[i - 1]))


def _prev_controls(a: AgentState) -> np.ndarray:
    """The predecessor sequence seen by agent i's safety rows: its local
    copy, or the constant leader control for the first vehicle."""
    if a.i == 1:
        return np.full(a.p, a.shared.state.u0)
    return a.u_hat[a.sl(a.own_pos - 1)]


# ---------------------------------------------------------------------------
# consensus and splitting rounds

def _consensus(agents: list[AgentState], net: LocalExchange) -> dict:
    """Average every vehicle's copies at its owner and hand the mean back.
    Contributions are summed in fixed index order so the result does not
    depend on agent scheduling."""
    p = agents[0].p
    contrib: dict[int, dict[int, np.ndarray]] = {}
    for a in agents:
        for pos, j in enumerate(a.blocks):
            seg = a.z[a.sl(pos)]
            if j != a.i:
                seg = net.transfer(a.i, j, seg)
            contrib.setdefault(j, {})[a.i] = seg
    means = {}
    for j, parts in contrib.items():
        stack = [parts[k] for k in sorted(parts)]
        means[j] = sum(stack) / float(len(stack))
    for a in agents:
        w = np.empty_like(a.z)
        for pos, j in enumerate(a.blocks):
            m = means[j] if j == a.i else net.transfer(j, a.i, means[j])
            w[a.sl(pos)] = m
        a.w_prev, a.w = a.w, w
    return means


def _agent_prox(a: AgentState, anchor: np.ndarray,
                options: SolverConfig) -> np.ndarray:
    if a.frozen:
        # the agent's set collapsed to its current point
        return np.zeros_like(anchor)
    t0 = time.perf_counter()
    try:
        if a.problem is None:
            lin = a.prox_lin if a.prox_lin is not None else np.zeros(a.dim)
            y = box_prox(np.full(a.dim, a.prox_curv + 1.0 / options.rho),
                         lin - anchor / options.rho, a.olo, a.ohi)
        else:
            res = qcqp_prox(a.problem, anchor, options.rho, warm=a.warm)
            a.warm = res
            y = res.y
    except QcqpInfeasibleError as err:
        raise QcqpInfeasibleError(f"agent {a.i}: {err}") from err
    finally:
        a.prox_time += time.perf_counter() - t0
        a.prox_calls += 1
    return y


def dr_round(agents: list[AgentState], options: SolverConfig,
             net: LocalExchange | None = None) -> float:
    """One synchronous splitting round: average the copies, then every
    agent applies its prox to the reflected iterate.  Returns the largest
    change of any agent's consensus iterate (inf on the first round)."""
    if net is None:
        net = LocalExchange(len(agents))
    _consensus(agents, net)
    resid = np.inf
    if all(a.w_prev is not None for a in agents):
        resid = max(float(np.max(np.abs(a.w - a.w_prev))) for a in agents)
    for a in agents:
        y = _agent_prox(a, 2.0 * a.w - a.z, options)
        a.y_last = y
        a.z = a.z + 2.0 * options.alpha * (y - a.w)
    return resid


def _run_rounds(agents, options, net, tol, max_rounds):
    trace = []
    converged = False
    for _ in range(max_rounds):
        resid = dr_round(agents, options, net)
        if np.isfinite(resid):
            trace.append(resid)
            if resid <= tol:
                converged = True
                break
    return trace, converged


def _begin_stage(agents: list[AgentState], base_by_block: dict | None,
                 seed: str = "zero") -> None:
    """Reset the splitting state for a new stage.  All copies of a block
    share one base vector, so consensus in offset coordinates is exact."""
    for a in agents:
        if base_by_block is None:
            a.base = np.zeros(a.dim)
        else:
            a.base = np.concatenate([base_by_block[j] for j in a.blocks])
        a.olo = a.lo - a.base
        a.ohi = a.hi - a.base
        if seed == "carry" and a.carry_z is not None:
            a.z = a.carry_z.copy()
        elif seed == "keep":
            pass
        else:
            a.z = np.zeros(a.dim)
        a.w = None
        a.w_prev = None
        a.y_last = None


def _collect_plan(agents: list[AgentState]) -> np.ndarray:
    """The per-vehicle control sequences at the current consensus point."""
    return np.vstack([a.own(a.base + a.w) for a in agents])


def _collect_prox_plan(agents: list[AgentState]) -> np.ndarray:
    """Per-vehicle control sequences read from each owner's last prox
    output.  When a constraint row is active the consensus average sits
    slightly outside the feasible set, while the prox point satisfies the
    owner's rows by construction, so the returned plan is the one to
    check and apply."""
    rows = []
    for a in agents:
        y = a.y_last if a.y_last is not None else a.w
        rows.append(a.own(a.base + y))
    return np.vstack(rows)


def _consensus_gap(agents: list[AgentState]) -> float:
    """Worst disagreement between a prox copy and the owner's prox block."""
    gap = 0.0
    for a in agents:
        if a.y_last is None:
            continue
        for pos, j in enumerate(a.blocks):
            if j == a.i:
                continue
            other = agents[j - 1]
            if other.y_last is None:
                continue
            d = a.y_last[a.sl(pos)] - other.own(other.y_last)
            gap = max(gap, float(np.max(np.abs(d))))
    return gap


def _stationarity(agents: list[AgentState]) -> float:
    """Fixed-point gap of the splitting at exit: prox output vs consensus."""
    vals = [float(np.max(np.abs(a.y_last - a.w)))
            for a in agents if a.y_last is not None and a.w is not None]
    return max(vals) if vals else np.inf


# ---------------------------------------------------------------------------
# constraint evaluation at a full plan

def plan_violation(config: PlatoonConfig, state: PlatoonState,
                   u_plan: np.ndarray, struct: StructuralMatrices) -> float:
    """Worst violation of the boxes, speed band and safety rows of the
    horizon model at a full (n, p) control plan."""
    n, p = u_plan.shape
    z = state.spacing_error(config.gap)
    zp = state.rel_speed()
    worst = 0.0
    for i in range(1, n + 1):
        par = config.vehicles[i - 1]
        u = u_plan[i - 1]
        worst = max(worst, float(np.max(par.accel_min - u)),
                    float(np.max(u - par.accel_max)))
        q, _ = speed_constraint_fn(config, par, float(state.v[i]), u)
        worst = max(worst, float(np.max(config.speed_min - q)),
                    float(np.max(q - config.speed_max)))
        prev = _prev_of(config, i)
        u_prev = (np.full(p, state.u0) if i == 1 else u_plan[i - 2])
        h, _, _ = safety_constraint_fn(
            config, par, prev, float(state.v[i]), float(state.v[i - 1]),
            float(z[i - 1]), float(zp[i - 1]), u, u_prev, struct)
        worst = max(worst, float(np.max(h)))
    return worst


def _embed(dim: int, pos_vecs: list[tuple[slice, np.ndarray]]) -> np.ndarray:
    out = np.zeros(dim)
    for sl, vec in pos_vecs:
        out[sl] = vec
    return out


# ---------------------------------------------------------------------------
# warm start: loss-free cost over restricted convex sets

def _linear_problem(a: AgentState) -> ConvexQcqp:
    sh = a.shared
    p, dim = a.p, a.dim
    own_sl = a.sl(a.own_pos)
    w_hat = sh.dec.W_hat[a.i - 1]
    q = _embed(dim, [(own_sl, sh.model.c_block(a.i))])
    v, v_prev, z, zp = _tracking(sh, a.i)
    rs = restricted_convex_sets(sh.config, a.i, v, v_prev, z, zp, p,
                                sh.struct, u0=sh.state.u0)
    s_p = np.tril(np.ones((p, p)))
    quads = []
    for j in range(p):
        row = _embed(dim, [(own_sl, s_p[j])])
        quads.append((np.zeros((dim, dim)), -row, float(rs.cum_lo[j])))
        quads.append((np.zeros((dim, dim)), row, -float(rs.cum_hi[j])))
    for A, b, c in rs.quads:
        Af = np.zeros((dim, dim))
        bf = np.zeros(dim)
        first = a.own_pos - 1 if rs.includes_prev else a.own_pos
        idx = np.arange(first * p, (a.own_pos + 1) * p)
        Af[np.ix_(idx, idx)] = A
        bf[idx] = b
        quads.append((Af, bf, float(c)))
    return ConvexQcqp(w_hat, q, a.lo, a.hi, quads)


def warm_start_linear(agents: list[AgentState],
                      options: SolverConfig | None = None,
                      net: LocalExchange | None = None,
                      diag: "MpcDiagnostics | None" = None) -> np.ndarray:
    """First iterate: minimize the loss-free quadratic cost over the inner
    convex restrictions of the horizon constraints, by splitting rounds.
    The result is checked against the true rows and the rounds continue at
    a tighter tolerance if the averaging left a violation behind."""
    options = options or SolverConfig()
    if net is None:
        net = LocalExchange(len(agents))
    sh = agents[0].shared
    for a in agents:
        a.problem = _linear_problem(a)
    _begin_stage(agents, None, seed="carry")
    tol = options.lin_tol
    full_trace = []
    for attempt in range(options.guard_retries + 1):
        trace, _ = _run_rounds(agents, options, net, tol, options.max_inner)
        full_trace += trace
        plan = _collect_plan(agents)
        gap = plan_violation(sh.config, sh.state, plan, sh.struct)
        if gap <= options.guard_tol:
            break
        if attempt == options.guard_retries:
            raise WarmStartError(
                f"restricted stage kept violation {gap:.2e} above "
                f"{options.guard_tol:.0e} after {attempt + 1} attempts")
        tol /= 10.0
    if diag is not None:
        diag.lin_rounds = len(full_trace)
        diag.residual_trace["linear"] = [float(r) for r in full_trace]
    means = {j + 1: plan[j] for j in range(len(agents))}
    for a in agents:
        a.carry_z = a.z.copy()
        a.u_hat = np.concatenate([means[j] for j in a.blocks])
        a.problem = None
    return plan


# ---------------------------------------------------------------------------
# linearization of one outer step

def lipschitz_estimates(agents: list[AgentState],
                        options: SolverConfig | None = None) -> list[dict]:
    """Curvature bounds at the current iterates: nu * ||local cost
    Hessian|| for the cost and lip_factor * ||row Hessian|| for each
    constraint row (upper speed rows are concave in no direction that
    matters: they enter through their convex negatives and need none)."""
    options = options or SolverConfig()
    out = []
    for a in agents:
        sh = a.shared
        p = a.p
        par = sh.config.vehicles[a.i - 1]
        prev = _prev_of(sh.config, a.i)
        v, _, _, _ = _tracking(sh, a.i)
        u_by_block = [a.u_hat[a.sl(b)] for b in range(len(a.blocks))]
        hj = local_objective_hessian(sh.objectives[a.i - 1], u_by_block)
        l_obj = options.nu_for(p) * float(
            np.max(np.abs(np.linalg.eigvalsh(hj))))
        u_own = a.own(a.u_hat)
        own_h, prev_h = safety_constraint_hessians(
            sh.config, par, prev, v, u_own, sh.struct)
        tau = sh.config.tau
        s_p = np.tril(np.ones((p, p)))
        speed_lo = []
        d2 = np.zeros((p, p))
        for j in range(p):
            if j > 0:
                d2 = d2 + 2.0 * tau ** 3 * par.drag * np.outer(
                    s_p[j - 1], s_p[j - 1])
            speed_lo.append(options.lip_factor * float(
                np.max(np.abs(np.linalg.eigvalsh(d2)))) if j > 0 else 0.0)
        safety = [options.lip_factor * float(max(
            np.max(np.abs(np.linalg.eigvalsh(own_h[j]))),
            np.max(np.abs(np.linalg.eigvalsh(prev_h[j])))))
            for j in range(p)]
        out.append({"objective": l_obj, "speed_lower": speed_lo,
                    "speed_upper": [0.0] * p, "safety": safety})
    return out


def scp_step(agents: list[AgentState],
             options: SolverConfig | None = None) -> None:
    """Relinearize every active agent at its current iterate: gradient and
    curvature bound of the local cost, plus one quadratic majorant row per
    speed/safety constraint, all expressed in offsets from the iterate."""
    options = options or SolverConfig()
    lips = lipschitz_estimates(agents, options)
    for a, lp in zip(agents, lips):
        if a.frozen:
            a.problem = None
            continue
        sh = a.shared
        p, dim = a.p, a.dim
        own_sl = a.sl(a.own_pos)
        par = sh.config.vehicles[a.i - 1]
        prev = _prev_of(sh.config, a.i)
        v, v_prev, z, zp = _tracking(sh, a.i)
        u_own = a.own(a.u_hat)
        u_prev = _prev_controls(a)

        u_by_block = [a.u_hat[a.sl(b)] for b in range(len(a.blocks))]
        _, grads = local_objective(sh.objectives[a.i - 1], u_by_block)
        a.grad_J = np.concatenate(grads)
        a.L_J = lp["objective"]

        q, q_grad = speed_constraint_fn(sh.config, par, v, u_own)
        h, g_own, g_prev = safety_constraint_fn(
            sh.config, par, prev, v, v_prev, z, zp, u_own, u_prev, sh.struct)
        quads = []
        grads_rows = []
        for j in range(p):
            b = _embed(dim, [(own_sl, -q_grad[j])])
            quads.append((lp["speed_lower"][j] * np.eye(dim), b,
                          float(sh.config.speed_min - q[j])))
            grads_rows.append(b)
        for j in range(p):
            b = _embed(dim, [(own_sl, q_grad[j])])
            quads.append((np.zeros((dim, dim)), b,
                          float(q[j] - sh.config.speed_max)))
            grads_rows.append(b)
        for j in range(p):
            parts = [(own_sl, g_own[j])]
            if a.i > 1:
                parts.append((a.sl(a.own_pos - 1), g_prev[j]))
            b = _embed(dim, parts)
            quads.append((lp["safety"][j] * np.eye(dim), b, float(h[j])))
            grads_rows.append(b)
        a.row_grads = grads_rows
        a.L_rows = lp["speed_lower"] + lp["speed_upper"] + lp["safety"]
        a.prox_lin = a.grad_J
        a.prox_curv = a.L_J
        a.problem = ConvexQcqp(a.L_J * np.eye(dim), a.grad_J.copy(),
                               a.lo - a.u_hat, a.hi - a.u_hat, quads)


def warm_start_inner(agents: list[AgentState],
                     options: SolverConfig | None = None,
                     net: LocalExchange | None = None) -> list[float]:
    """Box-only warm-up of an inner stage: with the constraint rows
    dropped the prox is a coordinatewise clip, so rounds are cheap.  The
    splitting state it leaves behind seeds the full stage."""
    options = options or SolverConfig()
    if net is None:
        net = LocalExchange(len(agents))
    saved = [a.problem for a in agents]
    for a in agents:
        a.problem = None
    trace, _ = _run_rounds(agents, options, net, options.warm_tol,
                           options.max_inner)
    for a, prob in zip(agents, saved):
        a.problem = prob
    return trace


# ---------------------------------------------------------------------------
# full solve

@dataclass
class MpcDiagnostics:
    p: int
    outer_iters: int = 0
    inner_iters: int = 0
    lin_rounds: int = 0
    warm_rounds: int = 0
    prox_calls: int = 0
    messages: int = 0
    outer_step: float = np.inf
    inner_residual: float = np.inf
    stationarity: float = np.inf
    consensus_gap: float = np.inf
    violation: float = np.inf
    guard_rounds: int = 0
    frozen: int = 0
    converged: bool = False
    feasible: bool = False
    wall_time: float = 0.0
    agent_time: list = field(default_factory=list)
    residual_trace: dict = field(default_factory=dict)


@dataclass
class MpcResult:
    u_plan: np.ndarray
    diagnostics: MpcDiagnostics


def _p1_problem(a: AgentState) -> ConvexQcqp:
    """The one-step horizon is exactly quadratic: build the agent's QCQP
    with drag charged at the measured speeds."""
    sh = a.shared
    dim = a.dim
    own_sl = a.sl(a.own_pos)
    tau = sh.config.tau
    e = np.array([sh.config.vehicles[j - 1].drag * sh.state.v[j] ** 2
                  + sh.config.vehicles[j - 1].roll * GRAVITY
                  for j in a.blocks])
    w_hat = sh.dec.W_hat[a.i - 1]
    m_hat = w_hat - tau * tau * sh.dec.Psi_hat[a.i - 1]
    q = _embed(dim, [(own_sl, sh.model.c_block(a.i))]) - m_hat @ e
    par = sh.config.vehicles[a.i - 1]
    prev = _prev_of(sh.config, a.i)
    v, v_prev, z, zp = _tracking(sh, a.i)
    e_own = float(e[a.own_pos])
    quads = [
        (np.zeros((dim, dim)), _embed(dim, [(own_sl, np.array([-tau]))]),
         sh.config.speed_min - v + tau * e_own),
        (np.zeros((dim, dim)), _embed(dim, [(own_sl, np.array([tau]))]),
         v - tau * e_own - sh.config.speed_max),
    ]
    u_prev0 = (np.array([sh.state.u0]) if a.i == 1 else np.zeros(1))
    h0, g_own0, g_prev0 = safety_constraint_fn(
        sh.config, par, prev, v, v_prev, z, zp, np.zeros(1), u_prev0,
        sh.struct)
    own_h, _ = safety_constraint_hessians(sh.config, par, prev, v,
                                          np.zeros(1), sh.struct)
    A = np.zeros((dim, dim))
    A[own_sl, own_sl] = own_h[0]
    parts = [(own_sl, g_own0[0])]
    if a.i > 1:
        parts.append((a.sl(a.own_pos - 1), g_prev0[0]))
    quads.append((A, _embed(dim, parts), float(h0[0])))
    return ConvexQcqp(w_hat, q, a.lo, a.hi, quads)


def _outer_converged(p: int, step: float, scale: float, tol: float) -> bool:
    if step <= tol:
        return True
    if p in (2, 3) and scale > 0.0 and step / scale <= tol:
        return True
    return False


def solve_mpc(agents: list[AgentState],
              options: SolverConfig | None = None,
              state: PlatoonState | None = None) -> MpcResult:
    """Solve one MPC step on the agent graph and return the control plan
    with the splitting diagnostics.  Passing a state re-linearizes the
    local problems around it first."""
    options = options or SolverConfig()
    if state is not None:
        _refresh(agents, state)
    sh = agents[0].shared
    p = agents[0].p
    t0 = time.perf_counter()
    net = LocalExchange(len(agents))
    diag = MpcDiagnostics(p=p)
    for a in agents:
        a.frozen = False
        a.still = 0
        a.prox_calls = 0
        a.prox_time = 0.0

    if p == 1:
        for a in agents:
            a.problem = _p1_problem(a)
        _begin_stage(agents, None, seed="carry")
        tol = options.outer_tol_for(1)
        traces = []
        for attempt in range(options.guard_retries + 1):
            trace, conv = _run_rounds(agents, options, net, tol,
                                      options.max_inner)
            traces += trace
            plan = _collect_prox_plan(agents)
            viol = plan_violation(sh.config, sh.state, plan, sh.struct)
            if viol <= options.feas_tol or not conv:
                break
            diag.guard_rounds += 1
            tol /= 10.0
        for a in agents:
            a.carry_z = a.z.copy()
            a.u_hat = np.concatenate(
                [plan[j - 1] for j in a.blocks])
        diag.outer_iters = 1
        diag.inner_iters = len(traces)
        diag.inner_residual = traces[-1] if traces else np.inf
        diag.outer_step = diag.inner_residual
        diag.converged = conv
        diag.residual_trace["rounds"] = [float(r) for r in traces]
    else:
        plan = warm_start_linear(agents, options, net, diag)
        diag.residual_trace["inner"] = []
        step = np.inf
        tol_outer = options.outer_tol_for(p)
        tol_inner = options.inner_tol_for(p)
        conv = False
        for k in range(options.max_outer):
            scp_step(agents, options)
            base = {a.i: a.own(a.u_hat).copy() for a in agents}
            _begin_stage(agents, base, seed="zero")
            diag.warm_rounds += len(warm_start_inner(agents, options, net))
            trace, inner_ok = _run_rounds(agents, options, net, tol_inner,
                                          options.max_inner)
            diag.inner_iters += len(trace)
            diag.residual_trace["inner"].append(
                [float(r) for r in trace])
            diag.inner_residual = trace[-1] if trace else np.inf
            means = {j + 1: row for j, row in
                     enumerate(_collect_plan(agents))}
            step = 0.0
            scale = 0.0
            for a in agents:
                new_local = np.concatenate([means[j] for j in a.blocks])
                a_step = float(np.max(np.abs(new_local - a.u_hat)))
                step = max(step, a_step)
                scale = max(scale, float(np.max(np.abs(new_local))))
                if a_step <= options.freeze_step:
                    a.still += 1
                    if a.still >= options.freeze_rounds:
                        a.frozen = True
                else:
                    a.still = 0
                a.u_hat = new_local
            iter_plan = np.vstack([a.own(a.u_hat) for a in agents])
            diag.residual_trace.setdefault("outer_violation", []).append(
                float(plan_violation(sh.config, sh.state, iter_plan,
                                     sh.struct)))
            diag.outer_iters = k + 1
            if _outer_converged(p, step, scale, tol_outer):
                conv = True
                break
        diag.outer_step = step
        diag.converged = conv
        plan = _collect_prox_plan(agents)
        viol = plan_violation(sh.config, sh.state, plan, sh.struct)
        for attempt in range(options.guard_retries):
            if viol <= options.feas_tol:
                break
            diag.guard_rounds += 1
            tol_inner /= 10.0
            trace, _ = _run_rounds(agents, options, net, tol_inner,
                                   options.max_inner)
            diag.inner_iters += len(trace)
            means = {j + 1: row for j, row in
                     enumerate(_collect_plan(agents))}
            for a in agents:
                a.u_hat = np.concatenate([means[j] for j in a.blocks])
            plan = _collect_prox_plan(agents)
            viol = plan_violation(sh.config, sh.state, plan, sh.struct)

    diag.violation = plan_violation(sh.config, sh.state, plan, sh.struct)
    diag.feasible = diag.violation <= options.feas_tol
    diag.stationarity = _stationarity(agents)
    diag.consensus_gap = _consensus_gap(agents)
    diag.prox_calls = sum(a.prox_calls for a in agents)
    diag.messages = net.messages
    diag.frozen = sum(a.frozen for a in agents)
    diag.agent_time = [a.prox_time for a in agents]
    diag.wall_time = time.perf_counter() - t0
    return MpcResult(u_plan=plan, diagnostics=diag)


# ---------------------------------------------------------------------------
# centralized references

def solve_centralized_p1(config: PlatoonConfig, weights: WeightSchedule,
                         state: PlatoonState,
                         mu_final: float = 1e-12) -> np.ndarray:
    """High precision reference for the one-step problem: the whole
    platoon solved as a single QCQP."""
    if weights.p != 1:
        raise ValueError("one-step reference needs p == 1")
    model = assemble_quadratic_model(config, weights, state=state)
    n = config.n
    struct = build_structural(n, 1)
    tau = config.tau
    e = np.array([config.vehicles[i].drag * state.v[i + 1] ** 2
                  + config.vehicles[i].roll * GRAVITY for i in range(n)])
    H = model.W
    q = model.c - model.V @ e
    lo = config.accel_min.astype(float)
    hi = config.accel_max.astype(float)
    z = state.spacing_error(config.gap)
    zp = state.rel_speed()
    quads = []
    for i in range(1, n + 1):
        par = config.vehicles[i - 1]
        row = np.zeros(n)
        row[i - 1] = -tau
        quads.append((np.zeros((n, n)), row.copy(),
                      config.speed_min - state.v[i] + tau * e[i - 1]))
        quads.append((np.zeros((n, n)), -row,
                      state.v[i] - tau * e[i - 1] - config.speed_max))
        prev = _prev_of(config, i)
        u_prev0 = (np.array([state.u0]) if i == 1 else np.zeros(1))
        h0, g_own0, g_prev0 = safety_constraint_fn(
            config, par, prev, float(state.v[i]), float(state.v[i - 1]),
            float(z[i - 1]), float(zp[i - 1]), np.zeros(1), u_prev0, struct)
        own_h, _ = safety_constraint_hessians(config, par, prev,
                                              float(state.v[i]), np.zeros(1),
                                              struct)
        A = np.zeros((n, n))
        A[i - 1, i - 1] = own_h[0, 0, 0]
        b = np.zeros(n)
        b[i - 1] = g_own0[0, 0]
        if i > 1:
            b[i - 2] = g_prev0[0, 0]
        quads.append((A, b, float(h0[0])))
    res = qcqp_solve(ConvexQcqp(H, q, lo, hi, quads), mu_final=mu_final)
    return res.y


def solve_centralized_linear(config: PlatoonConfig, weights: WeightSchedule,
                             state: PlatoonState,
                             mu_final: float = 1e-11) -> np.ndarray:
    """Reference for the warm-start stage: loss-free cost over the
    restricted sets, solved as one program.  Returns an (n, p) plan."""
    model = assemble_quadratic_model(config, weights, state=state)
    n, p = config.n, weights.p
    struct = build_structural(n, p)
    dim = n * p
    lo = np.repeat(config.accel_min.astype(float), p)
    hi = np.repeat(config.accel_max.astype(float), p)
    z = state.spacing_error(config.gap)
    zp = state.rel_speed()
    s_p = np.tril(np.ones((p, p)))
    quads = []
    for i in range(1, n + 1):
        own = slice((i - 1) * p, i * p)
        rs = restricted_convex_sets(config, i, float(state.v[i]),
                                    float(state.v[i - 1]), float(z[i - 1]),
                                    float(zp[i - 1]), p, struct,
                                    u0=state.u0)
        for j in range(p):
            row = _embed(dim, [(own, s_p[j])])
            quads.append((np.zeros((dim, dim)), -row, float(rs.cum_lo[j])))
            quads.append((np.zeros((dim, dim)), row, -float(rs.cum_hi[j])))
        for A, b, c in rs.quads:
            Af = np.zeros((dim, dim))
            bf = np.zeros(dim)
            idx = (np.arange((i - 2) * p, i * p) if rs.includes_prev
                   else np.arange((i - 1) * p, i * p))
            Af[np.ix_(idx, idx)] = A
            bf[idx] = b
            quads.append((Af, bf, float(c)))
    res = qcqp_solve(ConvexQcqp(model.W, model.c, lo, hi, quads),
                     mu_final=mu_final)
    return res.y.reshape(n, p)
