"""Problem builders for the three controllers and the reference machinery.

The planner works on the 13-state model with command-rate inputs and long
stages; the tracker works on the 10-state model at the fast rate.  The single
seam between them is `subsample_reference`, which replays the planner's
integration substeps and reads the attitude commands out of the memory states,
so the reference it emits is feasible for the tracker's discretization
bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .dynamics import NU, NX, NX_EXT, ModelParams, PolytopeZ
from .ocp import OcpSpec, Solution, StageIneq
from .terminal import TerminalIngredients


# ---------------------------------------------------------------------------
# configuration

def _tmpc_q():
    return np.diag([2e3, 2e3, 2e3, 20.0, 20.0, 20.0, 100.0, 100.0, 100.0, 100.0])


def _tmpc_r():
    return np.diag([2e3, 2e3, 2e3, 100.0])


@dataclass(frozen=True)
class TmpcConfig:
    dt: float = 0.05
    horizon: float = 0.5
    Q: np.ndarray = field(default_factory=_tmpc_q)
    R: np.ndarray = field(default_factory=_tmpc_r)

    @property
    def n_stages(self):
        n = round(self.horizon / self.dt)
        if abs(n * self.dt - self.horizon) > 1e-9:
            raise ValueError("tracker horizon must be a multiple of its sampling time")
        return n


@dataclass(frozen=True)
class GoalWeights:
    xy: float
    z: float
    yaw: float
    acc: float
    att_cmd: float
    yaw_cmd: float
    inputs: tuple


PMPC_STAGE_WEIGHTS = GoalWeights(xy=40.0, z=40.0, yaw=40.0, acc=40.0,
                                 att_cmd=16.0, yaw_cmd=16.0, inputs=(16.0,) * 4)
PMPC_TERM_WEIGHTS = GoalWeights(xy=200.0, z=200.0, yaw=200.0, acc=40.0,
                                att_cmd=16.0, yaw_cmd=16.0, inputs=(16.0,) * 4)
SMPC_STAGE_WEIGHTS = GoalWeights(xy=200.0, z=200.0, yaw=200.0, acc=200.0,
                                 att_cmd=160.0, yaw_cmd=160.0, inputs=(160.0,) * 4)
SMPC_TERM_WEIGHTS = GoalWeights(xy=2e3, z=2e3, yaw=2e3, acc=200.0,
                                att_cmd=160.0, yaw_cmd=160.0, inputs=(160.0,) * 4)


@dataclass(frozen=True)
class PmpcConfig:
    dt: float = 0.5            # planner sampling time = beta tracker ticks
    horizon: float = 2.5
    stage_weights: GoalWeights = PMPC_STAGE_WEIGHTS
    term_weights: GoalWeights = PMPC_TERM_WEIGHTS
    huber_delta: float = 1.0
    thrust_reg: str = "hover_centered"   # or "as_written"

    @property
    def n_stages(self):
        n = round(self.horizon / self.dt)
        if abs(n * self.dt - self.horizon) > 1e-9:
            raise ValueError("planner horizon must be a multiple of its sampling time")
        return n


@dataclass(frozen=True)
class SmpcConfig:
    dt: float = 0.05
    horizon: float = 0.4
    stage_weights: GoalWeights = SMPC_STAGE_WEIGHTS
    term_weights: GoalWeights = SMPC_TERM_WEIGHTS
    huber_delta: float = 1.0
    thrust_reg: str = "hover_centered"
    slack_quad: float = 1e4
    slack_lin: float = 1e3
    safety_margin: float = 0.1

    @property
    def n_stages(self):
        return round(self.horizon / self.dt)


# ---------------------------------------------------------------------------
# plan and reference containers

@dataclass
class ReferenceTrajectory:
    """Tracker-rate samples of the current plan, indexed by absolute tick."""

    valid_tick: int
    xr: np.ndarray   # (M + 1, 10)
    ur: np.ndarray   # (M, 4)

    def state(self, tick):
        i = tick - self.valid_tick
        if i < 0 or i >= len(self.xr):
            raise IndexError(f"tick {tick} outside reference coverage")
        return self.xr[i]

    def input(self, tick):
        i = tick - self.valid_tick
        if i < 0 or i >= len(self.ur):
            raise IndexError(f"tick {tick} outside reference input coverage")
        return self.ur[i]

    def slice(self, tick, n):
        i = tick - self.valid_tick
        if i < 0 or i + n >= len(self.xr) + 1:
            raise IndexError("requested window outside reference coverage")
        return self.xr[i:i + n + 1], self.ur[i:i + n]


@dataclass
class Plan:
    """A planner solution over its full horizon plus everything derived from it."""

    valid_tick: int
    beta: int
    nodes: np.ndarray       # (N + 1, 13) extended states at planner nodes
    inputs: np.ndarray      # (N, 4) extended inputs per interval
    regions: list           # ConvexRegion per interval, robot-frame free space
    regions_tight: list     # same, tightened by c_o * alpha for the planner
    ref: ReferenceTrajectory

    @property
    def n_intervals(self):
        return len(self.inputs)

    def node_positions(self):
        return self.nodes[:, :2].copy()


def region_index(rel_ticks, beta, n_regions):
    """Interval lookup: (0, beta] -> 0, (beta, 2 beta] -> 1, ...; 0 -> 0."""
    if rel_ticks < 0:
        raise IndexError("negative relative tick has no region")
    if rel_ticks == 0:
        return 0
    idx = (rel_ticks - 1) // beta
    if idx >= n_regions:
        raise IndexError("tick beyond region coverage")
    return idx


def subsample_reference(nodes, inputs, params: ModelParams, h, beta,
                        valid_tick) -> ReferenceTrajectory:
    """Replay each planner interval at the tracker rate.

    Applies exactly the planner's discrete map (`ext_step` per substep), so the
    recorded states match the planner nodes bit-for-bit at interval boundaries
    and every (state, input) sample is feasible for the tracker model.
    """
    xr = [nodes[0][:NX].copy()]
    ur = []
    for k in range(len(inputs)):
        xe = nodes[k].copy()
        for _ in range(beta):
            ur.append(np.array([xe[dyn.M_PHI], xe[dyn.M_THETA], xe[dyn.M_PSI],
                                inputs[k][dyn.U_ACC]]))
            xe = dyn.ext_step(xe, inputs[k], h, params)
            xr.append(xe[:NX].copy())
    return ReferenceTrajectory(valid_tick=valid_tick, xr=np.array(xr), ur=np.array(ur))


# ---------------------------------------------------------------------------
# goal-oriented planning cost

def goal_cost(y, w, goal, cfg, weights: GoalWeights, params: ModelParams, scale):
    """Value, gradients and Gauss-Newton blocks of the planning cost.

    `y` is the 13-dim extended state, `w` the 4-dim rate input, `goal` the
    (x, y, z, yaw) target.  `scale` carries the Euler discretization factor.
    """
    gx = np.zeros(NX_EXT)
    Hxx = np.zeros((NX_EXT, NX_EXT))
    v = 0.0

    e = y[:2] - goal[:2]
    rho = float(np.hypot(e[0], e[1]))
    delta = cfg.huber_delta
    if rho <= delta:
        v += weights.xy * 0.5 * rho * rho
        gx[:2] += weights.xy * e
        Hxx[:2, :2] += weights.xy * np.eye(2)
    else:
        v += weights.xy * delta * (rho - 0.5 * delta)
        wgt = delta / rho
        gx[:2] += weights.xy * wgt * e
        Hxx[:2, :2] += weights.xy * wgt * np.eye(2)

    ez = y[dyn.PZ] - goal[2]
    v += weights.z * ez * ez
    gx[dyn.PZ] += 2 * weights.z * ez
    Hxx[dyn.PZ, dyn.PZ] += 2 * weights.z

    ey = y[dyn.PSI] - goal[3]
    v += weights.yaw * ey * ey
    gx[dyn.PSI] += 2 * weights.yaw * ey
    Hxx[dyn.PSI, dyn.PSI] += 2 * weights.yaw

    a = y[dyn.ACC]
    if cfg.thrust_reg == "hover_centered":
        ea = a - params.g
        v += weights.acc * ea * ea
        gx[dyn.ACC] += 2 * weights.acc * ea
        Hxx[dyn.ACC, dyn.ACC] += 2 * weights.acc
    else:  # literal quartic form
        r = a * a - params.g
        v += weights.acc * r * r
        gx[dyn.ACC] += 2 * weights.acc * r * (2 * a)
        Hxx[dyn.ACC, dyn.ACC] += 2 * weights.acc * (2 * a) ** 2

    for idx, wt in ((dyn.M_PHI, weights.att_cmd), (dyn.M_THETA, weights.att_cmd),
                    (dyn.M_PSI, weights.yaw_cmd)):
        v += wt * y[idx] ** 2
        gx[idx] += 2 * wt * y[idx]
        Hxx[idx, idx] += 2 * wt

    U = np.asarray(weights.inputs, dtype=float)
    v += float(U @ (w * w))
    gu = 2 * U * w
    Huu = np.diag(2 * U)

    return (scale * v, scale * gx, scale * gu, scale * Hxx, scale * Huu)


# ---------------------------------------------------------------------------
# shared row helpers

def _region_rows_ext(region, tol_cols=NX_EXT + NU):
    L = np.zeros((region.L.shape[0], tol_cols))
    L[:, dyn.PX] = region.L[:, 0]
    L[:, dyn.PY] = region.L[:, 1]
    return L, region.l.copy()


def _region_rows_base(region):
    L = np.zeros((region.L.shape[0], NX + NU))
    L[:, dyn.PX] = region.L[:, 0]
    L[:, dyn.PY] = region.L[:, 1]
    return L, region.l.copy()


def _split_rows(Z: PolytopeZ, nx):
    """Indices of input-only rows and state-only rows of a polytope."""
    input_rows = [j for j in range(Z.n_rows) if not Z.L[j, :nx].any()]
    state_rows = [j for j in range(Z.n_rows) if not Z.L[j, nx:].any()]
    return np.array(input_rows, dtype=int), np.array(state_rows, dtype=int)


# ---------------------------------------------------------------------------
# tracking controller

def build_tmpc(x0, ref: ReferenceTrajectory, start_tick, stage_regions,
               ingredients: TerminalIngredients, Z: PolytopeZ,
               params: ModelParams, cfg: TmpcConfig) -> OcpSpec:
    """Tracking problem over [start_tick, start_tick + N] at the tracker rate.

    `stage_regions` holds one ConvexRegion per node 0..N (untightened free
    space).  The fixed initial node carries input rows only; the terminal node
    carries the ellipsoidal terminal-set constraint around the reference.
    """
    N = cfg.n_stages
    xr, ur = ref.slice(start_tick, N)
    Q2, R2 = 2.0 * cfg.Q, 2.0 * cfg.R
    dt = cfg.dt

    def integrate(k, x, u):
        return dyn.quad_rk4_jac(x, u, dt, params)

    def stage_cost(k, x, u):
        ex = x - xr[k]
        eu = u - ur[k]
        v = dt * float(ex @ cfg.Q @ ex + eu @ cfg.R @ eu)
        return (v, dt * (Q2 @ ex), dt * (R2 @ eu), dt * Q2, dt * R2)

    P2 = 2.0 * ingredients.P

    def term_cost(x, u_last):
        ex = x - xr[N]
        return (float(ex @ ingredients.P @ ex), P2 @ ex, np.zeros(NU),
                P2, np.zeros((NU, NU)))

    input_rows, state_rows = _split_rows(Z, NX)
    ineqs = []
    for k in range(N):
        if k == 0:
            L = Z.L[input_rows]
            l = Z.l[input_rows]
        else:
            Lr, lr = _region_rows_base(stage_regions[k])
            L = np.vstack([Z.L, Lr])
            l = np.concatenate([Z.l, lr])
        ineqs.append(StageIneq(L=L, l=l))
    Lt = Z.L[state_rows][:, :NX]
    lt = Z.l[state_rows]
    Lr, lr = _region_rows_base(stage_regions[N])
    term_ineq = (np.vstack([Lt, Lr[:, :NX]]), np.concatenate([lt, lr]))

    return OcpSpec(
        nx=NX, nu=NU, N=N, x0=np.asarray(x0, dtype=float),
        integrate=integrate, stage_cost=stage_cost, term_cost=term_cost,
        stage_ineq=ineqs, term_ineq=term_ineq,
        term_quad=(ingredients.P, xr[N].copy(), ingredients.alpha ** 2),
        u_init=ur[0].copy(),
    )


def terminal_control(x, xr, ur, ingredients: TerminalIngredients):
    """Terminal feedback law around a reference point."""
    return ur + ingredients.K @ (np.asarray(x) - np.asarray(xr))


def tmpc_shift_candidate(prev: Solution, ref: ReferenceTrajectory, new_start_tick,
                         ingredients, params: ModelParams, cfg: TmpcConfig):
    """Shift the previous optimum one tick and roll the terminal law one stage.

    This is the feasibility candidate for the next tracking problem: the tail
    input comes from the terminal feedback around the reference at the old
    terminal time, integrated with the same discretization.
    """
    N = cfg.n_stages
    tail_tick = new_start_tick + N - 1
    u_tail = terminal_control(prev.xs[N], ref.state(tail_tick), ref.input(tail_tick),
                              ingredients)
    x_tail = dyn.quad_rk4(prev.xs[N], u_tail, cfg.dt, params)
    xs = np.vstack([prev.xs[1:], x_tail[None, :]])
    us = np.vstack([prev.us[1:], u_tail[None, :]])
    return xs, us


# ---------------------------------------------------------------------------
# planning controller

def steady_input(params: ModelParams):
    """Extended input holding any hover-with-yaw state exactly."""
    return np.array([0.0, 0.0, 0.0, params.g / params.k_a])


def steady_terminal_rows(params: ModelParams):
    """Linear rows making the terminal state an exact equilibrium point.

    Velocities, roll and pitch vanish, thrust sits at hover, and the attitude
    command memories match the attitude, so holding the rates at zero and the
    thrust command at hover keeps the state fixed.  The held input itself is
    the next cycle's decision, so it is not pinned here.
    """
    rows = []
    rhs = []

    def row(cols_x, b=0.0):
        ex = np.zeros(NX_EXT)
        for c, v in cols_x:
            ex[c] = v
        rows.append(ex)
        rhs.append(b)

    for c in (dyn.VX, dyn.VY, dyn.VZ):
        row([(c, 1.0)])
    row([(dyn.PHI, 1.0)])
    row([(dyn.THETA, 1.0)])
    row([(dyn.ACC, 1.0)], b=params.g)
    row([(dyn.M_PHI, 1.0)])
    row([(dyn.M_THETA, 1.0)])
    row([(dyn.M_PSI, 1.0), (dyn.PSI, -1.0 / params.k_psi)])

    Ex = np.vstack(rows)
    Eu = np.zeros((len(rows), NU))
    return Ex, Eu, np.array(rhs)


def _ext_stage_integrator(params, h, beta, sample_rows):
    """Planner-stage discrete map with Jacobians and inner-sample rows.

    `sample_rows` is None or (S, rhs) with S over the extended state; the rows
    are evaluated at every interior substep boundary and returned with exact
    Jacobians through the partially composed step.
    """
    def integrate(k, xe, ue):
        A = np.eye(NX_EXT)
        B = np.zeros((NX_EXT, NU))
        g_out, Jx_out, Ju_out = [], [], []
        x = xe.copy()
        for m in range(beta):
            x, Am, Bm = dyn.ext_step_jac(x, ue, h, params)
            A = Am @ A
            B = Am @ B + Bm
            if sample_rows is not None and m < beta - 1:
                S, rhs = sample_rows
                g_out.append(S @ x - rhs)
                Jx_out.append(S @ A)
                Ju_out.append(S @ B)
        if g_out:
            return (x, A, B, np.concatenate(g_out),
                    np.vstack(Jx_out), np.vstack(Ju_out))
        return (x, A, B, np.zeros(0), np.zeros((0, NX_EXT)), np.zeros((0, NU)))

    return integrate


def build_pmpc(plan_prev: Plan, regions_tight, goal, cfg: PmpcConfig,
               ingredients: TerminalIngredients, Zext_tight: PolytopeZ,
               params: ModelParams, beta, tracker_dt) -> OcpSpec:
    """Shortened planning problem: the first interval is pinned to the previous
    optimum, stages cover the remaining intervals.

    Short stage s corresponds to plan interval s + 1 and region s + 1; its node
    (short index s) sits at the end of interval s and is constrained by region
    s.  Interior substep samples keep velocity, altitude and corridor rows
    satisfied between nodes, which the tracker-rate reference relies on.
    """
    N_short = cfg.n_stages - 1
    x0 = plan_prev.nodes[2].copy()

    input_rows, state_rows = _split_rows(Zext_tight, NX_EXT)
    vel_alt_cols = (dyn.VX, dyn.VY, dyn.VZ, dyn.PZ)
    inner_sel = [j for j in state_rows
                 if np.flatnonzero(Zext_tight.L[j])[0] in vel_alt_cols]

    ineqs = []
    integrators = []
    for s in range(N_short):
        # node rows (skip state rows on the fixed initial node)
        if s == 0:
            L = Zext_tight.L[input_rows]
            l = Zext_tight.l[input_rows]
        else:
            Lr, lr = _region_rows_ext(regions_tight[s])
            L = np.vstack([Zext_tight.L, Lr])
            l = np.concatenate([Zext_tight.l, lr])
        ineqs.append(StageIneq(L=L, l=l))

        # interior samples of interval s + 1 against region s + 1
        Lr_in, lr_in = _region_rows_ext(regions_tight[s + 1])
        S = np.vstack([Zext_tight.L[inner_sel][:, :NX_EXT], Lr_in[:, :NX_EXT]])
        rhs = np.concatenate([Zext_tight.l[inner_sel], lr_in])
        integrators.append(_ext_stage_integrator(params, tracker_dt, beta, (S, rhs)))

    def integrate(k, x, u):
        return integrators[k](k, x, u)

    Lt = Zext_tight.L[state_rows][:, :NX_EXT]
    lt = Zext_tight.l[state_rows]
    Lr, lr = _region_rows_ext(regions_tight[N_short])
    term_ineq = (np.vstack([Lt, Lr[:, :NX_EXT]]), np.concatenate([lt, lr]))

    def stage_cost(k, y, w):
        return goal_cost(y, w, goal, cfg, cfg.stage_weights, params, cfg.dt)

    def term_cost(y, w_last):
        return goal_cost(y, w_last, goal, cfg, cfg.term_weights, params, 1.0)

    Ex, Eu, b = steady_terminal_rows(params)

    return OcpSpec(
        nx=NX_EXT, nu=NU, N=N_short, x0=x0,
        integrate=integrate, stage_cost=stage_cost, term_cost=term_cost,
        stage_ineq=ineqs, term_ineq=term_ineq, term_eq=(Ex, Eu, b),
        u_init=steady_input(params),
    )


def pmpc_shift_candidate(plan_prev: Plan, params: ModelParams):
    """Previous optimum shifted one interval, held at its steady terminal state."""
    nodes = plan_prev.nodes
    inputs = plan_prev.inputs
    xs = np.vstack([nodes[2:], nodes[-1][None, :]])
    us = np.vstack([inputs[2:], steady_input(params)[None, :]])
    return xs, us


def assemble_plan(plan_prev: Plan, short_sol: Solution, regions, regions_tight,
                  params: ModelParams, beta, tracker_dt, valid_tick) -> Plan:
    """New plan: previous interval 1 copied verbatim, then the optimized stages."""
    nodes = np.vstack([plan_prev.nodes[1][None, :], short_sol.xs])
    inputs = np.vstack([plan_prev.inputs[1][None, :], short_sol.us])
    ref = subsample_reference(nodes, inputs, params, tracker_dt, beta, valid_tick)
    return Plan(valid_tick=valid_tick, beta=beta, nodes=nodes, inputs=inputs,
                regions=regions, regions_tight=regions_tight, ref=ref)


# ---------------------------------------------------------------------------
# single-layer controller

def build_smpc(x0_ext, regions_soft, goal, cfg: SmpcConfig, Zext: PolytopeZ,
               params: ModelParams) -> OcpSpec:
    """Single-layer problem: tracker-style hard initial state and raw bounds,
    planner cost and model, softened corridor rows with a safety offset."""
    N = cfg.n_stages
    input_rows, state_rows = _split_rows(Zext, NX_EXT)

    def integrate(k, x, u):
        return dyn.ext_step_jac(x, u, cfg.dt, params)

    def stage_cost(k, y, w):
        return goal_cost(y, w, goal, cfg, cfg.stage_weights, params, cfg.dt)

    def term_cost(y, w_last):
        return goal_cost(y, w_last, goal, cfg, cfg.term_weights, params, 1.0)

    ineqs = []
    for k in range(N):
        if k == 0:
            L = Zext.L[input_rows]
            l = Zext.l[input_rows]
            soft = np.zeros(len(l), dtype=bool)
        else:
            # node k sits at the right-closed end of interval k - 1
            Lr, lr = _region_rows_ext(regions_soft[k - 1])
            L = np.vstack([Zext.L, Lr])
            l = np.concatenate([Zext.l, lr - cfg.safety_margin])
            soft = np.concatenate([np.zeros(Zext.n_rows, dtype=bool),
                                   np.ones(len(lr), dtype=bool)])
        ineqs.append(StageIneq(L=L, l=l, soft=soft))

    Lt = Zext.L[state_rows][:, :NX_EXT]
    lt = Zext.l[state_rows]
    Lr, lr = _region_rows_ext(regions_soft[N - 1])
    term_ineq = (np.vstack([Lt, Lr[:, :NX_EXT]]),
                 np.concatenate([lt, lr - cfg.safety_margin]))
    term_soft = np.concatenate([np.zeros(len(lt), dtype=bool),
                                np.ones(len(lr), dtype=bool)])

    Ex, Eu, b = steady_terminal_rows(params)
    return OcpSpec(
        nx=NX_EXT, nu=NU, N=N, x0=np.asarray(x0_ext, dtype=float),
        integrate=integrate, stage_cost=stage_cost, term_cost=term_cost,
        stage_ineq=ineqs, term_ineq=term_ineq, term_soft=term_soft,
        term_eq=(Ex, Eu, b),
        u_init=steady_input(params), slack_penalty=(cfg.slack_quad, cfg.slack_lin),
    )
