"""Deterministic logical-time closed loop for the hierarchical and single-layer
controllers.

Every tick: the input committed one tick earlier drives the plant, the next
initial state is forward-predicted under that same input, and the tracker
solves for the next tick.  On the last tick of each planner period the planner
builds fresh corridors from its previous optimum and emits a plan that becomes
valid one tick later.  Solver wall times never influence the sequence of
events, so identical configurations replay bit-for-bit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import controllers as ctrl
from . import corridor, dynamics as dyn, gridmap, ocp
from .dynamics import NX, NU, ModelParams
from .gridmap import Obstacle
from .runlog import RunLog
from .terminal import TerminalIngredients


class RunError(RuntimeError):
    pass


@dataclass(frozen=True)
class Schedule:
    tracker_dt: float = 0.05
    beta: int = 10
    planner_horizon: float = 2.5

    def __post_init__(self):
        if self.beta < 2:
            raise ValueError("planner/tracker rate ratio must be >= 2")
        n = self.planner_horizon / self.planner_dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError("planner horizon must be a multiple of the planner period")
        # the planner needs the pinned interval, the tracker-horizon overlap and
        # two more free stages to make progress and settle at a steady state
        min_stages = 1 + math.ceil(self.tracker_horizon / self.planner_dt) + 2
        if round(n) < min_stages:
            raise ValueError(
                f"planner horizon too short: {round(n)} stages < {min_stages} required"
            )

    @property
    def planner_dt(self):
        return self.beta * self.tracker_dt

    @property
    def tracker_horizon(self):
        # tracker horizon equals the planner period so terminal nodes align
        return self.planner_dt

    @property
    def n_planner_stages(self):
        return round(self.planner_horizon / self.planner_dt)


@dataclass(frozen=True)
class PlantConfig:
    mode: str = "exact"            # exact | mismatch
    tau_scale: tuple = (1.1, 0.9, 1.1, 0.9)     # per (phi, theta, psi, a)
    gain_scale: tuple = (0.95, 1.05, 0.95, 1.05)
    thrust_bias: float = 0.1       # m/s^2 added to the vertical acceleration
    dist_max: float = 0.2          # m/s^2 bound on the random force disturbance
    seed: int = 0

    def perturbed_params(self, params: ModelParams) -> ModelParams:
        ts, gs = self.tau_scale, self.gain_scale
        return ModelParams(
            tau_phi=params.tau_phi * ts[0], tau_theta=params.tau_theta * ts[1],
            tau_psi=params.tau_psi * ts[2], tau_a=params.tau_a * ts[3],
            k_phi=params.k_phi * gs[0], k_theta=params.k_theta * gs[1],
            k_psi=params.k_psi * gs[2], k_a=params.k_a * gs[3], g=params.g,
        )


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "two_obstacle"
    map_size: float = 12.0
    resolution: float = 0.01
    obstacles: tuple = ()
    start: tuple = (-4.2, -0.6, 1.4)
    start_yaw: float = 0.0
    goal: tuple = (4.2, 0.6, 1.4)
    goal_yaw: float = 0.0
    goal_radius: float = 0.05
    d_min: float = 0.1
    box_width: float = 1.0
    robot_radius: float = 0.3
    controller: str = "hmpc"       # hmpc | smpc
    time_limit: float = 60.0
    plant: PlantConfig = field(default_factory=PlantConfig)

    def goal4(self):
        return np.array([self.goal[0], self.goal[1], self.goal[2], self.goal_yaw])


def two_obstacle_scenario(**kw):
    obs = (Obstacle(-1.6, 0.9, 1.8, 3.2), Obstacle(1.6, -0.9, 1.8, 3.2))
    return ScenarioConfig(name="two_obstacle", obstacles=obs, **kw)


def corridor_scenario(**kw):
    obs = (Obstacle(-1.8, -1.5, 0.5, 9.0), Obstacle(1.8, 1.5, 0.5, 9.0))
    kw.setdefault("start", (-4.5, -4.5, 1.4))
    kw.setdefault("goal", (4.5, 4.5, 1.4))
    kw.setdefault("time_limit", 120.0)
    return ScenarioConfig(name="corridor", obstacles=obs, **kw)


def plant_step(x, u, h, params: ModelParams, plant: PlantConfig,
               params_mismatch=None, disturbance=None):
    """Advance the simulated vehicle one tick.

    Exact mode runs the identical integrator call the controllers use, which
    is what makes zero tracking error attainable bit-for-bit.
    """
    if plant.mode == "exact":
        return dyn.quad_rk4(x, u, h, params)
    pm = params_mismatch if params_mismatch is not None else plant.perturbed_params(params)
    w = np.zeros(3) if disturbance is None else disturbance

    def deriv(xx, uu):
        dx = dyn.eval_dynamics(xx, uu, pm)
        dx[dyn.VX:dyn.VZ + 1] += w
        dx[dyn.VZ] += plant.thrust_bias
        return dx

    return dyn.rk4_step(deriv, x, u, h, 1)


def _sample_disturbance(rng, dist_max):
    v = rng.normal(size=3)
    n = np.linalg.norm(v)
    r = dist_max * rng.uniform(0.0, 1.0) ** (1.0 / 3.0)
    return (v / n) * r if n > 0 else np.zeros(3)


def clearance(p_xy, obstacles, robot_radius):
    if not obstacles:
        return float("inf")
    return min(ob.distance(p_xy) for ob in obstacles) - robot_radius


# ---------------------------------------------------------------------------

class _HmpcRun:
    """State of one hierarchical closed-loop run."""

    def __init__(self, scenario: ScenarioConfig, ingredients: TerminalIngredients,
                 schedule: Schedule, params: ModelParams, pipelined=False,
                 solver_cfg=None):
        self.sc = scenario
        self.ing = ingredients
        self.sch = schedule
        self.params = params
        self.pipelined = pipelined
        self.solver_cfg = solver_cfg or ocp.SolverConfig()

        self.h = schedule.tracker_dt
        self.beta = schedule.beta
        self.Np = schedule.n_planner_stages

        self.gmap = gridmap.rasterize(scenario.map_size, scenario.resolution,
                                      list(scenario.obstacles), scenario.robot_radius)
        self.Z = dyn.build_constraints()
        tighten = ingredients.c_s * ingredients.alpha
        self.Zbar = dyn.PolytopeZ(L=self.Z.L.copy(), l=self.Z.l - tighten,
                                  labels=list(self.Z.labels))
        self.Zext_tight = dyn.extend_constraints(self.Z, tighten=tighten)
        self.co_alpha = ingredients.c_o * ingredients.alpha

        self.tcfg = ctrl.TmpcConfig(dt=self.h, horizon=schedule.tracker_horizon,
                                    Q=ingredients.Q, R=ingredients.R)
        self.pcfg = ctrl.PmpcConfig(dt=schedule.planner_dt,
                                    horizon=schedule.planner_horizon)

    # -- bootstrap -----------------------------------------------------------

    def bootstrap(self) -> ctrl.Plan:
        sc = self.sc
        x = dyn.hover_state(p=sc.start, psi=sc.start_yaw, params=self.params)
        u = dyn.hover_input(psi=sc.start_yaw, params=self.params)
        xe = dyn.base_to_ext(x, att_cmd=u[:3])
        u_ss = ctrl.steady_input(self.params)

        g = self.Zbar.eval(x, u)
        if g.max() > 1e-9:
            j = int(np.argmax(g))
            raise RunError(f"start state violates tightened constraint row "
                           f"{self.Zbar.labels[j]} by {g[j]:.3e}")
        defect = dyn.eval_extended_dynamics(xe, u_ss, self.params)
        if np.abs(defect).max() > 1e-12:
            raise RunError("start state is not a steady state")

        nodes = np.tile(xe, (self.Np + 1, 1))
        inputs = np.tile(u_ss, (self.Np, 1))
        regions, regions_tight = self._build_regions(nodes)
        for reg in regions_tight:
            if not reg.contains(x[:2], tol=1e-12):
                raise RunError("start position violates its tightened region")
        ref = ctrl.subsample_reference(nodes, inputs, self.params, self.h,
                                       self.beta, valid_tick=0)
        return ctrl.Plan(valid_tick=0, beta=self.beta, nodes=nodes, inputs=inputs,
                         regions=regions, regions_tight=regions_tight, ref=ref)

    def _build_regions(self, nodes):
        q = nodes[1:, :2]
        regions = corridor.decompose_plan(self.gmap, q, self.sc.box_width,
                                          self.sc.robot_radius)
        regions_tight = [corridor.tighten_region(r, self.ing.c_o, self.ing.alpha)
                         for r in regions]
        return regions, regions_tight

    # -- per-cycle planner work ---------------------------------------------

    def plan_cycle(self, plan: ctrl.Plan, slot_tick: int):
        """Build new corridors from the previous optimum and solve the planner."""
        valid_tick = slot_tick + 1
        regions, regions_tight = self._build_regions(plan.nodes)

        # generating pieces must stay inside their first-half-space ellipses
        pieces = []
        for k in range(self.Np):
            lo = min((k + 1) * self.beta, len(plan.ref.xr) - 1)
            hi = min((k + 2) * self.beta, len(plan.ref.xr) - 1)
            pieces.append(plan.ref.xr[lo:hi + 1, :2])
        assume = corridor.check_plan_containment(regions, pieces)
        assume_ok = all(rep["ok"] for rep in assume)
        assume_margin = min((rep["margin"] for rep in assume), default=np.inf)

        # corridor update consistency: the previous optimum shifted one period
        # must satisfy the regions it just generated
        shift_viol = -np.inf
        for s in range(self.beta, self.Np * self.beta + 1):
            reg = regions[ctrl.region_index(s - self.beta, self.beta, self.Np)]
            shift_viol = max(shift_viol, float(reg.violations(plan.ref.xr[s, :2])[0]))

        safety_inf, safety_con = np.inf, np.inf
        for reg in regions:
            rep = corridor.verify_region_safety(reg, self.gmap, self.sc.robot_radius,
                                                self.sc.box_width)
            safety_inf = min(safety_inf, rep["worst_inflated"])
            safety_con = min(safety_con, rep["worst_contour"])

        spec = ctrl.build_pmpc(plan, regions_tight, self.sc.goal4(), self.pcfg,
                               self.ing, self.Zext_tight, self.params,
                               self.beta, self.h)
        cx, cu = ctrl.pmpc_shift_candidate(plan, self.params)
        cand_viol = ocp.constraint_violation(spec, cx, cu)
        warm = ocp.Solution(xs=cx, us=cu, slack=np.zeros(0), objective=np.nan,
                            kkt_res=np.inf, eq_viol=np.inf, ineq_viol=np.inf,
                            iterations=0, status="warm")
        sol = ocp.solve(spec, warm=warm, cfg=self.solver_cfg)
        if sol.status != "solved":
            raise RunError(f"planner solve failed at tick {slot_tick}: {sol.status}")

        new_plan = ctrl.assemble_plan(plan, sol, regions, regions_tight,
                                      self.params, self.beta, self.h, valid_tick)
        ref_checks = self._reference_checks(new_plan)
        cycle_rec = dict(
            slot_tick=slot_tick, valid_tick=valid_tick, status=sol.status,
            iters=sol.iterations, objective=sol.objective, cand_viol=cand_viol,
            assume_ok=assume_ok, assume_margin=assume_margin, shift_viol=shift_viol,
            region_safety_inflated=safety_inf, region_safety_contour=safety_con,
            **ref_checks,
        )
        if not assume_ok:
            raise RunError(
                "plan segment left its generating ellipse; reduce the planner "
                "period or the velocity bound"
            )
        return new_plan, regions, regions_tight, cycle_rec

    def _reference_checks(self, plan: ctrl.Plan):
        """Tracker-rate feasibility of the emitted reference (debug invariant)."""
        xr, ur = plan.ref.xr, plan.ref.ur
        zb = -np.inf
        fb = -np.inf
        defect = 0.0
        for s in range(len(ur)):
            zb = max(zb, float(self.Zbar.eval(xr[s], ur[s]).max()))
            step = dyn.quad_rk4(xr[s], ur[s], self.h, self.params)
            defect = max(defect, float(np.abs(step - xr[s + 1]).max()))
        for s in range(len(xr)):
            reg = plan.regions_tight[ctrl.region_index(s, self.beta, self.Np)]
            fb = max(fb, float(reg.violations(xr[s, :2])[0]))
        return {"ref_zbar_viol": zb, "ref_fbar_viol": fb, "ref_defect": defect}

    # -- main loop ------------------------------------------------------------

    def run(self) -> RunLog:
        sc, h, beta = self.sc, self.h, self.beta
        params = self.params
        plant_params = (sc.plant.perturbed_params(params)
                        if sc.plant.mode == "mismatch" else None)
        rng = np.random.default_rng(sc.plant.seed)

        plan = self.bootstrap()
        pending = None
        pending_future = None
        executor = ThreadPoolExecutor(max_workers=1) if self.pipelined else None

        log = RunLog(scenario=sc.name, controller="hmpc")
        log.add_region_rows(0, plan.regions, plan.regions_tight)

        state = dyn.hover_state(p=sc.start, psi=sc.start_yaw, params=params)
        u_apply = plan.ref.input(0).copy()
        committed = dict(status="bootstrap", iters=0, kkt=0.0, objective=0.0,
                         cand_viol=np.nan, fallback=0)
        prev_sol = None
        prev_objective = np.nan
        descent_max = -np.inf
        tmpc_failures = 0
        cycle_count = 0
        goal_time = None
        max_ticks = int(round(sc.time_limit / h))

        n = 0
        while n <= max_ticks:
            # promote a plan that becomes valid now
            if pending_future is not None:
                plan_new = pending_future.result()
                pending_future = None
                pending = plan_new
            if pending is not None and pending[0].valid_tick == n:
                plan, regions, regions_tight, cycle_rec = pending
                log.add_cycle(cycle=cycle_count, **cycle_rec)
                log.add_region_rows(cycle_count + 1, regions, regions_tight)
                cycle_count += 1
                pending = None

            ref_x = plan.ref.state(n)
            track_err = float(np.linalg.norm(state[:2] - ref_x[:2]))
            track_err = float(np.hypot(track_err, state[2] - ref_x[2]))
            clr = clearance(state[:2], sc.obstacles, sc.robot_radius)
            log.add_tick(
                tick=n, t=n * h,
                **{f"x{i}": state[i] for i in range(NX)},
                **{f"u{i}": u_apply[i] for i in range(NU)},
                **{f"xr{i}": ref_x[i] for i in range(NX)},
                region=ctrl.region_index(n - plan.valid_tick, beta, self.Np),
                status=committed["status"], iters=committed["iters"],
                kkt=committed["kkt"], objective=committed["objective"],
                cand_viol=committed["cand_viol"], tracking_err=track_err,
                clearance=clr, slack_max=0.0, fallback=committed["fallback"],
            )

            if np.linalg.norm(state[:2] - np.asarray(sc.goal[:2])) <= sc.goal_radius:
                goal_time = n * h
                break
            if n == max_ticks:
                break

            # forward-predict the next initial state under the committed input
            xhat = dyn.quad_rk4(state, u_apply, h, params)

            # tracker solve for validity n + 1
            start = n + 1
            stage_regions = [
                plan.regions[ctrl.region_index(start + k - plan.valid_tick, beta, self.Np)]
                for k in range(self.tcfg.n_stages + 1)
            ]
            spec = ctrl.build_tmpc(xhat, plan.ref, start, stage_regions, self.ing,
                                   self.Z, params, self.tcfg)
            if prev_sol is not None:
                cx, cu = ctrl.tmpc_shift_candidate(prev_sol, plan.ref, start,
                                                   self.ing, params, self.tcfg)
                cand_viol = ocp.constraint_violation(spec, cx, cu)
            else:
                xr_w, ur_w = plan.ref.slice(start, self.tcfg.n_stages)
                cx, cu = xr_w.copy(), ur_w.copy()
                cand_viol = np.nan
            warm = ocp.Solution(xs=cx, us=cu, slack=np.zeros(0), objective=np.nan,
                                kkt_res=np.inf, eq_viol=np.inf, ineq_viol=np.inf,
                                iterations=0, status="warm")
            sol = ocp.solve(spec, warm=warm, cfg=self.solver_cfg)

            fallback = 0
            if sol.status == "solved":
                u_next = sol.us[0].copy()
                if (not math.isnan(prev_objective)) and track_err > 1e-6:
                    descent_max = max(descent_max, sol.objective - prev_objective)
                prev_objective = sol.objective
                prev_sol = sol
            else:
                tmpc_failures += 1
                if sc.plant.mode == "exact":
                    raise RunError(f"tracker solve failed at tick {n}: {sol.status}")
                u_next = ctrl.terminal_control(xhat, plan.ref.state(start),
                                               plan.ref.input(start), self.ing)
                fallback = 1
                prev_sol = None
                prev_objective = np.nan
            committed = dict(status=sol.status, iters=sol.iterations, kkt=sol.kkt_res,
                             objective=sol.objective, cand_viol=cand_viol,
                             fallback=fallback)

            # planner slot: last tick of the period
            if (n - plan.valid_tick) % beta == beta - 1 and pending is None:
                reached = (np.linalg.norm(state[:2] - np.asarray(sc.goal[:2]))
                           <= sc.goal_radius)
                if not reached:
                    if executor is not None:
                        pending_future = executor.submit(self.plan_cycle, plan, n)
                    else:
                        pending = self.plan_cycle(plan, n)

            # plant advances under the applied input
            disturbance = (_sample_disturbance(rng, sc.plant.dist_max)
                           if sc.plant.mode == "mismatch" else None)
            state = plant_step(state, u_apply, h, params, sc.plant,
                               plant_params, disturbance)
            u_apply = u_next
            n += 1

        if executor is not None:
            executor.shutdown(wait=False)
        self._summarize(log, goal_time, n, descent_max, tmpc_failures)
        return log

    def _summarize(self, log: RunLog, goal_time, n_ticks, descent_max, tmpc_failures):
        sc = self.sc
        ticks = log.ticks
        first_plan_tick = self.beta
        errs = [r["tracking_err"] for r in ticks if r["tick"] >= first_plan_tick]
        zs = [r["x2"] for r in ticks]
        log.summary.update({
            "reached": goal_time is not None,
            "goal_time": goal_time if goal_time is not None else float("nan"),
            "n_ticks": n_ticks,
            "max_tracking_err": max(errs) if errs else 0.0,
            "min_clearance": min((r["clearance"] for r in ticks), default=np.inf),
            "altitude_band": (max(zs) - min(zs)) if zs else 0.0,
            "tmpc_failures": tmpc_failures,
            "pmpc_failures": 0,
            "n_cycles": len(log.cycles),
            "max_cand_viol_tmpc": max((r["cand_viol"] for r in ticks
                                       if not math.isnan(r["cand_viol"])), default=0.0),
            "max_cand_viol_pmpc": max((c["cand_viol"] for c in log.cycles), default=0.0),
            "max_shift_viol": max((c["shift_viol"] for c in log.cycles), default=-np.inf),
            "min_region_safety_inflated": min((c["region_safety_inflated"]
                                               for c in log.cycles), default=np.inf),
            "min_region_safety_contour": min((c["region_safety_contour"]
                                              for c in log.cycles), default=np.inf),
            "max_ref_zbar_viol": max((c["ref_zbar_viol"] for c in log.cycles),
                                     default=-np.inf),
            "max_ref_fbar_viol": max((c["ref_fbar_viol"] for c in log.cycles),
                                     default=-np.inf),
            "max_ref_defect": max((c["ref_defect"] for c in log.cycles), default=0.0),
            "assumption_ok": all(c["assume_ok"] for c in log.cycles),
            "descent_max_increase": descent_max,
            "max_slack": 0.0,
            "mean_tmpc_iters": float(np.mean([r["iters"] for r in ticks])) if ticks else 0.0,
            "mean_pmpc_iters": float(np.mean([c["iters"] for c in log.cycles]))
                               if log.cycles else 0.0,
        })


# ---------------------------------------------------------------------------

class _SmpcRun:
    """Single-layer baseline: plans and tracks in one problem every tick."""

    def __init__(self, scenario, schedule, params, solver_cfg=None):
        self.sc = scenario
        self.sch = schedule
        self.params = params
        self.h = schedule.tracker_dt
        self.cfg = ctrl.SmpcConfig(dt=self.h)
        self.N = self.cfg.n_stages
        self.gmap = gridmap.rasterize(scenario.map_size, scenario.resolution,
                                      list(scenario.obstacles), scenario.robot_radius)
        self.Z = dyn.build_constraints()
        self.Zext = dyn.extend_constraints(self.Z)
        self.solver_cfg = solver_cfg or ocp.SolverConfig()

    def run(self) -> RunLog:
        sc, h = self.sc, self.h
        params = self.params
        plant_params = (sc.plant.perturbed_params(params)
                        if sc.plant.mode == "mismatch" else None)
        rng = np.random.default_rng(sc.plant.seed)

        x = dyn.hover_state(p=sc.start, psi=sc.start_yaw, params=params)
        u_hover = dyn.hover_input(psi=sc.start_yaw, params=params)
        xe = dyn.base_to_ext(x, att_cmd=u_hover[:3])
        memory = xe[dyn.M_PHI:dyn.M_PSI + 1].copy()

        prev_xs = np.tile(xe, (self.N + 1, 1))
        prev_us = np.tile(ctrl.steady_input(params), (self.N, 1))
        applied_rates = np.zeros(3)

        log = RunLog(scenario=sc.name, controller="smpc")
        state = x.copy()
        u_apply = u_hover.copy()
        committed = dict(status="bootstrap", iters=0, kkt=0.0, objective=0.0,
                         slack=0.0, fallback=0)
        goal_time = None
        failures = 0
        max_ticks = int(round(sc.time_limit / h))

        n = 0
        while n <= max_ticks:
            clr = clearance(state[:2], sc.obstacles, sc.robot_radius)
            log.add_tick(
                tick=n, t=n * h,
                **{f"x{i}": state[i] for i in range(NX)},
                **{f"u{i}": u_apply[i] for i in range(NU)},
                **{f"xr{i}": 0.0 for i in range(NX)},
                region=0, status=committed["status"], iters=committed["iters"],
                kkt=committed["kkt"], objective=committed["objective"],
                cand_viol=np.nan, tracking_err=np.nan, clearance=clr,
                slack_max=committed["slack"], fallback=committed["fallback"],
            )
            if np.linalg.norm(state[:2] - np.asarray(sc.goal[:2])) <= sc.goal_radius:
                goal_time = n * h
                break
            if n == max_ticks:
                break

            xhat = dyn.quad_rk4(state, u_apply, h, params)
            mem_next = memory + h * applied_rates
            # corridor around the shifted previous optimum
            q = prev_xs[1:, :2]
            regions = corridor.decompose_plan(self.gmap, q, sc.box_width,
                                              sc.robot_radius)
            xe0 = np.concatenate([xhat, mem_next])
            spec = ctrl.build_smpc(xe0, regions, sc.goal4(), self.cfg, self.Zext,
                                   params)
            warm_xs = np.vstack([prev_xs[1:], prev_xs[-1][None, :]])
            warm_us = np.vstack([prev_us[1:], ctrl.steady_input(params)[None, :]])
            warm_xs[0] = xe0
            warm = ocp.Solution(xs=warm_xs, us=warm_us, slack=np.zeros(0),
                                objective=np.nan, kkt_res=np.inf, eq_viol=np.inf,
                                ineq_viol=np.inf, iterations=0, status="warm")
            sol = ocp.solve(spec, warm=warm, cfg=self.solver_cfg)

            fallback = 0
            if sol.status == "solved":
                mem_apply = sol.xs[0][dyn.M_PHI:dyn.M_PSI + 1]
                u_next = np.array([mem_apply[0], mem_apply[1], mem_apply[2],
                                   sol.us[0][dyn.U_ACC]])
                prev_xs, prev_us = sol.xs.copy(), sol.us.copy()
                memory = mem_next
                applied_rates = sol.us[0][:3].copy()
                slack_max = float(np.abs(sol.slack).max()) if sol.slack.size else 0.0
            else:
                failures += 1
                if sc.plant.mode == "exact":
                    raise RunError(f"single-layer solve failed at tick {n}: {sol.status}")
                memory = mem_next
                u_next = np.array([memory[0], memory[1], memory[2], params.g])
                applied_rates = np.zeros(3)
                slack_max = np.nan
                fallback = 1
            committed = dict(status=sol.status, iters=sol.iterations, kkt=sol.kkt_res,
                             objective=sol.objective, slack=slack_max,
                             fallback=fallback)

            disturbance = (_sample_disturbance(rng, sc.plant.dist_max)
                           if sc.plant.mode == "mismatch" else None)
            state = plant_step(state, u_apply, h, params, sc.plant,
                               plant_params, disturbance)
            u_apply = u_next
            n += 1

        ticks = log.ticks
        zs = [r["x2"] for r in ticks]
        log.summary.update({
            "reached": goal_time is not None,
            "goal_time": goal_time if goal_time is not None else float("nan"),
            "n_ticks": n,
            "min_clearance": min((r["clearance"] for r in ticks), default=np.inf),
            "altitude_band": (max(zs) - min(zs)) if zs else 0.0,
            "smpc_failures": failures,
            "max_slack": max((r["slack_max"] for r in ticks
                              if not math.isnan(r["slack_max"])), default=0.0),
            "mean_smpc_iters": float(np.mean([r["iters"] for r in ticks])) if ticks else 0.0,
        })
        return log


def run_closed_loop(scenario: ScenarioConfig, ingredients=None,
                    schedule: Schedule | None = None, params: ModelParams | None = None,
                    pipelined=False, solver_cfg=None) -> RunLog:
    """Entry point used by the CLI, the demos and the acceptance tests."""
    params = params or ModelParams()
    schedule = schedule or Schedule()
    if scenario.controller == "smpc":
        return _SmpcRun(scenario, schedule, params, solver_cfg).run()
    if ingredients is None:
        raise ValueError("hierarchical runs need terminal ingredients")
    return _HmpcRun(scenario, ingredients, schedule, params,
                    pipelined=pipelined, solver_cfg=solver_cfg).run()
