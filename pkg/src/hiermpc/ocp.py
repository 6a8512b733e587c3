"""Direct multiple-shooting SQP solver for the controllers in this package.

The solver linearizes shooting defects with exact discrete Jacobians, builds a
Gauss-Newton QP with the stage inequalities, an optional terminal ellipsoid
(linearized with a small inward margin) and optional terminal equalities, and
takes merit-guarded full steps.  The inner QP is handed to cvxopt's
interior-point cone solver; everything is deterministic for fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

_CVXOPT_OPTS = {
    "show_progress": False,
    "abstol": 1e-10,
    "reltol": 1e-10,
    "feastol": 1e-10,
    "maxiters": 200,
}

TERM_QUAD_MARGIN = 1e-8


@dataclass
class StageIneq:
    L: np.ndarray                 # (m, nx + nu)
    l: np.ndarray                 # (m,)
    soft: Optional[np.ndarray] = None  # bool mask of rows sharing the stage slack


@dataclass
class OcpSpec:
    """Data description of one optimal-control problem instance."""

    nx: int
    nu: int
    N: int
    x0: np.ndarray
    integrate: Callable            # (k, x, u) -> (x_next, A, B) or (..., g, Jx, Ju)
    stage_cost: Callable           # (k, x, u) -> (v, gx, gu, Hxx, Huu)
    term_cost: Callable            # (x_N, u_last) -> (v, gx, gu, Hxx, Huu)
    stage_ineq: list = field(default_factory=list)   # one StageIneq per stage or None
    term_ineq: Optional[tuple] = None                # (L, l) over x_N
    term_soft: Optional[np.ndarray] = None           # soft mask over term_ineq rows
    term_quad: Optional[tuple] = None                # (P, center, alpha_sq)
    term_eq: Optional[tuple] = None                  # (Ex, Eu, b) over (x_N, u_{N-1})
    u_init: Optional[np.ndarray] = None
    slack_penalty: Optional[tuple] = None            # (w_quad, w_lin)

    def has_slack(self):
        if self.slack_penalty is None:
            return False
        if self.term_soft is not None and self.term_soft.any():
            return True
        return any(si is not None and si.soft is not None and si.soft.any()
                   for si in self.stage_ineq)


@dataclass
class SolverConfig:
    max_iter: int = 60
    tol_stat: float = 1e-5
    tol_feas: float = 1e-8
    tol_step: float = 1e-9
    backtrack_max: int = 10
    # thresholds that define the `solved` status
    eq_tol: float = 1e-6
    ineq_tol: float = 1e-6
    kkt_tol: float = 1e-4


@dataclass
class Solution:
    xs: np.ndarray
    us: np.ndarray
    slack: np.ndarray
    objective: float
    kkt_res: float
    eq_viol: float
    ineq_viol: float
    iterations: int
    status: str               # solved | max_iter | infeasible_qp | nan
    duals: dict = field(default_factory=dict)


def _unpack_step(res):
    if len(res) == 3:
        x_next, A, B = res
        return x_next, A, B, None, None, None
    return res


def _rollout(spec: OcpSpec, xs, us):
    """Evaluate dynamics, Jacobians and path rows along the trajectory."""
    F, As, Bs, path = [], [], [], []
    for k in range(spec.N):
        x_next, A, B, g, Jx, Ju = _unpack_step(spec.integrate(k, xs[k], us[k]))
        if not (np.all(np.isfinite(x_next)) and np.all(np.isfinite(A))):
            raise FloatingPointError(f"non-finite dynamics at stage {k}")
        F.append(x_next)
        As.append(A)
        Bs.append(B)
        path.append((g, Jx, Ju))
    return F, As, Bs, path


def _objective(spec: OcpSpec, xs, us, slack):
    J = 0.0
    for k in range(spec.N):
        J += spec.stage_cost(k, xs[k], us[k])[0]
    J += spec.term_cost(xs[spec.N], us[spec.N - 1])[0]
    if spec.slack_penalty is not None:
        wq, wl = spec.slack_penalty
        J += float(np.sum(wq * slack**2 + wl * slack))
    return float(J)


def _violations(spec: OcpSpec, xs, us, slack, F=None, path=None):
    """Equality and inequality violation measures at a trajectory."""
    if F is None:
        F, _, _, path = _rollout(spec, xs, us)
    eq = 0.0
    for k in range(spec.N):
        eq = max(eq, float(np.abs(F[k] - xs[k + 1]).max()))
    eq = max(eq, float(np.abs(xs[0] - spec.x0).max()))
    if spec.term_eq is not None:
        Ex, Eu, b = spec.term_eq
        eq = max(eq, float(np.abs(Ex @ xs[spec.N] + Eu @ us[spec.N - 1] - b).max()))

    ineq = 0.0
    for k in range(spec.N):
        si = spec.stage_ineq[k] if spec.stage_ineq else None
        if si is not None and si.L.shape[0]:
            g = si.L @ np.concatenate([xs[k], us[k]]) - si.l
            if si.soft is not None and si.soft.any():
                g = g.copy()
                g[si.soft] -= slack[k]
            ineq = max(ineq, float(g.max()))
        if path and path[k][0] is not None and len(path[k][0]):
            ineq = max(ineq, float(path[k][0].max()))
    if spec.term_ineq is not None:
        Lt, lt = spec.term_ineq
        if Lt.shape[0]:
            g = Lt @ xs[spec.N] - lt
            if spec.term_soft is not None and spec.term_soft.any() and len(slack) > spec.N:
                g = g.copy()
                g[spec.term_soft] -= slack[spec.N]
            ineq = max(ineq, float(g.max()))
    if spec.term_quad is not None:
        P, c, a2 = spec.term_quad
        d = xs[spec.N] - c
        ineq = max(ineq, float(d @ P @ d - a2))
    if slack is not None and len(slack):
        ineq = max(ineq, float(np.max(-slack, initial=0.0)))
    return eq, max(ineq, 0.0)


def constraint_violation(spec: OcpSpec, xs, us, slack=None):
    """Worst constraint violation of a candidate trajectory (oracle helper)."""
    slack = np.zeros(spec.N) if slack is None else slack
    eq, ineq = _violations(spec, xs, us, slack)
    return max(eq, ineq)


def _solve_qp(P, q, G, h, A, b):
    import cvxopt

    cvxopt.solvers.options.update(_CVXOPT_OPTS)
    args = [cvxopt.matrix(P), cvxopt.matrix(q)]
    args += [cvxopt.matrix(G), cvxopt.matrix(h)]
    if A is not None and A.shape[0]:
        args += [cvxopt.matrix(A), cvxopt.matrix(b)]
    try:
        sol = cvxopt.solvers.qp(*args)
    except (ValueError, ArithmeticError):
        return None, None, None
    if sol["status"] != "optimal":
        # one deterministic retry at stock tolerances
        cvxopt.solvers.options.update({"abstol": 1e-7, "reltol": 1e-6, "feastol": 1e-7})
        try:
            sol = cvxopt.solvers.qp(*args)
        except (ValueError, ArithmeticError):
            return None, None, None
        finally:
            cvxopt.solvers.options.update(_CVXOPT_OPTS)
        if sol["status"] != "optimal":
            return None, None, None
    dx = np.array(sol["x"]).ravel()
    lam = np.array(sol["z"]).ravel() if sol["z"] is not None else np.zeros(0)
    nu = np.array(sol["y"]).ravel() if sol["y"] is not None else np.zeros(0)
    return dx, lam, nu


def solve(spec: OcpSpec, warm: Optional[Solution] = None,
          cfg: Optional[SolverConfig] = None) -> Solution:
    """SQP loop: rollout, Gauss-Newton QP, merit-guarded step."""
    cfg = cfg or SolverConfig()
    nx, nu, N = spec.nx, spec.nu, spec.N
    nX = (N + 1) * nx
    nU = N * nu
    with_slack = spec.has_slack()
    nS = N + 1 if with_slack else 0
    nvar = nX + nU + nS

    if warm is not None:
        if warm.xs.shape != (N + 1, nx) or warm.us.shape != (N, nu):
            raise ValueError("warm start has incompatible dimensions")
        xs = warm.xs.copy()
        us = warm.us.copy()
        slack = warm.slack.copy() if with_slack and warm.slack.size == nS else np.zeros(nS)
    else:
        u0 = spec.u_init if spec.u_init is not None else np.zeros(nu)
        xs = np.tile(spec.x0, (N + 1, 1))
        us = np.tile(u0, (N, 1))
        slack = np.zeros(nS)

    ix = lambda k: k * nx
    iu = lambda k: nX + k * nu
    isl = lambda k: nX + nU + k

    mu = 1.0
    status = "max_iter"
    iterations = 0
    duals = {}
    kkt = np.inf

    for it in range(cfg.max_iter):
        iterations = it + 1
        try:
            F, As, Bs, path = _rollout(spec, xs, us)
        except FloatingPointError:
            return Solution(xs, us, slack, np.nan, np.inf, np.inf, np.inf,
                            iterations, "nan")

        # --- quadratic model
        Pm = np.zeros((nvar, nvar))
        qv = np.zeros(nvar)
        for k in range(N):
            v, gx, gu, Hxx, Huu = spec.stage_cost(k, xs[k], us[k])
            Pm[ix(k):ix(k) + nx, ix(k):ix(k) + nx] += Hxx
            Pm[iu(k):iu(k) + nu, iu(k):iu(k) + nu] += Huu
            qv[ix(k):ix(k) + nx] += gx
            qv[iu(k):iu(k) + nu] += gu
        v, gx, gu, Hxx, Huu = spec.term_cost(xs[N], us[N - 1])
        Pm[ix(N):ix(N) + nx, ix(N):ix(N) + nx] += Hxx
        Pm[iu(N - 1):iu(N - 1) + nu, iu(N - 1):iu(N - 1) + nu] += Huu
        qv[ix(N):ix(N) + nx] += gx
        qv[iu(N - 1):iu(N - 1) + nu] += gu
        Pm[:nX, :nX] += 1e-10 * np.eye(nX)  # keep the KKT system regular
        if with_slack:
            wq, wl = spec.slack_penalty
            for k in range(nS):
                Pm[isl(k), isl(k)] += 2.0 * wq
                qv[isl(k)] += 2.0 * wq * slack[k] + wl

        # --- equalities
        Arows, brows = [], []
        row = np.zeros((nx, nvar))
        row[:, :nx] = np.eye(nx)
        Arows.append(row)
        brows.append(spec.x0 - xs[0])
        for k in range(N):
            row = np.zeros((nx, nvar))
            row[:, ix(k):ix(k) + nx] = As[k]
            row[:, iu(k):iu(k) + nu] = Bs[k]
            row[:, ix(k + 1):ix(k + 1) + nx] = -np.eye(nx)
            Arows.append(row)
            brows.append(xs[k + 1] - F[k])
        if spec.term_eq is not None:
            Ex, Eu, b = spec.term_eq
            row = np.zeros((Ex.shape[0], nvar))
            row[:, ix(N):ix(N) + nx] = Ex
            row[:, iu(N - 1):iu(N - 1) + nu] = Eu
            Arows.append(row)
            brows.append(b - Ex @ xs[N] - Eu @ us[N - 1])
        Aeq = np.vstack(Arows)
        beq = np.concatenate(brows)

        # --- inequalities
        Grows, hrows = [], []
        for k in range(N):
            si = spec.stage_ineq[k] if spec.stage_ineq else None
            if si is not None and si.L.shape[0]:
                m = si.L.shape[0]
                row = np.zeros((m, nvar))
                row[:, ix(k):ix(k) + nx] = si.L[:, :nx]
                row[:, iu(k):iu(k) + nu] = si.L[:, nx:]
                rhs = si.l - si.L @ np.concatenate([xs[k], us[k]])
                if with_slack and si.soft is not None and si.soft.any():
                    row[si.soft, isl(k)] = -1.0
                    rhs = rhs.copy()
                    rhs[si.soft] += slack[k]
                Grows.append(row)
                hrows.append(rhs)
            g, Jx, Ju = path[k]
            if g is not None and len(g):
                row = np.zeros((len(g), nvar))
                row[:, ix(k):ix(k) + nx] = Jx
                row[:, iu(k):iu(k) + nu] = Ju
                Grows.append(row)
                hrows.append(-g)
        if spec.term_ineq is not None and spec.term_ineq[0].shape[0]:
            Lt, lt = spec.term_ineq
            row = np.zeros((Lt.shape[0], nvar))
            row[:, ix(N):ix(N) + nx] = Lt
            rhs = lt - Lt @ xs[N]
            if with_slack and spec.term_soft is not None and spec.term_soft.any():
                row[spec.term_soft, isl(N)] = -1.0
                rhs = rhs.copy()
                rhs[spec.term_soft] += slack[N]
            Grows.append(row)
            hrows.append(rhs)
        if spec.term_quad is not None:
            Pq, c, a2 = spec.term_quad
            d = xs[N] - c
            gq = float(d @ Pq @ d - a2)
            row = np.zeros((1, nvar))
            row[0, ix(N):ix(N) + nx] = 2.0 * Pq @ d
            Grows.append(row)
            hrows.append(np.array([-gq - TERM_QUAD_MARGIN]))
        if with_slack:
            for k in range(nS):
                row = np.zeros((1, nvar))
                row[0, isl(k)] = -1.0
                Grows.append(row)
                hrows.append(np.array([slack[k]]))
        G = np.vstack(Grows) if Grows else np.zeros((0, nvar))
        h = np.concatenate(hrows) if hrows else np.zeros(0)

        dz, lam, nu_eq = _solve_qp(Pm, qv, G, h, Aeq, beq)
        if dz is None:
            eq_v, in_v = _violations(spec, xs, us, slack, F, path)
            return Solution(xs, us, slack, _objective(spec, xs, us, slack),
                            kkt, eq_v, in_v, iterations, "infeasible_qp")
        duals = {"ineq": lam, "eq": nu_eq}

        # Lagrangian stationarity at the current iterate with the QP multipliers;
        # by QP optimality this equals |Pm dz|, a Newton-step-sized measure
        grad_L = qv + Aeq.T @ nu_eq
        if G.shape[0]:
            grad_L = grad_L + G.T @ lam
        kkt = float(np.abs(grad_L).max())

        step = float(np.abs(dz).max())
        eq_v, in_v = _violations(spec, xs, us, slack, F, path)
        if kkt <= cfg.tol_stat and eq_v <= cfg.tol_feas and in_v <= cfg.tol_feas:
            status = "solved"
            break
        if step <= cfg.tol_step * (1.0 + float(np.abs(xs).max())):
            # already at a KKT point; do not move
            status = "solved" if (eq_v <= cfg.eq_tol and in_v <= cfg.ineq_tol
                                  and kkt <= cfg.kkt_tol) else "max_iter"
            break

        mu = max(mu, 2.0 * float(np.abs(lam).max(initial=0.0)) +
                 2.0 * float(np.abs(nu_eq).max(initial=0.0)) + 1.0)
        merit0 = _objective(spec, xs, us, slack) + mu * (eq_v + in_v)

        alpha = 1.0
        accepted = False
        for _ in range(cfg.backtrack_max + 1):
            xs_t = xs + alpha * dz[:nX].reshape(N + 1, nx)
            us_t = us + alpha * dz[nX:nX + nU].reshape(N, nu)
            sl_t = slack + alpha * dz[nX + nU:] if with_slack else slack
            try:
                eq_t, in_t = _violations(spec, xs_t, us_t, sl_t)
                merit_t = _objective(spec, xs_t, us_t, sl_t) + mu * (eq_t + in_t)
            except FloatingPointError:
                alpha *= 0.5
                continue
            if merit_t <= merit0 + 1e-12 * max(1.0, abs(merit0)):
                accepted = True
                break
            alpha *= 0.5
        xs, us = xs_t, us_t
        if with_slack:
            slack = np.maximum(sl_t, 0.0)
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(us))):
            return Solution(xs, us, slack, np.nan, kkt, np.inf, np.inf,
                            iterations, "nan")


    eq_v, in_v = _violations(spec, xs, us, slack)
    if status != "solved":
        status = "solved" if (eq_v <= cfg.eq_tol and in_v <= cfg.ineq_tol
                              and kkt <= cfg.kkt_tol) else status
    return Solution(xs=xs, us=us, slack=slack,
                    objective=_objective(spec, xs, us, slack),
                    kkt_res=kkt, eq_viol=eq_v, ineq_viol=in_v,
                    iterations=iterations, status=status, duals=duals)


def kkt_residual(spec: OcpSpec, sol: Solution) -> float:
    """Stationarity plus feasibility residual of a candidate solution.

    Uses the solver's multipliers when present, otherwise least-squares
    multipliers over the equalities and the active inequalities.
    """
    nx, nu, N = spec.nx, spec.nu, spec.N
    xs, us = sol.xs, sol.us
    slack = sol.slack if sol.slack is not None and sol.slack.size else np.zeros(N + 1)
    F, As, Bs, path = _rollout(spec, xs, us)

    nX, nU = (N + 1) * nx, N * nu
    with_slack = spec.has_slack()
    nvar = nX + nU + (N + 1 if with_slack else 0)
    grad = np.zeros(nvar)
    for k in range(N):
        _, gx, gu, _, _ = spec.stage_cost(k, xs[k], us[k])
        grad[k * nx:(k + 1) * nx] += gx
        grad[nX + k * nu:nX + (k + 1) * nu] += gu
    _, gx, gu, _, _ = spec.term_cost(xs[N], us[N - 1])
    grad[N * nx:(N + 1) * nx] += gx
    grad[nX + (N - 1) * nu:nX + N * nu] += gu
    if with_slack:
        wq, wl = spec.slack_penalty
        grad[nX + nU:] = 2 * wq * slack[:N + 1] + wl

    rows = []
    row = np.zeros((nx, nvar))
    row[:, :nx] = np.eye(nx)
    rows.append(row)
    for k in range(N):
        r = np.zeros((nx, nvar))
        r[:, k * nx:(k + 1) * nx] = As[k]
        r[:, nX + k * nu:nX + (k + 1) * nu] = Bs[k]
        r[:, (k + 1) * nx:(k + 2) * nx] = -np.eye(nx)
        rows.append(r)
    if spec.term_eq is not None:
        Ex, Eu, b = spec.term_eq
        r = np.zeros((Ex.shape[0], nvar))
        r[:, N * nx:(N + 1) * nx] = Ex
        r[:, nX + (N - 1) * nu:nX + N * nu] = Eu
        rows.append(r)
    Aeq = np.vstack(rows)

    act_rows = []
    act_tol = 1e-6
    for k in range(N):
        si = spec.stage_ineq[k] if spec.stage_ineq else None
        if si is not None and si.L.shape[0]:
            g = si.L @ np.concatenate([xs[k], us[k]]) - si.l
            if si.soft is not None and si.soft.any():
                g = g.copy()
                g[si.soft] -= slack[k]
            for j in np.flatnonzero(g >= -act_tol):
                r = np.zeros(nvar)
                r[k * nx:(k + 1) * nx] = si.L[j, :nx]
                r[nX + k * nu:nX + (k + 1) * nu] = si.L[j, nx:]
                if with_slack and si.soft is not None and si.soft[j]:
                    r[nX + nU + k] = -1.0
                act_rows.append(r)
        g, Jx, Ju = path[k]
        if g is not None and len(g):
            for j in np.flatnonzero(g >= -act_tol):
                r = np.zeros(nvar)
                r[k * nx:(k + 1) * nx] = Jx[j]
                r[nX + k * nu:nX + (k + 1) * nu] = Ju[j]
                act_rows.append(r)
    if spec.term_ineq is not None and spec.term_ineq[0].shape[0]:
        Lt, lt = spec.term_ineq
        g = Lt @ xs[N] - lt
        if spec.term_soft is not None and spec.term_soft.any() and len(slack) > N:
            g = g.copy()
            g[spec.term_soft] -= slack[N]
        for j in np.flatnonzero(g >= -act_tol):
            r = np.zeros(nvar)
            r[N * nx:(N + 1) * nx] = Lt[j]
            if with_slack and spec.term_soft is not None and spec.term_soft[j]:
                r[nX + nU + N] = -1.0
            act_rows.append(r)
    if spec.term_quad is not None:
        Pq, c, a2 = spec.term_quad
        d = xs[N] - c
        if d @ Pq @ d - a2 >= -act_tol:
            r = np.zeros(nvar)
            r[N * nx:(N + 1) * nx] = 2.0 * Pq @ d
            act_rows.append(r)

    M = Aeq.T if not act_rows else np.hstack([Aeq.T, np.array(act_rows).T])
    coef, *_ = np.linalg.lstsq(M, -grad, rcond=None)
    stat = float(np.abs(grad + M @ coef).max())
    eq_v, in_v = _violations(spec, xs, us, slack, F, path)
    return max(stat, eq_v, in_v)


def shift_solution(sol: Solution, tail_x, tail_u) -> Solution:
    """Drop the first stage and append the supplied tail stage."""
    xs = np.vstack([sol.xs[1:], tail_x[None, :]])
    us = np.vstack([sol.us[1:], tail_u[None, :]])
    slack = np.concatenate([sol.slack[1:], sol.slack[-1:]]) if sol.slack.size else sol.slack
    return Solution(xs=xs, us=us, slack=slack, objective=np.nan, kkt_res=np.inf,
                    eq_viol=np.inf, ineq_viol=np.inf, iterations=0, status="warm")
