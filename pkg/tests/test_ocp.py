import numpy as np
import pytest

from hiermpc.ocp import (
    OcpSpec, SolverConfig, StageIneq, constraint_violation, kkt_residual,
    shift_solution, solve,
)

H = 0.1
AD = np.array([[1.0, H], [0.0, 1.0]])
BD = np.array([[0.5 * H * H], [H]])
Q = np.diag([1.0, 0.1])
RW = np.array([[0.1]])
QF_WEIGHT = np.diag([5.0, 1.0])


def di_integrate(k, x, u):
    return AD @ x + BD @ u, AD.copy(), BD.copy()


def di_stage_cost(k, x, u):
    return (float(x @ Q @ x + u @ RW @ u), 2 * Q @ x, 2 * RW @ u, 2 * Q, 2 * RW)


def di_term_cost(x, u_last):
    return (float(x @ QF_WEIGHT @ x), 2 * QF_WEIGHT @ x, np.zeros(1),
            2 * QF_WEIGHT, np.zeros((1, 1)))


def di_spec(N=20, x0=(1.0, 0.0), ineq=None, **kw):
    return OcpSpec(
        nx=2, nu=1, N=N, x0=np.array(x0, dtype=float),
        integrate=di_integrate, stage_cost=di_stage_cost, term_cost=di_term_cost,
        stage_ineq=ineq if ineq is not None else [None] * N, **kw,
    )


def lqr_rollout(N, x0):
    """Backward Riccati recursion and forward rollout: the independent oracle."""
    P = QF_WEIGHT.copy()
    Ks = []
    for _ in range(N):
        S = RW + BD.T @ P @ BD
        K = np.linalg.solve(S, BD.T @ P @ AD)
        P = Q + AD.T @ P @ AD - AD.T @ P @ BD @ K
        Ks.append(K)
    Ks = Ks[::-1]
    xs = [np.array(x0, dtype=float)]
    us = []
    for k in range(N):
        u = -Ks[k] @ xs[-1]
        us.append(u)
        xs.append(AD @ xs[-1] + BD @ u)
    return np.array(xs), np.array(us)


def test_double_integrator_matches_lqr_oracle():
    spec = di_spec()
    sol = solve(spec)
    assert sol.status == "solved"
    xs_ref, us_ref = lqr_rollout(spec.N, spec.x0)
    assert np.abs(sol.xs - xs_ref).max() <= 1e-6
    assert np.abs(sol.us - us_ref).max() <= 1e-6


def test_warm_start_at_optimum_one_iteration():
    spec = di_spec()
    sol = solve(spec)
    again = solve(spec, warm=sol)
    assert again.iterations == 1
    assert again.status == "solved"
    assert np.abs(again.xs - sol.xs).max() <= 1e-8


def test_solved_implies_feasible():
    spec = di_spec()
    sol = solve(spec)
    assert sol.eq_viol <= 1e-6 and sol.ineq_viol <= 1e-6 and sol.kkt_res <= 1e-4


def test_determinism():
    spec = di_spec()
    s1 = solve(spec)
    s2 = solve(spec)
    assert np.array_equal(s1.xs, s2.xs) and np.array_equal(s1.us, s2.us)


def test_infeasible_box():
    # lower bound above upper bound on the input
    L = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    l = np.array([1.0, -2.0])  # u <= 1 and u >= 2
    ineq = [StageIneq(L=L, l=l) for _ in range(5)]
    sol = solve(di_spec(N=5, ineq=ineq))
    assert sol.status == "infeasible_qp"


def test_input_bound_active():
    L = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    l = np.array([0.15, 0.15])
    ineq = [StageIneq(L=L, l=l) for _ in range(20)]
    sol = solve(di_spec(ineq=ineq, x0=(-1.0, 0.0)))
    assert sol.status == "solved"
    assert sol.us.max() <= 0.15 + 1e-8
    # the bound actually binds somewhere for this start
    assert sol.us.max() >= 0.15 - 1e-6


def test_terminal_quadratic_constraint():
    # force the terminal state into a tight ball around a nonzero point
    Pq = np.eye(2)
    center = np.array([0.5, 0.0])
    spec = di_spec(N=10, term_quad=(Pq, center, 0.01))
    sol = solve(spec)
    assert sol.status == "solved"
    d = sol.xs[-1] - center
    assert d @ Pq @ d <= 0.01 + 1e-8


def test_terminal_equality_rows():
    # pin the terminal velocity to zero through Ex
    Ex = np.array([[0.0, 1.0]])
    Eu = np.zeros((1, 1))
    spec = di_spec(N=15, term_eq=(Ex, Eu, np.zeros(1)))
    sol = solve(spec)
    assert sol.status == "solved"
    assert abs(sol.xs[-1, 1]) <= 1e-8


def test_slack_relaxes_only_soft_rows():
    # position must stay above a line the optimum wants to cross; softened
    L = np.array([[-1.0, 0.0, 0.0]])
    l = np.array([-0.2])  # x0_pos >= 0.2
    ineq = [StageIneq(L=L, l=l, soft=np.array([True])) for _ in range(10)]
    spec = di_spec(N=10, x0=(0.1, 0.0), ineq=ineq, slack_penalty=(1e4, 1e3))
    sol = solve(spec)
    assert sol.status == "solved"
    # the fixed initial state violates by 0.1; slack must carry exactly that
    assert sol.slack[0] == pytest.approx(0.1, abs=1e-6)
    # soft-row residual beyond slack is zero
    g0 = L @ np.concatenate([sol.xs[0], sol.us[0]]) - l
    assert g0[0] - sol.slack[0] <= 1e-8


def test_slack_zero_when_feasible():
    L = np.array([[-1.0, 0.0, 0.0]])
    l = np.array([10.0])
    ineq = [StageIneq(L=L, l=l, soft=np.array([True])) for _ in range(10)]
    sol = solve(di_spec(N=10, ineq=ineq, slack_penalty=(1e4, 1e3)))
    assert sol.status == "solved"
    assert np.abs(sol.slack).max() <= 1e-7


def test_kkt_residual_values():
    spec = di_spec()
    sol = solve(spec)
    assert kkt_residual(spec, sol) <= 1e-7
    # a feasible but non-optimal rollout has a visibly nonzero residual
    xs = np.tile(spec.x0, (spec.N + 1, 1))
    us = np.zeros((spec.N, 1))
    for k in range(spec.N):
        xs[k + 1] = AD @ xs[k] + BD @ us[k]
    from hiermpc.ocp import Solution
    cand = Solution(xs=xs, us=us, slack=np.zeros(0), objective=0.0, kkt_res=0.0,
                    eq_viol=0.0, ineq_viol=0.0, iterations=0, status="warm")
    assert kkt_residual(spec, cand) > 1e-3


def test_kkt_zero_for_unconstrained_quadratic_minimizer():
    # one stage, zero dynamics influence: minimizer of the quadratic is x=0,u=0
    spec = OcpSpec(
        nx=2, nu=1, N=1, x0=np.zeros(2),
        integrate=lambda k, x, u: (np.zeros(2), np.zeros((2, 2)), np.zeros((2, 1))),
        stage_cost=di_stage_cost, term_cost=di_term_cost, stage_ineq=[None],
    )
    sol = solve(spec)
    assert sol.status == "solved"
    assert kkt_residual(spec, sol) <= 1e-9


def test_shift_solution_alignment():
    spec = di_spec(N=6)
    sol = solve(spec)
    shifted = shift_solution(sol, tail_x=np.array([9.0, 9.0]), tail_u=np.array([0.5]))
    assert np.array_equal(shifted.xs[:-1], sol.xs[1:])
    assert np.array_equal(shifted.us[:-1], sol.us[1:])
    assert shifted.xs[-1, 0] == 9.0 and shifted.us[-1, 0] == 0.5


def test_constraint_violation_helper():
    spec = di_spec(N=4)
    sol = solve(spec)
    assert constraint_violation(spec, sol.xs, sol.us) <= 1e-8
    bad = sol.xs.copy()
    bad[2, 0] += 0.3
    assert constraint_violation(spec, bad, sol.us) >= 0.29


def test_nan_dynamics_reported():
    def bad_integrate(k, x, u):
        if k == 2:
            return np.full(2, np.nan), AD.copy(), BD.copy()
        return AD @ x + BD @ u, AD.copy(), BD.copy()

    spec = OcpSpec(nx=2, nu=1, N=5, x0=np.array([1.0, 0.0]),
                   integrate=bad_integrate, stage_cost=di_stage_cost,
                   term_cost=di_term_cost, stage_ineq=[None] * 5)
    sol = solve(spec)
    assert sol.status == "nan"
