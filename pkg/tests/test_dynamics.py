import numpy as np
import pytest

from hiermpc import dynamics as dyn
from hiermpc.dynamics import (
    ACC, NU, NX, NX_EXT, PHI, PSI, THETA, VX, VZ,
    ModelParams, build_constraints, eval_dynamics, eval_extended_dynamics,
    ext_step, hover_input, hover_state, linearize, position_selector,
    quad_rk4, quad_rk4_jac, rk4_step,
)

P = ModelParams()
RNG = np.random.default_rng(7)


def random_feasible_state(rng):
    x = np.zeros(NX)
    x[:3] = rng.uniform(-5, 5, 3)
    x[3:6] = rng.uniform(-2, 2, 3)
    x[6:9] = rng.uniform(-0.5, 0.5, 3)
    x[ACC] = rng.uniform(5.0, 15.0)
    return x


def random_feasible_input(rng):
    u = rng.uniform(-0.5, 0.5, NU)
    u[3] = rng.uniform(5.0, 15.0)
    return u


def test_hover_is_equilibrium():
    x = hover_state(p=(1.0, -2.0, 3.0))
    u = hover_input()
    assert np.linalg.norm(eval_dynamics(x, u, P)) <= 1e-12


def test_kinematic_rows():
    x = hover_state()
    x[3:6] = [1.0, 2.0, 3.0]
    dx = eval_dynamics(x, hover_input(), P)
    assert np.allclose(dx[:3], [1.0, 2.0, 3.0])
    assert np.allclose(dx[3:6], 0.0)


def test_pitch_tilt_hand_values():
    # att=(0, 0.1, 0), a=g, u=0: hand evaluation of the velocity and lag rows
    x = hover_state()
    x[THETA] = 0.1
    dx = eval_dynamics(x, np.zeros(NU), P)
    assert dx[VX] == pytest.approx(9.81 * np.sin(0.1) * np.cos(0.0), abs=1e-12)
    assert dx[VX] == pytest.approx(0.9794, abs=1e-4)
    assert dx[PHI] == pytest.approx(0.0)
    assert dx[THETA] == pytest.approx(-0.1 / 0.18)


def test_extended_matches_base_composition():
    rng = np.random.default_rng(3)
    for _ in range(20):
        xe = np.zeros(NX_EXT)
        xe[:NX] = random_feasible_state(rng)
        xe[10:13] = rng.uniform(-0.4, 0.4, 3)
        ue = np.concatenate([rng.uniform(-1, 1, 3), [rng.uniform(5, 15)]])
        dxe = eval_extended_dynamics(xe, ue, P)
        u = np.array([xe[10], xe[11], xe[12], ue[3]])
        assert np.array_equal(dxe[:NX], eval_dynamics(xe[:NX], u, P))
        assert np.array_equal(dxe[10:13], ue[:3])


def test_extended_rate_integrator_row():
    xe = dyn.base_to_ext(hover_state())
    ue = np.array([1.0, 0.0, 0.0, P.g])
    assert eval_extended_dynamics(xe, ue, P)[10] == 1.0


def test_rk4_scalar_linear_is_taylor4():
    # xdot = -x integrated one step equals the degree-4 Taylor polynomial
    h = 0.05
    out = rk4_step(lambda x, u: -x, np.array([1.0]), None, h, 1)
    expect = 1 - h + h**2 / 2 - h**3 / 6 + h**4 / 24
    assert out[0] == pytest.approx(expect, abs=1e-15)


def test_rk4_hover_fixed_point():
    x = hover_state(p=(0.5, 0.5, 1.0))
    assert np.allclose(quad_rk4(x, hover_input(), 0.05, P), x, atol=1e-13)


def euler_fine(x, u, h, n):
    dt = h / n
    for _ in range(n):
        x = x + dt * eval_dynamics(x, u, P)
    return x


def test_rk4_against_fine_euler_oracle():
    # keep the fast thrust-lag row mildly excited so the Euler oracle itself
    # resolves the flow well below the 1e-6 comparison tolerance
    rng = np.random.default_rng(11)
    x = random_feasible_state(rng)
    u = random_feasible_input(rng)
    u[3] = x[ACC] + 0.3
    ref = euler_fine(x, u, 0.05, 200000)
    assert np.linalg.norm(quad_rk4(x, u, 0.05, P, substeps=10) - ref) <= 1e-6


def test_rk4_order_four():
    rng = np.random.default_rng(12)
    x = random_feasible_state(rng)
    u = random_feasible_input(rng)
    ref = quad_rk4(x, u, 0.05, P, substeps=4096)
    e1 = np.linalg.norm(quad_rk4(x, u, 0.05, P, substeps=1) - ref)
    e2 = np.linalg.norm(quad_rk4(x, u, 0.05, P, substeps=2) - ref)
    assert e1 / e2 >= 12.0


def fd_jacobians(x, u, eps=1e-6):
    A = np.zeros((NX, NX))
    B = np.zeros((NX, NU))
    for i in range(NX):
        dx = np.zeros(NX)
        dx[i] = eps
        A[:, i] = (eval_dynamics(x + dx, u, P) - eval_dynamics(x - dx, u, P)) / (2 * eps)
    for i in range(NU):
        du = np.zeros(NU)
        du[i] = eps
        B[:, i] = (eval_dynamics(x, u + du, P) - eval_dynamics(x, u - du, P)) / (2 * eps)
    return A, B


def test_linearize_matches_finite_differences():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        x = random_feasible_state(rng)
        u = random_feasible_input(rng)
        A, B = linearize(x, u, P)
        Afd, Bfd = fd_jacobians(x, u)
        worst = max(worst, np.abs(A - Afd).max(), np.abs(B - Bfd).max())
    assert worst <= 1e-5


def test_linearize_actuator_block():
    A, B = linearize(random_feasible_state(RNG), random_feasible_input(RNG), P)
    assert np.allclose(np.diag(A)[6:10], [-1 / 0.18, -1 / 0.18, -1 / 0.56, -1 / 0.05])
    x0 = hover_state()
    A0, _ = linearize(x0, hover_input(), P)
    assert A0[VZ, ACC] == pytest.approx(1.0)


def test_discrete_jacobians_match_fd():
    rng = np.random.default_rng(8)
    x = random_feasible_state(rng)
    u = random_feasible_input(rng)
    xn, Ad, Bd = quad_rk4_jac(x, u, 0.05, P)
    assert np.allclose(xn, quad_rk4(x, u, 0.05, P))
    eps = 1e-6
    for i in range(NX):
        d = np.zeros(NX)
        d[i] = eps
        col = (quad_rk4(x + d, u, 0.05, P) - quad_rk4(x - d, u, 0.05, P)) / (2 * eps)
        assert np.abs(Ad[:, i] - col).max() <= 1e-7
    for i in range(NU):
        d = np.zeros(NU)
        d[i] = eps
        col = (quad_rk4(x, u + d, 0.05, P) - quad_rk4(x, u - d, 0.05, P)) / (2 * eps)
        assert np.abs(Bd[:, i] - col).max() <= 1e-7


def test_ext_step_jacobians_match_fd():
    rng = np.random.default_rng(9)
    xe = np.zeros(NX_EXT)
    xe[:NX] = random_feasible_state(rng)
    xe[10:13] = rng.uniform(-0.3, 0.3, 3)
    ue = np.concatenate([rng.uniform(-1, 1, 3), [9.0]])
    out, A, B = dyn.ext_step_jac(xe, ue, 0.05, P)
    assert np.array_equal(out, ext_step(xe, ue, 0.05, P))
    eps = 1e-6
    for i in range(NX_EXT):
        d = np.zeros(NX_EXT)
        d[i] = eps
        col = (ext_step(xe + d, ue, 0.05, P) - ext_step(xe - d, ue, 0.05, P)) / (2 * eps)
        assert np.abs(A[:, i] - col).max() <= 1e-7
    for i in range(NU):
        d = np.zeros(NU)
        d[i] = eps
        col = (ext_step(xe, ue + d, 0.05, P) - ext_step(xe, ue - d, 0.05, P)) / (2 * eps)
        assert np.abs(B[:, i] - col).max() <= 1e-7


def test_constraint_rows_at_hover():
    Z = build_constraints()
    g = Z.eval(hover_state(p=(0, 0, 1.4)), hover_input())
    assert np.all(g <= 0.0)
    vel_rows = [i for i, nm in enumerate(Z.labels) if nm.startswith("v")]
    assert np.allclose(g[vel_rows], -2.0)


def test_constraint_boundary_and_violation():
    Z = build_constraints()
    x = hover_state(p=(0, 0, 1.4))
    x[VX] = 2.0
    g = Z.eval(x, hover_input())
    assert g[Z.labels.index("vx+")] == pytest.approx(0.0, abs=1e-15)
    x[ACC] = 16.0
    g = Z.eval(x, hover_input())
    assert g[Z.labels.index("a+")] == pytest.approx(1.0)


def test_constraint_dimension_mismatch():
    Z = build_constraints()
    with pytest.raises(ValueError):
        Z.eval(np.zeros(NX), np.zeros(2))


def test_interval_widths():
    Z = build_constraints()
    w = Z.interval_widths()
    assert w[VX] == pytest.approx(4.0)
    assert w[ACC] == pytest.approx(10.0)


def test_extend_constraints_maps_rows():
    Z = build_constraints()
    Ze = dyn.extend_constraints(Z, tighten=0.1 * np.ones(Z.n_rows))
    xe = dyn.base_to_ext(hover_state(p=(0, 0, 1.4)))
    ue_ss = np.array([0.0, 0.0, 0.0, P.g])
    g = Ze.eval(xe, ue_ss)
    assert g.shape[0] == Z.n_rows + 6
    # mapped rows are the base rows tightened by 0.1
    g_base = Z.eval(hover_state(p=(0, 0, 1.4)), hover_input())
    assert np.allclose(g[:Z.n_rows], g_base + 0.1)


def test_position_selector_rows():
    C = position_selector()
    assert np.all(C.sum(axis=1) == 1.0)
    x = RNG.normal(size=NX)
    assert np.array_equal(C @ x, x[:3])
