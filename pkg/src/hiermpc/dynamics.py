"""Quadrotor rigid-body model with first-order actuator lag.

State ordering (10):   x = [px py pz  vx vy vz  phi theta psi  a]
Input ordering (4):    u = [phi_c theta_c psi_c  a_c]
Extended state (13):   xe = [x, phi_c theta_c psi_c]   (attitude-command memory)
Extended input (4):    ue = [dphi_c dtheta_c dpsi_c  a_c]

All angles in radians, thrust `a` is mass-normalized (m/s^2).  Every matrix in
this package (P, K, C, constraint rows) uses this ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NX = 10
NU = 4
NX_EXT = 13

# state/input indices
PX, PY, PZ, VX, VY, VZ, PHI, THETA, PSI, ACC = range(10)
U_PHI, U_THETA, U_PSI, U_ACC = range(4)
M_PHI, M_THETA, M_PSI = 10, 11, 12  # command memory slots of the extended state

DEG = np.pi / 180.0


@dataclass(frozen=True)
class ModelParams:
    """Time constants/gains of the attitude and thrust loops plus gravity."""

    tau_phi: float = 0.18
    tau_theta: float = 0.18
    tau_psi: float = 0.56
    tau_a: float = 0.050
    k_phi: float = 1.0
    k_theta: float = 1.0
    k_psi: float = 1.0
    k_a: float = 1.0
    g: float = 9.81

    def __post_init__(self):
        for name in ("tau_phi", "tau_theta", "tau_psi", "tau_a"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0")
        for name in ("k_phi", "k_theta", "k_psi", "k_a"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0")

    @property
    def taus(self):
        return np.array([self.tau_phi, self.tau_theta, self.tau_psi, self.tau_a])

    @property
    def gains(self):
        return np.array([self.k_phi, self.k_theta, self.k_psi, self.k_a])


def hover_state(p=(0.0, 0.0, 0.0), psi=0.0, params: ModelParams | None = None):
    params = params or ModelParams()
    x = np.zeros(NX)
    x[PX:PZ + 1] = p
    x[PSI] = psi
    x[ACC] = params.g
    return x


def hover_input(psi=0.0, params: ModelParams | None = None):
    params = params or ModelParams()
    u = np.zeros(NU)
    u[U_PSI] = psi / params.k_psi
    u[U_ACC] = params.g / params.k_a
    return u


def eval_dynamics(x, u, params: ModelParams):
    """Continuous-time state derivative of the 10-state model."""
    sph, cph = np.sin(x[PHI]), np.cos(x[PHI])
    sth, cth = np.sin(x[THETA]), np.cos(x[THETA])
    sps, cps = np.sin(x[PSI]), np.cos(x[PSI])
    a = x[ACC]

    dx = np.empty(NX)
    dx[PX:PZ + 1] = x[VX:VZ + 1]
    dx[VX] = (sph * sps + cph * sth * cps) * a
    dx[VY] = (-sph * cps + cph * sth * sps) * a
    dx[VZ] = cph * cth * a - params.g
    taus, ks = params.taus, params.gains
    dx[PHI:ACC + 1] = (ks * u - x[PHI:ACC + 1]) / taus
    return dx


def linearize(x, u, params: ModelParams):
    """Analytic Jacobians (A, B) of the continuous dynamics at (x, u)."""
    sph, cph = np.sin(x[PHI]), np.cos(x[PHI])
    sth, cth = np.sin(x[THETA]), np.cos(x[THETA])
    sps, cps = np.sin(x[PSI]), np.cos(x[PSI])
    a = x[ACC]

    r1 = sph * sps + cph * sth * cps
    r2 = -sph * cps + cph * sth * sps
    r3 = cph * cth

    A = np.zeros((NX, NX))
    A[PX, VX] = A[PY, VY] = A[PZ, VZ] = 1.0

    A[VX, PHI] = (cph * sps - sph * sth * cps) * a
    A[VX, THETA] = (cph * cth * cps) * a
    A[VX, PSI] = -r2 * a
    A[VX, ACC] = r1

    A[VY, PHI] = (-cph * cps - sph * sth * sps) * a
    A[VY, THETA] = (cph * cth * sps) * a
    A[VY, PSI] = r1 * a
    A[VY, ACC] = r2

    A[VZ, PHI] = -sph * cth * a
    A[VZ, THETA] = -cph * sth * a
    A[VZ, ACC] = r3

    taus, ks = params.taus, params.gains
    for i in range(4):
        A[PHI + i, PHI + i] = -1.0 / taus[i]

    B = np.zeros((NX, NU))
    for i in range(4):
        B[PHI + i, i] = ks[i] / taus[i]
    return A, B


def eval_extended_dynamics(xe, ue, params: ModelParams):
    """Derivative of the 13-state model whose inputs are attitude-command rates."""
    u = np.array([xe[M_PHI], xe[M_THETA], xe[M_PSI], ue[U_ACC]])
    dxe = np.empty(NX_EXT)
    dxe[:NX] = eval_dynamics(xe[:NX], u, params)
    dxe[M_PHI:M_PSI + 1] = ue[:3]
    return dxe


def rk4_step(deriv, x, u, h, substeps=1):
    """Classical RK4 with the input held constant over each substep."""
    if h <= 0.0 or substeps < 1:
        raise ValueError("need h > 0 and substeps >= 1")
    dt = h / substeps
    x = np.asarray(x, dtype=float).copy()
    for _ in range(substeps):
        k1 = deriv(x, u)
        k2 = deriv(x + 0.5 * dt * k1, u)
        k3 = deriv(x + 0.5 * dt * k2, u)
        k4 = deriv(x + dt * k3, u)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("non-finite state after RK4 stage")
    return x


def quad_rk4(x, u, h, params: ModelParams, substeps=1):
    return rk4_step(lambda xx, uu: eval_dynamics(xx, uu, params), x, u, h, substeps)


def quad_rk4_jac(x, u, h, params: ModelParams):
    """One RK4 step of the 10-state model plus discrete Jacobians.

    Chain rule through the four stages; exact derivative of the discrete map.
    """
    f = lambda xx: eval_dynamics(xx, u, params)

    k1 = f(x)
    x2 = x + 0.5 * h * k1
    k2 = f(x2)
    x3 = x + 0.5 * h * k2
    k3 = f(x3)
    x4 = x + h * k3
    k4 = f(x4)
    xn = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    A1, B1 = linearize(x, u, params)
    A2, B2 = linearize(x2, u, params)
    A3, B3 = linearize(x3, u, params)
    A4, B4 = linearize(x4, u, params)

    I = np.eye(NX)
    K1x, K1u = A1, B1
    K2x = A2 @ (I + 0.5 * h * K1x)
    K2u = A2 @ (0.5 * h * K1u) + B2
    K3x = A3 @ (I + 0.5 * h * K2x)
    K3u = A3 @ (0.5 * h * K2u) + B3
    K4x = A4 @ (I + h * K3x)
    K4u = A4 @ (h * K3u) + B4

    Ad = I + (h / 6.0) * (K1x + 2.0 * K2x + 2.0 * K3x + K4x)
    Bd = (h / 6.0) * (K1u + 2.0 * K2u + 2.0 * K3u + K4u)
    return xn, Ad, Bd


def ext_step(xe, ue, h, params: ModelParams):
    """One substep of the extended model.

    The attitude commands stored in the memory slots are held constant over the
    substep (the same zero-order hold the 10-state discretization uses), then
    advanced exactly with their constant rates.  This makes the extended
    discrete map decompose into 10-state RK4 steps, so a plan subsampled at the
    substep rate is feasible for the tracking model bit-for-bit.
    """
    u = np.array([xe[M_PHI], xe[M_THETA], xe[M_PSI], ue[U_ACC]])
    out = np.empty(NX_EXT)
    out[:NX] = quad_rk4(xe[:NX], u, h, params)
    out[M_PHI:M_PSI + 1] = xe[M_PHI:M_PSI + 1] + h * ue[:3]
    return out


def ext_step_jac(xe, ue, h, params: ModelParams):
    """ext_step plus Jacobians w.r.t. the extended state and input."""
    u = np.array([xe[M_PHI], xe[M_THETA], xe[M_PSI], ue[U_ACC]])
    xn, Ad, Bd = quad_rk4_jac(xe[:NX], u, h, params)

    A = np.zeros((NX_EXT, NX_EXT))
    B = np.zeros((NX_EXT, NU))
    A[:NX, :NX] = Ad
    A[:NX, M_PHI:M_PSI + 1] = Bd[:, :3]
    A[M_PHI:M_PSI + 1, M_PHI:M_PSI + 1] = np.eye(3)
    B[:NX, U_ACC] = Bd[:, 3]
    B[M_PHI:M_PSI + 1, :3] = h * np.eye(3)

    out = np.empty(NX_EXT)
    out[:NX] = xn
    out[M_PHI:M_PSI + 1] = xe[M_PHI:M_PSI + 1] + h * ue[:3]
    return out, A, B


@dataclass
class PolytopeZ:
    """Polytopic state-input constraint set {L [x;u] <= l} with unit rows."""

    L: np.ndarray  # (n_s, nx + nu)
    l: np.ndarray  # (n_s,)
    labels: list[str] = field(default_factory=list)

    @property
    def n_rows(self):
        return self.L.shape[0]

    def eval(self, x, u):
        """Row values g_j = L_j [x;u] - l_j; <= 0 iff inside."""
        z = np.concatenate([x, u])
        if z.shape[0] != self.L.shape[1]:
            raise ValueError("dimension mismatch between (x,u) and constraint rows")
        return self.L @ z - self.l

    def interval_widths(self):
        """Width of the feasible interval per constrained coordinate.

        Pairs up +e_i / -e_i rows; raises if a coordinate is only bounded on
        one side (the set would be unbounded in it).
        """
        ub = {}
        lb = {}
        for j in range(self.n_rows):
            row = self.L[j]
            (idx,) = np.nonzero(row)
            if len(idx) != 1:
                continue
            i = idx[0]
            if row[i] > 0:
                ub[i] = self.l[j] / row[i]
            else:
                lb[i] = -self.l[j] / (-row[i])
        widths = {}
        for i in ub:
            if i in lb:
                widths[i] = ub[i] - lb[i]
        return widths


def default_state_input_bounds():
    """Published flight-envelope bounds used throughout the experiments."""
    ang = 30.0 * DEG
    return {
        "p_xy": (-15.0, 15.0),
        "p_z": (0.0, 4.0),
        "v": (-2.0, 2.0),
        "att": (-ang, ang),
        "att_cmd": (-ang, ang),
        "acc": (5.0, 15.0),
        "acc_cmd": (5.0, 15.0),
        "att_rate_cmd": (-60.0 * DEG, 60.0 * DEG),
    }


def build_constraints(bounds=None) -> PolytopeZ:
    """Box rows over (x, u) for the 10-state model, one (upper, lower) pair each."""
    b = default_state_input_bounds()
    if bounds:
        b.update(bounds)
    rows, offs, labels = [], [], []

    def box(col, lo, hi, name, ncols=NX + NU):
        e = np.zeros(ncols)
        e[col] = 1.0
        rows.append(e.copy())
        offs.append(hi)
        labels.append(f"{name}+")
        rows.append(-e)
        offs.append(-lo)
        labels.append(f"{name}-")

    box(PX, *b["p_xy"], "px")
    box(PY, *b["p_xy"], "py")
    box(PZ, *b["p_z"], "pz")
    for i, nm in zip((VX, VY, VZ), ("vx", "vy", "vz")):
        box(i, *b["v"], nm)
    for i, nm in zip((PHI, THETA, PSI), ("phi", "theta", "psi")):
        box(i, *b["att"], nm)
    box(ACC, *b["acc"], "a")
    for i, nm in zip((U_PHI, U_THETA, U_PSI), ("phi_c", "theta_c", "psi_c")):
        box(NX + i, *b["att_cmd"], nm)
    box(NX + U_ACC, *b["acc_cmd"], "a_c")

    return PolytopeZ(L=np.array(rows), l=np.array(offs), labels=labels)


def extend_constraints(Z: PolytopeZ, tighten=None, bounds=None) -> PolytopeZ:
    """Map 10-state rows onto the extended model and append command-rate rows.

    Attitude-command input columns become memory-state columns; `tighten`
    (same length as Z rows) is subtracted from the offsets of the mapped rows.
    Rate rows are never tightened; they exist only in the extended model.
    """
    b = default_state_input_bounds()
    if bounds:
        b.update(bounds)
    n = Z.n_rows
    tight = np.zeros(n) if tighten is None else np.asarray(tighten, dtype=float)

    L = np.zeros((n, NX_EXT + NU))
    L[:, :NX] = Z.L[:, :NX]
    L[:, M_PHI:M_PSI + 1] = Z.L[:, NX:NX + 3]  # attitude commands live in the state now
    L[:, NX_EXT + U_ACC] = Z.L[:, NX + U_ACC]
    l = Z.l - tight
    labels = list(Z.labels)

    rows, offs = [L], [l]
    rate_lo, rate_hi = b["att_rate_cmd"]
    for i, nm in zip(range(3), ("dphi_c", "dtheta_c", "dpsi_c")):
        e = np.zeros(NX_EXT + NU)
        e[NX_EXT + i] = 1.0
        rows.append(np.vstack([e, -e]))
        offs.append(np.array([rate_hi, -rate_lo]))
        labels += [f"{nm}+", f"{nm}-"]

    return PolytopeZ(L=np.vstack(rows), l=np.concatenate(offs), labels=labels)


def position_selector():
    """3x10 matrix picking the position block out of the state."""
    C = np.zeros((3, NX))
    C[0, PX] = C[1, PY] = C[2, PZ] = 1.0
    return C


def base_to_ext(x, att_cmd=None):
    xe = np.zeros(NX_EXT)
    xe[:NX] = x
    if att_cmd is not None:
        xe[M_PHI:M_PSI + 1] = att_cmd
    return xe
