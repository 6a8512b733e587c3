"""Offline terminal-ingredient design for the tracking controller.

A semidefinite program over gridded linearization points returns the terminal
cost matrix P and feedback gain K; from those come the per-row constraint
tightening constants, the obstacle tightening constant, and the terminal-set
scaling alpha.  The solution is re-verified on a much denser check grid before
it is allowed anywhere near the online layers.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .dynamics import NU, NX, ModelParams, PolytopeZ

ORDERING_TAG = "px py pz vx vy vz phi theta psi a | phi_c theta_c psi_c a_c"

DEFAULT_Q = np.diag([2e3, 2e3, 2e3, 20.0, 20.0, 20.0, 100.0, 100.0, 100.0, 100.0])
DEFAULT_R = np.diag([2e3, 2e3, 2e3, 100.0])


class DesignError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Linearization grids over the states that enter the Jacobian.

    Attitudes enter nonlinearly and get `att_points` per axis; thrust enters
    affinely, so its interval endpoints suffice.  The check grid must be
    strictly denser than the solve grid.
    """

    att_points: int = 5
    acc_endpoints: int = 2
    check_att_points: int = 21

    def __post_init__(self):
        if self.att_points < 1 or self.check_att_points <= self.att_points:
            raise ValueError("check grid must be denser than the solve grid")
        if self.acc_endpoints != 2:
            raise ValueError("thrust enters affinely; use its two endpoints")


def _axis_values(Z: PolytopeZ):
    widths_lo_hi = {}
    for j in range(Z.n_rows):
        (cols,) = np.nonzero(Z.L[j])
        c = cols[0]
        lo, hi = widths_lo_hi.get(c, (-np.inf, np.inf))
        if Z.L[j, c] > 0:
            hi = min(hi, Z.l[j] / Z.L[j, c])
        else:
            lo = max(lo, -Z.l[j] / (-Z.L[j, c]))
        widths_lo_hi[c] = (lo, hi)
    return widths_lo_hi


def build_grid(Z: PolytopeZ, spec: GridSpec, check=False):
    """Linearization points z = (x, u): Cartesian attitude grid x thrust endpoints."""
    bounds = _axis_values(Z)
    n_att = spec.check_att_points if check else spec.att_points
    att_axes = []
    for c in (dyn.PHI, dyn.THETA, dyn.PSI):
        lo, hi = bounds[c]
        att_axes.append(np.linspace(lo, hi, n_att) if n_att > 1 else np.array([0.5 * (lo + hi)]))
    lo_a, hi_a = bounds[dyn.ACC]
    a_axis = np.array([lo_a, hi_a])

    pts = []
    for ph in att_axes[0]:
        for th in att_axes[1]:
            for ps in att_axes[2]:
                for a in a_axis:
                    z = np.zeros(NX + NU)
                    z[dyn.PHI], z[dyn.THETA], z[dyn.PSI], z[dyn.ACC] = ph, th, ps, a
                    pts.append(z)
    if not pts:
        raise DesignError("empty linearization grid")
    return np.array(pts)


def decrease_block(A, B, Xv, Yv, Qh, Rh):
    """The tracking-decrease LMI block at one linearization point (numpy)."""
    G = A @ Xv + B @ Yv
    top = [G + G.T, Xv @ Qh, Yv.T @ Rh]
    mid = [Qh @ Xv, -np.eye(NX), np.zeros((NX, NU))]
    bot = [Rh @ Yv, np.zeros((NU, NX)), -np.eye(NU)]
    return np.block([top, mid, bot])


def constraint_block(Lrow, Xv, Yv, s_sq):
    """The per-row constraint LMI block (numpy); PSD iff s_sq bounds the row norm."""
    m = (Lrow[:NX] @ Xv + Lrow[NX:] @ Yv).reshape(1, NX)
    return np.block([[np.array([[s_sq]]), m], [m.T, Xv]])


def cc_weights(Z: PolytopeZ, scale=1.0, rate_bounds=None):
    """Objective weights normalized by the squared width of each row's interval."""
    widths = Z.interval_widths()
    cc = np.zeros(Z.n_rows)
    for j in range(Z.n_rows):
        (cols,) = np.nonzero(Z.L[j])
        cc[j] = scale / widths[cols[0]] ** 2
    return cc


@dataclass
class SdpProblem:
    problem: "object"
    X: "object"
    Y: "object"
    s: "object"
    points: np.ndarray
    cc: np.ndarray
    margin: float


def assemble_lmis(points, Q, R, Z: PolytopeZ, params: ModelParams,
                  margin=1.0, cc_scale=1.0) -> SdpProblem:
    """Build the design SDP: decrease blocks per point, one row block per constraint.

    `margin` inflates Q and R by margin * I during the solve only, leaving that
    much eigenvalue slack for the dense check grid between solve points.
    """
    import cvxpy as cp

    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    if np.any(np.linalg.eigvalsh(Q) <= 0) or np.any(np.linalg.eigvalsh(R) <= 0):
        raise DesignError("Q and R must be positive definite")
    Qh = _sqrtm_psd(Q + margin * np.eye(NX))
    Rh = _sqrtm_psd(R + margin * np.eye(NU))

    X = cp.Variable((NX, NX), symmetric=True)
    Y = cp.Variable((NU, NX))
    s = cp.Variable(Z.n_rows)
    cons = [X >> 1e-6 * np.eye(NX)]
    for z in points:
        A, B = dyn.linearize(z[:NX], z[NX:], params)
        G = A @ X + B @ Y
        M = cp.bmat([
            [G + G.T, X @ Qh, Y.T @ Rh],
            [Qh @ X, -np.eye(NX), np.zeros((NX, NU))],
            [Rh @ Y, np.zeros((NU, NX)), -np.eye(NU)],
        ])
        cons.append(M << 0)
    for j in range(Z.n_rows):
        Lx, Lu = Z.L[j][:NX], Z.L[j][NX:]
        m = cp.reshape(Lx @ X + Lu @ Y, (1, NX), order="C")
        cons.append(cp.bmat([[cp.reshape(s[j], (1, 1), order="C"), m],
                             [m.T, X]]) >> 0)
    cc = cc_weights(Z, cc_scale)
    prob = cp.Problem(cp.Minimize(-cp.log_det(X) + cc @ s), cons)
    return SdpProblem(problem=prob, X=X, Y=Y, s=s, points=points, cc=cc, margin=margin)


def solve_sdp(sdp: SdpProblem, solver="CLARABEL", eig_tol=1e-8):
    """Solve the design SDP and sanity-check the returned blocks."""
    import cvxpy as cp

    try:
        sdp.problem.solve(solver=getattr(cp, solver))
    except cp.SolverError as e:
        raise DesignError(
            "design SDP failed; consider a state-dependent (parameter-varying) "
            f"X(z), Y(z) formulation or wider grids: {e}"
        ) from e
    if sdp.problem.status not in ("optimal", "optimal_inaccurate"):
        raise DesignError(
            f"design SDP status {sdp.problem.status}; consider a parameter-varying "
            "X(z), Y(z) formulation or load externally designed ingredients"
        )
    Xv = 0.5 * (sdp.X.value + sdp.X.value.T)
    Yv = sdp.Y.value
    sv = sdp.s.value
    if np.linalg.eigvalsh(Xv).min() <= 0:
        raise DesignError("SDP returned X that is not positive definite")
    return Xv, Yv, sv


def compute_PK(Xv, Yv):
    """P = X^-1 (symmetrized), K = Y P."""
    w = np.linalg.eigvalsh(Xv)
    if w.min() <= 0:
        raise DesignError("X is singular or indefinite")
    P = np.linalg.inv(Xv)
    P = 0.5 * (P + P.T)
    K = Yv @ P
    return P, K


def _sqrtm_psd(M):
    w, V = np.linalg.eigh(np.asarray(M, dtype=float))
    if w.min() < -1e-12:
        raise DesignError("matrix not PSD")
    return V @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ V.T


def inv_sqrtm_pd(M):
    w, V = np.linalg.eigh(np.asarray(M, dtype=float))
    if w.min() <= 0:
        raise DesignError("matrix not positive definite")
    return V @ np.diag(w ** -0.5) @ V.T


def compute_tighteners(P, K, Z: PolytopeZ, C):
    """Row tightening constants and the obstacle tightening constant.

    c_s[j] is the largest value L_j [dx; K dx] can take over the unit
    P-ellipsoid, c_o the same for any unit-normal row on the position block.
    """
    Pih = inv_sqrtm_pd(P)
    IK = np.hstack([np.eye(NX), K.T])
    c_s = np.linalg.norm(Pih @ (IK @ Z.L.T), axis=0)
    c_o = float(np.linalg.norm(Pih @ np.asarray(C).T, 2))
    return c_s, c_o


def support_function_oracle(P, K, Lrow):
    """Independent evaluation of one tightening constant via eigendecomposition."""
    w, V = np.linalg.eigh(P)
    vec = Lrow[:NX] + K.T @ Lrow[NX:]
    return float(np.linalg.norm(np.diag(w ** -0.5) @ (V.T @ vec)))


def compute_alpha(d_min, c_o):
    """Terminal-set scaling from the required obstacle standoff of the reference."""
    if d_min <= 0:
        raise ValueError("obstacle margin d must be > 0")
    if c_o <= 0:
        raise ValueError("c_o must be > 0")
    return float(d_min) / float(c_o)


@dataclass
class TerminalIngredients:
    P: np.ndarray
    K: np.ndarray
    alpha: float
    c_s: np.ndarray
    c_o: float
    Q: np.ndarray
    R: np.ndarray
    fingerprint: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        np.linalg.cholesky(self.P)  # P must be PD
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


def check_tightened_nonempty(ingredients: TerminalIngredients, Z: PolytopeZ):
    """Every coordinate keeps a nonempty interval after tightening by c_s * alpha."""
    widths = Z.interval_widths()
    shrink = {}
    for j in range(Z.n_rows):
        (cols,) = np.nonzero(Z.L[j])
        c = cols[0]
        shrink[c] = shrink.get(c, 0.0) + ingredients.c_s[j] * ingredients.alpha
    bad = {c: (shrink[c], widths[c]) for c in shrink if shrink[c] >= widths[c]}
    if bad:
        raise DesignError(f"tightening empties the constraint set: {bad}")


@dataclass
class VerifyReport:
    worst_eig: float
    worst_point: np.ndarray
    n_points: int
    tightener_err: float
    ok: bool

    def summary(self):
        return (f"check grid: {self.n_points} points, worst LMI eigenvalue "
                f"{self.worst_eig:.3e}, tightener formula error {self.tightener_err:.3e}, "
                f"{'PASS' if self.ok else 'FAIL'}")


def verify_lmis(ingredients: TerminalIngredients, Z: PolytopeZ, params: ModelParams,
                grid: GridSpec, eig_tol=1e-6) -> VerifyReport:
    """Re-check the decrease condition in P/K form on the dense grid.

    The solve enforces the condition at a handful of points; this walks the
    check grid and reports the worst eigenvalue of
    (A+BK)' P + P (A+BK) + Q + K' R K, which must stay below `eig_tol`.
    """
    P, K = ingredients.P, ingredients.K
    Q, R = ingredients.Q, ingredients.R
    QKRK = Q + K.T @ R @ K
    pts = build_grid(Z, grid, check=True)
    worst = -np.inf
    worst_pt = pts[0]
    for z in pts:
        A, B = dyn.linearize(z[:NX], z[NX:], params)
        Acl = A + B @ K
        W = Acl.T @ P + P @ Acl + QKRK
        e = float(np.linalg.eigvalsh(W)[-1])
        if e > worst:
            worst, worst_pt = e, z
    c_s, c_o = compute_tighteners(P, K, Z, dyn.position_selector())
    terr = float(np.abs(c_s - ingredients.c_s).max() / np.abs(ingredients.c_s).max())
    terr = max(terr, abs(c_o - ingredients.c_o) / ingredients.c_o)
    ok = worst <= eig_tol and terr <= 1e-10
    try:
        check_tightened_nonempty(ingredients, Z)
    except DesignError:
        ok = False
    return VerifyReport(worst_eig=worst, worst_point=worst_pt, n_points=len(pts),
                        tightener_err=terr, ok=ok)


def design_fingerprint(params: ModelParams, Z: PolytopeZ, Q, R):
    """Hash of everything the ingredients were designed against."""
    buf = io.StringIO()
    buf.write(ORDERING_TAG + "\n")
    for v in (params.tau_phi, params.tau_theta, params.tau_psi, params.tau_a,
              params.k_phi, params.k_theta, params.k_psi, params.k_a, params.g):
        buf.write(f"{v:.17g} ")
    for arr in (Z.L, Z.l, dyn.position_selector(), np.asarray(Q), np.asarray(R)):
        buf.write(" ".join(f"{v:.17g}" for v in np.asarray(arr).ravel()) + "\n")
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()


def design_terminal(params: ModelParams, Z: PolytopeZ, Q=None, R=None,
                    grid: GridSpec | None = None, d_min=0.1, margin=1.0,
                    cc_scale=1.0, solver="CLARABEL") -> tuple[TerminalIngredients, VerifyReport]:
    """Full offline pipeline: grid, SDP, P/K, tighteners, alpha, dense check.

    The SDP is solved with Q, R scaled to unit magnitude for conditioning;
    scaling (Q, R) by 1/s leaves K unchanged and multiplies the returned cost
    matrix by 1/s, so P is recovered exactly by rescaling.
    """
    Q = DEFAULT_Q if Q is None else np.asarray(Q, dtype=float)
    R = DEFAULT_R if R is None else np.asarray(R, dtype=float)
    grid = grid or GridSpec()
    pts = build_grid(Z, grid)
    s = float(max(np.abs(Q).max(), np.abs(R).max(), 1.0))
    sdp = assemble_lmis(pts, Q / s, R / s, Z, params, margin=margin / s, cc_scale=cc_scale)
    Xv, Yv, _ = solve_sdp(sdp, solver=solver)
    P, K = compute_PK(Xv, Yv)
    P = s * P
    c_s, c_o = compute_tighteners(P, K, Z, dyn.position_selector())
    alpha = compute_alpha(d_min, c_o)
    ing = TerminalIngredients(
        P=P, K=K, alpha=alpha, c_s=c_s, c_o=c_o, Q=Q, R=R,
        fingerprint=design_fingerprint(params, Z, Q, R),
        meta={"att_points": grid.att_points, "check_att_points": grid.check_att_points,
              "margin": margin, "cc_scale": cc_scale, "d_min": d_min, "solver": solver},
    )
    check_tightened_nonempty(ing, Z)
    report = verify_lmis(ing, Z, params, grid)
    return ing, report


# ---------------------------------------------------------------------------
# persistence

def _fmt_mat(name, M, out):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    out.write(f"{name} {M.shape[0]} {M.shape[1]}\n")
    for row in M:
        out.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def save_ingredients(path, ing: TerminalIngredients):
    with open(path, "w") as f:
        f.write("hiermpc-terminal-ingredients v1\n")
        f.write(f"fingerprint {ing.fingerprint}\n")
        f.write(f"ordering {ORDERING_TAG}\n")
        f.write(f"alpha {ing.alpha:.17g}\n")
        f.write(f"c_o {ing.c_o:.17g}\n")
        _fmt_mat("P", ing.P, f)
        _fmt_mat("K", ing.K, f)
        _fmt_mat("c_s", ing.c_s.reshape(1, -1), f)
        _fmt_mat("Q", ing.Q, f)
        _fmt_mat("R", ing.R, f)
        meta = " ".join(f"{k}={ing.meta[k]}" for k in sorted(ing.meta))
        f.write(f"meta {meta}\n")


def load_ingredients(path, params: ModelParams, Z: PolytopeZ, Q=None, R=None):
    """Load and refuse anything designed against a different model or bounds."""
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0] != "hiermpc-terminal-ingredients v1":
        raise ValueError(f"{path}: not a terminal ingredient file")
    idx = {"i": 1}

    def take():
        ln = lines[idx["i"]]
        idx["i"] += 1
        return ln

    fp = take().split()[1]
    ordering = take().split(" ", 1)[1]
    if ordering != ORDERING_TAG:
        raise ValueError("ingredient file uses a different state/input ordering")
    alpha = float(take().split()[1])
    c_o = float(take().split()[1])

    def take_mat(expect):
        head = take().split()
        if head[0] != expect:
            raise ValueError(f"expected matrix {expect}, found {head[0]}")
        r, c = int(head[1]), int(head[2])
        return np.array([[float(v) for v in take().split()] for _ in range(r)]).reshape(r, c)

    P = take_mat("P")
    K = take_mat("K")
    c_s = take_mat("c_s").ravel()
    Qf = take_mat("Q")
    Rf = take_mat("R")
    meta = {}
    ln = take()
    if ln.startswith("meta"):
        for kv in ln.split()[1:]:
            k, v = kv.split("=", 1)
            meta[k] = v

    if Q is not None and not np.allclose(Qf, Q):
        raise ValueError("ingredient file was designed for different Q")
    if R is not None and not np.allclose(Rf, R):
        raise ValueError("ingredient file was designed for different R")
    expect_fp = design_fingerprint(params, Z, Qf, Rf)
    if fp != expect_fp:
        raise ValueError(
            "ingredient fingerprint mismatch: file was designed against a "
            "different model or constraint set"
        )
    return TerminalIngredients(P=P, K=K, alpha=alpha, c_s=c_s, c_o=c_o,
                               Q=Qf, R=Rf, fingerprint=fp, meta=meta)


# ---------------------------------------------------------------------------
# sampling-based invariance verification

def sample_invariance(ing: TerminalIngredients, Z: PolytopeZ, params: ModelParams,
                      n=1000, h=0.05, seed=0, grid: GridSpec | None = None):
    """Monte-Carlo check of the terminal law inside the terminal set.

    Draws reference points from the tightened set (attitudes snapped to check
    grid values that fit), pairs them with a state inside the P-ellipsoid of
    radius alpha, and verifies (a) the P-norm error does not grow over one
    integration step under the terminal feedback, with the reference advanced
    under its own input, and (b) the state/input pair stays inside the raw
    constraint set.
    """
    rng = np.random.default_rng(seed)
    grid = grid or GridSpec()
    P, K, alpha = ing.P, ing.K, ing.alpha
    Pih = inv_sqrtm_pd(P)
    Ph = _sqrtm_psd(P)
    bounds = _axis_values(Z)
    # tightened per-coordinate bounds
    tight = dict(bounds)
    for j in range(Z.n_rows):
        (cols,) = np.nonzero(Z.L[j])
        c = cols[0]
        lo, hi = tight[c]
        m = ing.c_s[j] * alpha
        if Z.L[j, c] > 0:
            hi = min(hi, bounds[c][1] - m)
        else:
            lo = max(lo, bounds[c][0] + m)
        tight[c] = (lo, hi)

    att_vals = {}
    for c in (dyn.PHI, dyn.THETA, dyn.PSI):
        vals = np.linspace(*bounds[c], grid.check_att_points)
        lo, hi = tight[c]
        vals = vals[(vals >= lo) & (vals <= hi)]
        att_vals[c] = vals if len(vals) else np.array([0.5 * (lo + hi)])

    worst_decrease = -np.inf
    worst_constraint = -np.inf
    for _ in range(n):
        xr = np.zeros(NX)
        for c in (dyn.PX, dyn.PY, dyn.PZ):
            lo, hi = tight[c]
            xr[c] = rng.uniform(max(lo, -2.0), min(hi, 2.0))
        for c in (dyn.VX, dyn.VY, dyn.VZ, dyn.ACC):
            xr[c] = rng.uniform(*tight[c])
        for c in (dyn.PHI, dyn.THETA, dyn.PSI):
            xr[c] = rng.choice(att_vals[c])
        ur = np.array([rng.uniform(*tight[NX + i]) for i in range(NU)])

        g = rng.normal(size=NX)
        d = Pih @ (g / np.linalg.norm(g)) * alpha * rng.uniform(0.0, 1.0)
        x = xr + d
        u = ur + K @ d

        worst_constraint = max(worst_constraint, float(Z.eval(x, u).max()))
        xp = dyn.quad_rk4(x, u, h, params)
        xrp = dyn.quad_rk4(xr, ur, h, params)
        before = np.linalg.norm(Ph @ (x - xr))
        after = np.linalg.norm(Ph @ (xp - xrp))
        worst_decrease = max(worst_decrease, float(after - before))
    return {"worst_decrease": worst_decrease, "worst_constraint": worst_constraint,
            "n": n, "h": h}
