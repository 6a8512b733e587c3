import numpy as np
import pytest

from hiermpc import dynamics as dyn
from hiermpc import terminal as term
from hiermpc.terminal import (
    DesignError, GridSpec, TerminalIngredients, assemble_lmis, build_grid,
    compute_PK, compute_alpha, compute_tighteners, decrease_block,
    constraint_block, design_fingerprint, load_ingredients, save_ingredients,
    solve_sdp, support_function_oracle, verify_lmis,
)

PARAMS = dyn.ModelParams()
Z = dyn.build_constraints()


def test_build_grid_default_count():
    pts = build_grid(Z, GridSpec())
    assert pts.shape[0] == 5 ** 3 * 2 == 250
    # positions and velocities stay at zero; they do not enter the Jacobian
    assert np.all(pts[:, :6] == 0.0)


def test_build_grid_check_count():
    pts = build_grid(Z, GridSpec(), check=True)
    assert pts.shape[0] == 21 ** 3 * 2 == 18522


def test_build_grid_single_point_is_hover_attitude():
    spec = GridSpec(att_points=1, check_att_points=2)
    pts = build_grid(Z, spec)
    assert pts.shape[0] == 2
    assert np.allclose(pts[:, 6:9], 0.0)


def test_gridspec_requires_denser_check():
    with pytest.raises(ValueError):
        GridSpec(att_points=5, check_att_points=5)


def test_decrease_block_hand_assembly():
    # X = I, Y = 0, Q = R = I at the hover point: the top-left block is A + A'
    x = dyn.hover_state()
    A, B = dyn.linearize(x, dyn.hover_input(), PARAMS)
    M = decrease_block(A, B, np.eye(10), np.zeros((4, 10)), np.eye(10), np.eye(4))
    assert M.shape == (24, 24)
    assert np.allclose(M[:10, :10], A + A.T)
    assert np.allclose(M[:10, 10:20], np.eye(10))
    assert np.allclose(M[10:20, 10:20], -np.eye(10))
    assert np.allclose(M, M.T)


def test_constraint_block_schur():
    # PSD block certifies s >= || (Lx X + Lu Y) X^-1/2 ||^2
    rng = np.random.default_rng(2)
    Xv = np.eye(10) * 2.0
    Yv = rng.normal(size=(4, 10)) * 0.1
    Lrow = np.zeros(14)
    Lrow[3] = 1.0
    m = Lrow[:10] @ Xv + Lrow[10:] @ Yv
    s_needed = float(m @ np.linalg.inv(Xv) @ m)
    good = constraint_block(Lrow, Xv, Yv, s_needed + 1e-9)
    bad = constraint_block(Lrow, Xv, Yv, s_needed - 1e-6)
    assert np.linalg.eigvalsh(good).min() >= -1e-12
    assert np.linalg.eigvalsh(bad).min() < 0


@pytest.fixture(scope="module")
def small_design():
    """Quick design on a coarse grid with well-scaled weights."""
    grid = GridSpec(att_points=2, check_att_points=5)
    pts = build_grid(Z, grid)
    sdp = assemble_lmis(pts, np.eye(10), np.eye(4), Z, PARAMS, margin=0.01, cc_scale=0.1)
    Xv, Yv, sv = solve_sdp(sdp)
    return grid, pts, sdp, Xv, Yv, sv


def test_sdp_solution_blocks(small_design):
    grid, pts, sdp, Xv, Yv, sv = small_design
    assert np.linalg.eigvalsh(Xv).min() > 0
    np.linalg.cholesky(Xv)
    Qh = term._sqrtm_psd(np.eye(10) + 0.01 * np.eye(10))
    Rh = term._sqrtm_psd(np.eye(4) + 0.01 * np.eye(4))
    worst = -np.inf
    for z in pts:
        A, B = dyn.linearize(z[:10], z[10:], PARAMS)
        M = decrease_block(A, B, Xv, Yv, Qh, Rh)
        worst = max(worst, np.linalg.eigvalsh(M).max())
    assert worst <= 1e-8
    for j in range(Z.n_rows):
        Mj = constraint_block(Z.L[j], Xv, Yv, sv[j])
        assert np.linalg.eigvalsh(Mj).min() >= -1e-8


def test_compute_pk_and_stability(small_design):
    grid, pts, sdp, Xv, Yv, sv = small_design
    P, K = compute_PK(Xv, Yv)
    assert np.abs(P @ Xv - np.eye(10)).max() <= 1e-10
    assert np.allclose(P, P.T)
    for z in pts:
        A, B = dyn.linearize(z[:10], z[10:], PARAMS)
        assert np.linalg.eigvals(A + B @ K).real.max() < 0


def test_compute_pk_identity():
    rng = np.random.default_rng(0)
    Yv = rng.normal(size=(4, 10))
    P, K = compute_PK(np.eye(10), Yv)
    assert np.allclose(P, np.eye(10))
    assert np.allclose(K, Yv)


def test_tighteners_trivial_cases():
    row = np.zeros(14)
    row[4] = 1.0
    Zrow = dyn.PolytopeZ(L=row[None, :], l=np.array([1.0]), labels=["vy+"])
    c_s, c_o = compute_tighteners(np.eye(10), np.zeros((4, 10)), Zrow,
                                  dyn.position_selector())
    assert c_s[0] == pytest.approx(1.0, abs=1e-14)
    _, c_o4 = compute_tighteners(4.0 * np.eye(10), np.zeros((4, 10)), Zrow,
                                 dyn.position_selector())
    assert c_o4 == pytest.approx(0.5, abs=1e-14)


def test_tighteners_match_support_oracle(default_ingredients):
    ing = default_ingredients
    for j in range(Z.n_rows):
        oracle = support_function_oracle(ing.P, ing.K, Z.L[j])
        assert abs(ing.c_s[j] - oracle) <= 1e-10 * max(1.0, oracle)
    w, V = np.linalg.eigh(ing.P)
    C = dyn.position_selector()
    oracle_co = np.sqrt(np.linalg.eigvalsh(C @ V @ np.diag(1 / w) @ V.T @ C.T).max())
    assert abs(ing.c_o - oracle_co) <= 1e-10


def test_compute_alpha():
    assert compute_alpha(0.1, 0.05) == pytest.approx(2.0)
    assert compute_alpha(0.1, 0.05) * 0.05 == pytest.approx(0.1)
    with pytest.raises(ValueError):
        compute_alpha(0.0, 0.05)


def test_verify_shipped_ingredients(default_ingredients):
    report = verify_lmis(default_ingredients, Z, PARAMS, GridSpec())
    assert report.ok
    assert report.worst_eig <= 1e-6
    assert report.n_points == 18522


def test_verify_rejects_corrupted_P(default_ingredients):
    ing = default_ingredients
    bad = TerminalIngredients(P=0.5 * ing.P, K=ing.K, alpha=ing.alpha,
                              c_s=ing.c_s, c_o=ing.c_o, Q=ing.Q, R=ing.R,
                              fingerprint=ing.fingerprint)
    report = verify_lmis(bad, Z, PARAMS, GridSpec(att_points=5, check_att_points=7))
    assert not report.ok


def test_save_load_roundtrip(default_ingredients, tmp_path):
    p1 = tmp_path / "a.txt"
    p2 = tmp_path / "b.txt"
    save_ingredients(p1, default_ingredients)
    ing2 = load_ingredients(p1, PARAMS, Z)
    save_ingredients(p2, ing2)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(ing2.P, default_ingredients.P)


def test_load_rejects_altered_bounds(default_ingredients, tmp_path):
    p = tmp_path / "ing.txt"
    save_ingredients(p, default_ingredients)
    Z_alt = dyn.build_constraints({"v": (-3.0, 3.0)})
    with pytest.raises(ValueError, match="fingerprint"):
        load_ingredients(p, PARAMS, Z_alt)


def test_fingerprint_sensitivity():
    fp1 = design_fingerprint(PARAMS, Z, term.DEFAULT_Q, term.DEFAULT_R)
    fp2 = design_fingerprint(dyn.ModelParams(tau_a=0.06), Z, term.DEFAULT_Q, term.DEFAULT_R)
    assert fp1 != fp2


def test_invariance_sampling(default_ingredients):
    inv = term.sample_invariance(default_ingredients, Z, PARAMS, n=300, seed=3)
    assert inv["worst_decrease"] <= 1e-6 * inv["h"]
    assert inv["worst_constraint"] <= 1e-9


def test_tightened_set_nonempty(default_ingredients):
    term.check_tightened_nonempty(default_ingredients, Z)
    # an absurd alpha must fail loudly
    ing = default_ingredients
    bad = TerminalIngredients(P=ing.P, K=ing.K, alpha=1e3 * ing.alpha, c_s=ing.c_s,
                              c_o=ing.c_o, Q=ing.Q, R=ing.R, fingerprint=ing.fingerprint)
    with pytest.raises(DesignError):
        term.check_tightened_nonempty(bad, Z)
