"""Convex free-space corridors grown around plan segments on an occupancy grid.

For every planner interval a convex region is built from the line segment
between consecutive planned positions: an ellipse aligned with the segment
grows until it touches occupied cells, each touch contributes a tangent
half-space, and the segment's bounding box closes the region.  All offsets are
then pulled in by half the robot radius (the other half already inflated the
grid), so the regions constrain the robot center directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import HalfspaceIntersection

from .gridmap import GridMap, crop_for_segment

log = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-9


class InfeasibleSegmentError(RuntimeError):
    pass


@dataclass(frozen=True)
class Ellipse:
    """{E u + center : ||u|| <= 1} with symmetric positive definite E."""

    E: np.ndarray
    center: np.ndarray

    def metric(self, pts):
        """||E^-1 (p - center)|| per point; <= 1 iff inside."""
        d = np.atleast_2d(pts) - self.center
        u = np.linalg.solve(self.E, d.T)
        return np.linalg.norm(u, axis=0)


@dataclass
class ConvexRegion:
    """Intersection of unit-normal half-spaces {L p <= l} for one interval."""

    L: np.ndarray            # (m, 2) unit rows
    l: np.ndarray            # (m,) offsets after the robot-radius shrink
    l_raw: np.ndarray        # offsets before the shrink (audit / safety oracle)
    gen_ellipse: Ellipse
    segment: tuple
    n_tangent: int           # leading rows are obstacle tangents, rest box edges
    interval: int = -1
    tightening: float = 0.0  # extra margin already subtracted from `l`
    meta: dict = field(default_factory=dict)

    def violations(self, pts):
        """max_j (L_j p - l_j) per point; <= 0 iff inside the region."""
        vals = np.atleast_2d(pts) @ self.L.T - self.l
        return vals.max(axis=1)

    def contains(self, p, tol=0.0):
        return bool(self.violations(p)[0] <= tol)

    def area(self):
        return polytope_area(self.L, self.l)


def _axes_for_segment(p0, p1):
    d = p1 - p0
    L = np.linalg.norm(d)
    if L < DEGENERATE_TOL:
        return 0.0, np.array([1.0, 0.0]), np.array([0.0, 1.0])
    d = d / L
    return L, d, np.array([-d[1], d[0]])


def decompose_segment(gmap: GridMap, p0, p1, box_width, robot_radius) -> ConvexRegion:
    """Grow an ellipse around the segment and cut tangent half-spaces.

    Steps: collect occupied cell centers inside the segment-aligned bounding
    box; shrink the initial ellipse (circle of half the segment length, or of
    the box width for a point segment) until no center is strictly inside;
    then repeatedly take the center closest in the ellipse metric, add the
    tangent half-space there, drop everything at or behind it, and widen the
    minor axis to the next closest center.  Box edges are appended and every
    offset retreats by robot_radius / 2.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    mid = 0.5 * (p0 + p1)
    seg_len, d_ax, n_ax = _axes_for_segment(p0, p1)
    circle_mode = seg_len < DEGENERATE_TOL
    half_len = 0.5 * seg_len + box_width
    half_wid = box_width

    for q, name in ((p0, "start"), (p1, "end")):
        if gmap.is_occupied(q):
            raise InfeasibleSegmentError(f"segment {name} point {q} is in occupied space")

    sub = crop_for_segment(gmap, p0, p1, box_width)
    pts, idx = sub.occupied_points()
    if len(pts):
        rel = pts - mid
        xt = rel @ d_ax
        yt = rel @ n_ax
        inside_box = (np.abs(xt) <= half_len) & (np.abs(yt) <= half_wid)
        pts, idx = pts[inside_box], idx[inside_box]
        xt, yt = xt[inside_box], yt[inside_box]
    else:
        xt = yt = np.zeros(0)

    a = half_wid if circle_mode else 0.5 * seg_len

    # shrink so the binding cell center sits on the boundary
    if len(pts):
        if circle_mode:
            dist = np.hypot(xt, yt)
            a = min(a, dist.min())
            if a < DEGENERATE_TOL:
                raise InfeasibleSegmentError("occupied cell on top of the point segment")
            b = a
        else:
            b = a
            with np.errstate(divide="ignore", invalid="ignore"):
                denom = 1.0 - (xt / a) ** 2
                cand = np.abs(yt) / np.sqrt(denom)
            inside = (np.abs(xt) < a) & (np.hypot(xt / a, yt / b) < 1.0 - 1e-12)
            if np.any(inside):
                if np.any(np.abs(yt[inside]) < DEGENERATE_TOL):
                    raise InfeasibleSegmentError("occupied cell on the segment itself")
                b = float(cand[inside].min())
    else:
        b = a

    R = np.column_stack([d_ax, n_ax])
    def ellipse(aa, bb):
        return Ellipse(E=R @ np.diag([aa, bb]) @ R.T, center=mid.copy())

    gen = ellipse(a, b)

    rows, offs = [], []
    remaining = np.ones(len(pts), dtype=bool)
    first = True
    while np.any(remaining):
        lam = np.hypot(xt[remaining] / a, yt[remaining] / b)
        sel = np.flatnonzero(remaining)
        # closest in the ellipse metric; ties broken by cell index
        order = np.lexsort((idx[sel][:, 1], idx[sel][:, 0], lam))
        j = sel[order[0]]
        if first:
            gen = ellipse(a, b)
            first = False

        grad = np.array([xt[j] / a**2, yt[j] / b**2])
        n_world = R @ (grad / np.linalg.norm(grad))
        off = float(n_world @ pts[j])
        rows.append(n_world)
        offs.append(off)

        vals = pts[remaining] @ n_world
        keep = vals < off - 1e-12
        remaining[sel] = keep

        if np.any(remaining):
            if circle_mode:
                dist = np.hypot(xt[remaining], yt[remaining])
                a = b = max(b, float(dist.min()))
            else:
                ok = np.abs(xt[remaining]) < a * (1.0 - 1e-12)
                if np.any(ok):
                    denom = 1.0 - (xt[remaining][ok] / a) ** 2
                    cand = np.abs(yt[remaining][ok]) / np.sqrt(denom)
                    b = max(b, float(cand.min()))

    n_tangent = len(rows)
    for n_world, off in (
        (d_ax, float(d_ax @ mid) + half_len),
        (-d_ax, float(-d_ax @ mid) + half_len),
        (n_ax, float(n_ax @ mid) + half_wid),
        (-n_ax, float(-n_ax @ mid) + half_wid),
    ):
        rows.append(np.asarray(n_world, dtype=float))
        offs.append(off)

    L = np.vstack(rows)
    l_raw = np.array(offs)
    norms = np.linalg.norm(L, axis=1)
    if np.abs(norms - 1.0).max() > 1e-12:
        L = L / norms[:, None]
        l_raw = l_raw / norms
    l = l_raw - 0.5 * robot_radius

    region = ConvexRegion(
        L=L, l=l, l_raw=l_raw, gen_ellipse=gen, segment=(p0.copy(), p1.copy()),
        n_tangent=n_tangent,
        meta={"n_cells_in_box": int(len(pts)), "n_cells_in_crop": int(sub.occ.sum())},
    )
    if not region.contains(mid, tol=-1e-12):
        raise InfeasibleSegmentError(
            f"segment midpoint {mid} excluded after robot-radius shrink"
        )
    return region


def decompose_plan(gmap, positions, box_width, robot_radius) -> list[ConvexRegion]:
    """One region per interval: region k grows around (q_k, q_{k+1}).

    The last region uses the final position as a point segment, matching the
    steady-state tail the planner appends when shifting its horizon.
    """
    q = np.atleast_2d(np.asarray(positions, dtype=float))
    if len(q) < 1:
        raise ValueError("need at least one plan position")
    regions = []
    for k in range(len(q)):
        p0 = q[k]
        p1 = q[k + 1] if k + 1 < len(q) else q[k]
        reg = decompose_segment(gmap, p0, p1, box_width, robot_radius)
        reg.interval = k
        regions.append(reg)
    return regions


def tighten_region(region: ConvexRegion, c_o, alpha) -> ConvexRegion:
    """Pull every offset in by c_o * alpha (tube margin for the tracker)."""
    margin = float(c_o) * float(alpha)
    if margin < 0.0:
        raise ValueError("c_o * alpha must be >= 0")
    tight = ConvexRegion(
        L=region.L.copy(), l=region.l - margin, l_raw=region.l_raw.copy(),
        gen_ellipse=region.gen_ellipse, segment=region.segment,
        n_tangent=region.n_tangent, interval=region.interval,
        tightening=region.tightening + margin, meta=dict(region.meta),
    )
    mid = 0.5 * (region.segment[0] + region.segment[1])
    if not tight.contains(mid):
        log.warning("tightened region %d no longer contains its segment midpoint", region.interval)
        tight.meta["empty_after_tightening"] = True
    return tight


def check_plan_containment(regions, pieces, n_samples=20, tol=1e-9):
    """Verify each interval's planned piece stays inside its generating ellipse.

    `pieces[k]` holds sampled positions of the trajectory piece that region k
    was generated from; polylines are resampled to at least `n_samples` points.
    Regions without tangent half-spaces pass by convention (box-only regions
    have no ellipse constraint to violate).
    """
    report = []
    for reg, piece in zip(regions, pieces):
        if reg.n_tangent == 0:
            report.append({"interval": reg.interval, "ok": True, "margin": np.inf,
                           "vacuous": True})
            continue
        piece = np.atleast_2d(np.asarray(piece, dtype=float))
        pts = _resample_polyline(piece, n_samples)
        m = reg.gen_ellipse.metric(pts)
        worst = float(m.max())
        report.append({"interval": reg.interval, "ok": worst <= 1.0 + tol,
                       "margin": 1.0 + tol - worst, "vacuous": False})
    return report


def _resample_polyline(pts, n_min):
    if len(pts) == 1:
        return np.repeat(pts, n_min, axis=0)
    if len(pts) >= n_min:
        return pts
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0.0:
        return np.repeat(pts[:1], n_min, axis=0)
    si = np.linspace(0.0, s[-1], n_min)
    out = np.empty((n_min, pts.shape[1]))
    for c in range(pts.shape[1]):
        out[:, c] = np.interp(si, s, pts[:, c])
    return out


def chebyshev_center(L, l):
    """Center and radius of the largest ball inside {L p <= l}."""
    m, d = L.shape
    A = np.hstack([L, np.ones((m, 1))])
    res = linprog(c=np.array([0.0] * d + [-1.0]), A_ub=A, b_ub=l,
                  bounds=[(None, None)] * d + [(0.0, None)], method="highs")
    if not res.success:
        return None, 0.0
    return res.x[:d], float(res.x[d])


def polytope_area(L, l):
    """Area of {L p <= l}; zero if the polytope is empty or degenerate."""
    c, r = chebyshev_center(L, l)
    if c is None or r <= 1e-12:
        return 0.0
    hs = HalfspaceIntersection(np.hstack([L, -l[:, None]]), c)
    verts = hs.intersections
    hull = verts - verts.mean(axis=0)
    ang = np.arctan2(hull[:, 1], hull[:, 0])
    verts = verts[np.argsort(ang)]
    x, y = verts[:, 0], verts[:, 1]
    return float(0.5 * np.abs(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1))))


def verify_region_safety(region: ConvexRegion, gmap: GridMap, robot_radius, box_width):
    """Exclusion oracle for one region.

    Every inflated occupied cell center inside the bounding box must be on or
    outside the pre-shrink tangent/box intersection, and no raw contour cell
    may come within (nearly) the robot radius of the shrunk region.  Contour
    distances are certified through the half-space offsets, which is exact up
    to the cell quantization of the inflation layer.
    """
    p0, p1 = region.segment
    sub = crop_for_segment(gmap, p0, p1, box_width)
    pts, _ = sub.occupied_points()
    out = {"n_checked": 0, "worst_inflated": np.inf, "worst_contour": np.inf}
    if len(pts) == 0:
        return out
    mid = 0.5 * (p0 + p1)
    seg_len, d_ax, n_ax = _axes_for_segment(np.asarray(p0, float), np.asarray(p1, float))
    rel = pts - mid
    inside_box = (np.abs(rel @ d_ax) <= 0.5 * seg_len + box_width) & \
                 (np.abs(rel @ n_ax) <= box_width)
    pts = pts[inside_box]
    if len(pts) == 0:
        return out
    # signed distance of each center past its most violated pre-shrink face
    excess = (pts @ region.L.T - region.l_raw).max(axis=1)
    out["n_checked"] = int(len(pts))
    out["worst_inflated"] = float(excess.min())  # >= 0 means all excluded

    csub = GridMap(sub.size, sub.resolution, sub.origin, sub.contour)
    cpts, _ = csub.occupied_points()
    if len(cpts):
        relc = cpts - mid
        keep = (np.abs(relc @ d_ax) <= 0.5 * seg_len + box_width) & \
               (np.abs(relc @ n_ax) <= box_width)
        cpts = cpts[keep]
    if len(cpts):
        dist_past = (cpts @ region.L.T - region.l).max(axis=1)
        out["worst_contour"] = float(dist_past.min())  # compare against ~robot_radius
    return out
