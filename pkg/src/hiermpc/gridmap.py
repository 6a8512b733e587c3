"""Occupancy grid built from rectangle contours plus half-radius inflation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class Obstacle:
    """Axis-aligned rectangle given by center and full extents, meters."""

    cx: float
    cy: float
    width: float   # extent along x
    length: float  # extent along y

    def __post_init__(self):
        if self.width <= 0 or self.length <= 0:
            raise ValueError("obstacle extents must be positive")

    @property
    def xmin(self):
        return self.cx - 0.5 * self.width

    @property
    def xmax(self):
        return self.cx + 0.5 * self.width

    @property
    def ymin(self):
        return self.cy - 0.5 * self.length

    @property
    def ymax(self):
        return self.cy + 0.5 * self.length

    def distance(self, p):
        """Euclidean distance from a 2D point to the rectangle (0 inside)."""
        dx = max(self.xmin - p[0], 0.0, p[0] - self.xmax)
        dy = max(self.ymin - p[1], 0.0, p[1] - self.ymax)
        return float(np.hypot(dx, dy))


class GridMap:
    """Boolean occupancy raster; cell (i, j) covers a resolution-sized square.

    `occ` marks the inflated obstacle contours the decomposition works with,
    `contour` keeps the raw one-cell-thick lines for distance oracles.
    """

    def __init__(self, size, resolution, origin, occ, contour=None):
        self.size = float(size)
        self.resolution = float(resolution)
        self.origin = np.asarray(origin, dtype=float)
        self.occ = occ
        self.contour = contour if contour is not None else occ.copy()

    @property
    def n_cells(self):
        return self.occ.shape[0]

    def cell_center(self, ij):
        return self.origin + (np.asarray(ij, dtype=float) + 0.5) * self.resolution

    def world_to_cell(self, p):
        ij = np.floor((np.asarray(p, dtype=float) - self.origin) / self.resolution).astype(int)
        return np.clip(ij, 0, self.n_cells - 1)

    def is_occupied(self, p):
        i, j = self.world_to_cell(p)
        return bool(self.occ[i, j])

    def occupied_points(self, mask=None):
        """World coordinates of occupied cell centers plus their (i, j) indices."""
        occ = self.occ if mask is None else (self.occ & mask)
        idx = np.argwhere(occ)
        pts = self.origin + (idx + 0.5) * self.resolution
        return pts, idx

    def crop(self, lo, hi):
        """Axis-aligned sub-map covering at least [lo, hi], clipped to bounds."""
        ilo = np.floor((np.asarray(lo) - self.origin) / self.resolution).astype(int)
        ihi = np.ceil((np.asarray(hi) - self.origin) / self.resolution).astype(int)
        ilo = np.clip(ilo, 0, self.n_cells)
        ihi = np.clip(ihi, 0, self.n_cells)
        sub = GridMap(
            size=self.size,
            resolution=self.resolution,
            origin=self.origin + ilo * self.resolution,
            occ=self.occ[ilo[0]:ihi[0], ilo[1]:ihi[1]],
            contour=self.contour[ilo[0]:ihi[0], ilo[1]:ihi[1]],
        )
        sub._offset = ilo  # noqa: SLF001, cell-index offset into the parent map
        return sub


def rasterize(size, resolution, obstacles, robot_radius, center=(0.0, 0.0)):
    """Contour lines of obstacles and arena border, dilated by half the radius.

    The dilation uses a disk of round(robot_radius / 2 / resolution) cells; the
    other half of the radius is taken off the half-space offsets during the
    decomposition, so a robot center inside a region keeps the full radius of
    clearance from the drawn contours.
    """
    n = int(round(size / resolution))
    origin = np.asarray(center, dtype=float) - 0.5 * size
    contour = np.zeros((n, n), dtype=bool)

    # arena border
    contour[0, :] = contour[-1, :] = True
    contour[:, 0] = contour[:, -1] = True

    def to_cell(p):
        return np.clip(np.floor((np.asarray(p) - origin) / resolution).astype(int), 0, n - 1)

    for ob in obstacles:
        lo = np.array([ob.xmin, ob.ymin])
        hi = np.array([ob.xmax, ob.ymax])
        if np.any(lo < origin) or np.any(hi > origin + size):
            raise ValueError(f"obstacle {ob} outside the map")
        ilo, ihi = to_cell(lo), to_cell(hi)
        contour[ilo[0]:ihi[0] + 1, ilo[1]] = True
        contour[ilo[0]:ihi[0] + 1, ihi[1]] = True
        contour[ilo[0], ilo[1]:ihi[1] + 1] = True
        contour[ihi[0], ilo[1]:ihi[1] + 1] = True

    k = int(round(0.5 * robot_radius / resolution))
    if k > 0:
        dist = ndimage.distance_transform_edt(~contour)
        occ = dist <= k + 1e-9
    else:
        occ = contour.copy()
    return GridMap(size=size, resolution=resolution, origin=origin, occ=occ, contour=contour)


def crop_for_segment(gmap: GridMap, p0, p1, box_width):
    """Sub-map guaranteed to contain the segment's bounding box at any orientation."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    mid = 0.5 * (p0 + p1)
    half = 0.5 * np.linalg.norm(p1 - p0) + 2.0 * box_width
    return gmap.crop(mid - half, mid + half)
