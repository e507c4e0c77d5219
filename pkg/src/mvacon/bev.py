"""Bird's-eye-view grid, pillar anchors and their multi-view projection tables."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import CameraRig, ConfigError, project_points

BEV_DEFAULTS = {
    "nx": 16,
    "nz": 16,
    "x_bounds": [-8.0, 8.0],
    "z_bounds": [-8.0, 8.0],
    "pillar_count": 4,
    "y_bounds": [0.0, 3.0],
}

# Grid extent quoted for full-scale BEV models; metric bounds are our own.
BEV_FULL_SCALE_GRID = dict(BEV_DEFAULTS, nx=200, nz=200, x_bounds=[-51.2, 51.2], z_bounds=[-51.2, 51.2])


@dataclass(frozen=True, eq=False)
class BevGrid:
    nx: int
    nz: int
    x_bounds: tuple[float, float]
    z_bounds: tuple[float, float]
    y_bounds: tuple[float, float]
    pillar_count: int
    centers: np.ndarray  # (nx*nz, 2) as (x, z); cell index = i * nz + k
    pillar_points: np.ndarray  # (nx*nz, P, 3)

    @property
    def cells(self) -> int:
        return self.nx * self.nz

    @property
    def cell_size(self) -> tuple[float, float]:
        return ((self.x_bounds[1] - self.x_bounds[0]) / self.nx,
                (self.z_bounds[1] - self.z_bounds[0]) / self.nz)

    def cell_index(self, i: int, k: int) -> int:
        return i * self.nz + k

    def cell_at(self, x: float, z: float) -> int:
        """Index of the cell containing ground point ``(x, z)``, clamped to the grid."""
        dx, dz = self.cell_size
        i = min(max(int((x - self.x_bounds[0]) // dx), 0), self.nx - 1)
        k = min(max(int((z - self.z_bounds[0]) // dz), 0), self.nz - 1)
        return self.cell_index(i, k)


def build_bev_grid(cfg: dict | None = None) -> BevGrid:
    cfg = dict(BEV_DEFAULTS, **(cfg or {}))
    unknown = set(cfg) - set(BEV_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown bev keys: {sorted(unknown)}")
    nx, nz, P = int(cfg["nx"]), int(cfg["nz"]), int(cfg["pillar_count"])
    if nx < 1 or nz < 1 or P < 1:
        raise ConfigError("bev extents and pillar_count must be >= 1")
    xb, zb, yb = (tuple(float(a) for a in cfg[k]) for k in ("x_bounds", "z_bounds", "y_bounds"))
    for name, (lo, hi) in (("x", xb), ("z", zb), ("y", yb)):
        if not hi > lo:
            raise ConfigError(f"bev {name}_bounds must have max > min")
    dx = (xb[1] - xb[0]) / nx
    dz = (zb[1] - zb[0]) / nz
    dy = (yb[1] - yb[0]) / P
    xs = xb[0] + (np.arange(nx) + 0.5) * dx
    zs = zb[0] + (np.arange(nz) + 0.5) * dz
    ys = yb[0] + (np.arange(P) + 0.5) * dy
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    centers = np.stack([gx.reshape(-1), gz.reshape(-1)], axis=-1)
    pts = np.empty((nx * nz, P, 3))
    pts[:, :, 0] = centers[:, 0:1]
    pts[:, :, 1] = ys[None, :]
    pts[:, :, 2] = centers[:, 1:2]
    return BevGrid(nx, nz, xb, zb, yb, P, centers, pts)


@dataclass(frozen=True, eq=False)
class ProjectionTable:
    """Projected pillar points, indexed ``[cell, pillar, view, level]``.

    ``u``/``v`` are continuous feature-map coordinates of each level (cell
    ``j`` spans ``[j, j+1)``); ``visible`` follows full-resolution image
    visibility.
    """

    u: np.ndarray
    v: np.ndarray
    visible: np.ndarray
    levels: tuple[tuple[int, int], ...]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.visible.shape

    @property
    def size(self) -> int:
        return int(self.visible.size)


def project_anchors(grid: BevGrid, rig: CameraRig,
                    levels: Sequence[tuple[int, int]]) -> ProjectionTable:
    if len(rig) == 0:
        raise ConfigError("camera rig is empty")
    levels = tuple((int(h), int(w)) for h, w in levels)
    V, L = len(rig), len(levels)
    shape = (grid.cells, grid.pillar_count, V, L)
    u = np.empty(shape)
    v = np.empty(shape)
    vis = np.empty(shape, dtype=bool)
    for n, cam in enumerate(rig):
        pu, pv, _, pvis = project_points(cam, grid.pillar_points)
        for l, (h, w) in enumerate(levels):
            u[:, :, n, l] = pu * (w / cam.width)
            v[:, :, n, l] = pv * (h / cam.height)
            vis[:, :, n, l] = pvis
    return ProjectionTable(u, v, vis, levels)
