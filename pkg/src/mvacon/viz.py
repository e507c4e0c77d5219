"""Cluster-response heatmaps and per-layer deformable sampling dumps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from .model import Detector
from .scene import toy_backbone
from .tensor import no_grad

DEFORM_HEADER = "view,level,pillar,point,u,v,weight"


def cluster_response(det: Detector, pyramids, view: int, level: int = 0, block: int = 0) -> np.ndarray:
    """Per-token sum over channels of the assignment-weighted clusters, ``h x w``."""
    if det.mvacon is None:
        raise ValueError("the model has no MvACon module")
    pyr = pyramids[view]
    if det.mode == "petr":
        pyr, level = [pyr[det.petr_level]], 0
    sets = det.mvacon.cluster_sets(pyr, view, block)
    h, w, _ = pyr[level].shape
    s = sets[level]
    return T.matmul(s.C, s.z).data.sum(axis=1).reshape(h, w)


def upsample(heat: np.ndarray, H: int, W: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment and clamped edges."""
    h, w = heat.shape
    return ndimage.zoom(heat, (H / h, W / w), order=1, grid_mode=True, mode="nearest")


def minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def cluster_heatmaps(det: Detector, images: np.ndarray, level: int = 0, block: int = 0) -> np.ndarray:
    """``V x H x W`` heatmaps in ``[0, 1]``, one per view."""
    H, W = images.shape[1:3]
    with no_grad():
        pyramids = toy_backbone(images, det.backbone)
        return np.stack([minmax(upsample(cluster_response(det, pyramids, v, level, block), H, W))
                         for v in range(len(images))])


def foreground_contrast(heat: np.ndarray, ids: np.ndarray) -> tuple[float, float]:
    """Mean heat over object pixels and over background pixels (all views)."""
    fg = ids >= 0
    if not fg.any() or fg.all():
        raise ValueError("need both object and background pixels")
    return float(heat[fg].mean()), float(heat[~fg].mean())


@dataclass(frozen=True)
class DeformPoint:
    view: int
    level: int
    pillar: int
    point: int
    u: float
    v: float
    weight: float


def deform_points(det: Detector, images: np.ndarray, cell: int) -> list[list[DeformPoint]]:
    """Sampling points of one BEV query for every encoder layer.

    ``u``/``v`` are image pixel coordinates; weights are divided by the number
    of views that see the cell, so each layer's weights sum to one.
    """
    if det.mode != "bevformer":
        raise ValueError("deformable points exist only in bevformer mode")
    if not 0 <= cell < det.grid.cells:
        raise IndexError(f"BEV cell {cell} outside [0, {det.grid.cells})")
    H, W = images.shape[1:3]
    trace: list = []
    with no_grad():
        det.lift_frame(images, trace)
    out = []
    for rec in trace:
        spec, hits, table = rec["spec"], rec["hits"], rec["table"]
        _, P, V, L = table.shape
        S = spec.points_per_ref
        wgrid = spec.weight_grid(L, P)[cell]  # V L P S
        off = spec.offsets.data[cell]  # V L P S 2
        count = max(int(hits[cell].sum()), 1)
        pts = []
        for v in range(V):
            if not hits[cell, v]:
                continue
            for l, (h, w) in enumerate(table.levels):
                for p in range(P):
                    if not table.visible[cell, p, v, l]:
                        continue
                    for s in range(S):
                        u = (table.u[cell, p, v, l] + off[v, l, p, s, 0]) * W / w
                        vv = (table.v[cell, p, v, l] + off[v, l, p, s, 1]) * H / h
                        pts.append(DeformPoint(v, l, p, s, float(u), float(vv), float(wgrid[v, l, p, s] / count)))
        out.append(pts)
    return out


def write_deform_csv(path: str | Path, points: list[DeformPoint], cfg_hash: str, cell: int, layer: int) -> None:
    with open(path, "w") as fh:
        fh.write(f"# config_hash={cfg_hash} cell={cell} layer={layer}\n{DEFORM_HEADER}\n")
        for q in points:
            fh.write(f"{q.view},{q.level},{q.pillar},{q.point},{q.u:.10g},{q.v:.10g},{q.weight:.10g}\n")
