"""Pinhole cameras, camera rigs and the frustum position volume."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

MIN_DEPTH = 1e-6


class ConfigError(ValueError):
    """Invalid geometry or model configuration."""


@dataclass(frozen=True, eq=False)
class Camera:
    K: np.ndarray
    T: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.T, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "T", T)
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0:
            raise ConfigError("intrinsics must be upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or abs(K[2, 2] - 1.0) > 1e-12:
            raise ConfigError("intrinsics need positive focals and K[2,2] = 1")
        R = T[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ConfigError("extrinsic rotation is not a proper rotation")
        if np.abs(T[3] - [0, 0, 0, 1]).max() > 0:
            raise ConfigError("extrinsic bottom row must be [0, 0, 0, 1]")
        if self.width < 1 or self.height < 1:
            raise ConfigError("image size must be positive")

    @property
    def R(self) -> np.ndarray:
        return self.T[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.T[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    @property
    def forward(self) -> np.ndarray:
        """Optical axis expressed in world coordinates."""
        return self.R[2].copy()

    def to_json(self) -> dict:
        return {"K": self.K.reshape(-1).tolist(), "T": self.T.reshape(-1).tolist(),
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class SceneRange:
    x: tuple[float, float] = (-8.0, 8.0)
    y: tuple[float, float] = (0.0, 3.0)
    z: tuple[float, float] = (-8.0, 8.0)
    depth: tuple[float, float] = (1.0, 21.0)
    D: int = 4

    def __post_init__(self):
        for name in ("x", "y", "z", "depth"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ConfigError(f"range {name}: max must exceed min")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.D < 1:
            raise ConfigError("depth levels D must be >= 1")
        if self.depth[0] <= 0:
            raise ConfigError("depth_min must be positive")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x[0], self.y[0], self.z[0]])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.x[1], self.y[1], self.z[1]])

    def depth_bins(self) -> np.ndarray:
        """Depth bin centers, linearly spaced."""
        lo, hi = self.depth
        return lo + (np.arange(self.D) + 0.5) * (hi - lo) / self.D

    def normalize(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.lo) / (self.hi - self.lo)

    def to_json(self) -> dict:
        return {"x": list(self.x), "y": list(self.y), "z": list(self.z),
                "depth": list(self.depth), "D": self.D}

    @classmethod
    def from_json(cls, doc: dict) -> "SceneRange":
        unknown = set(doc) - {"x", "y", "z", "depth", "D"}
        if unknown:
            raise ConfigError(f"unknown range keys: {sorted(unknown)}")
        kw = {k: tuple(v) if k != "D" else int(v) for k, v in doc.items()}
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class CameraRig:
    cameras: tuple[Camera, ...]
    range: SceneRange = field(default_factory=SceneRange)

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i: int) -> Camera:
        return self.cameras[i]

    def to_json(self) -> dict:
        return {"cameras": [c.to_json() for c in self.cameras], "range": self.range.to_json()}

    @classmethod
    def from_json(cls, doc: dict) -> "CameraRig":
        cams = tuple(Camera(K=np.array(c["K"], dtype=float), T=np.array(c["T"], dtype=float),
                            width=int(c["width"]), height=int(c["height"]))
                     for c in doc["cameras"])
        rng = SceneRange.from_json(doc["range"]) if "range" in doc else SceneRange()
        return cls(cams, rng)


def load_rig(path: str | Path) -> CameraRig:
    with open(path) as fh:
        return CameraRig.from_json(json.load(fh))


def save_rig(rig: CameraRig, path: str | Path, extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(dict(rig.to_json(), **(extra or {})), fh, indent=2)


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera transform for a camera at ``position`` facing ``target``.

    Camera axes: x right, y down, z forward.
    """
    position = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise ConfigError("look_at: forward axis parallel to up")
    right /= n
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ position
    return T


def project_points(cam: Camera, pts: np.ndarray):
    """Vectorized :func:`project_point` over an ``(..., 3)`` array.

    Returns ``(u, v, depth, visible)`` arrays.  Points at depth <= 1e-6 get
    finite, clamped pixel coordinates and ``visible=False``.
    """
    pts = np.asarray(pts, dtype=np.float64)
    pc = pts @ cam.R.T + cam.t
    depth = pc[..., 2]
    safe = np.maximum(depth, MIN_DEPTH)
    uvw = pc @ cam.K.T
    u = uvw[..., 0] / safe
    v = uvw[..., 1] / safe
    front = depth > MIN_DEPTH
    bound = 1e6
    u = np.clip(np.where(front, u, -1.0), -bound, bound)
    v = np.clip(np.where(front, v, -1.0), -bound, bound)
    visible = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return u, v, depth, visible


def project_point(cam: Camera, p_world) -> tuple[float, float, float, bool]:
    p = np.asarray(p_world, dtype=np.float64)
    if p.shape != (3,) or not np.isfinite(p).all():
        raise ValueError("p_world must be a finite 3-vector")
    u, v, d, vis = project_points(cam, p[None])
    return float(u[0]), float(v[0]), float(d[0]), bool(vis[0])


def backproject(cam: Camera, u, v, depth) -> np.ndarray:
    """Pixel coordinates plus camera depth to world points."""
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    pix = np.stack([u * depth, v * depth, depth], axis=-1)
    pc = pix @ np.linalg.inv(cam.K).T
    return (pc - cam.t) @ cam.R


def cell_centers(cam: Camera, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Image-pixel coordinates of an ``h x w`` feature map's cell centers."""
    us = (np.arange(w) + 0.5) * (cam.width / w)
    vs = (np.arange(h) + 0.5) * (cam.height / h)
    return np.meshgrid(us, vs)


def frustum_volume(cam: Camera, h: int, w: int, srange: SceneRange) -> Tensor:
    """Normalized homogeneous world coordinates for every (cell, depth bin).

    Output is ``h x w x 4D`` with channels ``(x, y, z, 1)`` per depth bin,
    depth-major.  Coordinates are normalized by the scene range but not
    clipped.
    """
    if h < 1 or w < 1:
        raise ConfigError("feature map extents must be >= 1")
    if abs(np.linalg.det(cam.K)) < 1e-12:
        raise ConfigError("degenerate intrinsics")
    uu, vv = cell_centers(cam, h, w)
    depths = srange.depth_bins()
    out = np.empty((h, w, srange.D, 4))
    for k, d in enumerate(depths):
        world = backproject(cam, uu, vv, np.full_like(uu, d))
        out[:, :, k, :3] = srange.normalize(world)
        out[:, :, k, 3] = 1.0
    return Tensor(out.reshape(h, w, 4 * srange.D))
