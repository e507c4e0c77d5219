"""Synthetic multi-camera scenes, a flat-shaded box rasterizer and a toy backbone."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import Camera, CameraRig, ConfigError, SceneRange, intrinsics, look_at, project_points
from .head import Box
from .layers import Conv2d
from .tensor import ParamStore, Tensor

SCENE_DEFAULTS = {
    "cameras": 6,
    "image_size": [64, 64],
    "objects": 3,
    "seed": 0,
    "range": SceneRange().to_json(),
    "radius": 7.5,
    "camera_height": 1.0,
    "fov_deg": 70.0,
    "placement": 4.0,
    "dt": 0.5,
}

# Nominal (length, width, height) and color per class.
CLASS_SIZES = np.array([[2.0, 1.2, 1.0], [0.7, 0.7, 1.6], [1.0, 1.0, 0.8]])
CLASS_COLORS = np.array([[1.0, 0.35, 0.2], [0.2, 1.0, 0.35], [0.35, 0.2, 1.0]])

# Corner sign pattern and the six faces as cyclic corner indices.
_CORNER_SIGNS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
_FACES = ((0, 1, 3, 2), (4, 5, 7, 6), (0, 1, 5, 4), (2, 3, 7, 6), (0, 2, 6, 4), (1, 3, 7, 5))


class GenerationError(RuntimeError):
    """The requested scene could not be sampled."""


@dataclass(eq=False)
class SceneObject:
    box: Box
    intensity: float

    @property
    def color(self) -> np.ndarray:
        return self.intensity * CLASS_COLORS[self.box.label % len(CLASS_COLORS)]


@dataclass(eq=False)
class Scene:
    rig: CameraRig
    objects: list[SceneObject]
    seed: int = 0
    time: float = 0.0

    @property
    def boxes(self) -> list[Box]:
        return [o.box for o in self.objects]

    def advance(self, dt: float) -> "Scene":
        """The same scene ``dt`` seconds later (constant velocities)."""
        moved = []
        for o in self.objects:
            b = o.box
            c = (b.center[0] + b.velocity[0] * dt, b.center[1], b.center[2] + b.velocity[1] * dt)
            moved.append(SceneObject(replace(b, center=c), o.intensity))
        return Scene(self.rig, moved, self.seed, self.time + dt)

    def to_json(self) -> dict:
        return {"seed": self.seed, "time": self.time,
                "objects": [dict(o.box.to_json(), intensity=o.intensity) for o in self.objects],
                "rig": self.rig.to_json()}


def ring_rig(cameras: int, image_size: Sequence[int], radius: float, height: float,
             fov_deg: float, srange: SceneRange) -> CameraRig:
    """Cameras evenly spaced on a circle, each looking horizontally at the Y axis."""
    if cameras < 1:
        raise ConfigError("need at least one camera")
    H, W = int(image_size[0]), int(image_size[1])
    f = 0.5 * W / math.tan(math.radians(fov_deg) / 2)
    K = intrinsics(f, f, W / 2, H / 2)
    cams = []
    for n in range(cameras):
        phi = 2 * math.pi * n / cameras
        pos = np.array([radius * math.sin(phi), height, radius * math.cos(phi)])
        cams.append(Camera(K, look_at(pos, [0.0, height, 0.0]), W, H))
    return CameraRig(tuple(cams), srange)


def generate_scene(cfg: dict | None = None, seed: int | None = None) -> Scene:
    cfg = dict(SCENE_DEFAULTS, **(cfg or {}))
    unknown = set(cfg) - set(SCENE_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
    seed = int(cfg["seed"] if seed is None else seed)
    srange = SceneRange.from_json(cfg["range"])
    rig = ring_rig(int(cfg["cameras"]), cfg["image_size"], float(cfg["radius"]),
                   float(cfg["camera_height"]), float(cfg["fov_deg"]), srange)
    rng = np.random.default_rng(seed)
    half = float(cfg["placement"])
    lo = np.maximum(-half, [srange.x[0], srange.z[0]])
    hi = np.minimum(half, [srange.x[1], srange.z[1]])
    placed: list[SceneObject] = []
    footprints: list[tuple[float, float, float]] = []
    count = int(cfg["objects"])
    attempts = 0
    while len(placed) < count:
        attempts += 1
        if attempts > 1000:
            raise GenerationError(f"could not place {count} boxes in 1000 attempts")
        label = int(rng.integers(len(CLASS_SIZES)))
        size = CLASS_SIZES[label] * rng.uniform(0.9, 1.1, size=3)
        yaw = float(rng.uniform(-math.pi, math.pi))
        xz = rng.uniform(lo, hi)
        speed = rng.uniform(0.0, 1.0)
        heading = rng.uniform(-math.pi, math.pi)
        radius = 0.5 * math.hypot(size[0], size[1]) + 0.3
        if any(math.hypot(xz[0] - x, xz[1] - z) < radius + r for x, z, r in footprints):
            continue
        center = (float(xz[0]), float(size[2] / 2), float(xz[1]))
        if not (srange.y[0] <= center[1] <= srange.y[1]):
            raise GenerationError("object height exceeds the scene range")
        velocity = (float(speed * math.cos(heading)), float(speed * math.sin(heading)))
        footprints.append((float(xz[0]), float(xz[1]), radius))
        box = Box(center, tuple(float(s) for s in size), yaw, velocity, label)
        placed.append(SceneObject(box, 0.0))
    # distinct intensities in [0.5, 1.0]
    if placed:
        levels = 0.5 + 0.5 * (np.arange(len(placed)) + 1) / len(placed)
        for obj, k in zip(placed, rng.permutation(len(placed))):
            obj.intensity = float(levels[k])
    return Scene(rig, placed, seed)


def box_corners(box: Box) -> np.ndarray:
    """The 8 world-space corners of a box (yaw about +Y)."""
    l, w, h = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    local = _CORNER_SIGNS * np.array([l, h, w]) / 2
    return local @ rot.T + np.asarray(box.center)


@dataclass(eq=False)
class RenderedViews:
    images: np.ndarray  # V x H x W x 3
    ids: np.ndarray  # V x H x W, -1 for background

    def __len__(self) -> int:
        return self.images.shape[0]


def _quad_mask(us: np.ndarray, vs: np.ndarray, quad: np.ndarray) -> np.ndarray:
    cross = []
    for a in range(4):
        p, q = quad[a], quad[(a + 1) % 4]
        cross.append((q[0] - p[0]) * (vs - p[1]) - (q[1] - p[1]) * (us - p[0]))
    cross = np.stack(cross)
    return (cross >= 0).all(axis=0) | (cross <= 0).all(axis=0)


def render_view(cam: Camera, objects: Sequence[SceneObject], near: float = 1e-3):
    H, W = cam.height, cam.width
    us, vs = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    img = np.zeros((H, W, 3))
    ids = np.full((H, W), -1, dtype=int)
    dist = [np.linalg.norm(np.asarray(o.box.center) - cam.center) for o in objects]
    for k in np.argsort(dist, kind="stable")[::-1]:
        obj = objects[k]
        u, v, depth, _ = project_points(cam, box_corners(obj.box))
        covered = np.zeros((H, W), dtype=bool)
        for face in _FACES:
            if (depth[list(face)] <= near).any():
                continue
            covered |= _quad_mask(us, vs, np.stack([u[list(face)], v[list(face)]], axis=1))
        img[covered] = obj.color
        ids[covered] = k
    return img, ids


def render(scene: Scene) -> RenderedViews:
    """Flat-shaded rasterization, far-to-near painter's order per view."""
    out = [render_view(cam, scene.objects) for cam in scene.rig]
    return RenderedViews(np.stack([o[0] for o in out]), np.stack([o[1] for o in out]))


# -- file formats ------------------------------------------------------------
def write_ppm(path: str | Path, image: np.ndarray, comment: str | None = None) -> None:
    """Binary P6, 8-bit, from an ``H x W x 3`` array in [0, 1]."""
    H, W, _ = image.shape
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    header = "P6\n" + (f"# {comment}\n" if comment else "") + f"{W} {H}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + data.tobytes())


def write_pgm16(path: str | Path, image: np.ndarray, comment: str | None = None) -> None:
    """Binary P5, 16-bit big-endian, from an ``H x W`` array in [0, 1]."""
    H, W = image.shape
    data = np.clip(np.round(image * 65535.0), 0, 65535).astype(">u2")
    header = "P5\n" + (f"# {comment}\n" if comment else "") + f"{W} {H}\n65535\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + data.tobytes())


def read_pnm(path: str | Path) -> tuple[np.ndarray, list[str]]:
    """Read a P5/P6 file written by this module; returns values in [0, 1] and comments."""
    raw = Path(path).read_bytes()
    tokens: list[str] = []
    comments: list[str] = []
    pos = 0
    while len(tokens) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            comments.append(line[1:].strip())
        else:
            tokens.extend(line.split())
    magic, W, H, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    chans = 3 if magic == "P6" else 1
    arr = np.frombuffer(raw[pos:], dtype=dtype, count=H * W * chans).astype(np.float64) / maxval
    return (arr.reshape(H, W, 3) if chans == 3 else arr.reshape(H, W)), comments


# -- backbone -----------------------------------------------------------------
class ToyBackbone:
    """One strided patchify convolution + ReLU per pyramid level."""

    def __init__(self, store: ParamStore, name: str, c: int, strides: Sequence[int] = (4, 8, 16),
                 cin: int = 3):
        if not strides:
            raise ConfigError("backbone needs at least one level")
        self.strides = tuple(int(s) for s in strides)
        self.convs = [Conv2d(store, f"{name}.s{s}", cin, c, s, stride=s) for s in self.strides]

    def level_shapes(self, H: int, W: int) -> list[tuple[int, int]]:
        return [(H // s, W // s) for s in self.strides]


def toy_backbone(images: Sequence[np.ndarray] | np.ndarray, backbone: ToyBackbone) -> list[list[Tensor]]:
    """Per-view feature pyramids ``[view][level]`` of shape ``h x w x c``."""
    out = []
    for img in images:
        x = img if isinstance(img, Tensor) else Tensor(img)
        out.append([T.relu(conv(x)) for conv in backbone.convs])
    return out
