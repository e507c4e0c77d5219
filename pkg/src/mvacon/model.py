"""End-to-end detector: backbone, MvACon, lifting, decoder and heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bev import BevGrid, ProjectionTable, build_bev_grid, project_anchors
from .cluster import ClusterConfig, MvACon
from .geometry import CameraRig, frustum_volume
from .head import BoxHeads, Decoder, DetectionSet, decode, predict
from .lifting import BevEncoder, LiftedKeysValues, PetrLift, bev_encoder, petr_lift
from .scene import ToyBackbone, toy_backbone
from .tensor import ParamStore, Tensor


def reference_grid(count: int, half: float, height: float = 0.5) -> np.ndarray:
    """``count`` query reference points on a near-square grid over ``[-half, half]^2``."""
    nx = int(np.ceil(np.sqrt(count)))
    nz = int(np.ceil(count / nx))
    xs = -half + (np.arange(nx) + 0.5) * (2 * half / nx)
    zs = -half + (np.arange(nz) + 0.5) * (2 * half / nz)
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    pts = np.stack([gx.reshape(-1), np.full(nx * nz, height), gz.reshape(-1)], axis=1)
    return pts[:count]


@dataclass(eq=False)
class ForwardResult:
    detections: DetectionSet
    pyramids: list
    contextualized: list | None
    kv: LiftedKeysValues
    trace: list | None


class Detector:
    def __init__(self, cfg: dict, rig: CameraRig):
        m = cfg["model"]
        self.cfg = cfg
        self.rig = rig
        self.store = ParamStore(int(cfg["training"]["seed"]))
        c = int(m["channels"])
        lift = m["lift"]
        head = m["head"]
        self.mode = lift["mode"]
        H, W = rig[0].height, rig[0].width
        self.backbone = ToyBackbone(self.store, "backbone", c, m["strides"])
        self.level_shapes = self.backbone.level_shapes(H, W)
        mcfg = ClusterConfig.from_json(m["mvacon"])
        self.cluster_cfg = mcfg
        self.grid: BevGrid | None = None
        self.table: ProjectionTable | None = None
        if self.mode == "petr":
            self.petr_level = int(lift["petr_level"])
            self.mvacon = MvACon(self.store, "mvacon", c, 1, mcfg) if mcfg.enabled else None
            h, w = self.level_shapes[self.petr_level]
            srange = rig.range
            if srange.D != int(lift["D"]):
                srange = type(srange)(srange.x, srange.y, srange.z, srange.depth, int(lift["D"]))
            self.volumes = [frustum_volume(cam, h, w, srange) for cam in rig]
            self.lift = PetrLift(self.store, "petr", c, int(lift["d"]), int(lift["D"]))
            width = int(lift["d"])
        else:
            self.mvacon = MvACon(self.store, "mvacon", c, len(self.level_shapes), mcfg) if mcfg.enabled else None
            self.grid = build_bev_grid(m["bev"])
            self.table = project_anchors(self.grid, rig, self.level_shapes)
            self.encoder = BevEncoder(self.store, "encoder", self.grid.cells, c, len(rig),
                                      len(self.level_shapes), self.grid.pillar_count,
                                      int(lift["sample_points"]), int(lift["layers"]),
                                      self.mvacon, bool(lift["recompute_per_layer"]))
            width = c
        self.two_frame = bool(head["two_frame"])
        self.decoder = Decoder(self.store, "decoder", int(head["queries"]), width,
                               int(head["layers"]), int(head["heads"]))
        refs = reference_grid(int(head["queries"]), float(cfg["scene"]["placement"]))
        self.heads = BoxHeads(self.store, "heads", int(head["queries"]), width, int(head["classes"]),
                              refs, 2 if self.two_frame else 1)

    @property
    def params(self):
        return list(self.store)

    def lift_frame(self, images, trace: list | None = None):
        pyramids = toy_backbone(images, self.backbone)
        if self.mode == "petr":
            maps = [pyr[self.petr_level] for pyr in pyramids]
            ctx = None
            if self.mvacon is not None:
                ctx = self.mvacon([[m] for m in maps])
                maps = [pyr[0] for pyr in ctx]
            kv = petr_lift(maps, self.volumes, self.lift)
        else:
            ctx = None
            kv = bev_encoder(pyramids, self.table, self.encoder, trace)
        return pyramids, ctx, kv

    def forward(self, images, images_next=None, trace: list | None = None) -> ForwardResult:
        pyramids, ctx, kv = self.lift_frame(images, trace)
        decoded = decode(self.decoder, kv)
        second = None
        if self.two_frame:
            if images_next is None:
                second = decoded
            else:
                _, _, kv2 = self.lift_frame(images_next)
                second = decode(self.decoder, kv2)
        return ForwardResult(predict(decoded, self.heads, second), pyramids, ctx, kv, trace)

    def zero_residual_paths(self) -> None:
        if self.mvacon is not None:
            self.mvacon.zero_value_paths()
        if self.mode == "bevformer":
            self.encoder.zero_value_paths()
        self.decoder.zero_value_paths()
