"""2D-to-3D lifting: position-encoded dense tokens and deformable BEV encoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .bev import ProjectionTable
from .cluster import MvACon
from .geometry import ConfigError
from .layers import FeedForward, LayerNorm, Linear, MLP
from .tensor import DimensionError, ParamStore, Tensor

LIFT_DEFAULTS = {
    "mode": "bevformer",
    "layers": 6,
    "sample_points": 4,
    "d": 16,
    "D": 4,
    "petr_level": 0,
    "recompute_per_layer": False,
}


@dataclass(eq=False)
class LiftedKeysValues:
    tokens: Tensor
    pos: Tensor | None = None
    mode: str = "petr"

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass(eq=False)
class DeformSpec:
    offsets: Tensor  # Q x V x L x P x S x 2, feature pixels
    weights: Tensor  # Q x V x (L*P*S), normalized over visible entries
    points_per_ref: int

    def weight_grid(self, L: int, P: int) -> np.ndarray:
        Q, V, _ = self.weights.shape
        return self.weights.data.reshape(Q, V, L, P, self.points_per_ref)


# -- decoder-only (position-encoded) lifting -------------------------------
class PetrLift:
    def __init__(self, store: ParamStore, name: str, c: int, d: int, D: int):
        self.D = D
        self.feat = Linear(store, f"{name}.feat", c, d)
        self.pos = MLP(store, f"{name}.pos", 4 * D, d, d)


def petr_lift(views: Sequence[Tensor], volumes: Sequence[Tensor], lift: PetrLift) -> LiftedKeysValues:
    """Project features and frustum positions to width ``d``, add, flatten views."""
    if len(views) != len(volumes):
        raise DimensionError("one frustum volume per view is required")
    tokens = []
    for fmap, vol in zip(views, volumes):
        h, w, c = fmap.shape
        if vol.shape[:2] != (h, w):
            raise DimensionError(f"volume {vol.shape} does not match map {fmap.shape}")
        if vol.shape[2] != 4 * lift.D:
            raise ConfigError(f"volume has {vol.shape[2]} channels, position MLP expects {4 * lift.D}")
        f = lift.feat(fmap.reshape(h * w, c))
        p = lift.pos(vol.reshape(h * w, vol.shape[2]))
        tokens.append(f + p)
    return LiftedKeysValues(T.concat(tokens, axis=0) if len(tokens) > 1 else tokens[0], None, "petr")


# -- deformable sampling ---------------------------------------------------
def visibility_mask(table: ProjectionTable, S: int) -> np.ndarray:
    """Live-entry mask ``Q x V x (L*P*S)`` matching :attr:`DeformSpec.weights`."""
    Q, P, V, L = table.shape
    vis = np.transpose(table.visible, (0, 2, 3, 1))  # Q V L P
    vis = np.broadcast_to(vis[..., None], (Q, V, L, P, S))
    return vis.reshape(Q, V, L * P * S)


def sample_locations(table: ProjectionTable, spec: DeformSpec):
    """Absolute sampling coordinates ``(u, v)`` shaped ``Q x V x L x P x S``.

    Table coordinates put cell ``j`` on ``[j, j+1)``; the bilinear sampler
    puts pixel ``j`` at integer ``j``, hence the half-pixel shift.
    """
    base_u = np.transpose(table.u, (0, 2, 3, 1))[..., None] - 0.5
    base_v = np.transpose(table.v, (0, 2, 3, 1))[..., None] - 0.5
    off = spec.offsets.data
    return base_u + off[..., 0], base_v + off[..., 1]


def deformable_sample(maps: Sequence[Sequence[Tensor]], table: ProjectionTable,
                      spec: DeformSpec) -> tuple[Tensor, np.ndarray]:
    """Weighted sum of bilinear samples around each projected reference.

    ``maps[view][level]`` are ``h x w x c`` value maps.  Returns per-(query,
    view) features ``Q x V x c`` and a boolean hit mask ``Q x V``; a
    (query, view) with no visible reference yields a zero vector.
    """
    Q, P, V, L = table.shape
    S = spec.points_per_ref
    if len(maps) != V or any(len(m) != L for m in maps):
        raise DimensionError("maps must be indexed [view][level] matching the table")
    hits = table.visible.any(axis=1).any(axis=-1)  # Q x V
    base_u = np.transpose(table.u, (0, 2, 3, 1))[..., None] - 0.5  # Q V L P 1
    base_v = np.transpose(table.v, (0, 2, 3, 1))[..., None] - 0.5
    u = T.add(spec.offsets[..., 0], base_u)
    v = T.add(spec.offsets[..., 1], base_v)
    map_index = (np.arange(V)[:, None] * L + np.arange(L)[None, :])[None, :, :, None, None]
    flat_maps = [m for pyr in maps for m in pyr]
    samples = T.bilinear_sample_maps(flat_maps, map_index, u, v)  # Q V L P S c
    wts = spec.weights.reshape(Q, V, L, P, S, 1)
    return T.tsum(T.mul(samples, wts), axis=(2, 3, 4)), hits


class CrossAttentionLayer:
    """Deformable spatial cross-attention from BEV queries into multi-view pyramids."""

    def __init__(self, store: ParamStore, name: str, c: int, views: int, levels: int,
                 pillars: int, points: int):
        self.shape = (views, levels, pillars, points)
        n = views * levels * pillars * points
        self.norm = LayerNorm(store, f"{name}.norm", c)
        self.value = Linear(store, f"{name}.value", c, c)
        self.offsets = Linear(store, f"{name}.offsets", c, 2 * n, init="zeros")
        self.weights = Linear(store, f"{name}.weights", c, n)
        self.out = Linear(store, f"{name}.out", c, c)

    def zero_value_path(self) -> None:
        self.value.zero_()
        self.out.zero_()

    def spec(self, queries: Tensor, pos: Tensor | None, table: ProjectionTable) -> DeformSpec:
        V, L, P, S = self.shape
        Q = queries.shape[0]
        qs = self.norm(queries)
        if pos is not None:
            qs = qs + pos
        offsets = self.offsets(qs).reshape(Q, V, L, P, S, 2)
        logits = self.weights(qs).reshape(Q, V, L * P * S)
        weights = T.masked_softmax(logits, visibility_mask(table, S), axis=-1)
        return DeformSpec(offsets, weights, S)


def spatial_cross_attention(queries: Tensor, pos: Tensor | None, values: Sequence[Sequence[Tensor]],
                            table: ProjectionTable, layer: CrossAttentionLayer,
                            trace: list | None = None) -> Tensor:
    """One residual update of the BEV queries.

    ``values`` are already value-projected maps ``[view][level]``.  Per
    query the sampled features are averaged over the views that see at
    least one of its pillar points; unseen queries pass through unchanged.
    """
    spec = layer.spec(queries, pos, table)
    feats, hits = deformable_sample(values, table, spec)
    count = hits.sum(axis=1)
    norm = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0)
    weight = (hits * norm[:, None])[..., None]  # Q x V x 1
    agg = T.tsum(T.mul(feats, weight), axis=1)
    update = T.mul(layer.out(agg), (count > 0).astype(float)[:, None])
    if trace is not None:
        trace.append({"spec": spec, "hits": hits, "table": table})
    return queries + update


class BevEncoder:
    def __init__(self, store: ParamStore, name: str, cells: int, c: int, views: int,
                 levels: int, pillars: int, points: int, layers: int,
                 mvacon: MvACon | None = None, recompute_per_layer: bool = False):
        if layers < 1:
            raise ConfigError("encoder needs at least one layer")
        self.embed = store.create(f"{name}.embed", (cells, c), fan_in=c)
        self.pos = store.create(f"{name}.pos", (cells, c), fan_in=c)
        self.layers = [CrossAttentionLayer(store, f"{name}.sca{i}", c, views, levels, pillars, points)
                       for i in range(layers)]
        self.ffns = [FeedForward(store, f"{name}.ffn{i}", c) for i in range(layers)]
        self.mvacon = mvacon
        self.recompute_per_layer = recompute_per_layer

    def zero_value_paths(self) -> None:
        for layer, ffn in zip(self.layers, self.ffns):
            layer.zero_value_path()
            ffn.zero_()


def bev_encoder(views: Sequence[Sequence[Tensor]], table: ProjectionTable, enc: BevEncoder,
                trace: list | None = None) -> LiftedKeysValues:
    """Refine the BEV query embedding with stacked cross-attention + FFN blocks.

    With MvACon attached the value pyramids are contextualized once up front,
    or, when ``recompute_per_layer`` is set, layer ``i`` uses block ``i`` of
    the MvACon stack on the raw pyramids (layers past the stack use them raw).
    """
    mv = enc.mvacon
    shared = views
    if mv is not None and not enc.recompute_per_layer:
        shared = mv(views)
    x = enc.embed
    for i, (layer, ffn) in enumerate(zip(enc.layers, enc.ffns)):
        src = shared
        if mv is not None and enc.recompute_per_layer:
            src = mv(views, blocks=[i]) if i < len(mv.blocks) else views
        values = [[layer.value(fmap) for fmap in pyr] for pyr in src]
        x = spatial_cross_attention(x, enc.pos, values, table, layer, trace)
        x = ffn(x)
    return LiftedKeysValues(x, enc.pos, "bevformer")
