"""Cluster-based attentive contextualization of multi-view feature pyramids.

A feature map of ``N`` tokens is softly assigned to ``M`` learned clusters
(softmax over the token axis), the clusters are pooled and layer-normalized,
and every token then attends to the clusters with a residual shortcut.  Cost
is ``O(N * M)`` rather than ``O(N^2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import ConfigError
from .layers import Conv2d, LayerNorm, Linear, MLP
from .tensor import DimensionError, ParamStore, Tensor

CLUSTERING_OPS = ("linear", "mlp", "conv")


@dataclass(frozen=True)
class ClusterConfig:
    clusters: int = 100
    heads: int = 8
    clustering_op: str = "conv"
    cross_level: bool = True
    layers: int = 6
    enabled: bool = True

    def __post_init__(self):
        if self.clusters < 1:
            raise ConfigError("clusters must be >= 1")
        if self.heads < 1 or self.layers < 1:
            raise ConfigError("heads and layers must be >= 1")
        if self.clustering_op not in CLUSTERING_OPS:
            raise ConfigError(f"clustering_op must be one of {CLUSTERING_OPS}")

    @property
    def M(self) -> int:
        return self.clusters

    def check_width(self, c: int) -> None:
        if c % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide channel width {c}")

    @classmethod
    def from_json(cls, doc: dict) -> "ClusterConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown mvacon keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass(eq=False)
class ClusterSet:
    C: Tensor  # N x M assignment, columns sum to one
    z: Tensor  # M x c clusters
    view: int = 0
    level: int = 0


class Clustering:
    """Token-to-cluster logits; one of the linear / MLP / conv variants.

    Maps that feed the logits linearly carry no bias: the softmax over tokens
    cancels any per-cluster constant, so such a bias would never get a gradient.
    """

    def __init__(self, store: ParamStore, name: str, c: int, M: int, op: str):
        if op not in CLUSTERING_OPS:
            raise ConfigError(f"unknown clustering op {op!r}")
        self.op = op
        if op == "linear":
            self.proj = Linear(store, f"{name}.proj", c, M, bias=False)
        elif op == "mlp":
            self.mlp = MLP(store, f"{name}.mlp", c, c, M, out_bias=False)
        else:
            self.conv = Conv2d(store, f"{name}.conv3", c, c, 3, pad=1, bias=False)
            self.proj = Linear(store, f"{name}.proj", c, M, bias=False)

    def __call__(self, F: Tensor, hw: tuple[int, int] | None = None) -> Tensor:
        if self.op == "linear":
            return self.proj(F)
        if self.op == "mlp":
            return self.mlp(F)
        if hw is None:
            raise ConfigError("conv clustering needs the (h, w) layout of the tokens")
        h, w = hw
        if h * w != F.shape[0]:
            raise DimensionError(f"layout {hw} does not match {F.shape[0]} tokens")
        grid = self.conv(F.reshape(h, w, F.shape[1]))
        return self.proj(grid.reshape(h * w, grid.shape[-1]))


class PacaProjections:
    """Query/key/value/output projections of one attention block."""

    def __init__(self, store: ParamStore, name: str, c: int, heads: int):
        if c % heads:
            raise ConfigError(f"heads={heads} does not divide channel width {c}")
        self.heads = heads
        self.q = Linear(store, f"{name}.q", c, c)
        self.k = Linear(store, f"{name}.k", c, c, bias=False)  # softmax over keys cancels it
        self.v = Linear(store, f"{name}.v", c, c)
        self.o = Linear(store, f"{name}.o", c, c)


def cluster_assign(F: Tensor, clustering: Clustering, hw: tuple[int, int] | None = None) -> Tensor:
    """``softmax_over_tokens(Clustering(F))`` as an ``N x M`` tensor."""
    if F.ndim != 2 or F.shape[0] < 1:
        raise DimensionError("cluster_assign needs N >= 1 tokens as an N x c tensor")
    return T.softmax_axis(clustering(F, hw), axis=0)


def compute_clusters(F: Tensor, C: Tensor, norm: LayerNorm) -> Tensor:
    if F.ndim != 2 or C.ndim != 2 or F.shape[0] != C.shape[0]:
        raise DimensionError(f"tokens {F.shape} and assignment {C.shape} disagree")
    return norm(T.matmul(T.transpose(C), F))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, c = x.shape
    return T.transpose(x.reshape(n, heads, c // heads), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    heads, n, dh = x.shape
    return T.transpose(x, (1, 0, 2)).reshape(n, heads * dh)


def attention_weights(F: Tensor, z: Tensor, proj: PacaProjections) -> Tensor:
    """Per-head token-to-cluster attention, ``heads x N x M``."""
    heads = proj.heads
    c = F.shape[1]
    q = _split_heads(proj.q(F), heads)
    k = _split_heads(proj.k(z), heads)
    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(c // heads))
    return T.softmax_axis(scores, axis=-1)


def paca_attend(F: Tensor, z: Tensor, proj: PacaProjections) -> Tensor:
    """Tokens attend to clusters, then project and add the shortcut."""
    if z.ndim != 2 or z.shape[0] == 0:
        raise DimensionError("paca_attend needs at least one cluster")
    if F.ndim != 2 or F.shape[1] != z.shape[1]:
        raise DimensionError(f"token width {F.shape} and cluster width {z.shape} disagree")
    if F.shape[1] % proj.heads:
        raise DimensionError("heads must divide the channel width")
    attn = attention_weights(F, z, proj)
    v = _split_heads(proj.v(z), proj.heads)
    ctx = _merge_heads(T.matmul(attn, v))
    return proj.o(ctx) + F


def concat_levels(sets: Sequence[ClusterSet]) -> Tensor:
    """Row-stack cluster tensors in ascending level order."""
    if not sets:
        raise DimensionError("no cluster sets to concatenate")
    ordered = sorted(sets, key=lambda s: s.level)
    width = ordered[0].z.shape[1]
    views = {s.view for s in ordered}
    if len(views) > 1:
        raise DimensionError(f"cluster sets come from several views: {sorted(views)}")
    if any(s.z.shape[1] != width for s in ordered):
        raise DimensionError("cluster sets disagree on channel width")
    if len(ordered) == 1:
        return ordered[0].z
    return T.concat([s.z for s in ordered], axis=0)


class LevelBlock:
    """Clustering, cluster normalization and attention for one pyramid level."""

    def __init__(self, store: ParamStore, name: str, c: int, cfg: ClusterConfig):
        self.clustering = Clustering(store, f"{name}.cluster", c, cfg.M, cfg.clustering_op)
        self.norm = LayerNorm(store, f"{name}.norm", c)
        self.attn = PacaProjections(store, f"{name}.attn", c, cfg.heads)


class MvACon:
    """Stack of per-view cluster-attention blocks over an L-level pyramid.

    Parameters are shared across views but not across pyramid levels or
    stacked blocks.  Views never exchange information.
    """

    def __init__(self, store: ParamStore, name: str, c: int, levels: int, cfg: ClusterConfig):
        cfg.check_width(c)
        self.cfg = cfg
        self.c = c
        self.levels = levels
        self.blocks = [[LevelBlock(store, f"{name}.b{b}.l{l}", c, cfg) for l in range(levels)]
                       for b in range(cfg.layers)]

    def zero_value_paths(self) -> None:
        for block in self.blocks:
            for lb in block:
                lb.attn.v.zero_()
                lb.attn.o.zero_()

    def cluster_sets(self, pyramid: Sequence[Tensor], view: int = 0, block: int = 0) -> list[ClusterSet]:
        out = []
        for l, fmap in enumerate(pyramid):
            h, w, c = fmap.shape
            F = fmap.reshape(h * w, c)
            lb = self.blocks[block][l]
            C = cluster_assign(F, lb.clustering, (h, w))
            out.append(ClusterSet(C, compute_clusters(F, C, lb.norm), view, l))
        return out

    def contextualize_view(self, pyramid: Sequence[Tensor], view: int = 0,
                           blocks: Sequence[int] | None = None) -> list[Tensor]:
        if len(pyramid) != self.levels:
            raise DimensionError(f"expected {self.levels} pyramid levels, got {len(pyramid)}")
        pyramid = list(pyramid)
        for b in (range(len(self.blocks)) if blocks is None else blocks):
            sets = self.cluster_sets(pyramid, view, b)
            shared = concat_levels(sets) if self.cfg.cross_level else None
            new = []
            for l, fmap in enumerate(pyramid):
                h, w, c = fmap.shape
                z = shared if shared is not None else sets[l].z
                out = paca_attend(fmap.reshape(h * w, c), z, self.blocks[b][l].attn)
                new.append(out.reshape(h, w, c))
            pyramid = new
        return pyramid

    def __call__(self, views: Sequence[Sequence[Tensor]], blocks: Sequence[int] | None = None):
        return mvacon_contextualize(views, self, blocks)


def mvacon_contextualize(views: Sequence[Sequence[Tensor]], module: MvACon,
                         blocks: Sequence[int] | None = None) -> list[list[Tensor]]:
    """Contextualize every view's pyramid independently; shapes are preserved."""
    return [module.contextualize_view(pyr, n, blocks) for n, pyr in enumerate(views)]


def dense_attend(F: Tensor, proj: PacaProjections) -> Tensor:
    """Full token-to-token attention with the same projections (quadratic)."""
    heads = proj.heads
    c = F.shape[1]
    q = _split_heads(proj.q(F), heads)
    k = _split_heads(proj.k(F), heads)
    v = _split_heads(proj.v(F), heads)
    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(c // heads))
    ctx = _merge_heads(T.matmul(T.softmax_axis(scores, axis=-1), v))
    return proj.o(ctx) + F


def dense_attend_numpy(F: np.ndarray, Wq, Wk, Wv, Wo, chunk: int = 1024) -> np.ndarray:
    """Single-head quadratic attention in row chunks (benchmark baseline)."""
    c = F.shape[1]
    q = F @ Wq
    k = F @ Wk
    v = F @ Wv
    out = np.empty_like(F)
    scale = 1.0 / math.sqrt(c)
    for lo in range(0, F.shape[0], chunk):
        s = (q[lo:lo + chunk] @ k.T) * scale
        s -= s.max(axis=1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=1, keepdims=True)
        out[lo:lo + chunk] = s @ v
    return out @ Wo + F
