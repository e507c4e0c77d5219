"""Registry of differentiable computations checked by central differences.

Each entry builds a tiny, seeded instance and returns ``(f, params)`` where
``f()`` is a scalar Tensor.  Scalars are random projections of the output so
that no gradient coordinate is structurally tiny.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .bev import build_bev_grid, project_anchors
from .cluster import ClusterConfig, Clustering, MvACon, PacaProjections, cluster_assign, compute_clusters, paca_attend
from .config import make_config
from .geometry import frustum_volume
from .head import Box, BoxHeads, Decoder, decode, match_and_loss, predict
from .layers import LayerNorm
from .lifting import (BevEncoder, CrossAttentionLayer, LiftedKeysValues, PetrLift, bev_encoder,
                      deformable_sample, petr_lift)
from .scene import ToyBackbone, generate_scene, render, toy_backbone
from .tensor import Param, ParamStore, Tensor, grad_check

TOLERANCE = 1e-4
STEP = 1e-6

Builder = Callable[[], tuple[Callable[[], Tensor], list[Tensor]]]
REGISTRY: dict[str, Builder] = {}


def register(name: str):
    def deco(fn: Builder) -> Builder:
        REGISTRY[name] = fn
        return fn
    return deco


def _rng(name: str) -> np.random.Generator:
    return np.random.default_rng(sum(map(ord, name)))


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _probe(rng, out: Tensor) -> Callable[[Tensor], Tensor]:
    w = rng.normal(size=out.shape)
    return lambda y: T.tsum(T.mul(y, w))


def _scalar(rng, g: Callable[[], Tensor]) -> Callable[[], Tensor]:
    probe = _probe(rng, g())
    return lambda: probe(g())


# -- tensor core ---------------------------------------------------------------
@register("matmul")
def _():
    rng = _rng("matmul")
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    return _scalar(rng, lambda: T.matmul(a, b)), [a, b]


@register("softmax_axis")
def _():
    rng = _rng("softmax")
    x = _leaf(rng, 4, 5)
    return _scalar(rng, lambda: T.softmax_axis(x, axis=0)), [x]


@register("masked_softmax")
def _():
    rng = _rng("masked_softmax")
    x = _leaf(rng, 4, 6)
    mask = rng.uniform(size=(4, 6)) > 0.4
    return _scalar(rng, lambda: T.masked_softmax(x, mask, axis=1)), [x]


@register("layer_norm")
def _():
    rng = _rng("layer_norm")
    x, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    return _scalar(rng, lambda: T.layer_norm(x, g, b, 1e-5)), [x, g, b]


@register("bilinear_sample")
def _():
    rng = _rng("bilinear")
    fmap = _leaf(rng, 5, 6, 3)
    u = Tensor(rng.uniform(-0.7, 6.2, size=12), requires_grad=True)
    v = Tensor(rng.uniform(-0.7, 5.2, size=12), requires_grad=True)
    return _scalar(rng, lambda: T.bilinear_sample_points(fmap, u, v)), [fmap, u, v]


@register("conv2d")
def _():
    rng = _rng("conv2d")
    x, w, b = _leaf(rng, 6, 5, 3), _leaf(rng, 3, 3, 3, 4, scale=0.5), _leaf(rng, 4)
    return _scalar(rng, lambda: T.conv2d(x, w, b, stride=2, pad=1)), [x, w, b]


@register("elementwise")
def _():
    rng = _rng("elementwise")
    x = _leaf(rng, 7)
    y = Tensor(rng.uniform(0.5, 2.0, size=7), requires_grad=True)

    def g():
        return T.softplus(x) * T.sqrt(y) + T.exp(x * 0.3) / y + T.log(y) + T.relu(x) + T.tabs(x)

    return _scalar(rng, g), [x, y]


@register("cross_entropy")
def _():
    rng = _rng("cross_entropy")
    x = _leaf(rng, 5, 4)
    target = rng.integers(0, 4, size=5)
    return lambda: T.tsum(T.cross_entropy(x, target)), [x]


# -- cluster attention -----------------------------------------------------------
def _clustering_case(op: str):
    rng = _rng("cluster_" + op)
    store = ParamStore(3)
    h, w, c, M = 3, 4, 6, 4
    clus = Clustering(store, "c", c, M, op)
    norm = LayerNorm(store, "n", c)
    norm.gamma.data[...] = rng.uniform(0.5, 1.5, size=c)
    norm.beta.data[...] = rng.normal(size=c)
    F = _leaf(rng, h * w, c)

    def g():
        C = cluster_assign(F, clus, (h, w))
        return compute_clusters(F, C, norm)

    return _scalar(rng, g), [F, *store]


for _op in ("linear", "mlp", "conv"):
    register(f"clusters_{_op}")(lambda op=_op: _clustering_case(op))


@register("paca_attend")
def _():
    rng = _rng("paca")
    store = ParamStore(4)
    proj = PacaProjections(store, "p", 6, 2)
    for p in store:
        p.data[...] = rng.normal(scale=0.5, size=p.shape)
    F, z = _leaf(rng, 7, 6), _leaf(rng, 3, 6)
    return _scalar(rng, lambda: paca_attend(F, z, proj)), [F, z, *store]


@register("mvacon_contextualize")
def _():
    rng = _rng("mvacon")
    store = ParamStore(5)
    cfg = ClusterConfig(clusters=3, heads=2, clustering_op="conv", cross_level=True, layers=2)
    mv = MvACon(store, "m", 4, 2, cfg)
    for p in store:
        p.data[...] = rng.normal(scale=0.3, size=p.shape)
    views = [[_leaf(rng, 4, 4, 4), _leaf(rng, 2, 2, 4)] for _ in range(2)]
    leaves = [m for pyr in views for m in pyr]

    def g():
        return T.concat([m.reshape(-1) for pyr in mv(views) for m in pyr])

    return _scalar(rng, g), leaves + list(store)


# -- lifting ---------------------------------------------------------------------
def _tiny_rig(image=(32, 32), views=2):
    cfg = make_config({"scene": {"cameras": views, "image_size": list(image), "objects": 0}})
    return generate_scene(cfg["scene"]).rig


@register("petr_lift")
def _():
    rng = _rng("petr")
    rig = _tiny_rig()
    store = ParamStore(6)
    lift = PetrLift(store, "p", 4, 6, 2)
    srange = type(rig.range)(rig.range.x, rig.range.y, rig.range.z, rig.range.depth, 2)
    vols = [frustum_volume(cam, 3, 4, srange) for cam in rig]
    maps = [_leaf(rng, 3, 4, 4) for _ in rig]
    return _scalar(rng, lambda: petr_lift(maps, vols, lift).tokens), maps + list(store)


def _bev_case(seed_name: str):
    rng = _rng(seed_name)
    rig = _tiny_rig()
    grid = build_bev_grid({"nx": 4, "nz": 4, "pillar_count": 2, "x_bounds": [-6, 6], "z_bounds": [-6, 6]})
    levels = [(8, 8), (4, 4)]
    table = project_anchors(grid, rig, levels)
    return rng, rig, grid, levels, table


@register("deformable_sample")
def _():
    rng, rig, grid, levels, table = _bev_case("deform")
    store = ParamStore(7)
    layer = CrossAttentionLayer(store, "s", 4, len(rig), len(levels), grid.pillar_count, 2)
    layer.offsets.weight.data[...] = rng.normal(scale=0.3, size=layer.offsets.weight.shape)
    layer.offsets.bias.data[...] = rng.normal(scale=0.7, size=layer.offsets.bias.shape)
    q = _leaf(rng, grid.cells, 4)
    maps = [[_leaf(rng, h, w, 4) for h, w in levels] for _ in rig]
    leaves = [m for pyr in maps for m in pyr]
    return _scalar(rng, lambda: deformable_sample(maps, table, layer.spec(q, None, table))[0]), \
        [q] + leaves + list(store)


def _encoder(rng, rig, grid, levels, mvacon=True):
    store = ParamStore(8)
    mv = None
    if mvacon:
        mv = MvACon(store, "m", 4, len(levels), ClusterConfig(clusters=3, heads=2, layers=1))
    enc = BevEncoder(store, "e", grid.cells, 4, len(rig), len(levels), grid.pillar_count, 2, 2, mv)
    for p in store:
        scale = 0.3 if p.name.endswith("offsets.weight") else 0.5
        p.data[...] = rng.normal(scale=scale, size=p.shape)
    return store, enc


@register("bev_encoder")
def _():
    rng, rig, grid, levels, table = _bev_case("bev_encoder")
    store, enc = _encoder(rng, rig, grid, levels)
    maps = [[_leaf(rng, h, w, 4) for h, w in levels] for _ in rig]
    leaves = [m for pyr in maps for m in pyr]
    return _scalar(rng, lambda: bev_encoder(maps, table, enc).tokens), leaves + list(store)


# -- head --------------------------------------------------------------------------
def _random_store(rng, store, scale=0.5):
    for p in store:
        p.data[...] = rng.normal(scale=scale, size=p.shape)


@register("decoder")
def _():
    rng = _rng("decoder")
    store = ParamStore(9)
    dec = Decoder(store, "d", 5, 4, 2, heads=2)
    _random_store(rng, store)
    tokens, pos = _leaf(rng, 9, 4), _leaf(rng, 9, 4)
    return _scalar(rng, lambda: decode(dec, LiftedKeysValues(tokens, pos))), [tokens, pos, *store]


@register("predict")
def _():
    rng = _rng("predict")
    store = ParamStore(10)
    heads = BoxHeads(store, "h", 5, 4, 3, velocity_inputs=2)
    _random_store(rng, store)
    x, x2 = _leaf(rng, 5, 4), _leaf(rng, 5, 4)

    def g():
        d = predict(x, heads, x2)
        return T.concat([d.logits, d.boxes], axis=1)

    return _scalar(rng, g), [x, x2, *store]


def random_boxes(rng, n: int, classes: int = 3) -> list[Box]:
    return [Box(tuple(rng.normal(size=3)), tuple(rng.uniform(0.5, 2.0, size=3)),
                float(rng.uniform(-np.pi, np.pi)), tuple(rng.normal(size=2)),
                int(rng.integers(classes))) for _ in range(n)]


@register("match_and_loss")
def _():
    rng = _rng("match")
    store = ParamStore(11)
    heads = BoxHeads(store, "h", 5, 4, 3)
    _random_store(rng, store)
    x = _leaf(rng, 5, 4)
    gt = random_boxes(rng, 3)
    return lambda: match_and_loss(predict(x, heads), gt).loss, [x, *store]


@register("toy_backbone")
def _():
    rng = _rng("backbone")
    store = ParamStore(12)
    bb = ToyBackbone(store, "b", 4, (4, 8))
    _random_store(rng, store, 0.3)
    img = _leaf(rng, 16, 16, 3)

    def g():
        pyr = toy_backbone([img], bb)[0]
        return T.concat([m.reshape(-1) for m in pyr])

    return _scalar(rng, g), [img, *store]


def tiny_config(mode: str) -> dict:
    return make_config({
        "scene": {"cameras": 2, "image_size": [16, 16], "objects": 2},
        "model": {"channels": 4, "strides": [4, 8],
                  "mvacon": {"clusters": 3, "heads": 2, "layers": 1},
                  "lift": {"mode": mode, "layers": 2, "sample_points": 2, "d": 4, "D": 2},
                  "head": {"queries": 4, "layers": 1},
                  "bev": {"nx": 4, "nz": 4, "pillar_count": 2}},
    })


def _end_to_end(mode: str):
    from .model import Detector

    rng = _rng("e2e_" + mode)
    cfg = tiny_config(mode)
    scene = generate_scene(cfg["scene"])
    views = render(scene)
    nxt = render(scene.advance(0.5))
    det = Detector(cfg, scene.rig)
    # move off the zero-initialized residual paths and ReLU kinks at zero bias
    for p in det.store:
        scale = 0.3 if p.name.endswith("offsets.weight") else 0.1
        p.data += rng.normal(scale=scale, size=p.shape)
    gt = scene.boxes
    return lambda: match_and_loss(det.forward(views.images, nxt.images).detections, gt).loss, det.params


for _mode in ("petr", "bevformer"):
    register(f"end_to_end_{_mode}")(lambda mode=_mode: _end_to_end(mode))

# Entries whose parameter count is large enough to warrant coordinate sampling.
SAMPLED = {"end_to_end_petr": 50, "end_to_end_bevformer": 50}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    coords: int | None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_gradchecks(registry: dict[str, Builder] | None = None, names=None,
                   corrupt: set[str] | None = None, h: float = STEP) -> list[CheckResult]:
    """Run every registered check; ``corrupt`` names get a doubled analytic gradient."""
    registry = REGISTRY if registry is None else registry
    if not registry:
        raise ValueError("gradient-check registry is empty")
    results = []
    for name, build in registry.items():
        if names is not None and name not in names:
            continue
        f, params = build()
        analytic = None
        if corrupt and name in corrupt:
            for p in params:
                p.grad = None
                p.requires_grad = True
            f().backward()
            analytic = {id(p): 2.0 * (p.grad if p.grad is not None else np.zeros(p.shape)) for p in params}
        coords = SAMPLED.get(name)
        err = grad_check(f, params, h=h, max_coords=coords, analytic=analytic)
        results.append(CheckResult(name, err, coords))
    return results
