"""Object-query decoder, box heads and set-matching loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .layers import FeedForward, LayerNorm, Linear
from .lifting import LiftedKeysValues
from .tensor import DimensionError, ParamStore, Tensor

HEAD_DEFAULTS = {
    "queries": 16,
    "layers": 2,
    "classes": 3,
    "lambda_cls": 1.0,
    "lambda_box": 0.25,
}

# center(3) size(3) sin cos vx vz
BOX_DIM = 10


@dataclass
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float] = (0.0, 0.0)
    label: int = 0

    def vector(self) -> np.ndarray:
        """Regression target ``[x, y, z, l, w, h, sin, cos, vx, vz]``."""
        return np.array([*self.center, *self.size, math.sin(self.yaw), math.cos(self.yaw),
                         *self.velocity])

    def to_json(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw,
                "velocity": list(self.velocity), "label": self.label}

    @classmethod
    def from_json(cls, doc: dict) -> "Box":
        return cls(tuple(doc["center"]), tuple(doc["size"]), float(doc["yaw"]),
                   tuple(doc.get("velocity", (0.0, 0.0))), int(doc.get("label", 0)))


@dataclass(eq=False)
class DetectionSet:
    logits: Tensor  # O x (classes + 1); last column is "no object"
    boxes: Tensor  # O x BOX_DIM

    def __len__(self) -> int:
        return self.logits.shape[0]

    @property
    def centers(self) -> np.ndarray:
        return self.boxes.data[:, 0:3]

    @property
    def sizes(self) -> np.ndarray:
        return self.boxes.data[:, 3:6]

    @property
    def yaws(self) -> np.ndarray:
        return np.arctan2(self.boxes.data[:, 6], self.boxes.data[:, 7])

    @property
    def velocities(self) -> np.ndarray:
        return self.boxes.data[:, 8:10]

    def labels(self) -> np.ndarray:
        return self.logits.data.argmax(axis=1)


class CrossAttention:
    def __init__(self, store: ParamStore, name: str, c: int, heads: int):
        self.heads = heads
        self.norm = LayerNorm(store, f"{name}.norm", c)
        self.q = Linear(store, f"{name}.q", c, c)
        self.k = Linear(store, f"{name}.k", c, c, bias=False)
        self.v = Linear(store, f"{name}.v", c, c)
        self.o = Linear(store, f"{name}.o", c, c)

    def zero_value_path(self) -> None:
        self.v.zero_()
        self.o.zero_()

    def weights(self, queries: Tensor, keys: Tensor) -> Tensor:
        O, c = queries.shape
        K = keys.shape[0]
        dh = c // self.heads
        q = T.transpose(self.q(self.norm(queries)).reshape(O, self.heads, dh), (1, 0, 2))
        k = T.transpose(self.k(keys).reshape(K, self.heads, dh), (1, 2, 0))
        return T.softmax_axis(T.matmul(q, k) * (1.0 / math.sqrt(dh)), axis=-1)

    def __call__(self, queries: Tensor, kv: LiftedKeysValues) -> Tensor:
        tokens = kv.tokens
        keys = tokens if kv.pos is None else tokens + kv.pos
        attn = self.weights(queries, keys)
        K, c = tokens.shape
        v = T.transpose(self.v(tokens).reshape(K, self.heads, c // self.heads), (1, 0, 2))
        ctx = T.transpose(T.matmul(attn, v), (1, 0, 2)).reshape(queries.shape[0], c)
        return queries + self.o(ctx)


class Decoder:
    def __init__(self, store: ParamStore, name: str, queries: int, c: int, layers: int,
                 heads: int = 2):
        if c % heads:
            raise DimensionError("decoder heads must divide the width")
        self.queries = store.create(f"{name}.queries", (queries, c), fan_in=c)
        self.attn = [CrossAttention(store, f"{name}.attn{i}", c, heads) for i in range(layers)]
        self.ffn = [FeedForward(store, f"{name}.ffn{i}", c) for i in range(layers)]

    def zero_value_paths(self) -> None:
        for a, f in zip(self.attn, self.ffn):
            a.zero_value_path()
            f.zero_()


def decode(decoder: Decoder, kv: LiftedKeysValues, queries: Tensor | None = None) -> Tensor:
    """Refine the object queries with stacked residual cross-attention + FFN."""
    if len(kv) == 0:
        raise DimensionError("no keys/values to attend to")
    x = decoder.queries if queries is None else queries
    for attn, ffn in zip(decoder.attn, decoder.ffn):
        x = ffn(attn(x, kv))
    return x


class BoxHeads:
    """Classification and box regression heads.

    ``velocity_inputs`` is 2 when the velocity head reads the concatenated
    decoded states of two frames.
    """

    def __init__(self, store: ParamStore, name: str, queries: int, c: int, classes: int,
                 reference_init: np.ndarray | None = None, velocity_inputs: int = 1):
        self.classes = classes
        self.cls = Linear(store, f"{name}.cls", c, classes + 1)
        self.center = Linear(store, f"{name}.center", c, 3)
        self.size = Linear(store, f"{name}.size", c, 3)
        self.yaw = Linear(store, f"{name}.yaw", c, 2)
        self.vel = Linear(store, f"{name}.vel", velocity_inputs * c, 2)
        self.reference = store.create(f"{name}.reference", (queries, 3), "zeros")
        if reference_init is not None:
            self.reference.data[...] = reference_init

    def zero_(self) -> None:
        for lin in (self.cls, self.center, self.size, self.yaw, self.vel):
            lin.zero_()


def predict(decoded: Tensor, heads: BoxHeads, second: Tensor | None = None,
            yaw_eps: float = 1e-12) -> DetectionSet:
    logits = heads.cls(decoded)
    center = heads.reference + heads.center(decoded)
    size = T.softplus(heads.size(decoded))
    sc = heads.yaw(decoded)
    norm = T.sqrt(T.tsum(T.mul(sc, sc), axis=1, keepdims=True) + yaw_eps)
    sc = T.div(sc, norm)
    vel_in = decoded if second is None else T.concat([decoded, second], axis=1)
    vel = heads.vel(vel_in)
    return DetectionSet(logits, T.concat([center, size, sc, vel], axis=1))


@dataclass
class MatchResult:
    loss: Tensor
    assignment: list[tuple[int, int]]  # (gt index, query index)
    cls_loss: float
    box_loss: float


def pair_costs(pred: DetectionSet, gt: list[Box], lambda_cls: float, lambda_box: float) -> np.ndarray:
    """Loss change from matching gt ``j`` to query ``i`` instead of "no object"."""
    O = len(pred)
    G = len(gt)
    logp = pred.logits.data - pred.logits.data.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    none = pred.logits.shape[1] - 1
    targets = np.stack([b.vector() for b in gt]) if G else np.zeros((0, BOX_DIM))
    labels = np.array([b.label for b in gt], dtype=int)
    cls = -logp[:, labels] + logp[:, none][:, None]  # O x G
    l1 = np.abs(pred.boxes.data[:, None, :] - targets[None]).sum(axis=-1)
    return (lambda_cls * cls / O + lambda_box * l1 / max(G, 1)).T  # G x O


def set_loss(pred: DetectionSet, gt: list[Box], assignment: list[tuple[int, int]],
             lambda_cls: float, lambda_box: float) -> tuple[Tensor, Tensor, Tensor]:
    """Total loss for a fixed assignment, plus its class and box terms."""
    O = len(pred)
    none = pred.logits.shape[1] - 1
    target_cls = np.full(O, none, dtype=int)
    for j, i in assignment:
        target_cls[i] = gt[j].label
    cls = T.mean(T.cross_entropy(pred.logits, target_cls))
    if assignment:
        qi = np.array([i for _, i in assignment])
        tgt = np.stack([gt[j].vector() for j, _ in assignment])
        diff = T.tabs(T.sub(T.take_rows(pred.boxes, qi), tgt))
        box = T.tsum(diff) * (1.0 / max(len(gt), 1))
    else:
        box = Tensor(0.0)
    return T.add(T.mul(cls, lambda_cls), T.mul(box, lambda_box)), cls, box


def match_and_loss(pred: DetectionSet, gt: list[Box], lambda_cls: float = 1.0,
                   lambda_box: float = 0.25) -> MatchResult:
    """Optimal one-to-one matching, then cross-entropy + L1 set loss.

    Unmatched queries are trained towards "no object".  The assignment
    minimizes exactly the returned loss.
    """
    if len(gt) > len(pred):
        raise DimensionError(f"{len(gt)} ground-truth boxes exceed {len(pred)} queries")
    assignment: list[tuple[int, int]] = []
    if gt:
        rows, cols = linear_sum_assignment(pair_costs(pred, gt, lambda_cls, lambda_box))
        assignment = [(int(j), int(i)) for j, i in zip(rows, cols)]
    loss, cls, box = set_loss(pred, gt, assignment, lambda_cls, lambda_box)
    return MatchResult(loss, assignment, cls.item(), box.item())
