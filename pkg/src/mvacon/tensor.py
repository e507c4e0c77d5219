"""Dense float64 tensors with a reverse-mode tape.

Every value is a :class:`Tensor` wrapping a numpy array.  Operations record
a backward closure on the result; :meth:`Tensor.backward` walks the graph in
reverse topological order from a scalar root.  Only first-order gradients
are supported.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class EvaluationError(ArithmeticError):
    """Raised when a computation produces a non-finite value."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autograd -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar root")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise EvaluationError("operation produced a non-finite value")
    out = Tensor(data)
    if _GRAD_ENABLED:
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return ((a, _unbroadcast(g, a.shape) if a.requires_grad else None),
                (b, _unbroadcast(g, b.shape) if b.requires_grad else None))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return ((a, _unbroadcast(g, a.shape) if a.requires_grad else None),
                (b, _unbroadcast(-g, b.shape) if b.requires_grad else None))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        return ((a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
                (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _make(out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: ((x, g * mask),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: ((x, g * out),))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: ((x, g / x.data),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: ((x, g * 0.5 / out),))


def tabs(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: ((x, g * np.sign(x.data)),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: ((x, g * sig),))


# -- shape ------------------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: ((x, g.reshape(x.shape)),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: ((x, np.transpose(g, inv)),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat of an empty list")
    axis = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != axis
        ):
            raise DimensionError(f"concat shape mismatch {xs[0].shape} vs {x.shape}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        res = []
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            res.append((x, g[tuple(sl)] if x.requires_grad else None))
        return res

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis=axis)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    basic = all(isinstance(i, (int, slice, type(Ellipsis), type(None)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return ((x, full),)

    return _make(np.array(out, copy=True), (x,), bw)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather along axis 0 with an integer index array of any shape."""
    index = np.asarray(index, dtype=np.int64)
    out = x.data[index]
    rest = x.shape[1:]
    width = int(np.prod(rest)) if rest else 1

    def bw(g):
        flat = g.reshape(-1, width)
        idx = index.reshape(-1)
        full = np.empty((x.shape[0], width))
        for j in range(width):
            full[:, j] = np.bincount(idx, weights=flat[:, j], minlength=x.shape[0])
        return ((x, full.reshape(x.shape)),)

    return _make(out, (x,), bw)


# -- reductions -------------------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g, x.shape).copy()),)

    return _make(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes batch)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] and a.ndim > 2 and b.ndim > 2:
        raise DimensionError(f"matmul batch mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ((a, ga), (b, gb))

    return _make(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``x`` may have any rank >= 1."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, lead + (weight.shape[-1],))


# -- normalizations ---------------------------------------------------------
def softmax_axis(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or axis >= x.ndim or axis < -x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((x, out * (g - (g * out).sum(axis=axis, keepdims=True))),)

    return _make(out, (x,), bw)


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to ``mask``; slices with no live entry become all zero."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    filled = np.where(mask, x.data, -np.inf)
    top = filled.max(axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x.data - top, 0.0)), 0.0)
    den = e.sum(axis=axis, keepdims=True)
    out = e / np.where(den > 0, den, 1.0)

    def bw(g):
        return ((x, out * (g - (g * out).sum(axis=axis, keepdims=True))),)

    return _make(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return ((x, g - soft * g.sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply ``gamma * xhat + beta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[-1] if x.ndim else 0
    if c == 0:
        raise DimensionError("layer_norm over an empty channel axis")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"affine shape {gamma.shape}/{beta.shape} != ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, c).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, c).sum(axis=0)
        return ((x, gx), (gamma, gg), (beta, gb))

    return _make(out, (x, gamma, beta), bw)


# -- convolution ------------------------------------------------------------
def _im2col_index(h: int, w: int, k: int, stride: int, pad: int):
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} too large for {h}x{w} input")
    rows = (np.arange(ho) * stride)[:, None, None, None] + np.arange(k)[None, None, :, None]
    cols = (np.arange(wo) * stride)[None, :, None, None] + np.arange(k)[None, None, None, :]
    return ho, wo, rows, cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of an ``h x w x cin`` map with ``k x k x cin x cout``."""
    h, w, cin = x.shape
    k, k2, wcin, cout = weight.shape
    if k != k2 or wcin != cin:
        raise DimensionError(f"conv weight {weight.shape} incompatible with input {x.shape}")
    ho, wo, rows, cols = _im2col_index(h, w, k, stride, pad)
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    patches = xp[rows, cols]  # ho, wo, k, k, cin
    flat = patches.reshape(ho * wo, k * k * cin)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = flat @ wmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(ho, wo, cout)

    def bw(g):
        g2 = g.reshape(ho * wo, cout)
        gx = gw = gb = None
        if x.requires_grad:
            gpatch = (g2 @ wmat.T).reshape(ho, wo, k, k, cin)
            gxp = np.zeros_like(xp)
            np.add.at(gxp, (rows, cols), gpatch)
            gx = gxp[pad:pad + h, pad:pad + w] if pad else gxp
        if weight.requires_grad:
            gw = (flat.T @ g2).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return ((x, gx), (weight, gw)) + (((bias, gb),) if bias is not None else ())

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, parents, bw)


# -- bilinear sampling ------------------------------------------------------
def _bilinear_operators(h, w, start, rows: int, u: np.ndarray, v: np.ndarray):
    """Sparse ``K x rows`` interpolation matrix and its ``u``/``v`` derivatives.

    ``h``, ``w`` and ``start`` (first table row of the map) may be scalars or
    per-point arrays, so one operator can address several stacked maps.
    """
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = u - u0
    fv = v - v0
    u0 = u0.astype(np.int64)
    v0 = v0.astype(np.int64)
    K = u.size
    idx = np.empty((K, 4), dtype=np.int64)
    wt = np.empty((K, 4))
    du = np.empty((K, 4))
    dv = np.empty((K, 4))
    for j, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        cu = u0 + dx
        cv = v0 + dy
        valid = (cu >= 0) & (cu < w) & (cv >= 0) & (cv < h)
        wu = fu if dx else 1.0 - fu
        wv = fv if dy else 1.0 - fv
        idx[:, j] = np.where(valid, start + cv * w + cu, 0)
        wt[:, j] = wu * wv * valid
        du[:, j] = (1.0 if dx else -1.0) * wv * valid
        dv[:, j] = (1.0 if dy else -1.0) * wu * valid
    indptr = np.arange(0, 4 * K + 1, 4)
    cols = idx.reshape(-1)

    def mat(vals):
        return sparse.csr_matrix((vals.reshape(-1), cols, indptr), shape=(K, rows))

    return mat(wt), mat(du), mat(dv)


def _sample_table(table: Tensor, h, w, start, u: Tensor, v: Tensor) -> Tensor:
    if u.shape != v.shape:
        raise DimensionError(f"u {u.shape} and v {v.shape} differ")
    rows, c = table.shape
    # far out-of-bounds coordinates sample zeros either way; clipping keeps the
    # integer arithmetic bounded
    ud = np.clip(u.data.reshape(-1), -2.0, np.reshape(w, -1) + 1.0)
    vd = np.clip(v.data.reshape(-1), -2.0, np.reshape(h, -1) + 1.0)
    S, Su, Sv = _bilinear_operators(h, w, start, rows, ud, vd)
    out = (S @ table.data).reshape(u.shape + (c,))

    def bw(g):
        g2 = g.reshape(-1, c)
        gt = gu = gv = None
        if table.requires_grad:
            gt = np.asarray(S.T @ g2)
        if u.requires_grad:
            gu = ((Su @ table.data) * g2).sum(axis=1).reshape(u.shape)
        if v.requires_grad:
            gv = ((Sv @ table.data) * g2).sum(axis=1).reshape(v.shape)
        return ((table, gt), (u, gu), (v, gv))

    return _make(out, (table, u, v), bw)


def bilinear_sample_points(fmap: Tensor, u, v) -> Tensor:
    """Sample an ``h x w x c`` map at many continuous pixel coordinates.

    Pixel ``(row, col)`` sits at integer ``(v, u) = (row, col)``.  Neighbors
    outside the map contribute zero.  Differentiable in the map and in
    ``u``/``v`` (which may be Tensors or arrays of identical shape).
    """
    h, w, c = fmap.shape
    return _sample_table(reshape(fmap, (h * w, c)), h, w, 0, as_tensor(u), as_tensor(v))


def bilinear_sample_maps(fmaps: Sequence[Tensor], map_index, u, v) -> Tensor:
    """Sample several maps in one operation; ``map_index`` picks the map per point.

    All maps share the channel width.  Equivalent to calling
    :func:`bilinear_sample_points` per map and scattering the results.
    """
    fmaps = list(fmaps)
    shapes = np.array([m.shape[:2] for m in fmaps], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(shapes[:, 0] * shapes[:, 1])[:-1]])
    c = fmaps[0].shape[-1]
    if any(m.shape[-1] != c for m in fmaps):
        raise DimensionError("maps disagree on channel width")
    table = concat([reshape(m, (m.shape[0] * m.shape[1], c)) for m in fmaps], axis=0)
    mi = np.broadcast_to(np.asarray(map_index, dtype=np.int64), as_tensor(u).shape).reshape(-1)
    return _sample_table(table, shapes[mi, 0], shapes[mi, 1], starts[mi], as_tensor(u), as_tensor(v))


def bilinear_sample(fmap: Tensor, u, v) -> Tensor:
    """Sample one location; returns a length-``c`` tensor."""
    ut = as_tensor(u).reshape((1,))
    vt = as_tensor(v).reshape((1,))
    return reshape(bilinear_sample_points(fmap, ut, vt), (fmap.shape[-1],))


# -- losses -----------------------------------------------------------------
def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-row cross-entropy; returns a vector of length ``rows``."""
    target = np.asarray(target, dtype=np.int64)
    lsm = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(target)), target] = 1.0
    return mul(tsum(mul(lsm, onehot), axis=-1), -1.0)


# -- parameters -------------------------------------------------------------
INIT_SCHEMES = ("uniform-fan-in", "zeros", "ones")


class Param(Tensor):
    """A named leaf tensor that receives gradients."""

    __slots__ = ("init_scheme",)

    def __init__(self, data, name: str, init_scheme: str):
        super().__init__(data, requires_grad=True, name=name)
        self.init_scheme = init_scheme


class ParamStore:
    """Deterministic, name-unique parameter registry.

    Parameters are drawn in creation order from one seeded generator, so a
    model built twice with the same seed is bit-identical.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Param] = {}

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def create(self, name: str, shape: Sequence[int], init: str = "uniform-fan-in",
               fan_in: int | None = None) -> Param:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "uniform-fan-in":
            if fan_in is None:
                fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            data = self.rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown init scheme {init!r}")
        p = Param(data, name=name, init_scheme=init)
        self.params[name] = p
        return p

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


# -- finite-difference verification ----------------------------------------
def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-6,
               max_coords: int | None = None, seed: int = 0,
               analytic: dict[int, np.ndarray] | None = None) -> float:
    """Compare reverse-mode gradients with central differences.

    Returns the largest ``|a - n| / max(|a|, |n|, 1e-8)`` over the checked
    coordinates.  ``max_coords`` samples that many coordinates uniformly
    across all parameters; ``analytic`` overrides the tape gradient for a
    parameter (keyed by ``id``), which lets callers plant a faulty gradient.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    for p in params:
        p.grad = None
        p.requires_grad = True
    root = f()
    if root.size != 1:
        raise DimensionError("grad_check needs a scalar-valued computation")
    if not np.all(np.isfinite(root.data)):
        raise EvaluationError("non-finite value from f")
    root.backward()
    grads = []
    for p in params:
        if analytic is not None and id(p) in analytic:
            grads.append(np.asarray(analytic[id(p)], dtype=np.float64))
        else:
            grads.append(np.zeros(p.shape) if p.grad is None else p.grad.copy())

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            arr = params[i].data
            orig = arr.flat[j]
            arr.flat[j] = orig + h
            fp = f().item()
            arr.flat[j] = orig - h
            fm = f().item()
            arr.flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise EvaluationError("non-finite value from f during perturbation")
            num = (fp - fm) / (2.0 * h)
            ana = grads[i].reshape(-1)[j]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, rel)
    for p in params:
        p.grad = None
    return worst
