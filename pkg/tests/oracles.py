"""Brute-force reference implementations used by the tests.

Everything here is written with explicit Python loops over plain numpy
arrays and shares no code with the package beyond reading parameter values.
"""

import itertools
import math

import numpy as np


def softmax(x):
    e = np.exp(x - np.max(x))
    return e / e.sum()


def layer_norm_rows(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x)
    for r in range(x.shape[0]):
        mu = sum(x[r]) / x.shape[1]
        var = sum((x[r] - mu) ** 2) / x.shape[1]
        out[r] = (x[r] - mu) / math.sqrt(var + eps) * gamma + beta
    return out


def affine(x, lin):
    y = x @ lin.weight.data
    return y if lin.bias is None else y + lin.bias.data


def conv_same3(grid, weight, bias):
    h, w, _ = grid.shape
    out = np.zeros((h, w, weight.shape[-1]))
    for i in range(h):
        for j in range(w):
            for a in range(3):
                for b in range(3):
                    r, c = i + a - 1, j + b - 1
                    if 0 <= r < h and 0 <= c < w:
                        out[i, j] += grid[r, c] @ weight[a, b]
            if bias is not None:
                out[i, j] += bias
    return out


def assign_oracle(F, clustering, hw=None):
    """Logits by the variant's layers, then a per-column softmax over tokens."""
    if clustering.op == "linear":
        logits = affine(F, clustering.proj)
    elif clustering.op == "mlp":
        logits = affine(np.maximum(affine(F, clustering.mlp.fc1), 0.0), clustering.mlp.fc2)
    else:
        h, w = hw
        conv = clustering.conv
        grid = conv_same3(F.reshape(h, w, -1), conv.weight.data, None if conv.bias is None else conv.bias.data)
        logits = affine(grid.reshape(h * w, -1), clustering.proj)
    C = np.empty_like(logits)
    for m in range(logits.shape[1]):
        C[:, m] = softmax(logits[:, m])
    return C


def clusters_oracle(F, C, norm):
    N, c = F.shape
    M = C.shape[1]
    z = np.zeros((M, c))
    for m in range(M):
        for n in range(N):
            z[m] += C[n, m] * F[n]
    return layer_norm_rows(z, norm.gamma.data, norm.beta.data, norm.eps)


def paca_oracle(F, z, proj):
    """Per-token, per-head attention over the clusters, then projection + shortcut."""
    N, c = F.shape
    heads = proj.heads
    dh = c // heads
    q, k, v = affine(F, proj.q), affine(z, proj.k), affine(z, proj.v)
    ctx = np.zeros((N, c))
    for n in range(N):
        for hd in range(heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            scores = np.array([q[n, sl] @ k[m, sl] / math.sqrt(dh) for m in range(z.shape[0])])
            a = softmax(scores)
            for m in range(z.shape[0]):
                ctx[n, sl] += a[m] * v[m, sl]
    return affine(ctx, proj.o) + F


def bilinear(fmap, u, v):
    h, w, c = fmap.shape
    u0, v0 = math.floor(u), math.floor(v)
    out = np.zeros(c)
    for dv in (0, 1):
        for du in (0, 1):
            r, col = v0 + dv, u0 + du
            if 0 <= r < h and 0 <= col < w:
                wt = (1 - abs(u - col)) * (1 - abs(v - r))
                out += wt * fmap[r, col]
    return out


def deform_oracle(maps, table, offsets, weights):
    """``maps[view][level]`` numpy arrays; offsets ``Q V L P S 2``; weights ``Q V (L P S)``."""
    Q, P, V, L = table.shape
    S = offsets.shape[4]
    c = maps[0][0].shape[2]
    out = np.zeros((Q, V, c))
    hits = np.zeros((Q, V), dtype=bool)
    for q in range(Q):
        for v in range(V):
            for l in range(L):
                for p in range(P):
                    if table.visible[q, p, v, l]:
                        hits[q, v] = True
                    for s in range(S):
                        wt = weights[q, v, (l * P + p) * S + s]
                        if wt == 0.0:
                            continue
                        u = table.u[q, p, v, l] - 0.5 + offsets[q, v, l, p, s, 0]
                        vv = table.v[q, p, v, l] - 0.5 + offsets[q, v, l, p, s, 1]
                        out[q, v] += wt * bilinear(maps[v][l], u, vv)
    return out, hits


def sca_spec_oracle(queries, pos, table, layer):
    V, L, P, S = layer.shape
    Q = queries.shape[0]
    qs = layer_norm_rows(queries, layer.norm.gamma.data, layer.norm.beta.data, layer.norm.eps)
    if pos is not None:
        qs = qs + pos
    offsets = affine(qs, layer.offsets).reshape(Q, V, L, P, S, 2)
    logits = affine(qs, layer.weights).reshape(Q, V, L * P * S)
    weights = np.zeros_like(logits)
    for q in range(Q):
        for v in range(V):
            live = [(l * P + p) * S + s for l in range(L) for p in range(P) for s in range(S)
                    if table.visible[q, p, v, l]]
            if live:
                weights[q, v, live] = softmax(logits[q, v, live])
    return offsets, weights


def sca_oracle(queries, pos, values, table, layer):
    """Enumerate every (view, level, pillar, point) sample of every query."""
    offsets, weights = sca_spec_oracle(queries, pos, table, layer)
    feats, hits = deform_oracle(values, table, offsets, weights)
    out = queries.copy()
    for q in range(queries.shape[0]):
        seen = [v for v in range(hits.shape[1]) if hits[q, v]]
        if not seen:
            continue
        agg = sum(feats[q, v] for v in seen) / len(seen)
        out[q] = queries[q] + affine(agg[None], layer.out)[0]
    return out


def log_softmax(x):
    m = np.max(x)
    return x - m - math.log(np.exp(x - m).sum())


def set_loss_oracle(logits, boxes, gt, assignment, lambda_cls, lambda_box):
    O, K = logits.shape
    target = [K - 1] * O
    for j, i in assignment:
        target[i] = gt[j].label
    cls = sum(-log_softmax(logits[i])[target[i]] for i in range(O)) / O
    box = sum(np.abs(boxes[i] - gt[j].vector()).sum() for j, i in assignment) / max(len(gt), 1)
    return lambda_cls * cls + lambda_box * box


def match_oracle(logits, boxes, gt, lambda_cls, lambda_box):
    """Best loss over every injection of ground truths into queries."""
    best, best_assign = math.inf, None
    for perm in itertools.permutations(range(logits.shape[0]), len(gt)):
        assign = list(enumerate(perm))
        val = set_loss_oracle(logits, boxes, gt, assign, lambda_cls, lambda_box)
        if val < best - 1e-12:
            best, best_assign = val, assign
    return best, best_assign


def cross_attention_oracle(x, tokens, pos, attn):
    """Naive multi-head pre-norm cross-attention with residual."""
    O, c = x.shape
    heads = attn.heads
    dh = c // heads
    xs = layer_norm_rows(x, attn.norm.gamma.data, attn.norm.beta.data, attn.norm.eps)
    keys_in = tokens if pos is None else tokens + pos
    q, k, v = affine(xs, attn.q), affine(keys_in, attn.k), affine(tokens, attn.v)
    ctx = np.zeros((O, c))
    for o in range(O):
        for hd in range(heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            a = softmax(np.array([q[o, sl] @ k[t, sl] / math.sqrt(dh) for t in range(tokens.shape[0])]))
            for t in range(tokens.shape[0]):
                ctx[o, sl] += a[t] * v[t, sl]
    return x + affine(ctx, attn.o)


def ffn_oracle(x, ffn):
    xs = layer_norm_rows(x, ffn.norm.gamma.data, ffn.norm.beta.data, ffn.norm.eps)
    return x + affine(np.maximum(affine(xs, ffn.mlp.fc1), 0.0), ffn.mlp.fc2)
