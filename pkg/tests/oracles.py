"""Loop-level reference implementations used only by the tests."""

import math

import numpy as np


def lrelu(v, slope=0.01):
    return v if v >= 0 else slope * v


def linear(layer, x):
    w, b = layer.weight.value, layer.bias.value
    out = np.zeros((x.shape[0], w.shape[0]))
    for r in range(x.shape[0]):
        for o in range(w.shape[0]):
            out[r, o] = b[o] + sum(w[o, i] * x[r, i] for i in range(w.shape[1]))
    return out


def mlp(m, x):
    h = np.asarray(x, dtype=float)
    for n, layer in enumerate(m.layers):
        h = linear(layer, h)
        if n < len(m.layers) - 1:
            h = np.vectorize(lambda v: lrelu(v, m.slope))(h)
    return h


def attention(x, y, params, bypass=None, mask=None):
    """Per-head, per-query softmax attention written with explicit loops.

    ``bypass`` is an H x nq x nk array added to the scaled scores; ``mask``
    (nq x nk bool) drops keys by giving them -inf scores.
    """
    heads = params.heads
    d = params.head_dim
    q = linear(params.query, x)
    k = linear(params.key, y)
    v = linear(params.value, y)
    nq, nk = x.shape[0], y.shape[0]
    msg = np.zeros((nq, heads * d))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(nq):
            scores = []
            for j in range(nk):
                s = sum(q[i, sl][t] * k[j, sl][t] for t in range(d)) / math.sqrt(d)
                if bypass is not None:
                    s += bypass[h, i, j]
                if mask is not None and not mask[i, j]:
                    s = -math.inf
                scores.append(s)
            top = max(scores)
            w = [math.exp(s - top) for s in scores]
            total = sum(w)
            for j in range(nk):
                msg[i, sl] += (w[j] / total) * v[j, sl]
    merged = linear(params.merge, msg)
    return x + mlp(params.f3, np.concatenate([x, merged], axis=1))


def modulated(raw, lam, beta, slope=0.01):
    heads = len(lam)
    out = np.zeros((heads,) + raw.shape)
    for h in range(heads):
        for idx in np.ndindex(raw.shape):
            out[(h,) + idx] = lrelu(lam[h] * raw[idx] + beta[h], slope)
    return out
