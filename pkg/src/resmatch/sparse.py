"""KNN neighbour mining on bypass scores and neighbourhood-restricted attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, Bypass, _check, modulate, residual_update
from .errors import ConfigError, ShapeError
from .kernel import Tape, Var


@dataclass(frozen=True)
class NeighborIndex:
    indices: np.ndarray  # n_q x k
    source: str = ""

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def knn_mine(scores: np.ndarray, k: int, source: str = "") -> NeighborIndex:
    """Indices of the ``k`` largest scores per row, best first, ties to the lower index."""
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ShapeError("knn_mine expects a 2-D score matrix")
    if not 1 <= k <= scores.shape[1]:
        raise ConfigError(f"k={k} outside [1, {scores.shape[1]}]")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return NeighborIndex(order, source)


def neighbor_budgets(stage: str, k: int) -> tuple[int, int]:
    """(self, cross) neighbour counts before or after the bypass refresh."""
    if k <= 0 or k % 4:
        raise ConfigError(f"k must be a positive multiple of 4, got {k}")
    if stage == "pre_adjust":
        return k, k // 2
    if stage == "post_adjust":
        return k, k // 4
    raise ConfigError(f"unknown stage {stage!r}")


def sparse_attend(
    tape: Tape,
    x: Var,
    y: Var,
    params: AttentionParams,
    bypass: Bypass | None,
    neighbors: NeighborIndex,
    capture: dict | None = None,
) -> Var:
    """Attention of query i restricted to keys ``neighbors.indices[i]``.

    The selection is a constant of the pass; gradients flow through every
    gathered key, value and bypass entry.
    """
    _check(x, y, params)
    idx = neighbors.indices
    n_q, n_k = x.shape[0], y.shape[0]
    if idx.ndim != 2 or idx.shape[0] != n_q:
        raise ShapeError(f"neighbour table {idx.shape} does not match {n_q} queries")
    if idx.size and (idx.min() < 0 or idx.max() >= n_k):
        raise AssertionError("neighbour index out of range")
    heads, d = params.heads, params.head_dim
    q = params.query(tape, x)
    scores = gathered_scores(tape, q, params.key(tape, y), idx, heads)  # H x nq x kk
    scores = tape.scale(scores, 1.0 / math.sqrt(d))
    if bypass is not None:
        if bypass.raw.shape != (n_q, n_k):
            raise ShapeError(f"bypass {bypass.raw.shape} does not match ({n_q}, {n_k})")
        gathered = tape.take_along(bypass.raw, idx, axis=1)  # nq x kk
        scores = tape.add(scores, modulate(tape, gathered, bypass.lam, bypass.beta, bypass.slope))
    weights = tape.softmax(scores)
    if capture is not None:
        capture["weights"] = weights.value
        capture["indices"] = idx
    message = gathered_mix(tape, weights, params.value(tape, y), idx)  # nq x c
    return residual_update(tape, x, message, params)


# ---------------------------------------------------------------------------
# fused gather kernels
#
# The gathered key/value block (nq x kk x c) is never materialised whole;
# queries are processed in chunks of about CHUNK_ELEMS gathered elements so
# the working set stays in cache.  Columns of the n x c projections are
# head-major (head h owns columns h*d .. h*d+d-1).
# ---------------------------------------------------------------------------

CHUNK_ELEMS = 1 << 16


def _chunks(idx: np.ndarray, c: int):
    n_q, kk = idx.shape
    step = max(1, CHUNK_ELEMS // max(kk * c, 1))
    for s in range(0, n_q, step):
        yield s, min(s + step, n_q)


def _sddmm(q: np.ndarray, k: np.ndarray, idx: np.ndarray, heads: int) -> np.ndarray:
    """out[h, i, j] = q[i, head h] . k[idx[i, j], head h]"""
    n_q, kk = idx.shape
    c = q.shape[1]
    d = c // heads
    out = np.empty((heads, n_q, kk), dtype=np.result_type(q, k))
    q4 = q.reshape(n_q, heads, 1, d)
    for s, e in _chunks(idx, c):
        kg = k[idx[s:e]].reshape(e - s, kk, heads, d).transpose(0, 2, 3, 1)  # b x H x d x kk
        out[:, s:e] = np.matmul(q4[s:e], kg)[:, :, 0].transpose(1, 0, 2)
    return out


def _spmm(w: np.ndarray, v: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """out[i, head h] = sum_j w[h, i, j] * v[idx[i, j], head h]"""
    heads, n_q, kk = w.shape
    c = v.shape[1]
    d = c // heads
    out = np.empty((n_q, heads, d), dtype=np.result_type(w, v))
    for s, e in _chunks(idx, c):
        vg = v[idx[s:e]].reshape(e - s, kk, heads, d).transpose(0, 2, 1, 3)  # b x H x kk x d
        out[s:e] = np.matmul(w[:, s:e].transpose(1, 0, 2)[:, :, None, :], vg)[:, :, 0]
    return out.reshape(n_q, c)


def _scatter(a: np.ndarray, b: np.ndarray, idx: np.ndarray, n_k: int) -> np.ndarray:
    """out[m, head h] = sum over idx[i, j] == m of a[h, i, j] * b[i, head h]"""
    heads, n_q, kk = a.shape
    c = b.shape[1]
    d = c // heads
    out = np.zeros((n_k, c), dtype=np.result_type(a, b))
    b4 = b.reshape(n_q, heads, 1, d)
    for s, e in _chunks(idx, c):
        contrib = a[:, s:e].transpose(1, 0, 2)[..., None] * b4[s:e]  # b x H x kk x d
        np.add.at(out, idx[s:e].ravel(), contrib.transpose(0, 2, 1, 3).reshape(-1, c))
    return out


def gathered_scores(tape: Tape, q: Var, k: Var, idx: np.ndarray, heads: int) -> Var:
    """Per-head dot products of each query with its gathered keys: H x nq x kk."""
    qv, kv = q.value, k.value

    def vjp(g):
        return _spmm(g, kv, idx), _scatter(g, qv, idx, kv.shape[0])

    return tape.op(_sddmm(qv, kv, idx, heads), (q, k), vjp)


def gathered_mix(tape: Tape, w: Var, v: Var, idx: np.ndarray) -> Var:
    """Per-head weighted sums of gathered value rows: nq x c."""
    wv, vv = w.value, v.value
    heads = wv.shape[0]

    def vjp(g):
        return _sddmm(g, vv, idx, heads), _scatter(wv, g, idx, vv.shape[0])

    return tape.op(_spmm(wv, vv, idx), (w, v), vjp)


def attention_macs(n_q: int, n_k: int, c: int, k: int | None = None, projections: bool = False) -> int:
    """Multiply-accumulates of one attention layer's score and aggregation steps.

    ``k=None`` counts the dense layer.  ``projections=True`` adds the
    per-point linear maps and f3, which are linear in the point count.
    """
    span = n_k if k is None else k
    macs = 2 * n_q * span * c
    if projections:
        macs += n_q * c * c + 2 * n_k * c * c + n_q * c * c + n_q * (4 * c * c + 2 * c * c)
    return macs
