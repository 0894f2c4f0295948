"""Dense multi-head attention update ``x + f3(x || merge(softmax(QK^T/sqrt(d) + bypass) V))``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .kernel import DEFAULT_SLOPE, Linear, Mlp, Param, Tape, Var


@dataclass
class AttentionParams:
    """Projections for all heads stacked along the output axis.

    ``query``/``key``/``value`` map c -> c; head h owns output rows
    ``h*c/H:(h+1)*c/H``, which is the same as H separate c -> c/H layers.
    """

    query: Linear
    key: Linear
    value: Linear
    merge: Linear
    f3: Mlp
    heads: int

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, heads: int, slope: float = DEFAULT_SLOPE, name: str = "attn"):
        if c % heads:
            raise ShapeError(f"heads ({heads}) must divide channels ({c})")
        return cls(
            query=Linear.init(rng, c, c, name=f"{name}.q"),
            key=Linear.init(rng, c, c, name=f"{name}.k"),
            value=Linear.init(rng, c, c, name=f"{name}.v"),
            merge=Linear.init(rng, c, c, name=f"{name}.merge"),
            f3=Mlp.init(rng, [2 * c, 2 * c, c], slope, name=f"{name}.f3"),
            heads=heads,
        )

    @property
    def channels(self) -> int:
        return self.query.in_dim

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    def params(self) -> dict[str, Param]:
        out: dict[str, Param] = {}
        for part in (self.query, self.key, self.value, self.merge, self.f3):
            out.update(part.params())
        return out


@dataclass
class Bypass:
    """A raw bypass score with its per-head affine modulation.

    ``lrelu(lam_h * raw + beta_h)`` is broadcast to head h.  Keeping the raw
    matrix lets the sparse path gather first and modulate only k entries.
    """

    raw: Var  # n_q x n_k
    lam: Var  # (H,)
    beta: Var  # (H,)
    slope: float = DEFAULT_SLOPE

    def dense(self, tape: Tape) -> Var:
        return modulate(tape, self.raw, self.lam, self.beta, self.slope)


def modulate(tape: Tape, s: Var, lam: Var, beta: Var, slope: float = DEFAULT_SLOPE) -> Var:
    """Per-head ``lrelu(lam * s + beta)``; output shape ``(H,) + s.shape``."""
    heads = lam.shape[0]
    ones = (1,) * s.value.ndim
    lam_b = tape.reshape(lam, (heads,) + ones)
    beta_b = tape.reshape(beta, (heads,) + ones)
    s_b = tape.reshape(s, (1,) + s.shape)
    return tape.lrelu(tape.add(tape.mul(lam_b, s_b), beta_b), slope)


def split_heads(tape: Tape, x: Var, heads: int) -> Var:
    """n x c -> H x n x c/H"""
    n, c = x.shape
    return tape.transpose(tape.reshape(x, (n, heads, c // heads)), (1, 0, 2))


def merge_heads(tape: Tape, x: Var) -> Var:
    """H x n x d -> n x H*d"""
    heads, n, d = x.shape
    return tape.reshape(tape.transpose(x, (1, 0, 2)), (n, heads * d))


def _check(x: Var, y: Var, params: AttentionParams) -> None:
    c = params.channels
    if x.value.ndim != 2 or y.value.ndim != 2 or x.shape[1] != c or y.shape[1] != c:
        raise ShapeError(f"attention inputs {x.shape}, {y.shape} must be n x {c}")


def residual_update(tape: Tape, x: Var, message: Var, params: AttentionParams) -> Var:
    """``x + f3(x || merge(message))`` with message already n x c."""
    merged = params.merge(tape, message)
    return tape.add(x, params.f3(tape, tape.concat([x, merged], axis=1)))


def attend(
    tape: Tape,
    x: Var,
    y: Var,
    params: AttentionParams,
    bypass: Bypass | Var | None = None,
    capture: dict | None = None,
) -> Var:
    """Full attention of queries ``x`` over keys/values ``y``.

    ``bypass`` is either a :class:`Bypass` or an already modulated
    H x n_q x n_k score stack.  When ``capture`` is a dict, the post-softmax
    weights (H x n_q x n_k) are stored under ``"weights"``.
    """
    _check(x, y, params)
    heads = params.heads
    q = split_heads(tape, params.query(tape, x), heads)
    k = split_heads(tape, params.key(tape, y), heads)
    v = split_heads(tape, params.value(tape, y), heads)
    scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(params.head_dim))
    if bypass is not None:
        extra = bypass.dense(tape) if isinstance(bypass, Bypass) else bypass
        if extra.shape != scores.shape:
            raise ShapeError(f"bypass {extra.shape} does not match scores {scores.shape}")
        scores = tape.add(scores, extra)
    weights = tape.softmax(scores)
    if capture is not None:
        capture["weights"] = weights.value
    message = merge_heads(tape, tape.matmul(weights, v))
    return residual_update(tape, x, message, params)


def self_attend(tape: Tape, x: Var, params: AttentionParams, bypass=None, capture=None) -> Var:
    return attend(tape, x, x, params, bypass, capture)


def cross_attend(tape: Tape, x: Var, y: Var, params: AttentionParams, bypass=None, capture=None) -> Var:
    return attend(tape, x, y, params, bypass, capture)
