"""Bypass scores: descriptor similarity, relative positions and the mid-network refresh."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attention import modulate  # noqa: F401  (re-exported)
from .errors import ShapeError, UsageError
from .kernel import DEFAULT_SLOPE, Mlp, Param, Tape, Var, as_var


@dataclass
class BypassParams:
    f4: Mlp  # descriptors -> c/r
    f5: Mlp  # positions -> c/r
    f6: Mlp  # features -> c/r, refreshes the descriptor score
    f7: Mlp  # features -> c/r, refreshes the position score

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        c: int,
        reduction: int = 4,
        slope: float = DEFAULT_SLOPE,
        name: str = "bypass",
    ):
        out = max(c // reduction, 1)
        return cls(
            f4=Mlp.init(rng, [c, c, out], slope, name=f"{name}.f4"),
            f5=Mlp.init(rng, [2, c, out], slope, name=f"{name}.f5"),
            f6=Mlp.init(rng, [c, c, out], slope, name=f"{name}.f6"),
            f7=Mlp.init(rng, [c, c, out], slope, name=f"{name}.f7"),
        )

    def params(self) -> dict[str, Param]:
        out: dict[str, Param] = {}
        for m in (self.f4, self.f5, self.f6, self.f7):
            out.update(m.params())
        return out


@dataclass(frozen=True)
class BypassState:
    s_d: Var  # n_a x n_b
    s_p_a: Var  # n_a x n_a
    s_p_b: Var  # n_b x n_b
    adjusted: bool = False


def _outer(tape: Tape, fa: Var, fb: Var) -> Var:
    return tape.matmul(fa, tape.transpose(fb, (1, 0)))


def descriptor_similarity(tape: Tape, desc_a, desc_b, f4: Mlp) -> Var:
    """``f4(D_a) f4(D_b)^T`` on raw descriptors."""
    da, db = as_var(desc_a), as_var(desc_b)
    if da.shape[-1] != db.shape[-1] or da.shape[-1] != f4.in_dim:
        raise ShapeError(f"descriptor widths {da.shape[-1]}, {db.shape[-1]} vs f4 input {f4.in_dim}")
    return _outer(tape, f4(tape, da), f4(tape, db))


def position_similarity(tape: Tape, positions, f5: Mlp) -> Var:
    """``f5(P) f5(P)^T``; symmetric because both factors are the same tensor."""
    p = as_var(positions)
    if p.value.ndim != 2 or p.shape[1] != 2:
        raise ShapeError(f"positions must be n x 2, got {p.shape}")
    e = f5(tape, p)
    return _outer(tape, e, e)


def initial_state(tape: Tape, desc_a, desc_b, pos_a, pos_b, params: BypassParams) -> BypassState:
    return BypassState(
        s_d=descriptor_similarity(tape, desc_a, desc_b, params.f4),
        s_p_a=position_similarity(tape, pos_a, params.f5),
        s_p_b=position_similarity(tape, pos_b, params.f5),
    )


def adjust(tape: Tape, state: BypassState, feats_a: Var, feats_b: Var, f6: Mlp, f7: Mlp) -> BypassState:
    """Add decoded-feature similarities to the initial scores (once)."""
    if state.adjusted:
        raise UsageError("bypass scores were already adjusted")
    da, db = f6(tape, feats_a), f6(tape, feats_b)
    pa, pb = f7(tape, feats_a), f7(tape, feats_b)
    return replace(
        state,
        s_d=tape.add(state.s_d, _outer(tape, da, db)),
        s_p_a=tape.add(state.s_p_a, _outer(tape, pa, pa)),
        s_p_b=tape.add(state.s_p_b, _outer(tape, pb, pb)),
        adjusted=True,
    )
