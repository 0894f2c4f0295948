"""Initial features: descriptor MLP plus position MLP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .kernel import DEFAULT_SLOPE, Mlp, Param, Tape, Var, as_var


@dataclass
class EncoderParams:
    f1: Mlp  # descriptors, c -> c -> c
    f2: Mlp  # positions, 2 -> c/2 -> c -> c

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, slope: float = DEFAULT_SLOPE, name: str = "encoder"):
        return cls(
            f1=Mlp.init(rng, [c, c, c], slope, name=f"{name}.f1"),
            f2=Mlp.init(rng, [2, max(c // 2, 1), c, c], slope, name=f"{name}.f2"),
        )

    def params(self) -> dict[str, Param]:
        return {**self.f1.params(), **self.f2.params()}


def fuse(tape: Tape, descriptors, positions, params: EncoderParams) -> Var:
    """Row i is ``f1(d_i) + f2(p_i)``; positions must already be normalized."""
    d, p = as_var(descriptors), as_var(positions)
    if d.shape[-1] != params.f1.in_dim:
        raise ShapeError(f"descriptor channels {d.shape[-1]} != encoder width {params.f1.in_dim}")
    if p.shape[-1] != 2 or p.shape[0] != d.shape[0]:
        raise ShapeError(f"positions {p.shape} do not match descriptors {d.shape}")
    return tape.add(params.f1(tape, d), params.f2(tape, p))
