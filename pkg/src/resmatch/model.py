"""The full matcher: encoder, stacked hybrid blocks with bypass scores, Sinkhorn head."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from . import sparse as sp
from .assignment import Assignment, correlation, sinkhorn
from .attention import AttentionParams, Bypass, attend
from .encoder import EncoderParams, fuse
from .errors import ConfigError
from .features import FeatureSet, normalize_positions
from .kernel import DEFAULT_SLOPE, Linear, Param, Tape, Var
from .residual import BypassParams, BypassState, adjust, initial_state


@dataclass
class ModelConfig:
    c: int = 128
    layers: int = 9
    heads: int = 4
    sparse: bool = False
    k: int = 64
    # 1-based block after which bypass scores are refreshed; 0 disables
    adjust_layer: int = 4
    sinkhorn_iters: int = 10
    match_threshold: float = 0.2
    mutual_check: bool = True
    lrelu_slope: float = DEFAULT_SLOPE
    lambda_init: float = 1.0
    beta_init: float = 0.0
    dustbin_init: float = 1.0
    bypass_reduction: int = 4
    res_self: bool = True
    res_cross: bool = True
    # explicit neighbour budgets; None derives them from k
    k_self: int | None = None
    k_cross_pre: int | None = None
    k_cross_post: int | None = None
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small configuration used for toy training and acceptance."""
        base = dict(c=32, layers=4, heads=4, k=16, adjust_layer=2)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.c < 1 or self.layers < 1 or self.heads < 1:
            raise ConfigError("c, layers and heads must be positive")
        if self.c % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide c ({self.c})")
        if not 0 <= self.adjust_layer < self.layers:
            raise ConfigError(f"adjust_layer must lie in [0, layers), got {self.adjust_layer}")
        if self.sinkhorn_iters < 1:
            raise ConfigError("sinkhorn_iters must be >= 1")
        if not 0.0 < self.match_threshold < 1.0:
            raise ConfigError("match_threshold must lie in (0, 1)")
        if not 0.0 < self.lrelu_slope < 1.0:
            raise ConfigError("lrelu_slope must lie in (0, 1)")
        if self.sparse and not self._explicit_budgets() and (self.k < 4 or self.k % 4):
            raise ConfigError(f"k must be a positive multiple of 4 in sparse mode, got {self.k}")
        for name in ("k_self", "k_cross_pre", "k_cross_post"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be positive")

    def _explicit_budgets(self) -> bool:
        return None not in (self.k_self, self.k_cross_pre, self.k_cross_post)

    def budgets(self, stage: str) -> tuple[int, int]:
        if self._explicit_budgets():
            k_self, k_pre, k_post = self.k_self, self.k_cross_pre, self.k_cross_post
        else:
            k_self, k_pre = sp.neighbor_budgets("pre_adjust", self.k)
            _, k_post = sp.neighbor_budgets("post_adjust", self.k)
            k_self = self.k_self or k_self
            k_pre = self.k_cross_pre or k_pre
            k_post = self.k_cross_post or k_post
        return (k_self, k_pre) if stage == "pre_adjust" else (k_self, k_post)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    lam_p: Param
    beta_p: Param
    lam_d: Param
    beta_d: Param

    def params(self) -> dict[str, Param]:
        out = {**self.self_attn.params(), **self.cross_attn.params()}
        for p in (self.lam_p, self.beta_p, self.lam_d, self.beta_d):
            out[p.name] = p
        return out


@dataclass
class ModelParams:
    config: ModelConfig
    encoder: EncoderParams
    bypass: BypassParams
    layers: list[LayerParams]
    final: Linear
    dustbin: Param

    @classmethod
    def init(cls, cfg: ModelConfig) -> "ModelParams":
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        c, heads, slope = cfg.c, cfg.heads, cfg.lrelu_slope
        encoder = EncoderParams.init(rng, c, slope)
        bypass = BypassParams.init(rng, c, cfg.bypass_reduction, slope)
        layers = []
        for i in range(cfg.layers):
            pre = f"layer{i}"
            layers.append(
                LayerParams(
                    self_attn=AttentionParams.init(rng, c, heads, slope, name=f"{pre}.self"),
                    cross_attn=AttentionParams.init(rng, c, heads, slope, name=f"{pre}.cross"),
                    lam_p=Param(np.full(heads, cfg.lambda_init), name=f"{pre}.lambda_p"),
                    beta_p=Param(np.full(heads, cfg.beta_init), name=f"{pre}.beta_p"),
                    lam_d=Param(np.full(heads, cfg.lambda_init), name=f"{pre}.lambda_d"),
                    beta_d=Param(np.full(heads, cfg.beta_init), name=f"{pre}.beta_d"),
                )
            )
        final = Linear.init(rng, c, c, name="final")
        dustbin = Param(np.array(cfg.dustbin_init), name="dustbin")
        return cls(cfg, encoder, bypass, layers, final, dustbin)

    def named(self) -> dict[str, Param]:
        """All learnable tensors keyed by hierarchical name, in a fixed order."""
        out = {**self.encoder.params(), **self.bypass.params()}
        for layer in self.layers:
            out.update(layer.params())
        out.update(self.final.params())
        out[self.dustbin.name] = self.dustbin
        return out

    def __iter__(self) -> Iterator[Param]:
        return iter(self.named().values())

    def zero_grads(self) -> None:
        for p in self:
            p.zero_grad()

    def count(self) -> int:
        return sum(p.value.size for p in self)

    def set_bypass_affine(self, lam: float, beta: float) -> None:
        for layer in self.layers:
            for p, v in ((layer.lam_p, lam), (layer.beta_p, beta), (layer.lam_d, lam), (layer.beta_d, beta)):
                p.value[...] = v


@dataclass
class Neighbors:
    self_a: sp.NeighborIndex
    self_b: sp.NeighborIndex
    cross_ab: sp.NeighborIndex
    cross_ba: sp.NeighborIndex


def mine_neighbors(state: BypassState, cfg: ModelConfig, stage: str) -> Neighbors:
    """KNN over the raw bypass scores, budgets clamped to the set sizes."""
    k_self, k_cross = cfg.budgets(stage)
    s_d = state.s_d.value
    n_a, n_b = s_d.shape
    return Neighbors(
        self_a=sp.knn_mine(state.s_p_a.value, min(k_self, n_a), "S_P"),
        self_b=sp.knn_mine(state.s_p_b.value, min(k_self, n_b), "S_P"),
        cross_ab=sp.knn_mine(s_d, min(k_cross, n_b), "S_D"),
        cross_ba=sp.knn_mine(s_d.T, min(k_cross, n_a), "S_D"),
    )


@dataclass
class Diagnostics:
    """Optional per-block captures for inspection."""

    attention: dict = field(default_factory=dict)  # (layer, kind, side) -> capture dict
    bypass: dict = field(default_factory=dict)  # layer -> BypassState values
    neighbors: dict = field(default_factory=dict)  # layer -> Neighbors
    features: list = field(default_factory=list)  # per layer (xa, xb) norms


def _capture(diag: Diagnostics | None, layer: int, kind: str, side: str) -> dict | None:
    if diag is None:
        return None
    slot: dict = {}
    diag.attention[(layer, kind, side)] = slot
    return slot


def hybrid_block(
    tape: Tape,
    xa: Var,
    xb: Var,
    layer: LayerParams,
    state: BypassState,
    cfg: ModelConfig,
    neighbors: Neighbors | None = None,
    diag: Diagnostics | None = None,
    index: int = 0,
) -> tuple[Var, Var]:
    """Self-attention on each image, then symmetric cross-attention.

    Both cross updates read the post-self, pre-cross features.
    """
    slope = cfg.lrelu_slope
    bp_a = Bypass(state.s_p_a, layer.lam_p, layer.beta_p, slope) if cfg.res_self else None
    bp_b = Bypass(state.s_p_b, layer.lam_p, layer.beta_p, slope) if cfg.res_self else None
    if cfg.res_cross:
        s_d_t = tape.transpose(state.s_d, (1, 0))
        bd_ab = Bypass(state.s_d, layer.lam_d, layer.beta_d, slope)
        bd_ba = Bypass(s_d_t, layer.lam_d, layer.beta_d, slope)
    else:
        bd_ab = bd_ba = None

    def run(q, kv, params, bypass, nbrs, kind, side):
        cap = _capture(diag, index, kind, side)
        if nbrs is None:
            return attend(tape, q, kv, params, bypass, cap)
        return sp.sparse_attend(tape, q, kv, params, bypass, nbrs, cap)

    n = neighbors
    xa = run(xa, xa, layer.self_attn, bp_a, n and n.self_a, "self", "a")
    xb = run(xb, xb, layer.self_attn, bp_b, n and n.self_b, "self", "b")
    xa_new = run(xa, xb, layer.cross_attn, bd_ab, n and n.cross_ab, "cross", "a")
    xb_new = run(xb, xa, layer.cross_attn, bd_ba, n and n.cross_ba, "cross", "b")
    return xa_new, xb_new


def forward(
    fs_a: FeatureSet,
    fs_b: FeatureSet,
    params: ModelParams,
    cfg: ModelConfig | None = None,
    tape: Tape | None = None,
    diag: Diagnostics | None = None,
    timings: dict | None = None,
) -> Assignment:
    """Run the matcher on one pair.  ``cfg`` defaults to ``params.config``.

    When ``timings`` is given, wall seconds are accumulated into its
    "encode", "bypass" (similarity scores, adjustment, neighbour mining),
    "attention" and "assignment" entries.
    """
    cfg = cfg or params.config
    clock = _Clock(timings)
    cfg.validate()
    if tape is None:
        tape = Tape(record=False)
    if fs_a.channels != cfg.c or fs_b.channels != cfg.c:
        raise ConfigError(f"descriptor channels {fs_a.channels}/{fs_b.channels} != model width {cfg.c}")
    desc_a, desc_b = Var(fs_a.descriptors), Var(fs_b.descriptors)
    pos_a, pos_b = Var(normalize_positions(fs_a)), Var(normalize_positions(fs_b))

    xa = fuse(tape, desc_a, pos_a, params.encoder)
    xb = fuse(tape, desc_b, pos_b, params.encoder)
    clock.lap("encode")
    state = initial_state(tape, desc_a, desc_b, pos_a, pos_b, params.bypass)
    neighbors = mine_neighbors(state, cfg, "pre_adjust") if cfg.sparse else None
    clock.lap("bypass")

    for i, layer in enumerate(params.layers):
        if diag is not None:
            diag.bypass[i] = state
            diag.neighbors[i] = neighbors
        xa, xb = hybrid_block(tape, xa, xb, layer, state, cfg, neighbors, diag, i)
        clock.lap("attention")
        if diag is not None:
            diag.features.append((float(np.linalg.norm(xa.value)), float(np.linalg.norm(xb.value))))
        if cfg.adjust_layer and i + 1 == cfg.adjust_layer:
            state = adjust(tape, state, xa, xb, params.bypass.f6, params.bypass.f7)
            if cfg.sparse:
                neighbors = mine_neighbors(state, cfg, "post_adjust")
            clock.lap("bypass")

    scores = correlation(tape, xa, xb, params.final)
    out = sinkhorn(tape, scores, params.dustbin, cfg.sinkhorn_iters)
    clock.lap("assignment")
    return out


class _Clock:
    def __init__(self, sink: dict | None):
        self.sink = sink
        self.last = time.perf_counter()

    def lap(self, key: str) -> None:
        if self.sink is None:
            return
        now = time.perf_counter()
        self.sink[key] = self.sink.get(key, 0.0) + now - self.last
        self.last = now
