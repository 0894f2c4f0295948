"""Forward-pass timing of dense versus neighbour-restricted attention."""

from __future__ import annotations

import csv
import dataclasses
import io
import tracemalloc
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, TextIO

from threadpoolctl import threadpool_limits

from .features import SynthConfig, generate_pair
from .model import ModelConfig, ModelParams, forward

GRID = (256, 512, 1024, 2048, 4096)
STAGES = ("encode", "bypass", "attention", "assignment")


@dataclass
class BenchRow:
    n: int
    mode: str
    k: int
    total_s: float
    encode_s: float
    bypass_s: float
    attention_s: float
    assignment_s: float
    peak_mb: float
    repeats: int


def _mode_config(cfg: ModelConfig, mode: str, n: int) -> ModelConfig:
    if mode == "dense":
        return dataclasses.replace(cfg, sparse=False)
    if mode == "sparse":
        return dataclasses.replace(cfg, sparse=True)
    if mode == "sparse_full":  # every budget equals N: sparse code path, dense result
        return dataclasses.replace(cfg, sparse=True, k_self=n, k_cross_pre=n, k_cross_post=n)
    raise ValueError(f"unknown benchmark mode {mode!r}")


def time_forward(fa, fb, params: ModelParams, cfg: ModelConfig, repeats: int = 3) -> dict:
    """Per-stage wall time, taking the fastest of ``repeats`` runs for each stage."""
    best: dict[str, float] = {}
    for _ in range(repeats):
        t: dict[str, float] = {}
        forward(fa, fb, params, cfg, timings=t)
        for key in STAGES:
            best[key] = min(best.get(key, float("inf")), t.get(key, 0.0))
    best["total"] = sum(best[k] for k in STAGES)
    return best


def peak_memory_mb(fa, fb, params: ModelParams, cfg: ModelConfig) -> float:
    """Peak traced allocation of one forward pass, in MiB."""
    tracemalloc.start()
    try:
        forward(fa, fb, params, cfg)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return peak / 2**20


def run_benchmark(
    cfg: ModelConfig,
    sizes: Iterable[int] = GRID,
    modes: Sequence[str] = ("dense", "sparse"),
    repeats: int = 3,
    memory: bool = True,
    seed: int = 0,
    threads: int = 1,
) -> list[BenchRow]:
    """One row per (N, mode) on untrained weights; BLAS is capped at ``threads``."""
    params = ModelParams.init(cfg)
    rows = []
    with threadpool_limits(limits=threads):
        for n in sizes:
            fa, fb, _ = generate_pair(SynthConfig(n_points=n, c=cfg.c, rng_seed=seed))
            for mode in modes:
                mcfg = _mode_config(cfg, mode, n)
                t = time_forward(fa, fb, params, mcfg, repeats)
                peak = peak_memory_mb(fa, fb, params, mcfg) if memory else float("nan")
                k = n if mode != "sparse" else mcfg.k
                rows.append(
                    BenchRow(
                        n, mode, k, t["total"], t["encode"], t["bypass"], t["attention"], t["assignment"], peak, repeats
                    )
                )
    return rows


def scaling_ratio(rows: Sequence[BenchRow], mode: str, n_small: int, n_large: int, field: str = "attention_s") -> float:
    by_n = {r.n: getattr(r, field) for r in rows if r.mode == mode}
    return by_n[n_large] / by_n[n_small]


def write_csv(rows: Sequence[BenchRow], out: str | Path | TextIO) -> None:
    names = [f.name for f in dataclasses.fields(BenchRow)]
    if isinstance(out, (str, Path)):
        with open(out, "w", newline="") as fh:
            write_csv(rows, fh)
        return
    w = csv.writer(out)
    w.writerow(names)
    for r in rows:
        w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in dataclasses.astuple(r)])


def csv_text(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()
