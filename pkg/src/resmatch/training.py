"""Adam optimiser, synthetic-data training loop and evaluation metrics."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .assignment import MatchSet, extract_matches, matching_loss
from .errors import ConfigError, NumericalError
from .features import FeatureSet, GroundTruth, SynthConfig, generate_pair, reprojection_error
from .kernel import Tape
from .model import Diagnostics, ModelConfig, ModelParams, forward

log = logging.getLogger(__name__)

CORRECT_PX = 3.0
EVAL_SEED_OFFSET = 1_000_003


class Adam:
    def __init__(self, params: Sequence, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def zero_grads(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


def default_train_synth() -> SynthConfig:
    """Training pairs use the hard descriptor noise the comparison set is drawn with."""
    return SynthConfig(descriptor_noise_sigma=0.3)


def hard_eval_synth() -> SynthConfig:
    return SynthConfig(descriptor_noise_sigma=0.3, outlier_fraction=0.2)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    batch_size: int = 4
    synth: SynthConfig = field(default_factory=default_train_synth)
    eval_every: int = 250
    eval_pairs: int = 16
    checkpoint: str | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.eval_pairs < 1:
            raise ConfigError("eval_pairs must be >= 1")
        self.synth.validate()


def pair_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def make_pairs(synth: SynthConfig, seeds: Sequence[int]) -> list[tuple[FeatureSet, FeatureSet, GroundTruth]]:
    out = []
    for s in seeds:
        cfg = SynthConfig(**{**asdict(synth), "rng_seed": int(s)})
        out.append(generate_pair(cfg))
    return out


def eval_set(synth: SynthConfig, count: int, seed: int = 0) -> list:
    """A fixed evaluation batch, disjoint in seed space from training batches."""
    return make_pairs(synth, [pair_seed(seed, EVAL_SEED_OFFSET, i) for i in range(count)])


def pair_loss(params: ModelParams, pair, cfg: ModelConfig | None = None, tape: Tape | None = None):
    fa, fb, gt = pair
    if tape is None:
        tape = Tape(record=False)
    assignment = forward(fa, fb, params, cfg, tape=tape)
    return matching_loss(tape, assignment, gt), assignment


def mean_loss(params: ModelParams, pairs, cfg: ModelConfig | None = None) -> float:
    return float(np.mean([float(pair_loss(params, p, cfg)[0].value) for p in pairs]))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def match_metrics(matches: MatchSet, fs_a: FeatureSet, fs_b: FeatureSet, gt: GroundTruth) -> dict:
    """Precision, matching score and recall of one pair.

    A match is correct when the homography maps its A keypoint within 3 px of
    its B keypoint.  Matching score divides by the keypoint count of A.
    """
    n = len(matches)
    if n:
        err = reprojection_error(gt.homography, fs_a.positions[matches.pairs[:, 0]], fs_b.positions[matches.pairs[:, 1]])
        correct = int(np.sum(err < CORRECT_PX))
    else:
        correct = 0
    gt_set = {tuple(p) for p in gt.inlier_pairs.tolist()}
    recovered = sum(1 for p in matches.pairs.tolist() if tuple(p) in gt_set)
    return {
        "precision": correct / n if n else 0.0,
        "precision_defined": bool(n),
        "matching_score": correct / fs_a.n,
        "recall": recovered / len(gt_set) if gt_set else 0.0,
        "matches": n,
        "correct": correct,
    }


def aggregate(per_pair: list[dict]) -> dict:
    if not per_pair:
        raise ConfigError("no pairs to evaluate")
    keys = ("precision", "matching_score", "recall", "matches")
    out = {k: float(np.mean([m[k] for m in per_pair])) for k in keys}
    out["undefined_precision_pairs"] = sum(1 for m in per_pair if not m["precision_defined"])
    out["pairs"] = len(per_pair)
    return out


def evaluate(params: ModelParams, pairs, cfg: ModelConfig | None = None) -> dict:
    """Mean per-pair metrics of the network on ``pairs`` of (fs_a, fs_b, gt)."""
    cfg = cfg or params.config
    if not pairs:
        raise ConfigError("empty pair list")
    per_pair = []
    for fa, fb, gt in pairs:
        a = forward(fa, fb, params, cfg)
        per_pair.append(match_metrics(extract_matches(a, cfg.match_threshold, cfg.mutual_check), fa, fb, gt))
    return aggregate(per_pair)


def evaluate_matcher(matcher: Callable[[FeatureSet, FeatureSet], MatchSet], pairs) -> dict:
    if not pairs:
        raise ConfigError("empty pair list")
    return aggregate([match_metrics(matcher(fa, fb), fa, fb, gt) for fa, fb, gt in pairs])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _activation_report(params: ModelParams, pair) -> str:
    diag = Diagnostics()
    try:
        forward(pair[0], pair[1], params, diag=diag)
    except Exception as exc:  # diagnostics only
        return f"forward failed: {exc}"
    norms = ", ".join(f"L{i}: {a:.3g}/{b:.3g}" for i, (a, b) in enumerate(diag.features))
    return f"layer feature norms (A/B): {norms}"


def train_step(params: ModelParams, opt: Adam, batch, cfg: ModelConfig | None = None) -> float:
    """One optimiser step on the batch mean loss; gradients summed in pair order."""
    opt.zero_grads()
    total = 0.0
    scale = 1.0 / len(batch)
    for pair in batch:
        tape = Tape()
        loss, _ = pair_loss(params, pair, cfg, tape)
        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite training loss; {_activation_report(params, pair)}")
        tape.backward(loss, np.asarray(scale))
        total += value
    opt.step()
    return total * scale


def train(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    params: ModelParams | None = None,
    eval_pairs: list | None = None,
    metrics_path: str | Path | None = None,
    on_eval: Callable[[dict], None] | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Seed-deterministic training on synthetic pairs.

    Returns the trained parameters and a metric log with one record per
    evaluation (step 0, every ``eval_every`` steps, and the final step).
    """
    train_cfg.validate()
    model_cfg.validate()
    if params is None:
        params = ModelParams.init(model_cfg)
    if eval_pairs is None:
        eval_pairs = eval_set(train_cfg.synth, train_cfg.eval_pairs, train_cfg.seed)
    opt = Adam(list(params), train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    history: list[dict] = []

    def record(step: int, train_loss: float | None) -> None:
        entry = {"step": step, "loss": mean_loss(params, eval_pairs, model_cfg), "train_loss": train_loss}
        entry.update({k: v for k, v in evaluate(params, eval_pairs, model_cfg).items() if k in ("precision", "matching_score", "recall")})
        if not np.isfinite(entry["loss"]):
            raise NumericalError(f"non-finite eval loss at step {step}; {_activation_report(params, eval_pairs[0])}")
        history.append(entry)
        log.info("step %d loss %.4f precision %.3f", step, entry["loss"], entry["precision"])
        if on_eval:
            on_eval(entry)

    record(0, None)
    recent: list[float] = []
    for step in range(1, train_cfg.steps + 1):
        seeds = [pair_seed(train_cfg.seed, step, b) for b in range(train_cfg.batch_size)]
        recent.append(train_step(params, opt, make_pairs(train_cfg.synth, seeds), model_cfg))
        if step % train_cfg.eval_every == 0 or step == train_cfg.steps:
            record(step, float(np.mean(recent)))
            recent.clear()

    if train_cfg.checkpoint:
        from .weights import save_weights

        save_weights(params, train_cfg.checkpoint)
    if metrics_path:
        Path(metrics_path).write_text(json.dumps(history, indent=2))
    return params, history


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

MICRO_CONFIG = dict(c=8, heads=2, layers=2, adjust_layer=1)


def micro_gradient_check(sparse: bool = False, seed: int = 0, n_points: int = 3, tolerance: float = 1e-3):
    """Finite-difference check of every parameter of a tiny model on one pair.

    The sparse variant uses neighbour budgets (2, 2, 1) so that selection
    actually restricts attention at three points.
    """
    from .kernel import grad_check

    extra = dict(sparse=True, k_self=2, k_cross_pre=2, k_cross_post=1) if sparse else {}
    cfg = ModelConfig(**MICRO_CONFIG, **extra, seed=seed)
    params = ModelParams.init(cfg)
    pair = generate_pair(SynthConfig(n_points=n_points, c=cfg.c, outlier_fraction=1 / 3, rng_seed=seed))
    return grad_check(lambda tape: pair_loss(params, pair, cfg, tape)[0], params.named(), tolerance)
