"""Command-line interface.

Exit codes: 0 success, 2 I/O or file-format error, 3 configuration error,
4 numerical failure.  Summaries go to stdout as ``key=value`` lines and
errors to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .assignment import MatchSet, extract_matches
from .errors import ConfigError, FormatError, NumericalError, ShapeError, UsageError

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3, 4
DUMP_TOP = 16


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _emit(**kv) -> None:
    for k, v in kv.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        print(f"{k}={v}")


def _threshold(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"threshold must lie in (0, 1), got {v}")
    return v


def _env_threads() -> int | None:
    raw = os.environ.get("RESMATCH_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"RESMATCH_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("RESMATCH_THREADS must be >= 1")
    return n


# ---------------------------------------------------------------------------
# shared flag groups
# ---------------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--full", action="store_true", help="full-sized model (c=128, 9 layers) instead of the desk model")
    g.add_argument("--c", type=int, help="descriptor / feature width")
    g.add_argument("--layers", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--adjust-layer", type=int, help="1-based block after which bypass scores are refreshed; 0 disables")
    g.add_argument("--sparse", action="store_true")
    g.add_argument("--k", type=int, help="neighbour budget for sparse attention")
    g.add_argument("--no-res-self", action="store_true", help="drop the position bypass from self-attention")
    g.add_argument("--no-res-cross", action="store_true", help="drop the descriptor bypass from cross-attention")


def _model_config(args, seed: int = 0):
    from .model import ModelConfig

    over = {}
    for name in ("c", "layers", "heads", "adjust_layer", "k"):
        v = getattr(args, name)
        if v is not None:
            over[name] = v
    over.update(sparse=args.sparse, res_self=not args.no_res_self, res_cross=not args.no_res_cross, seed=seed)
    cfg = ModelConfig(**over) if args.full else ModelConfig.desk(**over)
    cfg.validate()
    return cfg


def _add_synth_flags(p: argparse.ArgumentParser, sigma: float = 0.1) -> None:
    g = p.add_argument_group("synthetic data")
    g.add_argument("--n-points", type=int, default=64)
    g.add_argument("--sigma", type=float, default=sigma, help="per-component descriptor noise")
    g.add_argument("--outliers", type=float, default=0.2, help="outlier fraction per image")


def _synth_config(args, c: int, seed: int = 0):
    from .features import SynthConfig

    cfg = SynthConfig(
        n_points=args.n_points, c=c, descriptor_noise_sigma=args.sigma, outlier_fraction=args.outliers, rng_seed=seed
    )
    cfg.validate()
    return cfg


def _inference_config(params, args):
    """Stored config with the inference-time overrides from the command line."""
    import dataclasses

    cfg = params.config
    over = {}
    if args.sparse:
        over["sparse"] = True
    if args.k is not None:
        over["k"] = args.k
    if getattr(args, "threshold", None) is not None:
        over["match_threshold"] = args.threshold
    cfg = dataclasses.replace(cfg, **over)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .features import PairFiles, generate_pair, write_features, write_ground_truth
    from .training import pair_seed

    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        cfg = _synth_config(args, args.c, pair_seed(args.seed, i))
        fa, fb, gt = generate_pair(cfg)
        files = PairFiles.in_dir(out, f"{args.stem}{i:04d}")
        write_features(fa, files.a)
        write_features(fb, files.b)
        write_ground_truth(gt, files.gt)
    _emit(pairs=args.count, out_dir=str(out), n_points=args.n_points, c=args.c)
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, train

    model_cfg = _model_config(args, args.seed)
    tc = TrainConfig(
        lr=args.lr,
        steps=args.steps,
        batch_size=args.batch_size,
        synth=_synth_config(args, model_cfg.c),
        eval_every=args.eval_every,
        eval_pairs=args.eval_pairs,
        checkpoint=args.out,
        seed=args.seed,
    )
    _, history = train(tc, model_cfg, metrics_path=args.metrics)
    first, last = history[0], history[-1]
    _emit(
        steps=tc.steps,
        initial_loss=first["loss"],
        final_loss=last["loss"],
        precision=last["precision"],
        matching_score=last["matching_score"],
        weights=args.out,
    )
    return EXIT_OK


def _load_params(path):
    from .weights import load_weights

    return load_weights(path)


def write_match_file(ms: MatchSet, path) -> None:
    lines = [f"# n_a={ms.n_a} n_b={ms.n_b} threshold={ms.threshold!r}"]
    lines += [f"{i} {j} {c!r}" for (i, j), c in zip(ms.pairs.tolist(), ms.confidence.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_match_file(path) -> MatchSet:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise FormatError(f"{path}: missing match-file header", offset=0)
    head = dict(kv.split("=", 1) for kv in text[0][1:].split())
    rows = [ln.split() for ln in text[1:] if ln.strip()]
    pairs = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=np.int64).reshape(-1, 2)
    conf = np.array([float(r[2]) for r in rows])
    return MatchSet(pairs, conf, int(head["n_a"]), int(head["n_b"]), float(head["threshold"]))


def cmd_match(args) -> int:
    from .features import read_features
    from .model import forward

    params = _load_params(args.weights)
    cfg = _inference_config(params, args)
    fa, fb = read_features(args.a), read_features(args.b)
    ms = extract_matches(forward(fa, fb, params, cfg), cfg.match_threshold, cfg.mutual_check)
    if args.out:
        write_match_file(ms, args.out)
    mean_conf = float(ms.confidence.mean()) if len(ms) else 0.0
    summary = dict(n_a=fa.n, n_b=fb.n, matches=len(ms), mean_confidence=mean_conf)
    if args.a == args.b or Path(args.a).resolve() == Path(args.b).resolve():
        summary["identity_fraction"] = float(np.sum(ms.pairs[:, 0] == ms.pairs[:, 1]) / fa.n)
    _emit(**summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .baseline import nn_baseline
    from .features import list_pairs, load_pair
    from .training import eval_set, evaluate, evaluate_matcher

    params = None
    if args.matcher == "model":
        if not args.weights:
            raise ConfigError("--weights is required for --matcher model")
        params = _load_params(args.weights)
        cfg = _inference_config(params, args)
        c = cfg.c
    else:
        c = args.c
    if args.data:
        files = list_pairs(args.data)
        if not files:
            raise FileNotFoundError(f"no *_gt.rmg pairs found in {args.data}")
        pairs = [load_pair(f) for f in files]
    else:
        pairs = eval_set(_synth_config(args, c), args.count, args.seed)
    if params is not None:
        metrics = evaluate(params, pairs, cfg)
    else:
        metrics = evaluate_matcher(lambda fa, fb: nn_baseline(fa, fb, args.ratio), pairs)
    _emit(matcher=args.matcher, **metrics)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import csv_text, run_benchmark, write_csv

    cfg = _model_config(args, args.seed)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    if not sizes or min(sizes) < 1:
        raise ConfigError("--sizes must be positive integers")
    rows = run_benchmark(cfg, sizes, modes, args.repeats, memory=not args.no_memory, seed=args.seed, threads=args.threads)
    if args.out:
        write_csv(rows, args.out)
        _emit(rows=len(rows), out=args.out)
    else:
        sys.stdout.write(csv_text(rows))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .training import micro_gradient_check

    failed = False
    for sparse in (False, True):
        report = micro_gradient_check(sparse, args.seed, args.n_points, args.tolerance)
        name, err = report.worst
        mode = "sparse" if sparse else "dense"
        _emit(**{f"{mode}_passed": report.passed, f"{mode}_worst": name, f"{mode}_error": err, f"{mode}_params": len(report.errors)})
        failed |= not report.passed
    if failed:
        print("gradient check failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _ranked(values: np.ndarray, keys: np.ndarray, top: int, positive_only: bool) -> list[dict]:
    order = np.argsort(-values, kind="stable")
    out = []
    for idx in order[:top]:
        if positive_only and not values[idx] > 0:
            break
        out.append({"key": int(keys[idx]), "score": float(values[idx])})
    return out


def attention_dump(params, cfg, fa, fb, layer: int, head: int, kind: str, side: str, top: int = DUMP_TOP) -> dict:
    """Top attention targets and top bypass neighbours for one block/head/direction."""
    from .kernel import Tape, lrelu
    from .model import Diagnostics, forward

    if not 0 <= layer < cfg.layers:
        raise ConfigError(f"layer must lie in [0, {cfg.layers}), got {layer}")
    if not 0 <= head < cfg.heads:
        raise ConfigError(f"head must lie in [0, {cfg.heads}), got {head}")
    diag = Diagnostics()
    forward(fa, fb, params, cfg, Tape(record=False), diag)
    cap = diag.attention[(layer, kind, side)]
    weights = cap["weights"][head]
    indices = cap.get("indices")
    state = diag.bypass[layer]
    lp = params.layers[layer]
    if kind == "self":
        raw = (state.s_p_a if side == "a" else state.s_p_b).value
        lam, beta, applied = lp.lam_p.value[head], lp.beta_p.value[head], cfg.res_self
    else:
        raw = state.s_d.value if side == "a" else state.s_d.value.T
        lam, beta, applied = lp.lam_d.value[head], lp.beta_d.value[head], cfg.res_cross
    bypass = lrelu(lam * raw + beta, cfg.lrelu_slope)
    uniform = (not applied) or bool(np.ptp(bypass) == 0.0)
    n_q, n_k = raw.shape
    queries = []
    for i in range(n_q):
        keys = indices[i] if indices is not None else np.arange(n_k)
        entry = {
            "index": i,
            "attention": _ranked(weights[i], keys, top, positive_only=True),
            "bypass": [] if uniform else _ranked(bypass[i], np.arange(n_k), top, positive_only=False),
        }
        if indices is not None:
            entry["neighbors"] = [int(j) for j in indices[i]]
        queries.append(entry)
    return {
        "layer": layer,
        "head": head,
        "kind": kind,
        "side": side,
        "sparse": bool(cfg.sparse),
        "top": top,
        "n_queries": int(n_q),
        "n_keys": int(n_k),
        "bypass_applied": bool(applied),
        "bypass_uniform": uniform,
        "queries": queries,
    }


def load_dump_schema() -> dict:
    return json.loads(resources.files("resmatch").joinpath("schemas/attention_dump.schema.json").read_text())


def cmd_dump_attn(args) -> int:
    import jsonschema

    from .features import read_features

    params = _load_params(args.weights)
    cfg = _inference_config(params, args)
    fa, fb = read_features(args.a), read_features(args.b)
    dump = attention_dump(params, cfg, fa, fb, args.layer, args.head, args.kind, args.side, args.top)
    jsonschema.validate(dump, load_dump_schema())
    Path(args.out).write_text(json.dumps(dump, indent=1))
    _emit(out=args.out, queries=dump["n_queries"], bypass_uniform=dump["bypass_uniform"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="resmatch", description="Attention-based keypoint matching with bypass similarity scores.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic feature pairs with ground truth")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--c", type=int, default=32)
    s.add_argument("--stem", default="pair")
    s.add_argument("--seed", type=int, default=0)
    _add_synth_flags(s)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on synthetic pairs and save weights")
    t.add_argument("--out", required=True, help="weight file to write")
    t.add_argument("--metrics", help="JSON metric log to write")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--eval-every", type=int, default=250)
    t.add_argument("--eval-pairs", type=int, default=16)
    t.add_argument("--seed", type=int, default=0)
    _add_model_flags(t)
    _add_synth_flags(t, sigma=0.3)
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("match", help="match two feature files")
    m.add_argument("--weights", required=True)
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--sparse", action="store_true")
    m.add_argument("--k", type=int)
    m.add_argument("--threshold", type=_threshold, default=None, help="match confidence threshold in (0, 1)")
    m.add_argument("--out", help="match file to write")
    m.set_defaults(func=cmd_match)

    e = sub.add_parser("eval", help="precision / matching score / recall on pairs")
    e.add_argument("--weights")
    e.add_argument("--matcher", choices=("model", "nn"), default="model")
    e.add_argument("--ratio", type=float, default=0.8, help="ratio-test threshold for --matcher nn")
    e.add_argument("--data", help="directory written by 'synth'; otherwise pairs are generated")
    e.add_argument("--count", type=int, default=32)
    e.add_argument("--c", type=int, default=32, help="descriptor width for generated pairs with --matcher nn")
    e.add_argument("--sparse", action="store_true")
    e.add_argument("--k", type=int)
    e.add_argument("--threshold", type=_threshold, default=None)
    e.add_argument("--seed", type=int, default=0)
    _add_synth_flags(e)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="dense vs sparse forward timing (CSV)")
    b.add_argument("--sizes", default="256,512,1024,2048,4096")
    b.add_argument("--modes", default="dense,sparse", help="comma list of dense, sparse, sparse_full")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--threads", type=int, default=1, help="BLAS threads during timing")
    b.add_argument("--no-memory", action="store_true", help="skip the traced peak-memory pass")
    b.add_argument("--out", help="CSV file; stdout when omitted")
    b.add_argument("--seed", type=int, default=0)
    _add_model_flags(b)
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference check of a micro model")
    g.add_argument("--tolerance", type=float, default=1e-3)
    g.add_argument("--n-points", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dump-attn", help="write top attention and bypass neighbours as JSON")
    d.add_argument("--weights", required=True)
    d.add_argument("--a", required=True)
    d.add_argument("--b", required=True)
    d.add_argument("--layer", type=int, required=True, help="0-based block index")
    d.add_argument("--head", type=int, required=True)
    d.add_argument("--kind", choices=("self", "cross"), default="cross")
    d.add_argument("--side", choices=("a", "b"), default="a", help="image supplying the queries")
    d.add_argument("--top", type=int, default=DUMP_TOP)
    d.add_argument("--sparse", action="store_true")
    d.add_argument("--k", type=int)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_attn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        threads = _env_threads()
        if threads is None:
            return args.func(args)
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
