"""Command-line front end: ``hemgs <subcommand> ...``.

Exit status is 0 on success, 1 for usage errors, 2 for bad input data and 3
when an internal invariant breaks. Failures print a single
``error=<kind> detail=<json string>`` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .codec import compress, decompress, inspect
from .context import DEFAULT_N, DEFAULT_RF, QMAX, scene_coding_order, select_contexts, context_stats
from .errors import CausalityError, HemgsError
from .model import BASE_STEP, LAMBDA_MAX, LAMBDA_MIN, HemgsModel
from .report import (FORMATS, format_records, format_rows, plot_bench, plot_context_histogram,
                     plot_rd, plot_storage, plot_training)
from .scene import CORRELATIONS, PATTERNS, SynthSpec, load_scene, save_scene, synth_scene
from .trainer import DEFAULT_LAMBDAS, TrainConfig, eval_rd, train

MODEL_DIR_ENV = "HEMGS_MODEL_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DEFAULT_LAMBDA = 2e-3
BENCH_ANCHORS = 50_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- argument parsing

def _lambda(text: str) -> float:
    v = float(text)
    if not (LAMBDA_MIN <= v <= LAMBDA_MAX):
        raise argparse.ArgumentTypeError(f"lambda must lie in [{LAMBDA_MIN}, {LAMBDA_MAX}]")
    return v


def _lambda_list(text: str) -> tuple:
    return tuple(_lambda(t) for t in text.split(",") if t.strip())


def _common(suppress: bool) -> argparse.ArgumentParser:
    # Subcommand copies use SUPPRESS so they only override what the user typed.
    kw = {"argument_default": argparse.SUPPRESS} if suppress else {}
    p = _Parser(add_help=False, **kw)
    p.add_argument("--format", choices=FORMATS,
                   **({} if suppress else {"default": "kv"}),
                   help="report layout (default kv: key=value lines)")
    p.add_argument("--plot", metavar="DIR", **({} if suppress else {"default": None}),
                   help="also write figures into DIR")
    p.add_argument("--strict", action="store_true",
                   **({} if suppress else {"default": False}),
                   help="reject scenes with duplicate voxels instead of merging them")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hemgs", parents=[_common(False)],
                     description="Entropy coding of anchor-based Gaussian splatting scenes.")
    parser.add_argument("--version", action="version", version=f"hemgs {__version__}")
    parser.add_argument("--show-config", action="store_true",
                        help="print every default constant and exit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    common = [_common(True)]

    p = sub.add_parser("compress", parents=common, help="scene -> bitstream")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--model", required=True,
                   help=f"model file; bare names are looked up in ${MODEL_DIR_ENV}")
    p.add_argument("--lambda", dest="lam", type=_lambda, default=DEFAULT_LAMBDA)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decompress", parents=common, help="bitstream -> scene")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None,
                   help="optional model that must match the embedded side information")

    p = sub.add_parser("train", parents=common, help="fit a model to one scene")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--iterations", type=int, default=TrainConfig.iterations)
    p.add_argument("--seed", type=int, default=TrainConfig.seed)
    p.add_argument("--lambdas", type=_lambda_list, default=DEFAULT_LAMBDAS)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr-hash", type=float, default=TrainConfig.lr_hash)
    p.add_argument("--lr-mlp", type=float, default=TrainConfig.lr_mlp)
    p.add_argument("--average-lambdas", action="store_true")
    p.add_argument("--no-agnostic", action="store_true")
    p.add_argument("--no-context", action="store_true")
    p.add_argument("--rf", type=int, default=DEFAULT_RF)
    p.add_argument("--n", type=int, default=DEFAULT_N)
    p.add_argument("--log", default=None, help="write the per-iteration log (TSV) here")
    p.add_argument("--eval", action="store_true",
                   help="compress at every lambda afterwards and report the RD rows")

    p = sub.add_parser("inspect", parents=common, help="storage breakdown of a bitstream")
    p.add_argument("input")

    p = sub.add_parser("stats", parents=common, help="context selection statistics")
    p.add_argument("input")
    p.add_argument("--rf", type=int, default=DEFAULT_RF)
    p.add_argument("--n", type=int, default=DEFAULT_N)

    p = sub.add_parser("synth", parents=common, help="write a synthetic scene")
    p.add_argument("--n", type=int, required=True, help="anchor count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pattern", choices=PATTERNS, default="uniform")
    p.add_argument("--correlation", choices=CORRELATIONS, default="spatially-correlated")
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--offsets", type=int, default=10)
    p.add_argument("--voxel-size", type=float, default=0.05)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", parents=common, help="codec throughput on a synthetic scene")
    p.add_argument("--n", type=int, default=BENCH_ANCHORS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", default=None, help="defaults to a freshly initialised model")
    p.add_argument("--lambda", dest="lam", type=_lambda, default=DEFAULT_LAMBDA)
    p.add_argument("--baseline", default=None, help="JSON file with reference throughput")
    p.add_argument("--write-baseline", action="store_true",
                   help="store this run as the new baseline")
    return parser


# ---------------------------------------------------------------- helpers

def show_config() -> list:
    cfg = TrainConfig()
    rows = [("version", __version__),
            ("lambda.grid", ",".join(repr(x) for x in DEFAULT_LAMBDAS)),
            ("lambda.default", DEFAULT_LAMBDA),
            ("lambda.range", f"{LAMBDA_MIN},{LAMBDA_MAX}"),
            ("context.rf", DEFAULT_RF), ("context.n", DEFAULT_N),
            ("location.levels", QMAX + 1),
            ("bench.anchors", BENCH_ANCHORS),
            ("model_dir.env", MODEL_DIR_ENV),
            ("model_dir", os.environ.get(MODEL_DIR_ENV, ""))]
    rows += [(f"base_step.{k}", v) for k, v in BASE_STEP.items()]
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        rows.append((f"train.{f.name}", v))
    return rows


def resolve_model_path(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    base = os.environ.get(MODEL_DIR_ENV)
    if base and not path.is_absolute():
        alt = Path(base) / name
        if alt.exists():
            return alt
    raise FileNotFoundError(f"model file not found: {name}")


def load_model(name: str) -> HemgsModel:
    return HemgsModel.from_bytes(resolve_model_path(name).read_bytes())


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    return p


def _check_output(out, *inputs) -> Path:
    out = Path(out)
    if out.parent and not out.parent.exists():
        raise FileNotFoundError(f"output directory does not exist: {out.parent}")
    for src in inputs:
        if src is not None and out.exists() and out.resolve() == Path(src).resolve():
            raise ValueError(f"refusing to overwrite input file {src}")
    return out


def _emit(text: str, stream=None):
    (stream or sys.stdout).write(text)


def _plot_dir(args) -> Path | None:
    return Path(args.plot) if args.plot else None


# ---------------------------------------------------------------- subcommands

def cmd_compress(args) -> int:
    src = _need_file(args.input)
    model_path = resolve_model_path(args.model)
    out = _check_output(args.out, src, model_path)
    scene = load_scene(src, strict=args.strict)
    model = HemgsModel.from_bytes(model_path.read_bytes())
    data = compress(scene, model, args.lam)
    out.write_bytes(data)
    report = inspect(data)
    _emit(format_rows([("output", str(out))] + report.rows(), args.format))
    if (d := _plot_dir(args)) is not None:
        plot_storage(report.columns(), d / "storage.png")
    return EXIT_OK


def cmd_decompress(args) -> int:
    src = _need_file(args.input)
    out = _check_output(args.out, src)
    model = load_model(args.model) if args.model else None
    scene = decompress(src.read_bytes(), model)
    save_scene(scene, out)
    _emit(format_rows([("output", str(out)), ("anchors", len(scene)),
                       ("feature_dim", scene.feature_dim),
                       ("offsets_per_anchor", scene.offsets_per_anchor)], args.format))
    return EXIT_OK


def cmd_train(args) -> int:
    src = _need_file(args.input)
    out = _check_output(args.out, src)
    log_path = _check_output(args.log, src) if args.log else None
    cfg = TrainConfig(lambdas=args.lambdas, iterations=args.iterations, seed=args.seed,
                      batch_size=args.batch_size, lr_hash=args.lr_hash, lr_mlp=args.lr_mlp,
                      average_lambdas=args.average_lambdas, use_agnostic=not args.no_agnostic,
                      use_context=not args.no_context, rf=args.rf, n=args.n)
    scene = load_scene(src, strict=args.strict)
    model, log = train(scene, cfg)
    out.write_bytes(model.to_bytes())
    if log_path is not None:
        log_path.write_text(format_records(log.header(), log.rows, "tsv"))
    last = log.rows[-1] if log.rows else (0, 0.0, 0.0, 0.0, 0.0)
    rows = [("output", str(out)), ("anchors", len(scene)), ("iterations", cfg.iterations),
            ("seconds", round(log.seconds, 3)), ("final.lambda", last[1]),
            ("final.distortion", last[2]), ("final.rate_bits", last[3]),
            ("final.total", last[4])]
    _emit(format_rows(rows, args.format))
    plots = _plot_dir(args)
    if plots is not None:
        plot_training(log, plots / "training.png")
    if args.eval:
        rd = eval_rd(scene, model, cfg.lambdas)
        header = ("lambda", "total_bytes", "feature_bytes", "scof_bytes", "estimate_bits",
                  "distortion.feature", "distortion.scaling", "distortion.offsets")
        records = [(r.lam, r.total_bytes, r.feature_bytes, r.scof_bytes, r.estimate_bits,
                    r.distortion["feature"], r.distortion["scaling"], r.distortion["offsets"])
                   for r in rd]
        _emit(format_records(header, records, "kv" if args.format == "kv" else args.format))
        if plots is not None:
            w = cfg.weights
            dist = [sum(wi * r.distortion[a] for wi, a in zip(w, ("feature", "scaling", "offsets")))
                    for r in rd]
            plot_rd({"model": ([r.total_bytes for r in rd], dist)}, plots / "rd.png")
    return EXIT_OK


def cmd_inspect(args) -> int:
    report = inspect(_need_file(args.input).read_bytes())
    _emit(format_rows(report.rows(), args.format))
    if (d := _plot_dir(args)) is not None:
        plot_storage(report.columns(), d / "storage.png")
    return EXIT_OK


def cmd_stats(args) -> int:
    scene = load_scene(_need_file(args.input), strict=args.strict)
    _, order = scene_coding_order(scene)
    table = select_contexts(order, args.rf, args.n)
    avg, mx, sparse = context_stats(table)
    rows = [("anchors", len(scene)), ("rf", args.rf), ("n", args.n),
            ("avg_selected", avg), ("max_selected", mx), ("sparse_fraction", sparse),
            ("dense_anchors", int(table.dense.sum()))]
    _emit(format_rows(rows, args.format))
    if (d := _plot_dir(args)) is not None:
        plot_context_histogram(table.counts, args.n, d / "context_hist.png")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = _check_output(args.out)
    spec = SynthSpec(args.n, seed=args.seed, pattern=args.pattern, correlation=args.correlation,
                     feature_dim=args.feature_dim, offsets_per_anchor=args.offsets,
                     voxel_size=args.voxel_size)
    scene = synth_scene(spec)
    save_scene(scene, out)
    _emit(format_rows([("output", str(out)), ("anchors", len(scene)),
                       ("pattern", spec.pattern), ("correlation", spec.correlation)],
                      args.format))
    return EXIT_OK


def _timed(fn, *a):
    start = time.perf_counter()
    out = fn(*a)
    return out, time.perf_counter() - start


def cmd_bench(args) -> int:
    if args.n < 1:
        raise ValueError("bench needs at least one anchor")
    baseline_path = Path(args.baseline) if args.baseline else None
    baseline = None
    if baseline_path is not None and baseline_path.exists() and not args.write_baseline:
        baseline = json.loads(baseline_path.read_text())
    scene = synth_scene(SynthSpec(args.n, seed=args.seed))
    if args.model:
        model = load_model(args.model)
    else:
        model = HemgsModel.init(scene.feature_dim, scene.offsets_per_anchor, seed=args.seed)
        model.calibrate(scene)
    # warm the compiled kernels so the timings measure steady-state throughput
    warm = synth_scene(SynthSpec(200, seed=args.seed + 1))
    decompress(compress(warm, model, args.lam), model)
    data, t_enc = _timed(compress, scene, model, args.lam)
    back, t_dec = _timed(decompress, data, model)
    if len(back) != len(scene):
        raise CausalityError("decoded anchor count differs from the input")
    results = {"anchors": len(scene), "bytes": len(data),
               "bits_per_anchor": 8.0 * len(data) / len(scene),
               "encode_seconds": t_enc, "decode_seconds": t_dec,
               "encode_anchors_per_s": len(scene) / t_enc,
               "decode_anchors_per_s": len(scene) / t_dec}
    rows = list(results.items())
    if baseline:
        for k in ("encode_anchors_per_s", "decode_anchors_per_s"):
            if baseline.get(k):
                rows.append((f"relative.{k}", results[k] / baseline[k]))
    if args.write_baseline and baseline_path is not None:
        baseline_path.parent.mkdir(parents=True, exist_ok=True)
        baseline_path.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
        rows.append(("baseline_written", str(baseline_path)))
    _emit(format_rows(rows, args.format))
    if (d := _plot_dir(args)) is not None:
        plot_bench(results, d / "bench.png", baseline)
    return EXIT_OK


COMMANDS = {"compress": cmd_compress, "decompress": cmd_decompress, "train": cmd_train,
            "inspect": cmd_inspect, "stats": cmd_stats, "synth": cmd_synth, "bench": cmd_bench}


def _diagnostic(kind: str, detail) -> None:
    sys.stderr.write(f"error={kind} detail={json.dumps(str(detail))}\n")


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.show_config:
            _emit(format_rows(show_config(), args.format))
            return EXIT_OK
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        _diagnostic("usage", exc)
        return EXIT_USAGE
    except SystemExit as exc:          # --help / --version
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except CausalityError as exc:
        _diagnostic(type(exc).__name__, exc)
        return EXIT_INTERNAL
    except (HemgsError, ValueError, OSError, json.JSONDecodeError) as exc:
        _diagnostic(type(exc).__name__, exc)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        _diagnostic(type(exc).__name__, exc)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
