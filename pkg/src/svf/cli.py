"""Command-line front end.

Subcommands: run (one experiment), compare (strategy table), svd (factorize a
matrix file), spectrum (singular values as CSV), validate-features (check an
SVFF file), report (report JSON to flat CSV).

Exit codes: 0 success, 1 configuration or usage problem, 2 malformed or
corrupt data file, 3 numeric non-convergence. Diagnostics go to stderr; data
goes to stdout or into the requested output location.
"""

import argparse
import json
import os
import sys

import numpy as np

from .adapters import materialize
from .data import load_feature_file
from .errors import (
    ConfigError,
    ConvergenceError,
    CorruptionError,
    FormatError,
    InvalidInputError,
    LabelError,
    LayoutError,
    RankRangeError,
    ShapeError,
)
from .harness import (
    comparison_csv_rows,
    compare_strategies,
    config_from_json,
    csv_text,
    report_csv_rows,
    report_json_bytes,
    run_experiment,
    write_csv,
)
from .linalg import read_matrix_text, svd, write_matrix_text
from .model import BackboneConfig, model_from_json, random_base_weights

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

OUT_DIR_ENV = "SVF_OUT_DIR"

_DATA_ERRORS = (FormatError, CorruptionError, LabelError, LayoutError)
_CONFIG_ERRORS = (ConfigError, InvalidInputError, ShapeError, RankRangeError)


class _Parser(argparse.ArgumentParser):
    """Usage mistakes are configuration problems, so exit 1, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _describe(exc) -> str:
    msg = f"{type(exc).__name__}: {exc}"
    offset = getattr(exc, "offset", None)
    if offset is not None:
        msg += f" (byte offset {offset})"
    return msg


def _note(args, msg):
    if args.verbose:
        print(msg, file=sys.stderr)


def _out_dir(args) -> str:
    path = args.out or os.environ.get(OUT_DIR_ENV) or "."
    os.makedirs(path, exist_ok=True)
    return path


def _load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_json(json.load(fh))


def _emit(text, out_path):
    """Data sink shared by the streaming subcommands: file if asked, else stdout."""
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    config = _load_config(args.config)
    out = _out_dir(args)
    report = run_experiment(config, seed=args.seed)
    json_path = os.path.join(out, "report.json")
    with open(json_path, "wb") as fh:
        fh.write(report_json_bytes(report))
    csv_path = os.path.join(out, "report.csv")
    write_csv(report_csv_rows(report), csv_path)
    _note(args, f"wrote {json_path}")
    _note(args, f"wrote {csv_path}")
    print(
        f"kind={report.adapter_kind} seed={report.seed} "
        f"sessions={len(report.accuracies)} "
        f"a_avg={report.a_avg:.4f} pd={report.pd:.4f}"
    )
    return EXIT_OK


def cmd_compare(args) -> int:
    config = _load_config(args.config)
    out = _out_dir(args)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    table = compare_strategies(config, kinds)
    json_path = os.path.join(out, "comparison.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(table, sort_keys=True, separators=(",", ":")) + "\n")
    csv_path = os.path.join(out, "comparison.csv")
    write_csv(comparison_csv_rows(table), csv_path)
    _note(args, f"wrote {json_path}")
    _note(args, f"wrote {csv_path}")
    for kind in kinds:
        entry = table["kinds"][kind]
        gap = entry["median_final_gap"]
        print(
            f"kind={kind} params={entry['params_per_session']} "
            f"median_a_avg={entry['median_a_avg']:.4f} "
            f"median_pd={entry['median_pd']:.4f} "
            f"median_final_gap={'n/a' if gap is None else format(gap, '.4f')}"
        )
    return EXIT_OK


def cmd_svd(args) -> int:
    w = read_matrix_text(args.matrix)
    f = svd(w)
    out = _out_dir(args)
    for name, arr in (("u", f.u), ("sigma", f.sigma.reshape(1, -1)), ("v_t", f.v_t)):
        path = os.path.join(out, f"{name}.txt")
        write_matrix_text(path, arr)
        _note(args, f"wrote {path}")
    err = float(np.linalg.norm(f.u @ np.diag(f.sigma) @ f.v_t - w))
    print(
        f"shape={w.shape[0]}x{w.shape[1]} rank={f.numeric_rank} "
        f"sigma_max={f.sigma[0]:.6g} recon_err={err:.3g}"
    )
    return EXIT_OK


def _spectrum_matrix(args) -> np.ndarray:
    """The matrix whose spectrum is requested: text file, or checkpoint layer."""
    with open(args.source, "r", encoding="utf-8") as fh:
        head = fh.read(1)
    if head != "{":
        return read_matrix_text(args.source)
    with open(args.source, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if args.seed is None:
        raise ConfigError("checkpoint input needs --seed to rebuild base weights")
    cfg = doc["config"]
    backbone = BackboneConfig(
        layer_shapes=tuple(tuple(s) for s in cfg["layer_shapes"]),
        adapt_mask=tuple(cfg["adapt_mask"]),
        adapter_kind=cfg["adapter_kind"],
        rank=cfg["rank"],
    )
    state = model_from_json(doc, random_base_weights(backbone, seed=args.seed))
    if not 0 <= args.layer < len(state.layers):
        raise ConfigError(
            f"--layer {args.layer} out of range for {len(state.layers)} layers"
        )
    return materialize(state.layers[args.layer])


def cmd_spectrum(args) -> int:
    try:
        w = _spectrum_matrix(args)
    except (FormatError, KeyError, TypeError) as exc:
        # unparseable input is an operator mistake here, not a data-file error
        raise ConfigError(f"cannot parse {args.source}: {exc}") from exc
    f = svd(w)
    lines = ["index,singular_value"]
    lines += [f"{i},{v:.17g}" for i, v in enumerate(f.sigma)]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_validate_features(args) -> int:
    fs = load_feature_file(args.path)
    print(f"n_samples={fs.x.shape[0]} dim={fs.dim} n_classes={fs.n_classes}")
    counts = np.bincount(fs.y, minlength=fs.n_classes) if fs.y.size else np.zeros(
        fs.n_classes, dtype=int
    )
    for c in range(fs.n_classes):
        print(f"class {c}: {int(counts[c])}")
    return EXIT_OK


def cmd_report(args) -> int:
    with open(args.report, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        rows = [
            {
                "kind": doc["adapter_kind"],
                "seed": doc["seed"],
                "session": r["session_index"],
                "n_seen": r["n_seen"],
                "accuracy": r["accuracy"],
                "base_acc_fixed": r["base_acc_fixed"],
                "gap_final": r["gap_final"] if r["gap_final"] is not None else "",
                "params_per_session": doc["params_per_session"],
            }
            for r in doc["sessions"]
        ]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"not a report document: {args.report}: {exc}") from exc
    _emit(csv_text(rows), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="svf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, out_help):
        p.add_argument("-o", "--out", default=None, help=out_help)
        p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("run", help="run one experiment from a JSON config")
    p.add_argument("config", help="path to experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    common(p, f"output directory (default ${OUT_DIR_ENV} or .)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several adapter kinds on one stream")
    p.add_argument("config", help="path to experiment config JSON")
    p.add_argument(
        "--kinds", default="svf,lora,full", help="comma-separated adapter kinds"
    )
    common(p, f"output directory (default ${OUT_DIR_ENV} or .)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("svd", help="factorize a matrix text file")
    p.add_argument("matrix", help="path to matrix text file")
    common(p, f"output directory (default ${OUT_DIR_ENV} or .)")
    p.set_defaults(func=cmd_svd)

    p = sub.add_parser("spectrum", help="emit singular values as CSV")
    p.add_argument("source", help="matrix text file or model checkpoint JSON")
    p.add_argument("--layer", type=int, default=0, help="checkpoint layer index")
    p.add_argument(
        "--seed", type=int, default=None, help="base-weight seed for checkpoints"
    )
    p.add_argument("-o", "--out", default=None, help="CSV file (default stdout)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("validate-features", help="check an SVFF feature file")
    p.add_argument("path", help="path to SVFF file")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_validate_features)

    p = sub.add_parser("report", help="flatten a report JSON into CSV")
    p.add_argument("report", help="path to report JSON")
    p.add_argument("-o", "--out", default=None, help="CSV file (default stdout)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        print(_describe(exc), file=sys.stderr)
        return EXIT_DATA
    except ConvergenceError as exc:
        print(_describe(exc), file=sys.stderr)
        return EXIT_NUMERIC
    except _CONFIG_ERRORS as exc:
        print(_describe(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        # missing paths, bad JSON, and kindred operator mistakes
        print(_describe(exc), file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
