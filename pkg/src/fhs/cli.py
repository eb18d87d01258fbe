"""Command line entry point.

Usage:
  python -m fhs run --config toy.json --out runs/toy
  python -m fhs sweep --config mnist.json --axis local_steps --values 20,30,40,50 --out runs/T
  python -m fhs plotdata runs/toy/metrics.csv --out runs/toy/plots
  python -m fhs partition --config mnist.json
  python -m fhs bound --config toy.json --out runs/toy
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, with_seed
from .datasets import IdxFormatError
from .harness import (MetricsFormatError, bound_rows, build_data, format_partition, load_models,
                      run, sweep, write_plotdata, write_text)
from .divergence import format_bound_report

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed_override is not None:
        cfg = with_seed(cfg, args.seed_override)
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_dir)


def _parse_values(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            out.append(int(tok))
        except ValueError:
            try:
                out.append(float(tok))
            except ValueError:
                out.append(tok)
    if not out:
        raise argparse.ArgumentTypeError("no sweep values given")
    return out


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    res = run(cfg, out)
    print(f"{cfg.federation.method}: {len(res.history)} rounds, "
          f"final global_acc={res.final_accuracy:.4f} -> {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    rows = sweep(cfg, args.axis, args.values, out)
    for v, acc in rows:
        print(f"{args.axis}={v}: final_acc={acc:.4f}")
    print(f"summary -> {out / 'summary.csv'}")
    return EXIT_OK


def cmd_plotdata(args) -> int:
    out = Path(args.out) if args.out else Path(args.metrics[0]).parent / "plotdata"
    for path in write_plotdata(args.metrics, out):
        print(path)
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = _load(args)
    text = format_partition(build_data(cfg))
    if args.out:
        write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_bound(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    data = build_data(cfg)
    global_params, locals_ = load_models(out, cfg, data.layer_sizes)
    text = format_bound_report(bound_rows(cfg, data, global_params, locals_),
                               global_params.num_predictor_params())
    write_text(out / "bound_report.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fhs", description="Federated generator simulator",
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog=__doc__.split("\n", 2)[2])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, out_help="output directory (default: config output_dir)"):
        p.add_argument("--config", required=True, help="experiment config (JSON) or run manifest")
        p.add_argument("--out", default=None, help=out_help)
        p.add_argument("--seed-override", type=int, default=None, help="replace the root seed")
        return p

    with_config(sub.add_parser("run", help="run one experiment")).set_defaults(fn=cmd_run)
    p = with_config(sub.add_parser("sweep", help="run one experiment per axis value"))
    p.add_argument("--axis", required=True, help="config field, dotted or unique leaf name")
    p.add_argument("--values", required=True, type=_parse_values, help="comma-separated values")
    p.set_defaults(fn=cmd_sweep)
    p = sub.add_parser("plotdata", help="per-method accuracy series from metrics CSVs")
    p.add_argument("metrics", nargs="+", help="metrics.csv files")
    p.add_argument("--out", default=None, help="directory for series_<method>.csv")
    p.set_defaults(fn=cmd_plotdata)
    with_config(sub.add_parser("partition", help="print per-client class histograms"),
                out_help="write the table here instead of stdout").set_defaults(fn=cmd_partition)
    with_config(sub.add_parser("bound", help="bound report from saved checkpoints"),
                out_help="run directory holding checkpoints/").set_defaults(fn=cmd_bound)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MetricsFormatError, IdxFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
