#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""Command-line entry point for GP-CCM / VGP-CCM coupling experiments."""

import argparse
import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path

from dotenv import load_dotenv

from services.ccm_stats import MODES, CouplingTestService
from services.config_service import parse_config, read_config_file, resolve_test_config
from services.errors import ConfigError, CouplingError
from services.experiment_service import ExperimentService, load_records
from services.report_service import emit_ecdf, format_summary_table, save_summary, select_record, summarize
from services.series_core import as_series, load_series_csv, load_series_json, standardize

load_dotenv()

logger = logging.getLogger("gpccm")

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_CONFIG = 2

DEFAULT_CONFIGS = {
    "reproduce-chaotic": Path("configs") / "desk_chaotic.json",
    "reproduce-neuro": Path("configs") / "desk_neuro.json",
}


def setup_logging(log_dir: str = None, level: str = None):
    """Console output plus a dated run log and a dated error-only log."""
    log_dir = log_dir or os.getenv("GPCCM_LOG_DIR", "logs")
    level = getattr(logging, (level or os.getenv("GPCCM_LOG_LEVEL", "INFO")).upper(), logging.INFO)
    os.makedirs(log_dir, exist_ok=True)

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
    )

    root = logging.getLogger()
    root.setLevel(level)
    for handler in list(root.handlers):
        root.removeHandler(handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    if hasattr(console_handler.stream, 'reconfigure'):
        console_handler.stream.reconfigure(encoding='utf-8')
    root.addHandler(console_handler)

    stamp = datetime.now().strftime("%Y%m%d")
    file_handler = logging.FileHandler(os.path.join(log_dir, f'gpccm_{stamp}.log'), encoding='utf-8')
    file_handler.setLevel(level)
    file_handler.setFormatter(formatter)
    root.addHandler(file_handler)

    error_handler = logging.FileHandler(os.path.join(log_dir, f'gpccm_errors_{stamp}.log'), encoding='utf-8')
    error_handler.setLevel(logging.ERROR)
    error_handler.setFormatter(formatter)
    root.addHandler(error_handler)
    return root


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="base seed, overrides the config")
    common.add_argument("--out", default=os.getenv("GPCCM_OUT_DIR"), help="output directory")
    common.add_argument("--jobs", type=int, default=int(os.getenv("GPCCM_JOBS", "1")), help="worker processes")
    common.add_argument("--profile", default=os.getenv("GPCCM_PROFILE"), choices=["desk", "full"])
    common.add_argument("--log-level", default=os.getenv("GPCCM_LOG_LEVEL", "INFO"))
    common.add_argument("--traces", action="store_true", help="also write the ELBO trace of every fit as CSV")

    parser = argparse.ArgumentParser(prog="gpccm", description=__doc__)
    verbs = parser.add_subparsers(dest="command", required=True)

    verbs.add_parser("simulate", parents=[common], help="write simulated realizations as CSV")

    test = verbs.add_parser("test", parents=[common], help="test one pair of series from files")
    test.add_argument("--x", required=True, help="first series (.csv with a 'value' column, or .json array)")
    test.add_argument("--y", required=True, help="second series")
    test.add_argument("--mode", choices=list(MODES) + ["both"], default="both")

    verbs.add_parser("reproduce-chaotic", parents=[common], help="Lorenz-Rossler coupling grid")
    verbs.add_parser("reproduce-neuro", parents=[common], help="neurovascular realizations")

    summary = verbs.add_parser("summarize", parents=[common], help="tables from a records file")
    summary.add_argument("--records", required=True, help="records.jsonl or its run directory")

    ecdf = verbs.add_parser("ecdf", parents=[common], help="null ECDF of one stored test")
    ecdf.add_argument("--records", required=True)
    ecdf.add_argument("--direction", required=True, help="e.g. X0->Y0")
    ecdf.add_argument("--mode", choices=MODES, default="vgpccm")
    ecdf.add_argument("--coupling", help="coupling label, e.g. (2.00,0.00)")
    ecdf.add_argument("--realization", type=int, default=0)
    return parser


def _overrides(args) -> dict:
    return {"base_seed": args.seed, "output_dir": args.out, "save_traces": args.traces or None}


def _load_spec(args):
    path = args.config or DEFAULT_CONFIGS.get(args.command)
    if path is None:
        raise ConfigError(f"'{args.command}' needs --config")
    return parse_config(path, args.profile, _overrides(args))


def cmd_simulate(args) -> int:
    spec = _load_spec(args)
    ExperimentService(spec, args.jobs, args.out).simulate_all()
    return EXIT_OK


def cmd_reproduce(args) -> int:
    spec = _load_spec(args)
    report = ExperimentService(spec, args.jobs, args.out).run()
    summary = summarize(report.records)
    save_summary(summary, report.out_dir)
    print(format_summary_table(summary))
    logger.info(f"{report.new_records} new records, {report.failures} failures in {report.out_dir}")
    return EXIT_FAILURES if report.failures else EXIT_OK


def _read_series(path: str):
    path = Path(path)
    if path.suffix.lower() == ".json":
        return load_series_json(path)
    return load_series_csv(path)


def cmd_test(args) -> int:
    raw_test = {}
    if args.config:
        raw_test = read_config_file(args.config).get("test", {})
    cfg = resolve_test_config(raw_test, args.profile, seed=args.seed or 0)
    x, y = _read_series(args.x), _read_series(args.y)
    if x.name == y.name:
        x, y = x.renamed(f"{x.name}_x"), y.renamed(f"{y.name}_y")
    service = CouplingTestService(standardize(as_series(x)), standardize(as_series(y)), cfg)
    modes = MODES if args.mode == "both" else (args.mode,)
    results = service.test_all(modes)

    out_dir = Path(args.out or "results")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "test_results.json", "w", encoding="utf-8") as f:
        json.dump([r.to_dict() for r in results], f, indent=2)
    if args.traces:
        service.save_traces(out_dir)
    for result in results:
        slug = result.direction.replace("->", "_to_")
        emit_ecdf(result, out_dir / f"ecdf_{slug}_{result.mode}.csv")
        print(f"{result.direction:>16} {result.mode:>7}  K={result.k_observed:+.4f}  "
              f"p={result.p_value:.3f}  {'reject H0' if result.reject_h0 else 'accept H0'}")
    return EXIT_OK


def cmd_summarize(args) -> int:
    records = load_records(args.records)
    summary = summarize(records)
    records_path = Path(args.records)
    out_dir = Path(args.out) if args.out else (records_path if records_path.is_dir() else records_path.parent)
    save_summary(summary, out_dir)
    print(format_summary_table(summary))
    return EXIT_OK


def cmd_ecdf(args) -> int:
    record = select_record(load_records(args.records), args.direction, args.mode, args.coupling, args.realization)
    records_path = Path(args.records)
    out_dir = Path(args.out) if args.out else (records_path if records_path.is_dir() else records_path.parent)
    slug = args.direction.replace("->", "_to_")
    path = emit_ecdf(record, out_dir / f"ecdf_{slug}_{args.mode}_r{args.realization:03d}.csv")
    logger.info(f"ECDF written to {path}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "test": cmd_test,
    "reproduce-chaotic": cmd_reproduce,
    "reproduce-neuro": cmd_reproduce,
    "summarize": cmd_summarize,
    "ecdf": cmd_ecdf,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(level=args.log_level)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (CouplingError, LookupError, OSError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_FAILURES


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info("Interrupted")
        sys.exit(EXIT_FAILURES)
