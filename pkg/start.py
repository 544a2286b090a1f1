"""
Command-line entry point for the FedKD-hybrid lithography simulator
Subcommands: generate-data, import-csv, run, compare, gradcheck, diagnose
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from experiment import (
    ConfigError,
    DataError,
    compare_runs,
    generate_datasets,
    load_config,
    run_diagnostics,
    run_experiment,
    run_gradcheck,
    stats_block,
    write_datasets,
)
from fed_protocol import InvariantViolation, ProtocolError
from litho_data import DatasetError, import_csv, save_dataset
from nn_engine import NonFiniteError, ShapeError

# Configure logging
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=logging.INFO
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class CheckFailed(Exception):
    """A gradcheck / diagnose check did not pass"""


def cmd_generate_data(args) -> int:
    """Write public/private/test dataset files and print their class balance"""
    cfg = load_config(args.config, {"seed": args.seed, "n_train": args.n, "preset": args.preset})
    out = Path(args.out or cfg.out_dir)
    datasets = generate_datasets(cfg)
    paths = write_datasets(datasets, out)
    print(stats_block(datasets).to_string(index=False))
    for key, path in paths.items():
        logger.info(f"Wrote {key} dataset to {path}")
    return EXIT_OK


def cmd_import_csv(args) -> int:
    """Convert a CSV of 144 pixel columns plus a label column to the binary format"""
    try:
        d = import_csv(args.csv)
        path = save_dataset(d, args.output)
    except DatasetError as e:
        raise DataError(str(e)) from e
    logger.info(f"Imported {len(d)} samples ({d.hotspot_count} hotspots) into {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "out_dir": args.out})
    manifest, run_dir = run_experiment(cfg)
    final = manifest.records[-1]
    print(f"{run_dir}: accuracy={final['accuracy']} tpr={final['tpr']} fpr={final['fpr']}")
    return EXIT_OK


def cmd_compare(args) -> int:
    df = compare_runs(args.dir)
    out = Path(args.dir) / "summary.csv"
    df.to_csv(out, index=False, float_format="%.6f", na_rep="", lineterminator="\n")
    print(df.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.seed or 0)
    print("\n".join(report.summary_lines()))
    if not report.passed:
        raise CheckFailed(f"gradcheck failed for layers {', '.join(report.failing_layers)}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed})
    out = Path(args.out or cfg.out_dir) / "diagnostics.json"
    report, passed = run_diagnostics(cfg, out)
    eq = report["descent_equality_case"]
    print(f"descent equality case: lhs={eq['lhs']:.17g} rhs={eq['rhs']:.17g}")
    for name, constants in report["constants"].items():
        print(f"{name}: " + " ".join(f"{k}={v:.6g}" for k, v in constants.items() if isinstance(v, float)))
    logger.info(f"Diagnostics written to {out}")
    if not passed:
        failing = [f"descent/{n}" for n, r in report["descent"].items() if not r["passed"]]
        failing += [f"rate/{n}" for n, r in report["rate"].items() if not r["passed"]]
        raise CheckFailed(f"failing checks: {', '.join(failing)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="start.py", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="flat key = value config file (FEDKD_* env vars override it)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        return p

    gen = common(sub.add_parser("generate-data", help="generate synthetic dataset files"))
    gen.add_argument("--n", type=int, default=None, help="training samples before the public/private split")
    gen.add_argument("--preset", choices=["none", "iccad", "fab"], default=None)
    gen.set_defaults(func=cmd_generate_data)

    imp = sub.add_parser("import-csv", help="convert a CSV of flattened pixels + label")
    imp.add_argument("csv")
    imp.add_argument("output")
    imp.set_defaults(func=cmd_import_csv)

    common(sub.add_parser("run", help="run one configured experiment")).set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="summarize completed runs")
    cmp_.add_argument("dir", help="directory searched for manifest.json files")
    cmp_.set_defaults(func=cmd_compare)

    common(sub.add_parser("gradcheck", help="finite-difference check of the hotspot CNN"),
           config=False).set_defaults(func=cmd_gradcheck)
    common(sub.add_parser("diagnose", help="convergence checks on convex surrogates")).set_defaults(func=cmd_diagnose)
    return parser


def _fail(kind: str, message, code: int) -> int:
    logger.error(f"{kind} error: {message}")
    print(f"{kind}_error: {message}", file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        return args.func(args)
    except (CheckFailed, InvariantViolation) as e:
        return _fail("check", e, EXIT_CHECK_FAILED)
    except (ConfigError, ProtocolError, ShapeError) as e:
        return _fail("config", e, EXIT_CONFIG)
    except (DataError, DatasetError) as e:
        return _fail("data", e, EXIT_DATA)
    except NonFiniteError as e:
        return _fail("numerical", e, EXIT_NUMERICAL)


if __name__ == "__main__":
    sys.exit(main())
