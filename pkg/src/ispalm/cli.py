"""Command line entry point: ``ispalm {gen-data,run,grad-check,compare}``.

Exit codes: 0 success, 1 gradient check failed, 2 configuration or usage
error, 3 numerical failure (traces are still written), 4 file format error.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

from .errors import ConfigError, FormatError, NumericalError, UsageError
from .harness import ExperimentConfig, cmd_compare, cmd_gen_data, cmd_grad_check, cmd_run

EXIT_OK = 0
EXIT_GRAD_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_FORMAT = 4


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _load_config(args):
    cfg = ExperimentConfig.load(args.config)
    if args.seeds is not None or args.epochs is not None:
        obj = cfg.to_dict()
        if args.seeds is not None:
            obj["seeds"] = args.seeds
        if args.epochs is not None:
            obj["epochs"] = args.epochs
        cfg = ExperimentConfig.from_dict(obj)
    return cfg


def build_parser():
    parser = argparse.ArgumentParser(prog="ispalm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment JSON file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seeds", type=_seeds, help="comma-separated seed list override")
        p.add_argument("--epochs", type=int, help="epoch count override for every algorithm")

    common(sub.add_parser("gen-data", help="write dataset, ground truth and shared initialization"))
    common(sub.add_parser("run", help="run all algorithms over all seeds and write CSV traces"))
    gc = sub.add_parser("grad-check", help="finite-difference check of the analytic gradients")
    gc.add_argument("--problem", choices=("tmm", "pnn", "quadratic", "all"), default="all")
    gc.add_argument("--instances", type=int, help="random instances per problem")
    gc.add_argument("--corrupt", metavar="BLOCK[:FACTOR]",
                    help="scale one analytic block gradient (negative control, default factor 1.01)")
    cmp_ = sub.add_parser("compare", help="rank aggregate CSVs by final mean objective")
    cmp_.add_argument("paths", nargs="*", help="aggregate CSV files")
    cmp_.add_argument("--json", action="store_true", help="print the summary as JSON")
    return parser


def _grad_check(args):
    problems = ("tmm", "pnn") if args.problem == "all" else (args.problem,)
    corrupt = None
    if args.corrupt:
        block, _, factor = args.corrupt.partition(":")
        try:
            corrupt = (block, float(factor) if factor else 1.01)
        except ValueError:
            raise ConfigError(f"bad --corrupt factor {factor!r}") from None
    instances = {p: args.instances for p in problems} if args.instances else None
    ok, _ = cmd_grad_check(problems, instances, corrupt, stream=sys.stdout)
    return EXIT_OK if ok else EXIT_GRAD_FAIL


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "grad-check":
            return _grad_check(args)
        if args.command == "compare":
            result = cmd_compare(args.paths, stream=None if args.json else sys.stdout)
            if args.json:
                print(json.dumps(result, indent=1))
            return EXIT_OK
        cfg = _load_config(args)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            if args.command == "gen-data":
                for key, path in cmd_gen_data(cfg, args.out).items():
                    print(f"{key}: {path}")
            else:
                summary = cmd_run(cfg, args.out)
                failed = False
                for label, entry in summary["algorithms"].items():
                    statuses = {info["status"] for info in entry["runs"].values()}
                    failed = failed or any(s != "ok" for s in statuses)
                    print(f"{label}: {len(entry['runs'])} runs, status {','.join(sorted(statuses))}")
                if failed:
                    print("numerical failure: some runs were aborted (see the status column)", file=sys.stderr)
                    return EXIT_NUMERICAL
        return EXIT_OK
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
