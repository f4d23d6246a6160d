"""Command line entry point: ``critfl run | sweep | gen-data``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import generate_synthetic_split, save_dataset
from .errors import ConfigError, DataError, InputError
from .harness import emit_metrics, load_config, run_experiment, sweep_recover_rounds

log = logging.getLogger("critfl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_IO = 0, 2, 3, 4


def _int_list(text: str, allow_never: bool = False) -> list:
    out = []
    for item in text.split(","):
        item = item.strip()
        if allow_never and item.lower() == "never":
            out.append(None)
            continue
        try:
            out.append(int(item))
        except ValueError:
            raise argparse.ArgumentTypeError(f"not an integer: {item!r}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="critfl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", required=True, type=Path)

    sweep = sub.add_parser("sweep", help="sweep recover rounds over several seeds")
    sweep.add_argument("--config", required=True, type=Path)
    sweep.add_argument("--recover-rounds", required=True,
                       type=lambda s: _int_list(s, allow_never=True),
                       help="comma separated, e.g. 0,10,40,80 ('never' allowed)")
    sweep.add_argument("--seeds", required=True, type=_int_list, help="comma separated")
    sweep.add_argument("--out", required=True, type=Path)
    sweep.add_argument("--jobs", type=int, default=1, help="parallel runs (processes)")

    gen = sub.add_parser("gen-data", help="write a synthetic Gaussian-mixture CSV")
    gen.add_argument("--classes", required=True, type=int)
    gen.add_argument("--dim", required=True, type=int)
    gen.add_argument("--n", required=True, type=int)
    gen.add_argument("--spread", required=True, type=float)
    gen.add_argument("--seed", required=True, type=int)
    gen.add_argument("--out", required=True, type=Path)
    gen.add_argument("--mean-scale", type=float, default=None,
                     help="scale of the class means (default 1/sqrt(dim))")
    gen.add_argument("--n-test", type=int, default=0, help="also draw a test set of this size")
    gen.add_argument("--test-out", type=Path, help="where to write the test set")
    return parser


def _run(args) -> None:
    record = run_experiment(load_config(args.config))
    for path in emit_metrics(record, args.out):
        log.info("wrote %s", path)
    print(f"final_accuracy={record.final_accuracy:.4f} rounds_to_target={record.rounds_to_target}")


def _sweep(args) -> None:
    summary = sweep_recover_rounds(load_config(args.config), args.recover_rounds, args.seeds,
                                   jobs=args.jobs)
    emit_metrics(summary, args.out)
    for row in summary.rows:
        m = "never" if row.recover_round is None else row.recover_round
        print(f"M={m}: acc={row.mean_final_accuracy:.4f}+-{row.std_final_accuracy:.4f} "
              f"cum_trace={row.mean_cum_trace:.4g}")


def _gen_data(args) -> None:
    if args.n_test and args.test_out is None:
        raise ConfigError("--n-test needs --test-out")
    train, test = generate_synthetic_split(args.classes, args.dim, args.n, args.n_test,
                                           args.spread, args.seed, args.mean_scale)
    save_dataset(train, args.out)
    if test is not None:
        save_dataset(test, args.test_out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _run, "sweep": _sweep, "gen-data": _gen_data}[args.command]
    try:
        handler(args)
    except (ConfigError, InputError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK
