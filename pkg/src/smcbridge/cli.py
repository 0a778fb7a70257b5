"""Command-line interface.

Four subcommands cover the experiment life cycle:

- ``simulate``: write the config's dataset(s) to versioned JSON files;
- ``run``: execute the sweep x replicate grid and write results.csv
  (plus optional per-cell trace files);
- ``report``: aggregate one or more results files into per-cell summary
  and cross-sampler ratio tables;
- ``diagnose``: print chain diagnostics for a stored trace file.

Exit codes: 0 success, 2 configuration error (bad config file, bad flags,
missing inputs), 3 runtime failure.  The ``SMCBRIDGE_THREADS`` environment
variable overrides any configured or flagged thread count.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .diagnostics import diagnostics_report
from .harness import (ConfigError, aggregate_report, generate_dataset,
                      load_config, load_trace_npz, read_result_rows,
                      render_table, run_experiment, save_dataset_json,
                      write_dict_rows_csv)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smcbridge",
        description="Particle MCMC experiment harness for state-space models.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write the config's dataset files")
    sim.add_argument("--config", required=True, metavar="PATH")
    sim.add_argument("--seed", type=int, metavar="U64",
                     help="override the data seed")
    sim.add_argument("--out", metavar="DIR", help="override the output directory")

    run = sub.add_parser("run", help="execute the sweep and write results.csv")
    run.add_argument("--config", required=True, metavar="PATH")
    run.add_argument("--seed", type=int, metavar="U64",
                     help="override the master seed")
    run.add_argument("--threads", type=int, metavar="N")
    run.add_argument("--out", metavar="DIR")
    run.add_argument("--trace", metavar="MODE",
                     help="trace files per cell: none, thin:K, or full")

    rep = sub.add_parser("report", help="aggregate results files into tables")
    rep.add_argument("results", nargs="+", metavar="RESULTS_CSV")
    rep.add_argument("--baseline", metavar="KIND",
                     help="sampler the IAC ratios divide by")
    rep.add_argument("--out", metavar="DIR",
                     help="also write summary.csv and ratios.csv here")

    diag = sub.add_parser("diagnose", help="diagnostics for one trace file")
    diag.add_argument("trace", metavar="TRACE_NPZ")
    diag.add_argument("--t-scale", type=int, metavar="T", dest="t_scale",
                      help="multiply jump distances by this series length")
    diag.add_argument("--out", metavar="CSV",
                      help="also write the per-coordinate table as CSV")
    return parser


def cmd_simulate(args) -> int:
    config = load_config(args.config,
                         overrides={"data_seed": args.seed, "out": args.out})
    if config.data_source != "simulate":
        raise ConfigError("simulate needs data.source 'simulate'")
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for T in config.sweep_T:
        dataset = generate_dataset(config, T)
        path = out_dir / f"dataset_T{T}.json"
        save_dataset_json(path, dataset, config.model_kind,
                          config.model_params, config.data_seed)
        print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    config = load_config(args.config,
                         overrides={"seed": args.seed, "threads": args.threads,
                                    "out": args.out, "trace": args.trace})
    result = run_experiment(config)
    n_failed = sum(1 for r in result.rows if r["status"] != "ok")
    print(f"{len(result.rows)} row(s) -> {result.results_path}")
    if n_failed:
        print(f"{n_failed} cell(s) failed; see the status column",
              file=sys.stderr)
    if result.trace_paths:
        print(f"{len(result.trace_paths)} trace file(s) -> "
              f"{Path(result.trace_paths[0]).parent}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.results:
        rows.extend(read_result_rows(path))
    summaries, ratios, notes = aggregate_report(rows, baseline=args.baseline)
    print(render_table(summaries))
    if ratios:
        print(render_table(ratios))
    for note in notes:
        print(f"note: {note}", file=sys.stderr)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "summary.csv", "w", newline="") as fh:
            write_dict_rows_csv(fh, summaries)
        with open(out_dir / "ratios.csv", "w", newline="") as fh:
            write_dict_rows_csv(fh, ratios)
        print(f"tables -> {out_dir}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    trace = load_trace_npz(args.trace)
    report = diagnostics_report(trace, t_scale=args.t_scale)
    rows = report.rows()
    print(f"kind={trace.kind}  iterations={trace.iterations}  "
          f"burn_in={trace.burn_in}  post_burn={report.n_samples}  "
          f"accept_rate={report.accept_rate:.4f}")
    print(render_table(rows))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_dict_rows_csv(fh, rows)
        print(f"table -> {args.out}")
    return EXIT_OK


_COMMANDS = {"simulate": cmd_simulate, "run": cmd_run,
             "report": cmd_report, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        raise
    except Exception as err:  # noqa: BLE001 - surface as exit code 3
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
