"""``minprof`` command line: fetch data, run plans, analyze stores, write reports and plots.

Exit codes: 0 success, 2 usage or validation error, 3 missing prerequisites
(dataset not cached), 4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from collections import defaultdict
from pathlib import Path

import numpy as np
import yaml

from . import analysis as A
from .datasets import DATA_DIR_ENV, DATASET_NAMES, MissingDataError, default_data_dir
from .fetch import DigestError, fetch_dataset
from .orchestrator import ExperimentPlan, PlanError, check_data, query, run_plan
from .store import ResultStore, StoreError
from .svgplot import Series, line_band_svg, series_csv

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
PHASE_COMMANDS = {"sweep": ("FIRST_PHASE", "SECOND_PHASE"), "prune": ("PRUNE",), "quantize": ("QUANT",)}
PLOT_KINDS = ("convergence", "pruning", "quantization")


class UsageError(ValueError):
    pass


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--data-dir", default=None,
                        help=f"dataset cache root (default: ${DATA_DIR_ENV} or ~/.cache/minprof/data)")
    parser.add_argument("--out", default=".", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minprof", description="Profile minimal networks: capacity sweeps, "
                                                            "one-shot pruning and 8-bit QAT.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fetch", help="download and verify datasets")
    f.add_argument("datasets", nargs="*", metavar="DATASET",
                   help=f"any of {', '.join(DATASET_NAMES)} (default: all)")
    f.add_argument("--timeout", type=float, default=60.0)
    _common(f)

    for name in PHASE_COMMANDS:
        r = sub.add_parser(name, help=f"run a {'/'.join(PHASE_COMMANDS[name])} plan")
        r.add_argument("--plan", required=True)
        r.add_argument("--store", required=True)
        r.add_argument("--workers", type=int, default=1)
        r.add_argument("--repetitions", type=int, default=None)
        r.add_argument("--toy", action="store_true", help="2000/500 stratified subset and 3 repetitions")
        _common(r)

    for name, text in (("analyze", "print regime, pruning and quantization analyses"),
                       ("report", "write the summary table and per-cell details")):
        a = sub.add_parser(name, help=text)
        a.add_argument("--store", required=True)
        a.add_argument("--plan", default=None, help="plan whose thresholds section applies")
        a.add_argument("--threshold", action="append", default=[], metavar="NAME=VALUE")
        _common(a)

    pl = sub.add_parser("plot", help="write SVG charts and their data")
    pl.add_argument("--store", required=True)
    pl.add_argument("--kind", required=True, help=f"one of {PLOT_KINDS}")
    _common(pl)
    return p


# -- commands -----------------------------------------------------------------------
def cmd_fetch(args) -> int:
    data_dir = args.data_dir or default_data_dir()
    names = args.datasets or list(DATASET_NAMES)
    unknown = [n for n in names if n not in DATASET_NAMES]
    if unknown:
        raise UsageError(f"unknown dataset(s) {unknown}; known: {DATASET_NAMES}")
    status = EXIT_OK
    for name in names:
        try:
            result = fetch_dataset(name, data_dir, timeout=args.timeout)
        except DigestError as exc:
            print(f"{name}: digest mismatch: {exc}", file=sys.stderr)
            status = EXIT_RUNTIME
            continue
        except ConnectionError as exc:
            print(f"{name}: download failed: {exc}", file=sys.stderr)
            status = EXIT_RUNTIME
            continue
        print(f"{name}: {'already cached' if result == 'cached' else 'fetched and verified'}")
    return status


def _progress(entry, done, todo):
    rec = entry["record"]
    spec = rec["spec"]
    variant = f" {entry['variant']}" if entry["variant"] else ""
    outcome = rec["status"] if rec["status"] != "OK" else f"acc={rec['test_accuracy']:.4f}"
    print(f"[{done}/{todo}] {spec['dataset']} {spec['family']} L={spec['hidden_layers']} "
          f"cap={spec['capacity']} rep={entry['repetition']}{variant} {outcome}", flush=True)


def _summary_lines(entries) -> list:
    groups = defaultdict(list)
    for e in entries:
        rec = e["record"]
        if rec["status"] == "FAILED":
            continue
        s = rec["spec"]
        groups[(s["dataset"], s["family"], s["hidden_layers"], "-".join(s["pattern"]) or "-",
                e["variant"], s["capacity"])].append(rec["test_accuracy"])
    lines = []
    for (ds, fam, depth, pattern, variant, cap), acc in sorted(groups.items()):
        tag = f" {variant}" if variant else ""
        lines.append(f"{ds} {fam} L={depth} pattern={pattern} cap={cap}{tag}: "
                     f"mean={np.mean(acc):.4f} std={np.std(acc):.4f} n={len(acc)}")
    return lines


def cmd_run(args) -> int:
    plan = ExperimentPlan.load(args.plan).with_overrides(args.repetitions, args.toy)
    allowed = PHASE_COMMANDS[args.command]
    if plan.phase not in allowed:
        raise PlanError("phase", f"'{args.command}' runs {'/'.join(allowed)} plans, got {plan.phase}")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    check_data(plan, args.data_dir)
    with ResultStore(args.store) as store:
        stats = run_plan(plan, store, args.workers, args.data_dir, progress=_progress)
        entries = query(store, {"plan_id": plan.plan_id, "phase": plan.phase})
    print(f"runs: {stats['total']} total, {stats['skipped']} already stored, "
          f"{stats['completed']} completed, {stats['failed']} failed")
    for line in _summary_lines(entries):
        print(line)
    return EXIT_RUNTIME if stats["failed"] else EXIT_OK


def _thresholds(args) -> A.Thresholds:
    base = {}
    if args.plan:
        base = dict(ExperimentPlan.load(args.plan).thresholds)
    for item in args.threshold:
        name, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--threshold expects NAME=VALUE, got {item!r}")
        try:
            base[name] = float(value)
        except ValueError as exc:
            raise UsageError(f"--threshold {name}: {value!r} is not a number") from exc
    return A.Thresholds.from_dict(base)


def _reports(args):
    th = _thresholds(args)
    with ResultStore(args.store, readonly=True) as store:
        phases = A.records_by_phase(store.entries())
    return A.analyze_records(phases, th), th


def _details(reports, th) -> dict:
    return {"thresholds": th.__dict__, "cells": [r.to_dict() for r in reports]}


def cmd_analyze(args) -> int:
    reports, th = _reports(args)
    if not reports:
        print("store holds no analyzable records")
    for rep in reports:
        print(f"{rep.dataset} {rep.family} (L={rep.hidden_layers})")
        if rep.labels:
            for cap, lab in zip(rep.capacities, rep.labels):
                print(f"  capacity {cap:>5}: {lab}")
        print(f"  min stable params: {rep.min_stable_params if rep.min_stable_params_raw is not None else A.NA}")
        print(f"  safe pruning: {A.NA if rep.safe_pruning_pct is None else str(rep.safe_pruning_pct) + '%'}")
        if rep.pruning_bands:
            for band, rates in rep.pruning_bands.items():
                print(f"    {band}: {[round(100 * r) for r in rates]}")
        print(f"  8-bit gap: {A.NA if rep.gap_8bit_pp is None else f'{rep.gap_8bit_pp:.2f} pp'}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "analysis.yaml").write_text(yaml.safe_dump(_details(reports, th), sort_keys=False))
    return EXIT_OK


def cmd_report(args) -> int:
    reports, th = _reports(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = A.summarize_table(reports)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = A.table_text(rows)
    (out / "table.txt").write_text(text)
    (out / "table.csv").write_text(A.table_csv(rows))
    (out / "report.yaml").write_text(yaml.safe_dump({"table": rows, **_details(reports, th)}, sort_keys=False))
    print(text, end="")
    return EXIT_OK


def _aggregate(entries, key_fn, x_fn):
    groups = defaultdict(lambda: defaultdict(list))
    for e in entries:
        rec = e["record"]
        if rec["status"] == "FAILED":
            continue
        for x, acc in x_fn(rec):
            groups[key_fn(e)][x].append(acc)
    return {k: (sorted(v), [float(np.mean(v[x])) for x in sorted(v)], [float(np.std(v[x])) for x in sorted(v)])
            for k, v in sorted(groups.items())}


def _write_plot(out: Path, stem: str, series, **kw) -> list:
    (out / f"{stem}.svg").write_text(line_band_svg(series, **kw))
    (out / f"{stem}.csv").write_text(series_csv(series))
    return [f"{stem}.svg", f"{stem}.csv"]


def _uniform(e) -> bool:
    return all(p == "equal" for p in e["record"]["spec"]["pattern"])


def cmd_plot(args) -> int:
    if args.kind not in PLOT_KINDS:
        raise UsageError(f"--kind must be one of {PLOT_KINDS}, got {args.kind!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ResultStore(args.store, readonly=True) as store:
        entries = store.entries()
    cell = lambda e: (e["record"]["spec"]["dataset"], e["record"]["spec"]["family"])  # noqa: E731
    written = []
    if args.kind == "convergence":
        chosen = [e for e in entries if e["phase"] == "SECOND_PHASE" and _uniform(e)]
        if not chosen:
            chosen = [e for e in entries if e["phase"] == "FIRST_PHASE" and _uniform(e)]
        agg = _aggregate(chosen, lambda e: (*cell(e), e["record"]["spec"]["hidden_layers"]),
                         lambda r: [(r["spec"]["capacity"], r["test_accuracy"])])
        for ds, fam in sorted({k[:2] for k in agg}):
            series = [Series(f"{d} hidden", *agg[(ds, fam, d)]) for (a, b, d) in agg if (a, b) == (ds, fam)]
            written += _write_plot(out, f"convergence_{ds}_{fam}", series, title=f"{ds} {fam} convergence",
                                   x_label="capacity", log_x=True)
    elif args.kind == "pruning":
        chosen = [e for e in entries if e["phase"] == "PRUNE" and "prune" in e["record"]["extras"]]
        agg = _aggregate(chosen, lambda e: (*cell(e), e["record"]["spec"]["hidden_layers"],
                                            e["record"]["spec"]["capacity"]),
                         lambda r: zip([round(100 * x) for x in r["extras"]["prune"]["rates"]],
                                       r["extras"]["prune"]["accuracy"]))
        for ds, fam in sorted({k[:2] for k in agg}):
            series = [Series(f"L={d} cap={c}", *agg[(a, b, d, c)]) for (a, b, d, c) in agg if (a, b) == (ds, fam)]
            written += _write_plot(out, f"pruning_{ds}_{fam}", series, title=f"{ds} {fam} one-shot L1 pruning",
                                   x_label="pruning ratio (%)", x_range=(10, 100))
    else:
        chosen = [e for e in entries if e["phase"] == "QUANT"]
        agg = _aggregate(chosen, lambda e: (*cell(e), e["record"]["spec"]["hidden_layers"], e["variant"]),
                         lambda r: [(r["spec"]["capacity"], r["test_accuracy"])])
        for ds, fam in sorted({k[:2] for k in agg}):
            series = [Series(f"L={d} {v}", *agg[(a, b, d, v)], dashed=(v == "int8"))
                      for (a, b, d, v) in agg if (a, b) == (ds, fam)]
            written += _write_plot(out, f"quantization_{ds}_{fam}", series, title=f"{ds} {fam} fp32 vs int8",
                                   x_label="capacity", log_x=True)
    if not written:
        print(f"no {args.kind} records in store", file=sys.stderr)
        return EXIT_MISSING
    for name in written:
        print(out / name)
    return EXIT_OK


COMMANDS = {"fetch": cmd_fetch, "sweep": cmd_run, "prune": cmd_run, "quantize": cmd_run,
            "analyze": cmd_analyze, "report": cmd_report, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except MissingDataError as exc:
        print(f"error: {exc}\nhint: run `minprof fetch --data-dir <dir> <dataset>` first", file=sys.stderr)
        return EXIT_MISSING
    except (PlanError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StoreError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
