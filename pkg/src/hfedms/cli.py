"""Command-line entry point: run, group, traffic, sweep.

Exit codes: 0 success, 2 configuration or input error, 3 runtime error
(including training divergence).
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import config as cfgmod
from . import icg, lasp, metrics, stp
from .datastream import DataFormatError
from .nncore import TrainingDiverged

log = logging.getLogger("hfedms")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# transfer-byte rows of the reference comparison: (label, T, R); T=None is the two-transfer formula
REFERENCE_ROWS = [("fedavg", None, 490), ("hfedms-s", 1, 32), ("hfedms-d", 3, 36),
                  ("hfedms-d", 5, 34), ("hfedms-d", 7, 67), ("hfedms-d", 9, 81)]


def _resolve_config(args: argparse.Namespace, **extra: Any) -> cfgmod.ExperimentConfig:
    overrides = dict(cfgmod.parse_override(s) for s in (args.set or []))
    for key in ("seed", "mode", "workers"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    overrides.update(extra)
    if overrides.get("mode") and overrides["mode"] != "hfedms-d" and "scc" not in overrides:
        overrides["scc"] = None
    if args.config is None:
        return cfgmod.load_preset("small", **overrides)
    path = Path(args.config)
    if not path.exists() and not path.suffix and cfgmod.preset_path(args.config).exists():
        return cfgmod.load_preset(args.config, **overrides)
    return cfgmod.load_config(path, overrides)


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------

def cmd_run(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    result = stp.run_experiment(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(out / "metrics.csv", result.metrics)
    summary = result.summary()
    _write_json(out / "summary.json", summary)
    print(json.dumps({k: v for k, v in summary.items() if k != "config"}, sort_keys=True))
    return EXIT_OK


def read_distribution_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Rows of ``client,count_0,...,count_{F-1}``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"distribution file not found: {path}")
    names, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "client" or len(header) < 3:
            raise DataFormatError("header must be client,count_0,...", line=1)
        width = len(header) - 1
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != width + 1:
                raise DataFormatError(f"expected {width + 1} fields, got {len(rec)}", line=lineno)
            try:
                counts = [float(v) for v in rec[1:]]
            except ValueError as exc:
                raise DataFormatError(str(exc), line=lineno) from None
            if any(c < 0 or not np.isfinite(c) for c in counts):
                raise DataFormatError("counts must be finite and non-negative", line=lineno)
            names.append(rec[0].strip())
            rows.append(counts)
    if not rows:
        raise DataFormatError("no client rows")
    return names, np.array(rows)


def cmd_group(args: argparse.Namespace) -> int:
    names, V = read_distribution_csv(args.input)
    ga = icg.inter_cluster_grouping(range(len(names)), V, args.M, args.seed,
                                    args.tau_max, n_init=args.restarts)
    lines = ["group,position,client"]
    for g, members in enumerate(ga.groups):
        lines += [f"{g},{i},{names[c]}" for i, c in enumerate(members)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    report: dict[str, Any] = {"M": ga.M, "L": len(ga.clusters), "idle": [names[c] for c in ga.idle]}
    if ga.M > 1:
        report["icg"] = icg.grouping_quality(ga.groups, V)
        report["random"] = icg.grouping_quality(icg.random_grouping(range(len(names)), args.M, args.seed).groups, V)
    print(json.dumps(report, sort_keys=True), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def traffic_rows(kappa: float, K: int, params: float, classifier_params: float,
                 rows: Sequence[tuple[str, int | None, int]], link: lasp.LinkModel) -> list[dict]:
    out = []
    for label, T, R in rows:
        if T is None or T == 1:
            b = lasp.closed_form_traffic_s(kappa, K, params, R)
        else:
            b = lasp.closed_form_traffic_d(kappa, K, params, classifier_params, R, T)
        out.append({"algorithm": label, "T": "" if T is None else T, "R": R, "bytes": b,
                    "tib": lasp.to_tib(b), "hours": lasp.to_hours(lasp.runtime_estimate(b, link))})
    return out


def _parse_row(text: str) -> tuple[str, int | None, int]:
    """``fedavg:R``, ``s:R`` or ``d:T:R``."""
    parts = text.lower().split(":")
    try:
        if parts[0] in ("fedavg", "f") and len(parts) == 2:
            return "fedavg", None, int(parts[1])
        if parts[0] in ("s", "hfedms-s") and len(parts) == 2:
            return "hfedms-s", 1, int(parts[1])
        if parts[0] in ("d", "hfedms-d") and len(parts) == 3:
            return "hfedms-d", int(parts[1]), int(parts[2])
    except ValueError:
        pass
    raise cfgmod.ConfigError(f"bad --row {text!r}; use fedavg:R, s:R or d:T:R")


def cmd_traffic(args: argparse.Namespace) -> int:
    rows = [_parse_row(r) for r in args.row] if args.row else REFERENCE_ROWS
    if any(R < 0 for _, _, R in rows) or any(T is not None and T < 1 for _, T, _ in rows):
        raise cfgmod.ConfigError("rounds must be >= 0 and T >= 1")
    link = lasp.LinkModel(args.rate_up, args.rate_down, args.bytes_per_param)
    table = traffic_rows(args.kappa, args.K, args.params, args.classifier_params, rows, link)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["algorithm", "T", "R", "bytes", "tib", "hours"])
    for r in table:
        w.writerow([r["algorithm"], r["T"], r["R"], f"{r['bytes']:.6e}", f"{r['tib']:.4f}", f"{r['hours']:.1f}"])
    return EXIT_OK


def _grid(specs: Sequence[str]) -> list[dict[str, Any]]:
    axes = []
    for spec in specs:
        key, _, values = spec.partition("=")
        if not values:
            raise cfgmod.ConfigError(f"bad --grid {spec!r}; use key=v1,v2")
        axes.append([(key.strip(), cfgmod.parse_override(f"{key}={v}")[1]) for v in values.split(",")])
    return [dict(combo) for combo in itertools.product(*axes)] if axes else [{}]


SWEEP_COLUMNS = ["cell", "params", "final_acc", "final_loss", "total_bytes", "closed_form_bytes",
                 "total_tib", "est_hours", "error"]


def cmd_sweep(args: argparse.Namespace) -> int:
    specs = list(args.grid or [])
    if args.T:
        specs.append("T=" + args.T)
    cells = _grid(specs)
    base = _resolve_config(args)
    configs = [base.replace(**cell) for cell in cells]  # validation errors surface before any run

    def run_cell(item):
        i, cfg = item
        try:
            s = stp.run_experiment(cfg).summary()
            return [i, json.dumps(cells[i], sort_keys=True), f"{s['final_acc']:.6f}", f"{s['final_loss']:.6f}",
                    s["total_bytes"], f"{s['closed_form_bytes']:.0f}", f"{s['total_tib']:.6e}",
                    f"{s['est_hours']:.4f}", ""]
        except (TrainingDiverged, RuntimeError, ValueError) as exc:
            log.warning("cell %d failed: %s", i, exc)
            return [i, json.dumps(cells[i], sort_keys=True), "", "", "", "", "", "", str(exc)]

    items = list(enumerate(configs))
    if args.cell_workers > 1:
        with ThreadPoolExecutor(args.cell_workers) as pool:
            rows = list(pool.map(run_cell, items))
    else:
        rows = [run_cell(it) for it in items]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    w.writerows(rows)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(buf.getvalue(), encoding="utf-8")
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hfedms", description="Grouped sequential-to-parallel FL simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def experiment_flags(sp):
        sp.add_argument("--config", help="JSON config file or preset name (default: small)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=cfgmod.MODES)
        sp.add_argument("--workers", type=int, help="parallel group workers inside a run")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    run = sub.add_parser("run", help="simulate one experiment")
    experiment_flags(run)
    run.add_argument("--out", default="out", help="directory for metrics.csv and summary.json")
    run.set_defaults(func=cmd_run)

    grp = sub.add_parser("group", help="group clients from a class-count CSV")
    grp.add_argument("--input", required=True)
    grp.add_argument("--M", type=int, required=True)
    grp.add_argument("--seed", type=int, default=0)
    grp.add_argument("--tau-max", type=int, default=10)
    grp.add_argument("--restarts", type=int, default=10)
    grp.add_argument("--out", help="group CSV path (default: stdout)")
    grp.set_defaults(func=cmd_group)

    tr = sub.add_parser("traffic", help="closed-form transfer bytes and link time")
    tr.add_argument("--kappa", type=float, default=0.3)
    tr.add_argument("--K", type=int, default=368)
    tr.add_argument("--params", type=float, default=6.68e6)
    tr.add_argument("--classifier-params", type=float, default=6.3e3)
    tr.add_argument("--rate-up", type=float, default=4e6)
    tr.add_argument("--rate-down", type=float, default=7e6)
    tr.add_argument("--bytes-per-param", type=int, default=4)
    tr.add_argument("--row", action="append", help="fedavg:R, s:R or d:T:R (repeatable)")
    tr.set_defaults(func=cmd_traffic)

    sw = sub.add_parser("sweep", help="run a grid of experiments")
    experiment_flags(sw)
    sw.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="one sweep axis (repeatable)")
    sw.add_argument("--T", help="comma-separated T values, e.g. 1,3,5,7,9")
    sw.add_argument("--cell-workers", type=int, default=1)
    sw.add_argument("--out", help="summary CSV path")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (cfgmod.ConfigError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
