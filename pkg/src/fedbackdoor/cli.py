"""Command-line entry point: ``fedbackdoor {run,sweep,report,validate}``."""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .engine import run_experiment
from .metrics import SUMMARY_COLUMNS, compute_metrics, emit_results, report_table

OUT_ENV = "FEDBACKDOOR_OUT"
DEFAULT_OUT = "results"

log = logging.getLogger("fedbackdoor")


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def run_one(raw: dict, out: Path, seed: int | None = None, workers: int | None = None) -> dict:
    if seed is not None:
        raw = cfgmod.set_dotted(raw, "master_seed", seed)
    if workers is not None:
        raw = cfgmod.set_dotted(raw, "workers", workers)
    cfg = cfgmod.from_dict(raw)

    def progress(rec):
        log.info("round %d  MA %.1f  BA %s  flagged %s", rec.round, rec.metrics["MA"],
                 "-" if rec.metrics["BA"] is None else f"{rec.metrics['BA']:.1f}", sorted(rec.verdict.flagged))

    records, _, _ = run_experiment(cfg, progress)
    report = compute_metrics(records, cfg.attack_window())
    logged = cfg.to_dict()
    logged.pop("workers")
    emit_results(report, records, out, cfg.config_hash(), cfg.master_seed, logged)
    return {"config_hash": cfg.config_hash(), "seed": cfg.master_seed, "report": report}


def _cmd_run(args) -> int:
    raw = cfgmod.load_raw(args.config)
    cfgmod.from_dict(raw)  # validate before creating output directories
    seed = args.seed
    out = Path(args.out) if args.out else None
    if out is None:
        cfg = cfgmod.from_dict(raw if seed is None else cfgmod.set_dotted(raw, "master_seed", seed))
        out = default_out() / f"{cfg.config_hash()}_seed{cfg.master_seed}"
    res = run_one(raw, out, seed, args.workers)
    print(f"TPR/FPR (BA): {res['report'].triplet()}  MA {res['report'].MA:.1f}  -> {out}")
    return 0


def _parse_axis(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise cfgmod.ConfigError(f"axis {text!r} must look like key=v1,v2")
    key, values = text.split("=", 1)
    vals = [cfgmod.parse_value(v.strip()) for v in values.split(",") if v.strip()]
    if not vals:
        raise cfgmod.ConfigError(f"axis {key} has no values")
    return key.strip(), vals


def _cmd_sweep(args) -> int:
    raw = cfgmod.load_raw(args.config)
    axes = [_parse_axis(a) for a in args.axis]
    cells = []
    for combo in itertools.product(*[vals for _, vals in axes]):
        cell = raw
        for (key, _), v in zip(axes, combo):
            cell = cfgmod.set_dotted(cell, key, v)
        cfgmod.from_dict(cell)  # every cell must validate before any training
        cells.append((combo, cell))
    root = Path(args.out) if args.out else default_out() / "sweep"
    rows = []
    for combo, cell in cells:
        name = ",".join(f"{k}={v}" for (k, _), v in zip(axes, combo))
        res = run_one(cell, root / name, args.seed, args.workers)
        r = res["report"]
        row = {k: v for (k, _), v in zip(axes, combo)}
        row.update({"config_hash": res["config_hash"], "seed": res["seed"], "TPR": r.TPR, "FPR": r.FPR,
                    "BA": r.BA, "MA": r.MA, **r.counts})
        rows.append(row)
        print(f"{name}: {r.triplet()}  MA {r.MA:.1f}")
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, [k for k, _ in axes] + list(SUMMARY_COLUMNS), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return 0


def _cmd_report(args) -> int:
    root = Path(args.inp)
    if not root.is_dir():
        raise FileNotFoundError(f"no such results directory: {root}")
    rows = report_table(root)
    cols = ["run", *SUMMARY_COLUMNS, "triplet"]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return 0


def _cmd_validate(args) -> int:
    cfg = cfgmod.load_config(args.config)
    print(f"ok {cfg.config_hash()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedbackdoor", description="Federated backdoor attack/defense simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<hash>_seed<N>)")
    r.add_argument("--workers", type=int)
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="run the cross product of config axes")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", action="append", required=True, help="dotted.key=v1,v2,... (repeatable)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=_cmd_sweep)

    rep = sub.add_parser("report", help="tabulate result directories as CSV")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--out")
    rep.set_defaults(func=_cmd_report)

    v = sub.add_parser("validate", help="check a config without training")
    v.add_argument("--config", required=True)
    v.set_defaults(func=_cmd_validate)
    return p


def run_cli(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
