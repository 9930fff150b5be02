"""Detection and accuracy metrics plus result files.

Column layouts of the emitted CSV files are frozen in ``results_schema.json``
next to this module; :data:`SUMMARY_COLUMNS` and :data:`ROUND_COLUMNS` are
read from it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

_SCHEMA = json.loads(resources.files(__package__).joinpath("results_schema.json").read_text())
SUMMARY_COLUMNS = tuple(c["name"] for c in _SCHEMA["summary.csv"])
ROUND_COLUMNS = tuple(c["name"] for c in _SCHEMA["rounds.csv"])


def rate(num: int, den: int) -> float:
    return 100.0 * num / den if den else 0.0


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    TPR: float
    FPR: float
    BA: float
    MA: float
    true_pos: int = 0
    false_pos: int = 0
    malicious: int = 0
    benign: int = 0


@dataclass(frozen=True)
class MetricsReport:
    TPR: float
    FPR: float
    BA: float
    MA: float
    counts: dict
    per_round: tuple = field(default_factory=tuple)

    def triplet(self) -> str:
        return format_triplet(self.TPR, self.FPR, self.BA)


def format_triplet(tpr: float, fpr: float, ba: float) -> str:
    """``TPR/FPR (BA)`` with one decimal each."""
    return f"{tpr:.1f}/{fpr:.1f} ({ba:.1f})"


def compute_metrics(records, attack_window=range(0)) -> MetricsReport:
    """Pool detections over the attack-window rounds.

    BA is read from the global model produced by the last attack round, i.e.
    the model the first post-attack round starts from; without an attack
    window it is the final BA (0 when no backdoor is configured). MA is the
    clean accuracy at the end of the run.
    """
    window = set(attack_window)
    tp = fp = n_mal = n_ben = 0
    per_round = []
    for r in records:
        mal = set(r.malicious)
        flagged = set(r.verdict.flagged)
        rtp, rfp = len(flagged & mal), len(flagged - mal)
        rben = len(set(r.selected) - mal)
        if r.round in window:
            tp, fp, n_mal, n_ben = tp + rtp, fp + rfp, n_mal + len(mal), n_ben + rben
        ba = r.metrics.get("BA")
        per_round.append(RoundMetrics(r.round, rate(rtp, len(mal)), rate(rfp, rben),
                                      0.0 if ba is None else float(ba), float(r.metrics["MA"]),
                                      rtp, rfp, len(mal), rben))
    ba = 0.0
    if per_round:
        if window:
            end = max(window)
            done = [p for p in per_round if p.round <= end]
            ba = done[-1].BA if done else 0.0
        else:
            ba = per_round[-1].BA
    ma = per_round[-1].MA if per_round else 0.0
    counts = {"true_pos": tp, "false_pos": fp, "total_malicious": n_mal, "total_benign": n_ben}
    return MetricsReport(rate(tp, n_mal), rate(fp, n_ben), ba, ma, counts, tuple(per_round))


# ---------------------------------------------------------------- files

def _encode_map(d) -> str:
    if not d:
        return ""
    return ";".join(f"{k}:{v!r}" if isinstance(v, float) else f"{k}:{v}" for k, v in sorted(d.items()))


def _decode_map(s: str, cast=float) -> dict:
    if not s:
        return {}
    return {int(k): cast(v) for k, v in (item.split(":") for item in s.split(";"))}


def emit_results(report: MetricsReport, records, path, config_hash: str = "", seed: int = 0,
                 config: dict | None = None) -> dict:
    """Write ``summary.csv``, ``rounds.csv``, ``log.jsonl`` and ``summary.txt`` into ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    c = report.counts
    summary_row = {"config_hash": config_hash, "seed": seed, "TPR": repr(report.TPR), "FPR": repr(report.FPR),
                   "BA": repr(report.BA), "MA": repr(report.MA), "true_pos": c["true_pos"],
                   "false_pos": c["false_pos"], "total_malicious": c["total_malicious"],
                   "total_benign": c["total_benign"]}
    files = {"summary": out / "summary.csv", "rounds": out / "rounds.csv", "log": out / "log.jsonl",
             "text": out / "summary.txt"}
    with open(files["summary"], "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        if records:
            w.writerow(summary_row)
    by_round = {p.round: p for p in report.per_round}
    with open(files["rounds"], "w", newline="") as fh:
        w = csv.DictWriter(fh, ROUND_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            p = by_round[r.round]
            bits = {cid: int(cid in r.verdict.flagged) for cid in r.selected}
            w.writerow({"round": r.round, "MA": repr(p.MA), "BA": repr(p.BA), "TPR": repr(p.TPR), "FPR": repr(p.FPR),
                        "true_pos": p.true_pos, "false_pos": p.false_pos, "malicious": p.malicious,
                        "benign": p.benign, "malicious_ids": ";".join(map(str, r.malicious)),
                        "alpha_m": _encode_map(r.metrics.get("alpha_m")), "flagged_bits": _encode_map(bits)})
    with open(files["log"], "w") as fh:
        fh.write(json.dumps({"type": "config", "config_hash": config_hash, "seed": seed, "config": config},
                            sort_keys=True, default=str) + "\n")
        for r in records:
            fh.write(json.dumps({"type": "round", **r.to_dict()}, sort_keys=True) + "\n")
        fh.write(json.dumps({"type": "summary", "TPR": report.TPR, "FPR": report.FPR, "BA": report.BA,
                             "MA": report.MA, "counts": report.counts}, sort_keys=True) + "\n")
    files["text"].write_text(
        f"config {config_hash} seed {seed}\n"
        f"TPR/FPR (BA): {report.triplet()}\n"
        f"MA: {report.MA:.1f}\n"
        f"counts: {json.dumps(report.counts, sort_keys=True)}\n")
    return files


def read_results(path) -> MetricsReport:
    """Rebuild the :class:`MetricsReport` written by :func:`emit_results`."""
    out = Path(path)
    with open(out / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    per_round = []
    with open(out / "rounds.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            per_round.append(RoundMetrics(int(row["round"]), float(row["TPR"]), float(row["FPR"]), float(row["BA"]),
                                          float(row["MA"]), int(row["true_pos"]), int(row["false_pos"]),
                                          int(row["malicious"]), int(row["benign"])))
    if not rows:
        return MetricsReport(0.0, 0.0, 0.0, 0.0, {"true_pos": 0, "false_pos": 0, "total_malicious": 0,
                                                  "total_benign": 0}, tuple(per_round))
    s = rows[0]
    counts = {k: int(s[k]) for k in ("true_pos", "false_pos", "total_malicious", "total_benign")}
    return MetricsReport(float(s["TPR"]), float(s["FPR"]), float(s["BA"]), float(s["MA"]), counts, tuple(per_round))


def report_table(root) -> list[dict]:
    """Every ``summary.csv`` row below ``root`` plus its directory and triplet."""
    rows = []
    for f in sorted(Path(root).rglob("summary.csv")):
        with open(f, newline="") as fh:
            for row in csv.DictReader(fh):
                row = dict(row)
                row["run"] = str(f.parent.relative_to(root)) if f.parent != Path(root) else "."
                row["triplet"] = format_triplet(float(row["TPR"]), float(row["FPR"]), float(row["BA"]))
                rows.append(row)
    return rows


def report_dict(report: MetricsReport) -> dict:
    d = asdict(report)
    d["per_round"] = [asdict(p) for p in report.per_round]
    return d
