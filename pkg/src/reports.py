"""CSV and text artefacts written by the command-line pipeline."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from src.engine import TrainingLog
from src.errors import PipelineOrderError
from src.models import BranchPlan, ConvergenceRecord, MetricsReport

COCO_FIELDS = ["top_k", "C-P", "C-R", "C-F1", "O-P", "O-R", "O-F1"]
ABLATION_FIELDS = ["experiment", "configuration", "mAP", "C-P", "C-R", "C-F1", "O-P", "O-R", "O-F1", "entropy"]


def _write_rows(path: str, fieldnames: Sequence[str], rows: Iterable[Dict[str, object]]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8", newline="") as csvfile:
        writer = csv.DictWriter(csvfile, fieldnames=list(fieldnames), restval="")
        writer.writeheader()
        writer.writerows(rows)
    return target


def _read_rows(path: str, stage: str) -> List[Dict[str, str]]:
    source = Path(path)
    if not source.exists():
        raise PipelineOrderError(f"{source.name} is missing; run {stage} first")
    with source.open("r", encoding="utf-8", newline="") as csvfile:
        return list(csv.DictReader(csvfile))


def write_training_log(path: str, log: TrainingLog) -> Path:
    return _write_rows(path, log.fieldnames, log.rows)


def write_eta(path: str, record: ConvergenceRecord) -> Path:
    return _write_rows(path, ["block", "teacher", "eta"], record.rows())


def read_eta(path: str, window: int = 50) -> ConvergenceRecord:
    """Rebuild a convergence record from ``eta.csv``."""

    rows = _read_rows(path, "train-dual")
    if not rows:
        raise PipelineOrderError("eta.csv holds no convergence values")
    num_blocks = max(int(row["block"]) for row in rows)
    num_teachers = max(int(row["teacher"]) for row in rows)
    record = ConvergenceRecord(num_blocks, num_teachers, window)
    for row in rows:
        record.set(int(row["block"]), int(row["teacher"]), float(row["eta"]))
    return record


def write_branch_plan(path: str, plan: BranchPlan) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(plan.to_text(), encoding="utf-8")
    return target


def read_branch_plan(path: str) -> BranchPlan:
    source = Path(path)
    if not source.exists():
        raise PipelineOrderError(f"{source.name} is missing; run branch-out first")
    return BranchPlan.from_text(source.read_text(encoding="utf-8"))


def write_metrics(path: str, report: MetricsReport) -> Path:
    """``label,ap`` per evaluated label followed by the ``mAP`` summary row."""

    rows: List[Dict[str, object]] = [{"label": name, "ap": repr(ap)} for name, ap in report.per_label_ap.items()]
    rows.append({"label": "mAP", "ap": repr(report.mAP)})
    return _write_rows(path, ["label", "ap"], rows)


def write_coco_metrics(path: str, reports: Sequence[MetricsReport]) -> Path:
    named = any(report.name for report in reports)
    fields = (["name"] if named else []) + COCO_FIELDS
    rows = []
    for report in reports:
        row: Dict[str, object] = {"top_k": report.top_k}
        row.update({key: repr(value) for key, value in report.coco_dict().items()})
        if named:
            row["name"] = report.name or ""
        rows.append(row)
    return _write_rows(path, fields, rows)


def ablation_row(
    experiment: str,
    configuration: str,
    report: Optional[MetricsReport] = None,
    entropy: Optional[float] = None,
) -> Dict[str, object]:
    row: Dict[str, object] = {"experiment": experiment, "configuration": configuration}
    if report is not None:
        row["mAP"] = repr(report.mAP)
        row.update({key: repr(value) for key, value in report.coco_dict().items()})
    if entropy is not None:
        row["entropy"] = repr(entropy)
    return row


def write_ablation_report(path: str, rows: Sequence[Dict[str, object]]) -> Path:
    return _write_rows(path, ABLATION_FIELDS, rows)


def write_label_distribution(path: str, rows: Sequence[Dict[str, object]]) -> Path:
    return _write_rows(path, ["configuration", "label", "share"], rows)


def format_metrics_table(reports: Sequence[MetricsReport]) -> str:
    """Fixed-width summary printed by the CLI."""

    headers = ["name", "mAP"] + COCO_FIELDS[1:]
    lines = [" | ".join(f"{h:>14}" for h in headers)]
    for report in reports:
        values = [report.mAP] + list(report.coco_dict().values())
        lines.append(" | ".join([f"{(report.name or '-'):>14}"] + [f"{v:>14.4f}" for v in values]))
    return "\n".join(lines)
