import csv

import pytest

from src.engine import TrainingLog
from src.errors import PipelineOrderError
from src.models import BranchPlan, ConvergenceRecord, MetricsReport
from src.reports import (
    ABLATION_FIELDS,
    ablation_row,
    format_metrics_table,
    read_branch_plan,
    read_eta,
    write_ablation_report,
    write_branch_plan,
    write_coco_metrics,
    write_eta,
    write_metrics,
    write_training_log,
)


def _rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _report(name=None):
    return MetricsReport(
        per_label_ap={"red_circle": 0.75, "red_square": 0.5},
        mAP=0.625,
        top_k=3,
        overall_precision=0.4,
        overall_recall=0.8,
        overall_f1=0.5333,
        class_precision=0.45,
        class_recall=0.7,
        class_f1=0.55,
        name=name,
    )


def test_eta_round_trip(tmp_path):
    record = ConvergenceRecord(num_blocks=2, num_teachers=2, window=5)
    for (b, m), value in {(1, 1): 0.31, (1, 2): 0.27, (2, 1): 0.12, (2, 2): 0.4}.items():
        record.set(b, m, value)
    path = tmp_path / "eta.csv"
    write_eta(str(path), record)
    loaded = read_eta(str(path), window=5)
    assert loaded.eta == record.eta
    assert [row["block"] for row in _rows(path)] == ["1", "1", "2", "2"]


def test_read_eta_requires_the_file(tmp_path):
    with pytest.raises(PipelineOrderError, match="train-dual"):
        read_eta(str(tmp_path / "eta.csv"))


def test_branch_plan_round_trip(tmp_path):
    path = tmp_path / "plan" / "branch_plan.txt"
    write_branch_plan(str(path), BranchPlan(S=[3, 1]))
    assert path.read_text() == "S[1]=3\nS[2]=1\n"
    assert read_branch_plan(str(path)).S == [3, 1]


def test_read_branch_plan_requires_the_file(tmp_path):
    with pytest.raises(PipelineOrderError, match="branch-out"):
        read_branch_plan(str(tmp_path / "branch_plan.txt"))


def test_branch_plan_rejects_malformed_text():
    with pytest.raises(ValueError, match="malformed"):
        BranchPlan.from_text("S1=2\n")
    with pytest.raises(ValueError, match="numbered"):
        BranchPlan.from_text("S[2]=1\n")


def test_write_metrics_ends_with_map_row(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics(str(path), _report())
    rows = _rows(path)
    assert [row["label"] for row in rows] == ["red_circle", "red_square", "mAP"]
    assert float(rows[-1]["ap"]) == 0.625


def test_coco_metrics_add_name_column_only_when_named(tmp_path):
    plain = tmp_path / "plain.csv"
    write_coco_metrics(str(plain), [_report()])
    assert list(_rows(plain)[0]) == ["top_k", "C-P", "C-R", "C-F1", "O-P", "O-R", "O-F1"]
    named = tmp_path / "named.csv"
    write_coco_metrics(str(named), [_report("random_noise"), _report("teacher")])
    rows = _rows(named)
    assert [row["name"] for row in rows] == ["random_noise", "teacher"]
    assert float(rows[0]["O-R"]) == 0.8


def test_training_log_csv_has_every_column(tmp_path):
    log = TrainingLog()
    log.append("generator", 0, 0.01, {"total": 1.5, "one_hot": 0.5})
    log.append("dual", 0, 0.01, {"total": 0.9, "dual_m1": 0.4}, block=1)
    path = tmp_path / "logs" / "training_log.csv"
    write_training_log(str(path), log)
    rows = _rows(path)
    assert rows[0]["one_hot"] == "0.5" and rows[0]["dual_m1"] == ""
    assert rows[1]["block"] == "1"


def test_ablation_rows_leave_unused_columns_empty(tmp_path):
    rows = [
        ablation_row("lambda_in", "lambda_in={1,0}", _report()),
        ablation_row("discrete_loss", "gamma=1", entropy=1.25),
    ]
    path = tmp_path / "ablation_report.csv"
    write_ablation_report(str(path), rows)
    written = _rows(path)
    assert list(written[0]) == ABLATION_FIELDS
    assert written[0]["entropy"] == "" and float(written[0]["mAP"]) == 0.625
    assert written[1]["mAP"] == "" and float(written[1]["entropy"]) == 1.25


def test_format_metrics_table_lists_each_report():
    table = format_metrics_table([_report("teacher"), _report()])
    lines = table.splitlines()
    assert len(lines) == 3
    assert "mAP" in lines[0] and "teacher" in lines[1]
    assert "0.6250" in lines[1]
