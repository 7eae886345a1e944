"""
Data-free Knowledge Amalgamation CLI
====================================

Every step of the pipeline is a subcommand that reads its inputs from, and
writes its products to, one output directory:

* ``gen-data``: render the labelled train and eval splits.
* ``pretrain``: train one teacher per configured label set.
* ``train-generator`` / ``train-dual`` / ``branch-out`` / ``finetune``:
  the amalgamation steps, one at a time.
* ``evaluate``: score teachers, the amalgamated network or a baseline.
* ``baseline``: train and score reference students.
* ``full-pipeline``: everything above in order.
* ``ablate``: the dual-stream weight grid and the discrete-loss harness.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from threadpoolctl import threadpool_limits

from src.ablation import run_ablation
from src.baselines import BASELINE_KINDS, run_baseline, score_student, train_baseline
from src.checkpoint import load_checkpoint, save_checkpoint
from src.config import architecture_from_config, load_config, rng_for, schedule_for, task_split
from src.dataset import SyntheticMultiLabelDataset, generate_dataset
from src.engine import AmalgamationEngine, TrainingLog, branch_out, fine_tune, regroup_target
from src.errors import AmalgamationError, PipelineOrderError
from src.metrics import evaluate_amalgamated, evaluate_scores
from src.models import MetricsReport
from src.networks import AmalgamatedNet, GeneratorStack, TargetNet, TeacherNet
from src.pretrain import pretrain_teacher, teacher_scores
from src.reports import (
    format_metrics_table,
    read_branch_plan,
    read_eta,
    write_ablation_report,
    write_branch_plan,
    write_coco_metrics,
    write_eta,
    write_label_distribution,
    write_metrics,
    write_training_log,
)

logger = logging.getLogger(__name__)

DEFAULT_OUT = "runs/default"
COMMANDS = (
    "gen-data",
    "pretrain",
    "train-generator",
    "train-dual",
    "branch-out",
    "finetune",
    "evaluate",
    "baseline",
    "full-pipeline",
    "ablate",
)


class Workspace:
    """Paths of every artefact under ``--out`` and the loaders that guard them."""

    def __init__(self, root: str) -> None:
        self.root = Path(root)

    def data(self, split: str) -> Path:
        return self.root / "data" / f"{split}.npz"

    def teacher(self, m: int) -> Path:
        return self.root / "teachers" / f"teacher{m}"

    @property
    def generator(self) -> Path:
        return self.root / "generator"

    @property
    def target(self) -> Path:
        return self.root / "target"

    @property
    def amalgamated(self) -> Path:
        return self.root / "amalgamated"

    @property
    def eta(self) -> Path:
        return self.root / "eta.csv"

    @property
    def branch_plan(self) -> Path:
        return self.root / "branch_plan.txt"

    def baseline(self, kind: str) -> Path:
        return self.root / "baselines" / kind

    def log(self, command: str) -> Path:
        return self.root / "logs" / f"{command}.csv"

    def load_data(self, split: str) -> SyntheticMultiLabelDataset:
        path = self.data(split)
        if not path.exists():
            raise PipelineOrderError(f"{split} split missing at {path}; run gen-data first")
        return SyntheticMultiLabelDataset.load(str(path))

    def load_checkpoint(self, path: Path, producer: str):
        if not (path / "manifest.txt").exists():
            raise PipelineOrderError(f"no checkpoint at {path}; run {producer} first")
        return load_checkpoint(str(path))

    def load_teachers(self, num_teachers: int) -> List[TeacherNet]:
        teachers = []
        for m in range(1, num_teachers + 1):
            teacher = self.load_checkpoint(self.teacher(m), "pretrain")
            teacher.freeze()
            teachers.append(teacher)
        return teachers


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        dest="config_path",
        default=None,
        help="YAML/JSON pipeline configuration. Falls back to data/pipeline_config.yaml.",
    )
    parser.add_argument("--seed", type=int, default=None, help="Override the configured 64-bit seed.")
    parser.add_argument("--out", default=DEFAULT_OUT, help=f"Run directory (default: {DEFAULT_OUT}).")
    parser.add_argument(
        "--bit-exact",
        dest="bit_exact",
        action="store_true",
        default=None,
        help="Pin numerical libraries to one thread so reruns reproduce byte-for-byte.",
    )
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")


def _load(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.bit_exact:
        overrides["bit_exact"] = True
    return load_config(args.config_path, overrides)


def _engine(config: Dict[str, Any], ws: Workspace, log: TrainingLog) -> AmalgamationEngine:
    return AmalgamationEngine(config, ws.load_teachers(task_split(config).num_teachers), log)


def gen_data(config: Dict[str, Any], ws: Workspace, log: TrainingLog) -> None:
    ds = config["dataset"]
    for split, size in (("train", ds["train_size"]), ("eval", ds["eval_size"])):
        data = generate_dataset(
            int(config["seed"]),
            int(size),
            int(ds["num_labels"]),
            split=split,
            positive_rate=float(ds["positive_rate"]),
            min_marginal=float(ds["min_marginal"]),
            max_marginal=float(ds["max_marginal"]),
            image_size=int(config["teachers"]["image_shape"][1]),
        )
        data.save(str(ws.data(split)))
        print(f"Wrote {len(data)} {split} images to {ws.data(split)}")


def pretrain(config: Dict[str, Any], ws: Workspace, log: TrainingLog) -> None:
    train = ws.load_data("train")
    eval_data = ws.load_data("eval")
    arch = architecture_from_config(config)
    schedule = schedule_for(config, "pretrain")
    for m, labels in enumerate(task_split(config).label_sets, start=1):
        teacher, score = pretrain_teacher(
            train, labels, arch, schedule, rng_for(int(config["seed"]), f"teacher{m}"), eval_data, log, f"teacher{m}"
        )
        save_checkpoint(teacher, str(ws.teacher(m)))
        print(f"teacher{m}: {len(labels)} labels, eval mAP {score:.4f}")


def train_generator_step(config: Dict[str, Any], ws: Workspace, log: TrainingLog) -> None:
    gen = _engine(config, ws, log).train_generator()
    save_checkpoint(gen, str(ws.generator))
    print(f"Saved generator to {ws.generator}")


def train_dual_step(config: Dict[str, Any], ws: Workspace, log: TrainingLog) -> None:
    engine = _engine(config, ws, log)
    gen: GeneratorStack = ws.load_checkpoint(ws.generator, "train-generator")
    engine.generator = gen
    record = engine.train_dual()
    save_checkpoint(engine.target, str(ws.target))
    write_eta(str(ws.eta), record)
    print(f"Saved dual-generator TargetNet to {ws.target} and convergence values to {ws.eta}")


def branch_out_step(config: Dict[str, Any], ws: Workspace, log: TrainingLog) -> None:
    plan = branch_out(read_eta(str(ws.eta), int(config["branch"]["window"])))
    write_branch_plan(str(ws.branch_plan), plan)
    print(f"Branch plan {plan.S} written to {ws.branch_plan}")


def finetune_step(config: Dict[str, Any], ws: Workspace, log: TrainingLog) -> None:
    teachers = ws.load_teachers(task_split(config).num_teachers)
    target: TargetNet = ws.load_checkpoint(ws.target, "train-dual")
    plan = read_branch_plan(str(ws.branch_plan))
    gen: GeneratorStack = ws.load_checkpoint(ws.generator, "train-generator")
    net = regroup_target(target, teachers, task_split(config), plan)
    ft = config["finetune"]
    fine_tune(
        net,
        gen,
        teachers,
        schedule_for(config, "finetune"),
        rng_for(int(config["seed"]), "finetune/noise"),
        log,
        fixed_pool=bool(ft["fixed_pool"]),
        pool_size=int(ft["pool_size"]),
    )
    save_checkpoint(net, str(ws.amalgamated))
    print(f"Saved amalgamated network to {ws.amalgamated}")


def _score_stage(stage: str, config: Dict[str, Any], ws: Workspace) -> List[MetricsReport]:
    eval_data = ws.load_data("eval")
    k = int(config["eval"]["top_k"])
    batch_size = int(config["eval"]["batch_size"])
    split = task_split(config)
    if stage == "amalgamated":
        net: AmalgamatedNet = ws.load_checkpoint(ws.amalgamated, "finetune")
        return [evaluate_amalgamated(net, eval_data, k, batch_size, name="amalgamated")]
    if stage == "teachers":
        reports = []
        for m, teacher in enumerate(ws.load_teachers(split.num_teachers), start=1):
            scores = teacher_scores(teacher, eval_data.images, batch_size)
            reports.append(
                evaluate_scores(scores, eval_data.restrict(split.labels(m)), teacher.label_names, k, name=f"teacher{m}")
            )
        return reports
    if stage.startswith("baseline/"):
        kind = stage.split("/", 1)[1]
        student: TeacherNet = ws.load_checkpoint(ws.baseline(kind), "baseline")
        return [score_student(student, eval_data, split, k, batch_size, name=kind)]
    raise ValueError(f"unknown evaluation stage {stage!r}; use amalgamated, teachers or baseline/<kind>")


def _write_reports(directory: Path, reports: List[MetricsReport]) -> None:
    if len(reports) == 1:
        write_metrics(str(directory / "metrics.csv"), reports[0])
    else:
        for report in reports:
            write_metrics(str(directory / f"metrics_{report.name}.csv"), report)
    write_coco_metrics(str(directory / "coco_metrics.csv"), reports)
    print(format_metrics_table(reports))


def evaluate(config: Dict[str, Any], ws: Workspace, log: TrainingLog, stage: str = "amalgamated") -> None:
    reports = _score_stage(stage, config, ws)
    directory = ws.root if stage == "amalgamated" else ws.root / "eval" / stage.replace("/", "_")
    _write_reports(directory, reports)


def baseline(config: Dict[str, Any], ws: Workspace, log: TrainingLog, kinds: Optional[List[str]] = None) -> None:
    train = ws.load_data("train")
    eval_data = ws.load_data("eval")
    teachers = ws.load_teachers(task_split(config).num_teachers)
    kinds = kinds or list(config["baselines"]["kinds"]) + ["teacher"]
    reports = []
    for kind in kinds:
        if kind == "teacher":
            reports.append(run_baseline(kind, config, teachers, train, eval_data, log))
            continue
        student = train_baseline(kind, config, teachers, train, log)
        save_checkpoint(student, str(ws.baseline(kind)))
        report = score_student(
            student, eval_data, task_split(config), int(config["eval"]["top_k"]), int(config["eval"]["batch_size"]), kind
        )
        write_metrics(str(ws.baseline(kind) / "metrics.csv"), report)
        reports.append(report)
    write_coco_metrics(str(ws.root / "baselines" / "coco_metrics.csv"), reports)
    print(format_metrics_table(reports))


def full_pipeline(config: Dict[str, Any], ws: Workspace, log: TrainingLog) -> None:
    gen_data(config, ws, log)
    pretrain(config, ws, log)
    train_generator_step(config, ws, log)
    train_dual_step(config, ws, log)
    branch_out_step(config, ws, log)
    finetune_step(config, ws, log)
    evaluate(config, ws, log)


def ablate(config: Dict[str, Any], ws: Workspace, log: TrainingLog) -> None:
    teachers = ws.load_teachers(task_split(config).num_teachers)
    rows, distribution, reports = run_ablation(config, teachers, ws.load_data("eval"), log)
    write_ablation_report(str(ws.root / "ablation_report.csv"), rows)
    write_label_distribution(str(ws.root / "label_distribution.csv"), distribution)
    print(format_metrics_table(reports))
    for row in rows:
        if row.get("entropy") not in (None, ""):
            print(f"{row['configuration']}: label-distribution entropy {float(row['entropy']):.4f}")


HANDLERS: Dict[str, Callable[..., None]] = {
    "gen-data": gen_data,
    "pretrain": pretrain,
    "train-generator": train_generator_step,
    "train-dual": train_dual_step,
    "branch-out": branch_out_step,
    "finetune": finetune_step,
    "evaluate": evaluate,
    "baseline": baseline,
    "full-pipeline": full_pipeline,
    "ablate": ablate,
}


def _parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Amalgamate pre-trained multi-label teachers without their data")
    subparsers = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "Render the labelled train and eval splits",
        "pretrain": "Pre-train one teacher per configured label set",
        "train-generator": "Step I: train the group-stack generator against the teachers",
        "train-dual": "Step II: train the dual-generator TargetNet block by block",
        "branch-out": "Pick each teacher's branch-out block from the convergence values",
        "finetune": "Step III: regroup the TargetNet and fine-tune every branch",
        "evaluate": "Score a saved stage on the eval split",
        "baseline": "Train and score reference students",
        "full-pipeline": "Run every step in order and evaluate the result",
        "ablate": "Run the dual-stream weight grid and the discrete-loss harness",
    }
    for command in COMMANDS:
        sub = subparsers.add_parser(command, help=helps[command])
        _add_common_arguments(sub)
        if command == "evaluate":
            sub.add_argument(
                "--stage",
                default="amalgamated",
                help="amalgamated (default), teachers, or baseline/<kind>.",
            )
        if command == "baseline":
            sub.add_argument(
                "--kind",
                dest="kinds",
                action="append",
                choices=BASELINE_KINDS,
                default=None,
                help="Baseline to run; repeat for several. Defaults to the configured kinds plus the teacher row.",
            )
    return parser.parse_args(argv)


def run_command(args: argparse.Namespace) -> Dict[str, Any]:
    """Execute one parsed subcommand and write its training log; return the resolved config."""

    config = _load(args)
    ws = Workspace(args.out)
    log = TrainingLog()
    extra: Dict[str, Any] = {}
    if args.command == "evaluate":
        extra["stage"] = args.stage
    if args.command == "baseline":
        extra["kinds"] = args.kinds
    limits = threadpool_limits(limits=1) if config["bit_exact"] else contextlib.nullcontext()
    with limits:
        HANDLERS[args.command](config, ws, log, **extra)
    if log.rows:
        path = ws.root / "training_log.csv" if args.command == "full-pipeline" else ws.log(args.command)
        write_training_log(str(path), log)
        logger.info("training log written to %s", path)
    return config


def main(argv: Optional[List[str]] = None) -> int:
    args = _parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run_command(args)
    except AmalgamationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
