"""Reference students distilled from the teachers on substitute inputs.

Every baseline student has the teacher architecture with a head over the
customized labels and is trained by BCE against the teachers' soft targets.
Only the inputs differ.  Where several teachers cover a customized label,
their scores are averaged, matching how the amalgamated network combines
its branches.
"""

from __future__ import annotations

import copy
import logging
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from src.autodiff import Tape, Tensor, ops
from src.config import architecture_from_config, loss_config, rng_for, schedule_for, task_split
from src.dataset import SyntheticMultiLabelDataset, generate_dataset, render_unrelated_images
from src.engine import TrainingLog, check_finite, train_generator
from src.metrics import evaluate_scores, predict_in_batches
from src.models import MetricsReport, TaskSplit
from src.networks import TeacherNet, build_generator
from src.optim import build_optimizer

logger = logging.getLogger(__name__)

BASELINE_KINDS = ("random_noise", "similar_data", "diff_data", "unlabeled_real", "dafl_style", "teacher")

ImageSource = Callable[[np.random.Generator, int], np.ndarray]


def ensemble_soft_targets(teachers: Sequence[TeacherNet], split: TaskSplit, images: Tensor) -> np.ndarray:
    """Teacher scores over the customized labels, averaged where teachers overlap."""

    total = np.zeros((images.shape[0], len(split.customized)), dtype=np.float32)
    counts = np.zeros(len(split.customized), dtype=np.float32)
    column = {label: k for k, label in enumerate(split.customized)}
    for m, teacher in enumerate(teachers, start=1):
        probs = teacher(images).data
        for i, label in zip(split.selected_indices(m), split.selected_labels(m)):
            total[:, column[label]] += probs[:, i]
            counts[column[label]] += 1
    return total / counts


def customized_names(teachers: Sequence[TeacherNet], split: TaskSplit) -> List[str]:
    names: Dict[int, str] = {}
    for m, teacher in enumerate(teachers, start=1):
        for label, name in zip(split.labels(m), teacher.label_names):
            names.setdefault(label, name)
    return [names[label] for label in split.customized]


def pool_source(pool: np.ndarray) -> ImageSource:
    return lambda rng, n: pool[rng.integers(0, pool.shape[0], n)]


def distill_student(
    teachers: Sequence[TeacherNet],
    split: TaskSplit,
    source: ImageSource,
    config: Dict[str, Any],
    rng: np.random.Generator,
    log: Optional[TrainingLog] = None,
    stage: str = "baseline",
) -> TeacherNet:
    arch = architecture_from_config(config)
    schedule = schedule_for(config, "baselines")
    student = TeacherNet(arch, customized_names(teachers, split), rng)
    for teacher in teachers:
        teacher.freeze()
    optimizer = build_optimizer(student.parameters(), schedule)
    for it in range(schedule.iterations):
        lr = schedule.learning_rate(it)
        images = Tensor._wrap(np.asarray(source(rng, schedule.batch_size), dtype=np.float32))
        targets = ensemble_soft_targets(teachers, split, images)
        with Tape() as tape:
            loss = ops.binary_cross_entropy(student(images), targets)
            values = check_finite(stage, it, {"total": loss})
            optimizer.zero_grad()
            tape.backward(loss)
        optimizer.step(lr)
        if log is not None:
            log.append(stage, it, lr, values)
        if schedule.log_every and it % schedule.log_every == 0:
            logger.info("%s iteration %d: bce=%.4f", stage, it, values["total"])
    return student


def image_source(
    kind: str,
    config: Dict[str, Any],
    teachers: Sequence[TeacherNet],
    train: SyntheticMultiLabelDataset,
    log: Optional[TrainingLog] = None,
) -> ImageSource:
    seed = int(config["seed"])
    pool_size = int(config["baselines"]["pool_size"])
    shape = tuple(architecture_from_config(config).image_shape)
    if kind == "random_noise":
        return lambda rng, n: rng.uniform(-1.0, 1.0, size=(n,) + shape).astype(np.float32)
    if kind == "similar_data":
        similar = generate_dataset(
            seed, max(pool_size, 200), train.num_labels, split="similar", style="similar",
            positive_rate=float(config["dataset"]["positive_rate"]),
            min_marginal=float(config["dataset"]["min_marginal"]),
            max_marginal=float(config["dataset"]["max_marginal"]),
            image_size=shape[1],
        )
        return pool_source(similar.images)
    if kind == "diff_data":
        return pool_source(render_unrelated_images(seed, pool_size, shape[1]))
    if kind == "unlabeled_real":
        return pool_source(train.images)
    if kind == "dafl_style":
        cfg = copy.deepcopy(loss_config(config))
        cfg.gamma = 0.0
        gen = build_generator(architecture_from_config(config), int(config["generator"]["noise_dim"]), rng_for(seed, "dafl/init"))
        train_generator(
            gen, teachers, None, cfg, schedule_for(config, "generator"), rng_for(seed, "dafl/noise"), log, image_only=True
        )
        return lambda rng, n: gen(Tensor(rng.standard_normal((n, gen.noise_dim)).astype(np.float32)))[-1].data
    raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINE_KINDS}")


def train_baseline(
    kind: str,
    config: Dict[str, Any],
    teachers: Sequence[TeacherNet],
    train: SyntheticMultiLabelDataset,
    log: Optional[TrainingLog] = None,
) -> TeacherNet:
    """Distil a customized-label student from the teachers on the inputs of ``kind``."""

    if kind == "teacher":
        raise ValueError("the teacher reference row has no student to train")
    source = image_source(kind, config, teachers, train, log)
    logger.info("training %s baseline student", kind)
    rng = rng_for(int(config["seed"]), f"baseline/{kind}")
    return distill_student(teachers, task_split(config), source, config, rng, log, f"baseline/{kind}")


def run_baseline(
    kind: str,
    config: Dict[str, Any],
    teachers: Sequence[TeacherNet],
    train: SyntheticMultiLabelDataset,
    eval_data: SyntheticMultiLabelDataset,
    log: Optional[TrainingLog] = None,
) -> MetricsReport:
    """Score one baseline on the customized labels of the evaluation split.

    ``dafl_style`` collapses the group stack to a single image-level
    generator trained with γ=0 and no consistency term.  With no intermediate
    features there is nothing for block-wise dual training or branch-out to
    use, so the student is distilled directly from that generator's images,
    like every other baseline.
    """

    split = task_split(config)
    k = int(config["eval"]["top_k"])
    batch_size = int(config["eval"]["batch_size"])
    names = customized_names(teachers, split)
    labels = eval_data.restrict(split.customized)
    if kind == "teacher":
        scores = predict_in_batches(lambda x: ensemble_soft_targets(teachers, split, x), eval_data.images, batch_size)
        return evaluate_scores(scores, labels, names, k, name="teacher")
    student = train_baseline(kind, config, teachers, train, log)
    return score_student(student, eval_data, split, k, batch_size, name=kind)


def score_student(
    student: TeacherNet,
    eval_data: SyntheticMultiLabelDataset,
    split: TaskSplit,
    k: int = 3,
    batch_size: int = 100,
    name: Optional[str] = None,
) -> MetricsReport:
    scores = predict_in_batches(lambda x: student(x).data, eval_data.images, batch_size)
    return evaluate_scores(scores, eval_data.restrict(split.customized), student.label_names, k, name=name)
