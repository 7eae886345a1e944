"""Supervised pre-training of the teachers on the labelled synthetic split."""

from __future__ import annotations

import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from src.autodiff import Tape, Tensor, ops
from src.dataset import SyntheticMultiLabelDataset
from src.engine import TrainingLog, check_finite
from src.metrics import mean_average_precision, predict_in_batches
from src.models import Schedule
from src.networks import Architecture, TeacherNet
from src.optim import build_optimizer

logger = logging.getLogger(__name__)


def teacher_scores(teacher: TeacherNet, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
    return predict_in_batches(lambda x: teacher(x).data, images, batch_size)


def pretrain_teacher(
    dataset: SyntheticMultiLabelDataset,
    label_indices: Sequence[int],
    arch: Architecture,
    schedule: Schedule,
    rng: np.random.Generator,
    eval_dataset: Optional[SyntheticMultiLabelDataset] = None,
    log: Optional[TrainingLog] = None,
    name: str = "teacher",
) -> Tuple[TeacherNet, float]:
    """Train a teacher with per-label BCE on ``label_indices``; return it with its eval mAP."""

    label_indices = list(label_indices)
    if not label_indices:
        raise ValueError("a teacher needs a non-empty label set")
    if tuple(dataset.images.shape[1:]) != arch.image_shape:
        raise ValueError(f"dataset images {dataset.images.shape[1:]} do not match architecture {arch.image_shape}")
    teacher = TeacherNet(arch, [dataset.label_names[i] for i in label_indices], rng)
    targets = dataset.restrict(label_indices)
    optimizer = build_optimizer(teacher.parameters(), schedule)
    logger.info("pre-training %s on %d labels for %d iterations", name, len(label_indices), schedule.iterations)

    for it in range(schedule.iterations):
        lr = schedule.learning_rate(it)
        batch = rng.integers(0, len(dataset), schedule.batch_size)
        with Tape() as tape:
            loss = ops.binary_cross_entropy(teacher(Tensor._wrap(dataset.images[batch])), targets[batch])
            value = check_finite(f"pretrain/{name}", it, {"total": loss})["total"]
            optimizer.zero_grad()
            tape.backward(loss)
        optimizer.step(lr)
        if log is not None:
            log.append(f"pretrain/{name}", it, lr, {"total": value})
        if schedule.log_every and it % schedule.log_every == 0:
            logger.info("%s iteration %d: bce=%.4f", name, it, value)

    held_out = eval_dataset if eval_dataset is not None else dataset
    report = mean_average_precision(
        teacher_scores(teacher, held_out.images), held_out.restrict(label_indices), teacher.label_names
    )
    logger.info("%s eval mAP %.4f", name, report.mAP)
    teacher.freeze()
    return teacher, report.mAP
