"""Generator-side and dual-generator losses.

Every loss returns a scalar :class:`Tensor` so it can be differentiated on
the active tape.  Soft targets taken from a teacher are always constants.
"""

from __future__ import annotations

from typing import Dict, Optional, Sequence, Union

import numpy as np

from src.autodiff import Tensor, ops
from src.errors import ShapeError
from src.models import LossConfig
from src.networks import TaskFilter

ENTROPY_FLOOR = 1e-12

Predictions = Union[Tensor, Sequence[Tensor]]


def _joined(values: Predictions) -> Tensor:
    if isinstance(values, Tensor):
        return values
    values = list(values)
    return values[0] if len(values) == 1 else ops.concat(values, axis=1)


def _constant(value: float, like: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def threshold_labels(y: Union[Tensor, np.ndarray], epsilon: float = 0.5) -> Tensor:
    """Binary pseudo-labels: 1 where ``y >= epsilon``."""

    values = y.data if isinstance(y, Tensor) else np.asarray(y)
    return Tensor._wrap((values >= epsilon).astype(values.dtype if values.dtype.kind == "f" else np.float32))


def one_hot_loss(y: Tensor, epsilon: float = 0.5) -> Tensor:
    """Per-label BCE of ``y`` against its own thresholded labels."""

    return ops.binary_cross_entropy(y, threshold_labels(y, epsilon))


def discrete_loss(y: Tensor) -> Tensor:
    """Negative mean absolute prediction (the L1 term, sign as printed)."""

    return ops.mul(ops.reduce_mean(ops.absolute(y)), -1.0)


def activation_loss(features: Tensor) -> Tensor:
    return ops.mul(ops.reduce_mean(ops.absolute(features)), -1.0)


def info_entropy_loss(y: Tensor) -> Tensor:
    """Negative entropy of the batch-mean label distribution.

    ``p`` is the per-label mean over the batch, renormalised to sum to one;
    the loss is ``sum(p * log p)`` and bottoms out at ``-ln C`` for uniform ``p``.
    """

    if y.ndim != 2:
        raise ShapeError("info_entropy_loss expects [N, C] predictions", y.shape)
    p = ops.reduce_mean(y, axis=0)
    total = ops.reduce_sum(p)
    if not float(total.data) > 0.0:
        raise ValueError("info_entropy_loss is undefined for an all-zero batch")
    p = ops.div(p, total)
    return ops.reduce_sum(ops.mul(p, ops.log(p, floor=ENTROPY_FLOOR)))


def gan_loss_terms(predictions: Predictions, features: Predictions, cfg: LossConfig) -> Dict[str, Tensor]:
    """Components and total of the generator loss on the concatenated teacher outputs.

    Terms with a zero weight are not evaluated and are reported as 0.
    """

    y = _joined(predictions)
    feats = _joined(features)
    terms = {"one_hot": one_hot_loss(y, cfg.epsilon)}
    for name, weight, fn, arg in (
        ("activation", cfg.alpha, activation_loss, feats),
        ("info_entropy", cfg.beta, info_entropy_loss, y),
        ("discrete", cfg.gamma, discrete_loss, y),
    ):
        terms[name] = fn(arg) if weight != 0 else _constant(0.0, y)
    total = terms["one_hot"]
    for name, weight in (("activation", cfg.alpha), ("info_entropy", cfg.beta), ("discrete", cfg.gamma)):
        if weight != 0:
            total = ops.add(total, ops.mul(terms[name], float(weight)))
    terms["total"] = total
    return terms


def gan_loss(predictions: Predictions, features: Predictions, cfg: LossConfig) -> Tensor:
    return gan_loss_terms(predictions, features, cfg)["total"]


def joint_generator_terms(
    group_predictions: Sequence[Predictions],
    image_features: Predictions,
    cfg: LossConfig,
) -> Dict[str, Tensor]:
    """Generator loss on the image plus the intermediate-feature consistency term.

    ``group_predictions[j-1]`` holds the concatenated teacher outputs for
    ``F_gan^j``; the last entry is the image branch, whose predictions serve
    as constant soft targets for the earlier ones.  With a single group the
    consistency term is absent.
    """

    if not group_predictions:
        raise ValueError("joint generator loss needs at least the image predictions")
    image_predictions = _joined(group_predictions[-1])
    terms = gan_loss_terms(image_predictions, image_features, cfg)
    intermediate = [_joined(p) for p in group_predictions[:-1]]
    if intermediate:
        target = image_predictions.data
        consistency = ops.binary_cross_entropy(intermediate[0], target)
        for pred in intermediate[1:]:
            consistency = ops.add(consistency, ops.binary_cross_entropy(pred, target))
        consistency = ops.div(consistency, float(len(intermediate)))
        terms["gan"] = terms["total"]
        terms["consistency"] = consistency
        terms["total"] = ops.add(terms["gan"], consistency)
    else:
        terms["gan"] = terms["total"]
        terms["consistency"] = _constant(0.0, image_predictions)
    return terms


def joint_generator_loss(group_predictions: Sequence[Predictions], image_features: Predictions, cfg: LossConfig) -> Tensor:
    return joint_generator_terms(group_predictions, image_features, cfg)["total"]


def dual_branch_loss(student: Tensor, teacher: Union[Tensor, np.ndarray], task_filter: TaskFilter) -> Tensor:
    """BCE of the task-filtered student predictions against the teacher's."""

    teacher_tensor = teacher if isinstance(teacher, Tensor) else Tensor(teacher)
    if student.shape != teacher_tensor.shape:
        raise ShapeError("student and teacher predictions disagree", student.shape, teacher_tensor.shape)
    if len(task_filter) == 0:
        raise ValueError("task filter selects no labels; every teacher must serve a customized label")
    target = task_filter(Tensor._wrap(teacher_tensor.data)).data
    return ops.binary_cross_entropy(task_filter(student), target)


def dual_block_loss(
    stream1: Optional[Sequence[Tensor]],
    stream2: Optional[Sequence[Tensor]],
    cfg: LossConfig,
) -> Tensor:
    """Weighted sum of per-teacher branch losses over both input streams.

    A stream whose weight is zero may be passed as ``None``; its forward
    passes need not run.
    """

    if cfg.lambda_in1 == 0 and cfg.lambda_in2 == 0:
        raise ValueError("lambda_in1 and lambda_in2 are both zero; the block receives no training signal")
    total: Optional[Tensor] = None
    for weight, stream, label in ((cfg.lambda_in1, stream1, "1"), (cfg.lambda_in2, stream2, "2")):
        if weight == 0:
            continue
        if stream is None:
            raise ValueError(f"stream {label} losses are required when lambda_in{label} is {weight}")
        for m, loss in enumerate(stream, start=1):
            term = ops.mul(loss, float(weight) * cfg.teacher_weight(m))
            total = term if total is None else ops.add(total, term)
    if total is None:
        raise ValueError("dual block loss received no per-teacher losses")
    return total
