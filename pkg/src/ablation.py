"""Desk-scale ablations: the dual-stream weight grid and the discrete-loss harness."""

from __future__ import annotations

import copy
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.autodiff import Tensor
from src.config import rng_for
from src.dataset import SyntheticMultiLabelDataset
from src.engine import AmalgamationEngine, TrainingLog, synthesize_training_set
from src.losses import threshold_labels
from src.metrics import evaluate_amalgamated, predict_in_batches
from src.models import MetricsReport
from src.networks import GeneratorStack, TeacherNet
from src.reports import ablation_row

logger = logging.getLogger(__name__)

Row = Dict[str, object]


def _with_losses(config: Dict[str, Any], **losses: float) -> Dict[str, Any]:
    variant = copy.deepcopy(config)
    variant["losses"].update(losses)
    return variant


def lambda_in_grid(
    config: Dict[str, Any],
    teachers: Sequence[TeacherNet],
    eval_data: SyntheticMultiLabelDataset,
    generator: GeneratorStack,
    log: Optional[TrainingLog] = None,
) -> List[MetricsReport]:
    """Steps II and III for every ``(lambda_in1, lambda_in2)`` pair on one shared generator.

    Every configuration starts from the same TargetNet initialisation, so
    the reports differ only through the stream weights.
    """

    k = int(config["eval"]["top_k"])
    batch_size = int(config["eval"]["batch_size"])
    reports: List[MetricsReport] = []
    for l1, l2 in config["ablation"]["lambda_in_grid"]:
        name = f"lambda_in={{{l1:g},{l2:g}}}"
        logger.info("ablation: %s", name)
        engine = AmalgamationEngine(_with_losses(config, lambda_in1=float(l1), lambda_in2=float(l2)), teachers, log)
        engine.generator = generator
        engine.train_dual()
        engine.branch_out()
        engine.regroup()
        net = engine.fine_tune()
        reports.append(evaluate_amalgamated(net, eval_data, k, batch_size, name=name))
    _check_both_streams(reports, config["ablation"]["lambda_in_grid"])
    return reports


def _check_both_streams(reports: Sequence[MetricsReport], grid: Sequence[Sequence[float]]) -> None:
    both = [r for r, (l1, l2) in zip(reports, grid) if l1 > 0 and l2 > 0]
    single = [r for r, (l1, l2) in zip(reports, grid) if (l1 > 0) != (l2 > 0)]
    for joint in both:
        for other in single:
            if joint.mAP < other.mAP:
                logger.warning(
                    "%s scored mAP %.4f below single-stream %s at %.4f", joint.name, joint.mAP, other.name, other.mAP
                )


def label_distribution(
    gen: GeneratorStack,
    teachers: Sequence[TeacherNet],
    epsilon: float,
    samples: int,
    rng: np.random.Generator,
    batch_size: int = 100,
) -> np.ndarray:
    """Share of positive teacher predictions falling on each teacher label.

    Columns run over teacher 1's labels, then teacher 2's, and so on.
    """

    z = Tensor._wrap(rng.standard_normal((samples, gen.noise_dim)).astype(np.float32))
    images = synthesize_training_set(gen, z)[-1].data
    counts = np.concatenate(
        [
            threshold_labels(predict_in_batches(lambda x, t=teacher: t(x).data, images, batch_size), epsilon).data.sum(axis=0)
            for teacher in teachers
        ]
    ).astype(np.float64)
    total = counts.sum()
    if total == 0:
        logger.warning("no positive teacher predictions on %d generated images", samples)
        return counts
    return counts / total


def distribution_entropy(shares: np.ndarray) -> float:
    """Natural-log entropy of a normalised distribution; zero shares contribute nothing."""

    shares = np.asarray(shares, dtype=np.float64)
    nonzero = shares[shares > 0]
    return float(-(nonzero * np.log(nonzero)).sum())


def discrete_loss_harness(
    config: Dict[str, Any],
    teachers: Sequence[TeacherNet],
    generators: Optional[Dict[float, GeneratorStack]] = None,
    log: Optional[TrainingLog] = None,
) -> Tuple[List[Row], List[Row]]:
    """Label distribution of generated images with the configured gamma and with gamma=0.

    ``generators`` may hold already trained generators keyed by gamma.
    Returns ``(distribution_rows, ablation_rows)``.
    """

    seed = int(config["seed"])
    samples = int(config["ablation"]["discrete_samples"])
    epsilon = float(config["losses"]["epsilon"])
    names = [f"teacher{m}/{name}" for m, teacher in enumerate(teachers, start=1) for name in teacher.label_names]
    generators = dict(generators or {})
    distribution_rows: List[Row] = []
    ablation_rows: List[Row] = []
    for gamma in dict.fromkeys((float(config["losses"]["gamma"]), 0.0)):
        if gamma not in generators:
            engine = AmalgamationEngine(_with_losses(config, gamma=gamma), teachers, log)
            generators[gamma] = engine.train_generator()
        shares = label_distribution(generators[gamma], teachers, epsilon, samples, rng_for(seed, "ablation/discrete"))
        entropy = distribution_entropy(shares)
        configuration = f"gamma={gamma:g}"
        logger.info("discrete-loss harness %s: entropy %.4f", configuration, entropy)
        distribution_rows.extend(
            {"configuration": configuration, "label": name, "share": repr(float(share))} for name, share in zip(names, shares)
        )
        ablation_rows.append(ablation_row("discrete_loss", configuration, entropy=entropy))
    return distribution_rows, ablation_rows


def run_ablation(
    config: Dict[str, Any],
    teachers: Sequence[TeacherNet],
    eval_data: SyntheticMultiLabelDataset,
    log: Optional[TrainingLog] = None,
) -> Tuple[List[Row], List[Row], List[MetricsReport]]:
    """Both ablations; the configured-gamma generator is trained once and shared."""

    engine = AmalgamationEngine(config, teachers, log)
    generator = engine.train_generator()
    reports = lambda_in_grid(config, teachers, eval_data, generator, log)
    rows = [ablation_row("lambda_in", report.name or "", report) for report in reports]
    distribution_rows, discrete_rows = discrete_loss_harness(
        config, teachers, {float(config["losses"]["gamma"]): generator}, log
    )
    return rows + discrete_rows, distribution_rows, reports
