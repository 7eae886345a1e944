"""Data-free amalgamation: generator training, block-wise dual training, regrouping.

The module-level functions are the individual steps; :class:`AmalgamationEngine`
runs them in order from a configuration and refuses to run a step whose
inputs do not exist yet.
"""

from __future__ import annotations

import logging
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from src.autodiff import Tape, Tensor, ops
from src.config import architecture_from_config, loss_config, rng_for, schedule_for, task_split
from src.errors import PipelineOrderError, TrainingDivergedError
from src.losses import dual_block_loss, dual_branch_loss, gan_loss, joint_generator_terms
from src.models import BranchPlan, ConvergenceRecord, LossConfig, Schedule, TaskSplit
from src.networks import (
    AmalgamatedNet,
    FilterSet,
    GeneratorStack,
    TargetNet,
    TaskFilter,
    TeacherNet,
    assemble_discriminator,
    assemble_dual_discriminator,
    build_generator,
    build_generator_filters,
    regroup,
)
from src.optim import build_optimizer

logger = logging.getLogger(__name__)

BASE_LOG_FIELDS = ["stage", "block", "iteration", "learning_rate", "total"]


class TrainingLog:
    """One row per training iteration, across every stage of a run."""

    def __init__(self) -> None:
        self.rows: List[Dict[str, Any]] = []
        self._extra: List[str] = []

    def append(
        self,
        stage: str,
        iteration: int,
        learning_rate: float,
        components: Dict[str, float],
        block: Optional[int] = None,
    ) -> None:
        for key in components:
            if key not in BASE_LOG_FIELDS and key not in self._extra:
                self._extra.append(key)
        row: Dict[str, Any] = {
            "stage": stage,
            "block": "" if block is None else block,
            "iteration": iteration,
            "learning_rate": learning_rate,
        }
        row.update(components)
        self.rows.append(row)

    @property
    def fieldnames(self) -> List[str]:
        return BASE_LOG_FIELDS + self._extra

    def values(self, stage: str, key: str, block: Optional[int] = None) -> List[float]:
        return [
            float(row[key])
            for row in self.rows
            if row["stage"] == stage and (block is None or row["block"] == block) and key in row
        ]


def check_finite(stage: str, iteration: int, terms: Dict[str, Tensor], block: Optional[int] = None) -> Dict[str, float]:
    values = {name: float(t.data) for name, t in terms.items()}
    if not all(np.isfinite(v) for v in values.values()):
        raise TrainingDivergedError(stage, iteration, values, block)
    return values


def _noise(rng: np.random.Generator, batch_size: int, noise_dim: int) -> Tensor:
    return Tensor(rng.standard_normal((batch_size, noise_dim)).astype(np.float32))


def _check_teachers(teachers: Sequence[TeacherNet]) -> None:
    if not teachers:
        raise ValueError("amalgamation needs at least one teacher")
    first = teachers[0].arch
    for m, teacher in enumerate(teachers[1:], start=2):
        if teacher.num_blocks != first.num_blocks or teacher.arch.image_shape != first.image_shape:
            raise ValueError(
                f"teacher {m} has {teacher.num_blocks} blocks at {teacher.arch.image_shape}; "
                f"teacher 1 has {first.num_blocks} at {first.image_shape}"
            )


def train_generator(
    gen: GeneratorStack,
    teachers: Sequence[TeacherNet],
    filters: Optional[FilterSet],
    cfg: LossConfig,
    schedule: Schedule,
    rng: np.random.Generator,
    log: Optional[TrainingLog] = None,
    image_only: bool = False,
) -> GeneratorStack:
    """Train all generator groups and their teacher-level filters jointly.

    Each group's output is gated by ``f_m^j`` and judged by the matching
    suffix of every teacher; only the image-level generator loss and the
    consistency of the intermediate predictions with the image predictions
    enter the objective.  ``image_only`` drops the intermediate groups, the
    consistency term and the filters, leaving a single image-level
    discriminator per teacher.
    """

    filters = filters if filters is not None else gen.filters
    _check_teachers(teachers)
    B = teachers[0].num_blocks
    M = len(teachers)
    if gen.num_groups != B:
        raise ValueError(f"generator has {gen.num_groups} groups for {B}-block teachers")
    if not image_only:
        if filters is None:
            raise ValueError("teacher-level filters are required unless training image-only")
        missing = [(j, m) for j in range(1, B + 1) for m in range(1, M + 1) if (j, m) not in filters]
        if missing:
            raise ValueError(f"missing teacher-level filters for (j, m) in {missing}")
    groups = [B] if image_only else list(range(1, B + 1))
    discriminators = {(j, m): assemble_discriminator(t, j) for j in groups for m, t in enumerate(teachers, start=1)}

    trainable = list({id(p): p for p in gen.parameters() + ([] if image_only else filters.parameters())}.values())
    for p in trainable:
        p.requires_grad = True
    optimizer = build_optimizer(trainable, schedule)
    logger.info("Step I: training generator for %d iterations (B=%d, M=%d)", schedule.iterations, B, M)

    for it in range(schedule.iterations):
        lr = schedule.learning_rate(it)
        z = _noise(rng, schedule.batch_size, gen.noise_dim)
        with Tape() as tape:
            outputs = gen(z)
            group_predictions: List[List[Tensor]] = []
            group_features: List[List[Tensor]] = []
            for j in groups:
                preds, feats = [], []
                for m in range(1, M + 1):
                    features = outputs[j - 1] if image_only else filters[(j, m)](outputs[j - 1])
                    probs, pooled = discriminators[(j, m)](features)
                    preds.append(probs)
                    feats.append(pooled)
                group_predictions.append(preds)
                group_features.append(feats)
            terms = joint_generator_terms(group_predictions, group_features[-1], cfg)
            values = check_finite("generator", it, terms)
            optimizer.zero_grad()
            tape.backward(terms["total"])
        optimizer.step(lr)

        for j, (preds, feats) in zip(groups[:-1], zip(group_predictions[:-1], group_features[:-1])):
            detached = [Tensor._wrap(p.data) for p in preds]
            values[f"gan_j{j}"] = float(gan_loss(detached, [Tensor._wrap(f.data) for f in feats], cfg).data)
        if log is not None:
            log.append("generator", it, lr, values)
        if schedule.log_every and it % schedule.log_every == 0:
            logger.info("generator iteration %d: total=%.4f", it, values["total"])

    gen.trained = True
    return gen


def synthesize_training_set(gen: GeneratorStack, z: Tensor) -> List[Tensor]:
    """Return ``[F_gan^1, ..., F_gan^{B-1}, I_gan]`` as plain tensors without gradient state."""

    if not gen.trained:
        raise PipelineOrderError("the generator must be trained (Step I) before synthesizing training data")
    return [Tensor._wrap(out.data.copy()) for out in gen(Tensor._wrap(z.data))]


def _trailing_mean(values: Sequence[float], window: int) -> float:
    tail = list(values)[-window:] if window > 0 else list(values)
    return float(np.mean(tail))


def train_dual_block(
    target: TargetNet,
    b: int,
    gen: GeneratorStack,
    teachers: Sequence[TeacherNet],
    task_filters: Sequence[TaskFilter],
    cfg: LossConfig,
    schedule: Schedule,
    rng: np.random.Generator,
    window: int = 50,
    log: Optional[TrainingLog] = None,
) -> Dict[int, float]:
    """Train dual-generator block ``b`` and its filters; return ``eta[b][m]`` per teacher.

    The block sees two streams: the student's own features of the synthetic
    image and the generator's intermediate features of matching shape.
    Everything outside block ``b`` and the filters ``f_m^b`` stays frozen.
    """

    _check_teachers(teachers)
    B = target.num_blocks
    M = len(teachers)
    if not 1 <= b <= B:
        raise ValueError(f"dual block {b} outside [1, {B}]")
    if not gen.trained:
        raise PipelineOrderError("Step II needs a trained generator (run Step I first)")
    untrained = [k for k in range(1, b) if k not in target.trained_blocks]
    if untrained:
        raise PipelineOrderError(f"dual block {b} requested before blocks {untrained} were trained")
    if len(task_filters) != M:
        raise ValueError(f"{len(task_filters)} task filters for {M} teachers")
    if cfg.lambda_in1 == 0 and cfg.lambda_in2 == 0:
        raise ValueError("lambda_in1 and lambda_in2 are both zero; the block receives no training signal")
    if schedule.iterations < 1:
        raise ValueError("dual-generator training needs at least one iteration to measure convergence")

    gen.freeze()
    target.freeze()
    trainable = target.block_parameters(b)
    for p in trainable:
        p.requires_grad = True
    discriminators = [assemble_dual_discriminator(t, b) for t in teachers]
    optimizer = build_optimizer(trainable, schedule)
    streams = [(1, cfg.lambda_in1), (2, cfg.lambda_in2)]
    history: Dict[int, List[float]] = {m: [] for m in range(1, M + 1)}
    logger.info("Step II: training dual block %d for %d iterations", b, schedule.iterations)

    for it in range(schedule.iterations):
        lr = schedule.learning_rate(it)
        synthetic = synthesize_training_set(gen, _noise(rng, schedule.batch_size, gen.noise_dim))
        image = synthetic[-1]
        soft_targets = [t(image).data for t in teachers]
        inputs = {1: target.run(image, 1, b - 1), 2: synthetic[B - b]}
        with Tape() as tape:
            per_stream: Dict[int, Optional[List[Tensor]]] = {1: None, 2: None}
            for stream, weight in streams:
                if weight == 0:
                    continue
                features = target.block(b)(inputs[stream])
                losses = []
                for m in range(1, M + 1):
                    probs, _ = discriminators[m - 1](target.filters[(b, m)](features))
                    losses.append(dual_branch_loss(probs, soft_targets[m - 1], task_filters[m - 1]))
                per_stream[stream] = losses
            total = dual_block_loss(per_stream[1], per_stream[2], cfg)
            terms: Dict[str, Tensor] = {"total": total}
            for stream, losses in per_stream.items():
                for m, loss in enumerate(losses or [], start=1):
                    terms[f"dual_s{stream}_m{m}"] = loss
            values = check_finite("dual", it, terms, block=b)
            optimizer.zero_grad()
            tape.backward(total)
        optimizer.step(lr)

        for m in range(1, M + 1):
            values[f"dual_m{m}"] = sum(
                weight * values[f"dual_s{stream}_m{m}"] for stream, weight in streams if weight != 0
            )
        if log is not None:
            log.append("dual", it, lr, values, block=b)
        if schedule.log_every and it % schedule.log_every == 0:
            logger.info("dual block %d iteration %d: total=%.4f", b, it, values["total"])
        for m in range(1, M + 1):
            history[m].append(values[f"dual_m{m}"])

    target.trained_blocks.add(b)
    return {m: _trailing_mean(history[m], window) for m in range(1, M + 1)}


def branch_out(record: ConvergenceRecord) -> BranchPlan:
    """Branch each teacher off at the block where its dual loss converged lowest.

    Ties go to the earlier block.
    """

    missing = record.missing()
    if missing:
        raise PipelineOrderError(f"convergence record is incomplete; missing (block, teacher) {missing}")
    S = [
        min(range(1, record.num_blocks + 1), key=lambda b: (record.eta[b][m], b))
        for m in range(1, record.num_teachers + 1)
    ]
    return BranchPlan(S=S)


def regroup_target(
    target: TargetNet,
    teachers: Sequence[TeacherNet],
    split: TaskSplit,
    plan: BranchPlan,
) -> AmalgamatedNet:
    untrained = [b for b in range(1, target.num_blocks + 1) if b not in target.trained_blocks]
    if untrained:
        raise PipelineOrderError(f"regrouping needs every dual block trained; blocks {untrained} are not")
    return regroup(target, teachers, split, plan)


def fine_tune(
    net: AmalgamatedNet,
    gen: GeneratorStack,
    teachers: Sequence[TeacherNet],
    schedule: Schedule,
    rng: np.random.Generator,
    log: Optional[TrainingLog] = None,
    fixed_pool: bool = False,
    pool_size: int = 512,
) -> AmalgamatedNet:
    """Train every branch jointly against the frozen teachers on synthetic images.

    Images are re-synthesized each iteration unless ``fixed_pool`` is set,
    in which case batches are drawn from one pool synthesized up front.
    """

    if schedule.iterations == 0:
        return net
    teacher_of = {branch.teacher_index: teachers[branch.teacher_index - 1] for branch in net.branches}
    for teacher in teachers:
        teacher.freeze()
    gen.freeze()
    net.unfreeze()
    optimizer = build_optimizer(net.parameters(), schedule)
    pool = synthesize_training_set(gen, _noise(rng, pool_size, gen.noise_dim))[-1] if fixed_pool else None
    logger.info("fine-tuning %d branches for %d iterations", len(net.branches), schedule.iterations)

    for it in range(schedule.iterations):
        lr = schedule.learning_rate(it)
        if pool is None:
            images = synthesize_training_set(gen, _noise(rng, schedule.batch_size, gen.noise_dim))[-1]
        else:
            images = Tensor._wrap(pool.data[rng.integers(0, pool.shape[0], schedule.batch_size)])
        targets = {
            branch.teacher_index: branch.task_filter(teacher_of[branch.teacher_index](images)).data
            for branch in net.branches
        }
        with Tape() as tape:
            outputs = net.forward_branches(images)
            terms: Dict[str, Tensor] = {}
            total: Optional[Tensor] = None
            for branch, out in zip(net.branches, outputs):
                loss = ops.binary_cross_entropy(out, targets[branch.teacher_index])
                terms[f"branch_m{branch.teacher_index}"] = loss
                total = loss if total is None else ops.add(total, loss)
            terms["total"] = total
            values = check_finite("finetune", it, terms)
            optimizer.zero_grad()
            tape.backward(total)
        optimizer.step(lr)
        if log is not None:
            log.append("finetune", it, lr, values)
        if schedule.log_every and it % schedule.log_every == 0:
            logger.info("fine-tune iteration %d: total=%.4f", it, values["total"])
    return net


class AmalgamationEngine:
    """Runs the three amalgamation steps in order for one configuration.

    Every step stores its product on the engine; a step whose inputs are
    missing raises :class:`PipelineOrderError`.
    """

    def __init__(self, config: Dict[str, Any], teachers: Sequence[TeacherNet], log: Optional[TrainingLog] = None) -> None:
        _check_teachers(teachers)
        self.config = config
        self.teachers = list(teachers)
        self.seed = int(config["seed"])
        self.arch = architecture_from_config(config)
        self.split = task_split(config)
        if self.split.num_teachers != len(self.teachers):
            raise ValueError(f"task split describes {self.split.num_teachers} teachers, {len(self.teachers)} given")
        self.losses = loss_config(config)
        self.log = log if log is not None else TrainingLog()
        self.generator: Optional[GeneratorStack] = None
        self.generator_filters: Optional[FilterSet] = None
        self.target: Optional[TargetNet] = None
        self.record: Optional[ConvergenceRecord] = None
        self.plan: Optional[BranchPlan] = None
        self.amalgamated: Optional[AmalgamatedNet] = None

    @property
    def task_filters(self) -> List[TaskFilter]:
        return [
            TaskFilter(self.split.selected_indices(m), len(self.split.labels(m)))
            for m in range(1, self.split.num_teachers + 1)
        ]

    def train_generator(self) -> GeneratorStack:
        gen_cfg = self.config["generator"]
        init = rng_for(self.seed, "generator/init")
        self.generator = build_generator(self.arch, int(gen_cfg["noise_dim"]), init)
        self.generator_filters = build_generator_filters(
            self.arch, len(self.teachers), int(gen_cfg["filter_reduction"]), init
        )
        self.generator.filters = self.generator_filters
        return train_generator(
            self.generator,
            self.teachers,
            self.generator_filters,
            self.losses,
            schedule_for(self.config, "generator"),
            rng_for(self.seed, "generator/noise"),
            self.log,
        )

    def train_dual(self) -> ConvergenceRecord:
        if self.generator is None or not self.generator.trained:
            raise PipelineOrderError("Step II requested before Step I produced a generator")
        if self.target is None:
            self.target = TargetNet(
                self.arch,
                len(self.teachers),
                int(self.config["dual"]["filter_reduction"]),
                rng_for(self.seed, "target/init"),
            )
        window = int(self.config["branch"]["window"])
        record = ConvergenceRecord(self.target.num_blocks, len(self.teachers), window)
        schedule = schedule_for(self.config, "dual")
        for b in range(1, self.target.num_blocks + 1):
            eta = train_dual_block(
                self.target,
                b,
                self.generator,
                self.teachers,
                self.task_filters,
                self.losses,
                schedule,
                rng_for(self.seed, f"dual/noise/block{b}"),
                window,
                self.log,
            )
            for m, value in eta.items():
                record.set(b, m, value)
        self.record = record
        return record

    def branch_out(self) -> BranchPlan:
        if self.record is None:
            raise PipelineOrderError("branch-out requested before Step II produced convergence values")
        self.plan = branch_out(self.record)
        logger.info("branch plan: %s", self.plan.S)
        return self.plan

    def regroup(self) -> AmalgamatedNet:
        if self.target is None or self.plan is None:
            raise PipelineOrderError("regrouping requested before Step II and branch-out")
        self.amalgamated = regroup_target(self.target, self.teachers, self.split, self.plan)
        return self.amalgamated

    def fine_tune(self) -> AmalgamatedNet:
        if self.amalgamated is None or self.generator is None:
            raise PipelineOrderError("fine-tuning requested before regrouping")
        ft = self.config["finetune"]
        return fine_tune(
            self.amalgamated,
            self.generator,
            self.teachers,
            schedule_for(self.config, "finetune"),
            rng_for(self.seed, "finetune/noise"),
            self.log,
            fixed_pool=bool(ft["fixed_pool"]),
            pool_size=int(ft["pool_size"]),
        )

    def run(self) -> AmalgamatedNet:
        self.train_generator()
        self.train_dual()
        self.branch_out()
        self.regroup()
        return self.fine_tune()
