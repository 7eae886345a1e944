"""Block-structured teachers, the group-stack generator and the dual generator.

Blocks are the unit every training rule talks about: the generator has one
group per teacher block, discriminators are suffixes of a teacher, and the
dual generator (TargetNet) is trained and regrouped block by block.  Block
indices are 1-based throughout, matching the block numbering in the docs.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from src.autodiff import Tensor, ops
from src.errors import ShapeError
from src.layers import Activation, Conv2d, Dense, Layer, Module, Pool, Reshape, Sequential, Shape, UpsampleConv
from src.models import BranchPlan, TaskSplit


@dataclass(frozen=True)
class Architecture:
    """Shape contract shared by teachers, generator and TargetNet.

    Attributes
    ----------
    image_shape: Tuple[int, int, int]
        Channels, height and width of the images the teachers classify.
    widths: Tuple[int, ...]
        Output channel count of each encoder block.
    strides: Tuple[int, ...]
        Stride of the first convolution of each encoder block.
    leaky_slope: float
        Negative slope of every leaky-relu.
    """

    image_shape: Tuple[int, int, int] = (3, 32, 32)
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    strides: Tuple[int, ...] = (1, 2, 2, 2)
    leaky_slope: float = 0.2

    def __post_init__(self) -> None:
        if not self.widths or len(self.widths) != len(self.strides):
            raise ValueError(f"widths {self.widths} and strides {self.strides} must be non-empty and equally long")
        _, h, w = self.image_shape
        for b, stride in enumerate(self.strides, start=1):
            if stride < 1 or h % stride or w % stride:
                raise ValueError(f"stride {stride} of block {b} does not divide spatial size {h}x{w}")
            h, w = h // stride, w // stride

    @property
    def num_blocks(self) -> int:
        return len(self.widths)

    def block_input_shape(self, b: int) -> Shape:
        """Per-sample input shape of block ``b``; ``b = B + 1`` is the head input."""

        if not 1 <= b <= self.num_blocks + 1:
            raise ValueError(f"block index {b} outside [1, {self.num_blocks + 1}]")
        c, h, w = self.image_shape
        for k in range(1, b):
            c = self.widths[k - 1]
            h, w = h // self.strides[k - 1], w // self.strides[k - 1]
        return (c, h, w)

    def block_output_shape(self, b: int) -> Shape:
        return self.block_input_shape(b + 1)

    def to_dict(self) -> Dict[str, object]:
        return {
            "image_shape": list(self.image_shape),
            "widths": list(self.widths),
            "strides": list(self.strides),
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "Architecture":
        return cls(
            image_shape=tuple(data["image_shape"]),
            widths=tuple(data["widths"]),
            strides=tuple(data["strides"]),
            leaky_slope=float(data.get("leaky_slope", 0.2)),
        )


class Block(Sequential):
    """One block of an encoder (teacher/TargetNet) or one generator group."""

    def __init__(self, index: int, direction: str, layers: Sequence[Tuple[str, Layer]], input_shape: Shape) -> None:
        if direction not in ("encoder", "generator"):
            raise ValueError(f"unknown block direction {direction!r}")
        super().__init__(layers)
        self.index = index
        self.direction = direction
        self.input_shape = tuple(input_shape)
        self.out_shape = self.output_shape(self.input_shape)
        if len(self.input_shape) == 3:
            grows = self.out_shape[1] > self.input_shape[1] or self.out_shape[2] > self.input_shape[2]
            shrinks = self.out_shape[1] < self.input_shape[1] or self.out_shape[2] < self.input_shape[2]
            if direction == "encoder" and grows:
                raise ShapeError(f"encoder block {index} increases resolution", self.input_shape, self.out_shape)
            if direction == "generator" and shrinks:
                raise ShapeError(f"generator group {index} decreases resolution", self.input_shape, self.out_shape)


def build_encoder_block(arch: Architecture, b: int, rng: np.random.Generator) -> Block:
    in_shape = arch.block_input_shape(b)
    width = arch.widths[b - 1]
    layers = [
        ("conv1", Conv2d(in_shape[0], width, 3, stride=arch.strides[b - 1], rng=rng)),
        ("act1", Activation("leaky_relu", arch.leaky_slope)),
        ("conv2", Conv2d(width, width, 3, rng=rng)),
        ("act2", Activation("leaky_relu", arch.leaky_slope)),
    ]
    return Block(b, "encoder", layers, in_shape)


class ClassifierHead(Module):
    """Global average pool, dense layer and per-label sigmoid."""

    def __init__(self, channels: int, num_labels: int, rng: np.random.Generator) -> None:
        self.pool = Pool("global_avg")
        self.dense = Dense(channels, num_labels, rng=rng)

    @property
    def num_labels(self) -> int:
        return self.dense.weight.shape[1]

    @property
    def channels(self) -> int:
        return self.dense.weight.shape[0]

    def __call__(self, features: Tensor) -> Tuple[Tensor, Tensor]:
        """Return ``(probabilities, pooled pre-head features)``."""

        if features.ndim != 4 or features.shape[1] != self.channels:
            raise ShapeError("classifier head cannot accept features", features.shape, (self.channels,))
        pooled = ops.reshape(self.pool(features), (features.shape[0], self.channels))
        return ops.sigmoid(self.dense(pooled)), pooled

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield from self.dense.named_parameters(f"{prefix}.dense" if prefix else "dense")


def _blocks_named(blocks: Sequence[Block], prefix: str) -> Iterator[Tuple[str, Tensor]]:
    for block in blocks:
        name = f"block{block.index}"
        yield from block.named_parameters(f"{prefix}.{name}" if prefix else name)


def run_blocks(blocks: Sequence[Block], x: Tensor) -> Tensor:
    for block in blocks:
        x = block(x)
    return x


class TeacherNet(Module):
    """A pre-trained multi-label classifier split into ``B`` encoder blocks.

    The head is treated as part of block ``B`` so every suffix of the teacher
    ends in label space.
    """

    def __init__(
        self,
        arch: Architecture,
        label_names: Sequence[str],
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        rng = rng or np.random.default_rng(0)
        if not label_names:
            raise ValueError("a teacher needs at least one label")
        self.arch = arch
        self.label_names = list(label_names)
        self.blocks = [build_encoder_block(arch, b, rng) for b in range(1, arch.num_blocks + 1)]
        self.head = ClassifierHead(arch.widths[-1], len(self.label_names), rng)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    def block(self, b: int) -> Block:
        return self.blocks[b - 1]

    def run(self, x: Tensor, start: int = 1, stop: Optional[int] = None) -> Tensor:
        """Apply blocks ``start..stop`` (inclusive)."""

        stop = self.num_blocks if stop is None else stop
        return run_blocks(self.blocks[start - 1 : stop], x)

    def classify(self, x: Tensor, start: int = 1) -> Tuple[Tensor, Tensor]:
        return self.head(self.run(x, start))

    def __call__(self, images: Tensor) -> Tensor:
        return self.classify(images)[0]

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield from _blocks_named(self.blocks, prefix)
        yield from self.head.named_parameters(f"{prefix}.head" if prefix else "head")


def discriminator_blocks(num_blocks: int, j: int) -> Tuple[int, ...]:
    """Teacher block indices forming the discriminator of generator group ``j``."""

    if not 1 <= j <= num_blocks:
        raise ValueError(f"generator group {j} outside [1, {num_blocks}]")
    return tuple(num_blocks - j + i for i in range(1, j + 1))


def dual_discriminator_blocks(num_blocks: int, b: int) -> Tuple[int, ...]:
    """Teacher block indices judging the output of dual-generator block ``b``."""

    if not 1 <= b <= num_blocks:
        raise ValueError(f"dual block {b} outside [1, {num_blocks}]")
    return tuple(b + i for i in range(1, num_blocks - b + 1))


class Discriminator:
    """A frozen suffix of a teacher: selected blocks then the head."""

    def __init__(self, teacher: TeacherNet, block_indices: Sequence[int]) -> None:
        self.teacher = teacher
        self.block_indices = tuple(block_indices)
        self._blocks = [teacher.block(b) for b in self.block_indices]

    @property
    def input_shape(self) -> Shape:
        first = self.block_indices[0] if self.block_indices else self.teacher.num_blocks + 1
        return self.teacher.arch.block_input_shape(first)

    def __call__(self, features: Tensor) -> Tuple[Tensor, Tensor]:
        if features.shape[1:] != self.input_shape:
            raise ShapeError(
                f"discriminator over blocks {list(self.block_indices)} cannot accept features",
                features.shape[1:],
                self.input_shape,
            )
        return self.teacher.head(run_blocks(self._blocks, features))


def assemble_discriminator(teacher: TeacherNet, j: int) -> Discriminator:
    """Discriminator of generator group ``j``.

    Freezes ``teacher`` in place: discriminators share the teacher's blocks.
    """

    teacher.freeze()
    return Discriminator(teacher, discriminator_blocks(teacher.num_blocks, j))


def assemble_dual_discriminator(teacher: TeacherNet, b: int) -> Discriminator:
    """Discriminator of dual-generator block ``b``; freezes ``teacher`` in place too."""

    teacher.freeze()
    return Discriminator(teacher, dual_discriminator_blocks(teacher.num_blocks, b))


class TeacherFilter(Module):
    """Learnable per-channel gate adapting shared features to one teacher.

    Global average pooling feeds two dense layers (C -> C/r -> C) whose
    sigmoid output rescales each channel; the spatial shape is untouched.
    """

    def __init__(self, channels: int, reduction: int = 4, rng: Optional[np.random.Generator] = None) -> None:
        rng = rng or np.random.default_rng(0)
        if reduction < 1:
            raise ValueError(f"filter reduction must be positive, got {reduction}")
        self.channels = channels
        self.reduction = reduction
        hidden = max(channels // reduction, 1)
        self.squeeze = Dense(channels, hidden, rng=rng)
        self.excite = Dense(hidden, channels, rng=rng)

    def gate(self, features: Tensor) -> Tensor:
        if features.ndim != 4 or features.shape[1] != self.channels:
            raise ShapeError(f"teacher filter expects {self.channels} channels", features.shape)
        pooled = ops.reshape(ops.global_avg_pool(features), (features.shape[0], self.channels))
        return ops.sigmoid(self.excite(ops.relu(self.squeeze(pooled))))

    def __call__(self, features: Tensor) -> Tensor:
        gate = self.gate(features)
        return ops.mul(features, ops.reshape(gate, (features.shape[0], self.channels, 1, 1)))

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield from self.squeeze.named_parameters(f"{prefix}.squeeze" if prefix else "squeeze")
        yield from self.excite.named_parameters(f"{prefix}.excite" if prefix else "excite")


def teacher_filter_apply(filter_: TeacherFilter, features: Tensor) -> Tensor:
    return filter_(features)


class FilterSet(Module):
    """Teacher-level filters keyed by (group or block index, teacher index)."""

    def __init__(self, filters: Dict[Tuple[int, int], TeacherFilter], axis: str) -> None:
        self.filters = dict(filters)
        self.axis = axis

    def __getitem__(self, key: Tuple[int, int]) -> TeacherFilter:
        try:
            return self.filters[key]
        except KeyError:
            raise KeyError(f"no teacher filter for {self.axis}={key[0]}, m={key[1]}") from None

    def __contains__(self, key: Tuple[int, int]) -> bool:
        return key in self.filters

    def at(self, index: int) -> List[TeacherFilter]:
        return [f for (i, _), f in sorted(self.filters.items()) if i == index]

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for (i, m), filter_ in sorted(self.filters.items()):
            name = f"{self.axis}{i}.m{m}"
            yield from filter_.named_parameters(f"{prefix}.{name}" if prefix else name)


def build_generator_filters(arch: Architecture, num_teachers: int, reduction: int, rng: np.random.Generator) -> FilterSet:
    """Filters ``f_m^j`` gating ``F_gan^j`` before teacher block ``B - j + 1``."""

    B = arch.num_blocks
    filters = {
        (j, m): TeacherFilter(arch.block_input_shape(B - j + 1)[0], reduction, rng)
        for j in range(1, B + 1)
        for m in range(1, num_teachers + 1)
    }
    return FilterSet(filters, axis="j")


@dataclass(frozen=True)
class TaskFilter:
    """Selection ``g_m`` of teacher ``m``'s labels kept in the customized task set."""

    index_subset: Tuple[int, ...]
    width: int

    def __post_init__(self) -> None:
        subset = tuple(sorted(int(i) for i in self.index_subset))
        if len(set(subset)) != len(subset):
            raise ValueError(f"task filter indices must be unique, got {list(self.index_subset)}")
        if subset and (subset[0] < 0 or subset[-1] >= self.width):
            raise ValueError(f"task filter indices {list(subset)} outside [0, {self.width})")
        object.__setattr__(self, "index_subset", subset)

    def __len__(self) -> int:
        return len(self.index_subset)

    def __call__(self, predictions: Tensor) -> Tensor:
        if predictions.ndim != 2 or predictions.shape[1] != self.width:
            raise ShapeError(f"task filter expects {self.width} prediction columns", predictions.shape)
        return ops.take(predictions, self.index_subset, axis=1)


def task_filter_apply(filter_: TaskFilter, predictions: Tensor) -> Tensor:
    return filter_(predictions)


class GeneratorStack(Module):
    """The group-stack generator ``{G^1..G^B}``.

    Group ``j`` must emit exactly the input shape of teacher block
    ``B - j + 1``; the last group therefore emits images.  Any drift is
    rejected here rather than at the first forward pass.
    """

    def __init__(self, groups: Sequence[Block], noise_dim: int, target_shapes: Sequence[Shape]) -> None:
        if noise_dim < 1:
            raise ValueError(f"noise_dim must be positive, got {noise_dim}")
        if len(groups) != len(target_shapes) or not groups:
            raise ValueError(f"{len(groups)} generator groups for {len(target_shapes)} teacher blocks")
        shape: Shape = (noise_dim,)
        for j, (group, target) in enumerate(zip(groups, target_shapes), start=1):
            if group.input_shape != shape:
                raise ShapeError(f"generator group {j} expects a different input", group.input_shape, shape)
            shape = group.out_shape
            if shape != tuple(target):
                raise ShapeError(
                    f"generator group {j} output drifts from teacher block {len(groups) - j + 1} input",
                    shape,
                    tuple(target),
                )
        self.groups = list(groups)
        self.noise_dim = noise_dim
        self.trained = False
        self.filters: Optional["FilterSet"] = None
        self.arch: Optional[Architecture] = None

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def image_shape(self) -> Shape:
        return self.groups[-1].out_shape

    def __call__(self, z: Tensor) -> List[Tensor]:
        return generator_forward(self, z)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for group in self.groups:
            name = f"group{group.index}"
            yield from group.named_parameters(f"{prefix}.{name}" if prefix else name)
        if self.filters is not None:
            yield from self.filters.named_parameters(f"{prefix}.filters" if prefix else "filters")


def generator_forward(gen: GeneratorStack, z: Tensor) -> List[Tensor]:
    """Return ``[F_gan^1, ..., F_gan^B]``; the last entry is the image batch."""

    if z.ndim != 2 or z.shape[1] != gen.noise_dim:
        raise ShapeError(f"generator expects noise of width {gen.noise_dim}", z.shape)
    outputs: List[Tensor] = []
    x = z
    for group in gen.groups:
        x = group(x)
        outputs.append(x)
    return outputs


def build_generator(arch: Architecture, noise_dim: int = 64, rng: Optional[np.random.Generator] = None) -> GeneratorStack:
    """Group 1 lifts noise to a seed shaped like block ``B``'s output; later
    groups undo one teacher block's downsampling each."""

    rng = rng or np.random.default_rng(0)
    B = arch.num_blocks
    slope = arch.leaky_slope
    groups: List[Block] = []
    targets: List[Shape] = []
    for j in range(1, B + 1):
        k = B - j + 1
        target = arch.block_input_shape(k)
        source = arch.block_output_shape(k)
        final = "tanh" if j == B else "leaky_relu"
        if j == 1:
            layers = [
                ("seed", Dense(noise_dim, int(np.prod(source)), rng=rng)),
                ("reshape", Reshape(source)),
                ("act0", Activation("leaky_relu", slope)),
                ("up1", UpsampleConv(source[0], target[0], factor=arch.strides[k - 1], rng=rng)),
                ("act1", Activation(final, slope)),
            ]
            input_shape: Shape = (noise_dim,)
        else:
            layers = [
                ("up1", UpsampleConv(source[0], source[0], factor=arch.strides[k - 1], rng=rng)),
                ("act1", Activation("leaky_relu", slope)),
                ("conv2", Conv2d(source[0], target[0], 3, rng=rng)),
                ("act2", Activation(final, slope)),
            ]
            input_shape = source
        groups.append(Block(j, "generator", layers, input_shape))
        targets.append(target)
    gen = GeneratorStack(groups, noise_dim, targets)
    gen.arch = arch
    return gen


class TargetNet(Module):
    """The dual generator ``{T^1..T^B}`` with its per-(block, teacher) filters."""

    def __init__(
        self,
        arch: Architecture,
        num_teachers: int,
        reduction: int = 4,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        rng = rng or np.random.default_rng(0)
        self.arch = arch
        self.num_teachers = num_teachers
        self.blocks = [build_encoder_block(arch, b, rng) for b in range(1, arch.num_blocks + 1)]
        self.filters = FilterSet(
            {
                (b, m): TeacherFilter(arch.widths[b - 1], reduction, rng)
                for b in range(1, arch.num_blocks + 1)
                for m in range(1, num_teachers + 1)
            },
            axis="b",
        )
        self.trained_blocks: Set[int] = set()
        self.branch_plan: Optional[BranchPlan] = None

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def block(self, b: int) -> Block:
        return self.blocks[b - 1]

    def run(self, x: Tensor, start: int = 1, stop: Optional[int] = None) -> Tensor:
        stop = self.num_blocks if stop is None else stop
        return run_blocks(self.blocks[start - 1 : stop], x)

    def block_parameters(self, b: int) -> List[Tensor]:
        return self.block(b).parameters() + [p for f in self.filters.at(b) for p in f.parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield from _blocks_named(self.blocks, prefix)
        yield from self.filters.named_parameters(f"{prefix}.filters" if prefix else "filters")


class TaskBranch(Module):
    """``T_m``: student blocks up to ``S_m``, filter ``f_m^{S_m}``, grafted
    teacher blocks ``S_m+1..B``, the teacher head and task filter ``g_m``."""

    def __init__(
        self,
        teacher_index: int,
        branch_point: int,
        student_blocks: Sequence[Block],
        filter_: TeacherFilter,
        grafted_blocks: Sequence[Block],
        head: ClassifierHead,
        task_filter: TaskFilter,
        global_labels: Sequence[int],
    ) -> None:
        if len(student_blocks) != branch_point:
            raise ValueError(f"branch {teacher_index} needs {branch_point} student blocks, got {len(student_blocks)}")
        self.teacher_index = teacher_index
        self.branch_point = branch_point
        self.student_blocks = list(student_blocks)
        self.filter = filter_
        self.grafted_blocks = list(grafted_blocks)
        self.head = head
        self.task_filter = task_filter
        self.global_labels = list(global_labels)

    def tail(self, features: Tensor, depth: int) -> Tensor:
        """Continue from the output of student block ``depth``."""

        x = run_blocks(self.student_blocks[depth:], features)
        x = self.filter(x)
        x = run_blocks(self.grafted_blocks, x)
        probs, _ = self.head(x)
        return self.task_filter(probs)

    def __call__(self, images: Tensor) -> Tensor:
        return self.tail(images, 0)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        p = f"{prefix}." if prefix else ""
        yield from _blocks_named(self.student_blocks, f"{p}student")
        yield from self.filter.named_parameters(f"{p}filter")
        yield from _blocks_named(self.grafted_blocks, f"{p}graft")
        yield from self.head.named_parameters(f"{p}head")


class AmalgamatedNet(Module):
    """``T_u``: branches sharing the first ``min(S)`` student blocks.

    Student blocks and filters are the TargetNet's own objects (aliased), so
    a block used by several branches exists once.
    """

    def __init__(self, branches: Sequence[TaskBranch], customized_labels: Sequence[int], plan: BranchPlan) -> None:
        self.branches = list(branches)
        self.customized_labels = list(customized_labels)
        self.plan = plan
        self.shared_depth = plan.shared_depth
        self.arch: Optional[Architecture] = None
        self.split: Optional[TaskSplit] = None
        self.teacher_label_names: List[List[str]] = []
        self.trunk = self.branches[0].student_blocks[: self.shared_depth]
        for branch in self.branches:
            if any(a is not b for a, b in zip(branch.student_blocks[: self.shared_depth], self.trunk)):
                raise ValueError("branches must alias the same trunk blocks")
        self._columns: Dict[int, List[Tuple[int, int]]] = {label: [] for label in self.customized_labels}
        for i, branch in enumerate(self.branches):
            for col, label in enumerate(branch.global_labels):
                if label not in self._columns:
                    raise ValueError(f"branch {branch.teacher_index} predicts label {label} outside the customized set")
                self._columns[label].append((i, col))
        missing = [label for label, cols in self._columns.items() if not cols]
        if missing:
            raise ValueError(f"customized labels {missing} are predicted by no branch")

    def forward_branches(self, images: Tensor) -> List[Tensor]:
        shared = run_blocks(self.trunk, images)
        return [branch.tail(shared, self.shared_depth) for branch in self.branches]

    def __call__(self, images: Tensor) -> List[Tensor]:
        return self.forward_branches(images)

    def predict(self, images: Tensor) -> np.ndarray:
        """Scores over the customized labels; shared labels average their branches."""

        outputs = [o.data for o in self.forward_branches(images)]
        scores = np.zeros((images.shape[0], len(self.customized_labels)), dtype=outputs[0].dtype)
        for k, label in enumerate(self.customized_labels):
            cols = self._columns[label]
            scores[:, k] = sum(outputs[i][:, c] for i, c in cols) / len(cols)
        return scores

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        p = f"{prefix}." if prefix else ""
        seen: Set[int] = set()
        student = sorted(
            {id(b): b for branch in self.branches for b in branch.student_blocks}.values(),
            key=lambda b: b.index,
        )
        for block in student:
            seen.add(id(block))
            yield from block.named_parameters(f"{p}student.block{block.index}")
        for branch in self.branches:
            m = branch.teacher_index
            yield from branch.filter.named_parameters(f"{p}filters.b{branch.branch_point}.m{m}")
            yield from _blocks_named(branch.grafted_blocks, f"{p}branch{m}")
            yield from branch.head.named_parameters(f"{p}branch{m}.head")


def regroup(
    target: TargetNet,
    teachers: Sequence[TeacherNet],
    split: TaskSplit,
    plan: BranchPlan,
) -> AmalgamatedNet:
    """Assemble ``T_u`` from the trained TargetNet and the branch-out plan.

    Grafted teacher blocks and heads are deep copies, so fine-tuning never
    touches the reference teachers.
    """

    B = target.num_blocks
    if len(plan.S) != len(teachers):
        raise ValueError(f"branch plan covers {len(plan.S)} teachers, {len(teachers)} given")
    branches: List[TaskBranch] = []
    for m, (teacher, s) in enumerate(zip(teachers, plan.S), start=1):
        if not 1 <= s <= B:
            raise ValueError(f"branch point S[{m}]={s} outside [1, {B}]")
        if (s, m) not in target.filters:
            raise ValueError(f"branch plan references missing filter f_{m}^{s}")
        grafted = copy.deepcopy(teacher.blocks[s:])
        head = copy.deepcopy(teacher.head)
        for module in (*grafted, head):
            module.unfreeze()
        branches.append(
            TaskBranch(
                teacher_index=m,
                branch_point=s,
                student_blocks=target.blocks[:s],
                filter_=target.filters[(s, m)],
                grafted_blocks=grafted,
                head=head,
                task_filter=TaskFilter(split.selected_indices(m), len(split.labels(m))),
                global_labels=split.selected_labels(m),
            )
        )
    target.branch_plan = plan
    net = AmalgamatedNet(branches, split.customized, plan)
    net.arch = target.arch
    net.split = split
    net.teacher_label_names = [list(t.label_names) for t in teachers]
    return net
