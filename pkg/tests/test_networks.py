import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from src.autodiff import Tensor, finite_difference_check, ops, precision
from src.errors import ShapeError
from src.layers import Conv2d, Dense, Pool, Reshape, Sequential, parameter_hash
from src.models import BranchPlan, TaskSplit
from src.networks import (
    Architecture,
    Block,
    GeneratorStack,
    TargetNet,
    TaskFilter,
    TeacherFilter,
    TeacherNet,
    assemble_discriminator,
    assemble_dual_discriminator,
    build_generator,
    build_generator_filters,
    discriminator_blocks,
    dual_discriminator_blocks,
    generator_forward,
    regroup,
    task_filter_apply,
    teacher_filter_apply,
)


def test_architecture_block_shapes(three_block_arch):
    assert three_block_arch.num_blocks == 3
    assert three_block_arch.block_input_shape(1) == (3, 16, 16)
    assert three_block_arch.block_input_shape(2) == (4, 8, 8)
    assert three_block_arch.block_input_shape(3) == (6, 4, 4)
    assert three_block_arch.block_output_shape(3) == (8, 2, 2)


def test_architecture_rejects_indivisible_strides():
    with pytest.raises(ValueError, match="does not divide"):
        Architecture(image_shape=(3, 6, 6), widths=(4, 8), strides=(2, 2))


def test_architecture_round_trips_through_dict(three_block_arch):
    assert Architecture.from_dict(three_block_arch.to_dict()) == three_block_arch


def test_sequential_output_shape_and_parameter_order(rng):
    net = Sequential(
        [
            ("conv", Conv2d(3, 4, 3, stride=2, rng=rng)),
            ("pool", Pool("global_avg")),
            ("flat", Reshape((4,))),
            ("fc", Dense(4, 2, rng=rng)),
        ]
    )
    assert net.output_shape((3, 8, 8)) == (2,)
    assert [name for name, _ in net.named_parameters()] == ["conv.weight", "conv.bias", "fc.weight", "fc.bias"]
    assert net(Tensor(np.zeros((5, 3, 8, 8)))).shape == (5, 2)


def test_encoder_block_rejects_upsampling_layers(rng):
    from src.layers import UpsampleConv

    with pytest.raises(ShapeError, match="increases resolution"):
        Block(1, "encoder", [("up", UpsampleConv(3, 3, 2, rng=rng))], (3, 4, 4))


def test_teacher_outputs_probabilities(tiny_arch, rng):
    teacher = TeacherNet(tiny_arch, ["a", "b", "c"], rng)
    probs = teacher(Tensor(rng.uniform(-1, 1, size=(2, 3, 8, 8))))
    assert probs.shape == (2, 3)
    assert np.all((probs.data > 0) & (probs.data < 1))
    names = [name for name, _ in teacher.named_parameters()]
    assert names[0] == "block1.conv1.weight"
    assert names[-2:] == ["head.dense.weight", "head.dense.bias"]


def test_discriminator_block_indices_match_enumeration():
    for B in range(1, 7):
        for j in range(1, B + 1):
            expected = tuple(k for k in range(1, B + 1) if k > B - j)
            assert discriminator_blocks(B, j) == expected
            assert expected == tuple(B - j + i for i in range(1, j + 1))
        for b in range(1, B + 1):
            assert dual_discriminator_blocks(B, b) == tuple(k for k in range(1, B + 1) if k > b)
        # group j and dual block B - j are judged by the same teacher suffix
        for j in range(1, B):
            assert dual_discriminator_blocks(B, B - j) == discriminator_blocks(B, j)
        assert dual_discriminator_blocks(B, B) == ()


@pytest.mark.parametrize("bad", [0, 7])
def test_discriminator_indices_reject_out_of_range(bad):
    with pytest.raises(ValueError, match="outside"):
        discriminator_blocks(6, bad)
    with pytest.raises(ValueError, match="outside"):
        dual_discriminator_blocks(6, bad)


def test_discriminators_accept_matching_features_only(three_block_arch, rng):
    teacher = TeacherNet(three_block_arch, ["a", "b"], rng)
    d = assemble_discriminator(teacher, 2)
    probs, pooled = d(Tensor(np.zeros((2, 4, 8, 8))))
    assert probs.shape == (2, 2) and pooled.shape == (2, 8)
    assert not any(p.requires_grad for p in teacher.parameters())
    with pytest.raises(ShapeError, match="cannot accept"):
        d(Tensor(np.zeros((2, 6, 4, 4))))
    dual = assemble_dual_discriminator(teacher, 3)
    assert dual.input_shape == (8, 2, 2)
    assert dual(Tensor(np.zeros((1, 8, 2, 2))))[0].shape == (1, 2)


def test_assembling_a_discriminator_freezes_the_teacher(three_block_arch, rng):
    teacher = TeacherNet(three_block_arch, ["a", "b"], rng)
    assert all(p.requires_grad for p in teacher.parameters())
    assemble_dual_discriminator(teacher, 1)
    assert not any(p.requires_grad for p in teacher.parameters())


def test_full_discriminator_matches_teacher(three_block_arch, rng):
    teacher = TeacherNet(three_block_arch, ["a", "b"], rng)
    x = Tensor(rng.uniform(-1, 1, size=(2, 3, 16, 16)))
    np.testing.assert_array_equal(assemble_discriminator(teacher, 3)(x)[0].data, teacher(x).data)


def test_generator_groups_emit_teacher_block_inputs(three_block_arch, rng):
    gen = build_generator(three_block_arch, noise_dim=8, rng=rng)
    outputs = generator_forward(gen, Tensor(rng.standard_normal((2, 8))))
    assert [o.shape[1:] for o in outputs] == [(6, 4, 4), (4, 8, 8), (3, 16, 16)]
    assert np.all(np.abs(outputs[-1].data) <= 1.0)
    assert gen.image_shape == three_block_arch.image_shape


def test_generator_stack_rejects_shape_drift(three_block_arch, rng):
    gen = build_generator(three_block_arch, noise_dim=8, rng=rng)
    wrong_targets = [(6, 4, 4), (4, 8, 8), (3, 8, 8)]
    with pytest.raises(ShapeError, match="drifts"):
        GeneratorStack(gen.groups, 8, wrong_targets)


def test_generator_rejects_wrong_noise_width(tiny_arch, rng):
    gen = build_generator(tiny_arch, noise_dim=8, rng=rng)
    with pytest.raises(ShapeError, match="noise"):
        gen(Tensor(np.zeros((2, 5))))


def test_generator_filters_match_channels(three_block_arch, rng):
    filters = build_generator_filters(three_block_arch, 2, 4, rng)
    assert filters[(1, 1)].channels == 6
    assert filters[(3, 2)].channels == 3
    assert (4, 1) not in filters
    assert len(filters.at(2)) == 2


def test_teacher_filter_preserves_shape_and_gates_channels(rng):
    f = TeacherFilter(8, 4, rng)
    x = Tensor(rng.uniform(0.5, 1.0, size=(2, 8, 3, 3)))
    out = teacher_filter_apply(f, x)
    assert out.shape == x.shape
    ratio = out.data / x.data
    # one gate value per (sample, channel), strictly inside (0, 1)
    np.testing.assert_allclose(ratio, ratio[:, :, :1, :1] * np.ones_like(ratio), rtol=1e-5)
    assert np.all((ratio > 0) & (ratio < 1))


def test_teacher_filter_rejects_wrong_channels(rng):
    with pytest.raises(ShapeError):
        TeacherFilter(8, 4, rng)(Tensor(np.zeros((1, 4, 2, 2))))


def test_task_filter_selects_in_order():
    g = TaskFilter((2, 0), 4)
    assert g.index_subset == (0, 2)
    out = task_filter_apply(g, Tensor(np.array([[0.1, 0.2, 0.3, 0.4]])))
    np.testing.assert_allclose(out.data, [[0.1, 0.3]], rtol=1e-6)


@pytest.mark.parametrize("subset", [(0, 0), (4,), (-1,)])
def test_task_filter_rejects_bad_subsets(subset):
    with pytest.raises(ValueError):
        TaskFilter(subset, 4)


def test_task_filter_rejects_wrong_width():
    with pytest.raises(ShapeError):
        TaskFilter((0,), 4)(Tensor(np.zeros((1, 3))))


def test_gradient_through_teacher_filter(rng):
    with precision(np.float64):
        f = TeacherFilter(4, 2, np.random.default_rng(7))
        x = Tensor(rng.uniform(0.2, 1.0, size=(2, 4, 3, 3)))
        weights = Tensor(rng.normal(size=(2, 4, 3, 3)))
        err = finite_difference_check(lambda t: ops.reduce_sum(ops.mul(f(t), weights)), x)
    assert err < 1e-4


def test_gradient_through_small_teacher(rng):
    # slope 1 makes every leaky-relu linear, so no perturbation crosses a kink
    arch = Architecture(image_shape=(2, 4, 4), widths=(3,), strides=(2,), leaky_slope=1.0)
    with precision(np.float64):
        teacher = TeacherNet(arch, ["a", "b"], np.random.default_rng(3))
        x = Tensor(rng.uniform(-1, 1, size=(2, 2, 4, 4)))
        target = np.array([[1.0, 0.0], [0.0, 1.0]])
        kernel = teacher.block(1).layers[0][1].weight
        err = finite_difference_check(lambda _: ops.binary_cross_entropy(teacher(x), target), kernel)
    assert err < 1e-3


def _split():
    return TaskSplit(label_sets=[[0, 1, 2, 3], [2, 3, 4, 5]], customized=[0, 2, 3, 5])


def test_regroup_aliases_student_blocks_and_copies_teachers(tiny_arch, tiny_teachers):
    target = TargetNet(tiny_arch, 2, 4, np.random.default_rng(5))
    before = [parameter_hash(t) for t in tiny_teachers]
    net = regroup(target, tiny_teachers, _split(), BranchPlan(S=[1, 2]))
    assert net.shared_depth == 1
    assert net.branches[0].student_blocks[0] is target.block(1)
    assert net.branches[1].student_blocks[1] is target.block(2)
    assert net.branches[0].grafted_blocks[0] is not tiny_teachers[0].block(2)
    assert len(net.branches[1].grafted_blocks) == 0
    for p in net.parameters():
        p.data += 1.0
    assert [parameter_hash(t) for t in tiny_teachers] == before


def test_regroup_predictions_average_overlapping_labels(tiny_arch, tiny_teachers, rng):
    target = TargetNet(tiny_arch, 2, 4, np.random.default_rng(5))
    net = regroup(target, tiny_teachers, _split(), BranchPlan(S=[2, 2]))
    x = Tensor(rng.uniform(-1, 1, size=(3, 3, 8, 8)))
    first, second = (o.data for o in net.forward_branches(x))
    # teacher 1 keeps labels 0,2,3; teacher 2 keeps 2,3,5
    assert first.shape == (3, 3) and second.shape == (3, 3)
    scores = net.predict(x)
    assert scores.shape == (3, 4)
    np.testing.assert_allclose(scores[:, 0], first[:, 0], rtol=1e-6)
    np.testing.assert_allclose(scores[:, 1], (first[:, 1] + second[:, 0]) / 2, rtol=1e-6)
    np.testing.assert_allclose(scores[:, 3], second[:, 2], rtol=1e-6)


@pytest.mark.parametrize("S", [[1, 2], [2, 2]])
def test_branch_forward_equals_composition_of_its_parts(S, tiny_arch, tiny_teachers):
    target = TargetNet(tiny_arch, 2, 4, np.random.default_rng(5))
    net = regroup(target, tiny_teachers, _split(), BranchPlan(S=S))
    images = Tensor(np.random.default_rng(11).uniform(-1, 1, size=(100, 3, 8, 8)))
    selected = {1: (0, 2, 3), 2: (0, 1, 3)}
    with threadpool_limits(limits=1):
        outputs = net.forward_branches(images)
        for m, (teacher, s) in enumerate(zip(tiny_teachers, S), start=1):
            x = images
            for b in range(1, s + 1):
                x = target.block(b)(x)
            x = target.filters[(s, m)](x)
            for k in range(s + 1, tiny_arch.num_blocks + 1):
                x = teacher.block(k)(x)
            probs, _ = teacher.head(x)
            expected = ops.take(probs, selected[m], axis=1).data
            np.testing.assert_array_equal(outputs[m - 1].data, expected)
            np.testing.assert_array_equal(net.branches[m - 1](images).data, expected)


def test_regroup_parameter_names_are_unique(tiny_arch, tiny_teachers):
    target = TargetNet(tiny_arch, 2, 4, np.random.default_rng(5))
    net = regroup(target, tiny_teachers, _split(), BranchPlan(S=[1, 1]))
    names = [name for name, _ in net.named_parameters()]
    assert len(names) == len(set(names))
    assert "student.block1.conv1.weight" in names
    assert "filters.b1.m2.squeeze.weight" in names
    assert "branch1.block2.conv1.weight" in names


def test_regroup_rejects_out_of_range_branch_point(tiny_arch, tiny_teachers):
    target = TargetNet(tiny_arch, 2, 4)
    with pytest.raises(ValueError, match="outside"):
        regroup(target, tiny_teachers, _split(), BranchPlan(S=[3, 1]))
