import math

import numpy as np
import pytest

from src.autodiff import Tensor, finite_difference_check, precision
from src.errors import ShapeError
from src.losses import (
    activation_loss,
    discrete_loss,
    dual_block_loss,
    dual_branch_loss,
    gan_loss,
    gan_loss_terms,
    info_entropy_loss,
    joint_generator_loss,
    joint_generator_terms,
    one_hot_loss,
    threshold_labels,
)
from src.models import LossConfig
from src.networks import TaskFilter


def _probs(rng, shape, low=0.05, high=0.95):
    return Tensor(rng.uniform(low, high, size=shape))


def _self_bce(p: np.ndarray) -> float:
    return float(-np.mean(p * np.log(p) + (1 - p) * np.log(1 - p)))


def test_threshold_labels_uses_inclusive_boundary():
    np.testing.assert_array_equal(threshold_labels(np.array([[0.7, 0.3]])).data, [[1.0, 0.0]])
    np.testing.assert_array_equal(threshold_labels(np.array([[0.5]]), 0.5).data, [[1.0]])
    np.testing.assert_array_equal(threshold_labels(np.zeros((2, 3))).data, np.zeros((2, 3)))


def test_threshold_labels_respects_epsilon():
    np.testing.assert_array_equal(threshold_labels(np.array([[0.7, 0.3]]), 0.8).data, [[0.0, 0.0]])


def test_one_hot_loss_values():
    with precision(np.float64):
        near_one_hot = one_hot_loss(Tensor(np.array([[1 - 1e-7, 1e-7]])))
        undecided = one_hot_loss(Tensor(np.array([[0.5 + 1e-9, 0.5 - 1e-9]])))
    assert near_one_hot.item() == pytest.approx(0.0, abs=1e-5)
    assert undecided.item() == pytest.approx(math.log(2), abs=1e-6)


def test_one_hot_loss_is_nonnegative(rng):
    assert one_hot_loss(_probs(rng, (8, 5), 0.0, 1.0)).item() >= 0.0


def test_one_hot_loss_rejects_values_outside_unit_interval():
    with pytest.raises(ValueError, match="probabilities"):
        one_hot_loss(Tensor(np.array([[1.2, 0.1]])))


def test_discrete_loss_values():
    assert discrete_loss(Tensor(np.zeros((1, 4)))).item() == 0.0
    assert discrete_loss(Tensor(np.ones((1, 4)))).item() == pytest.approx(-1.0)
    assert discrete_loss(Tensor(np.array([[0.2, 0.6]]))).item() == pytest.approx(-0.4)


def test_discrete_loss_stays_in_range(rng):
    value = discrete_loss(_probs(rng, (6, 5), 0.0, 1.0)).item()
    assert -1.0 <= value <= 0.0


def test_activation_loss_values_and_homogeneity(rng):
    assert activation_loss(Tensor(np.zeros((2, 3)))).item() == 0.0
    assert activation_loss(Tensor(np.array([[1.0, -1.0]]))).item() == pytest.approx(-1.0)
    features = rng.normal(size=(3, 4))
    base = activation_loss(Tensor(features)).item()
    assert activation_loss(Tensor(3.0 * features)).item() == pytest.approx(3.0 * base, rel=1e-5)


def test_info_entropy_loss_is_minimal_for_uniform_batch():
    with precision(np.float64):
        uniform = info_entropy_loss(Tensor(np.array([[0.9, 0.1], [0.1, 0.9]])))
        collapsed = info_entropy_loss(Tensor(np.array([[0.999999, 1e-9], [0.999999, 1e-9]])))
    assert uniform.item() == pytest.approx(-math.log(2), abs=1e-9)
    assert collapsed.item() == pytest.approx(0.0, abs=1e-4)


def test_info_entropy_loss_respects_lower_bound(rng):
    value = info_entropy_loss(_probs(rng, (10, 6))).item()
    assert -math.log(6) - 1e-5 <= value <= 0.0


def test_info_entropy_loss_rejects_all_zero_batch():
    with pytest.raises(ValueError, match="all-zero"):
        info_entropy_loss(Tensor(np.zeros((3, 2))))


def test_info_entropy_loss_rejects_wrong_rank():
    with pytest.raises(ShapeError):
        info_entropy_loss(Tensor(np.full((2, 2, 2), 0.5)))


def test_gan_loss_collapses_to_one_hot_with_zero_weights(rng):
    y = _probs(rng, (4, 6))
    cfg = LossConfig(alpha=0.0, beta=0.0, gamma=0.0)
    assert gan_loss(y, Tensor(rng.normal(size=(4, 8))), cfg).item() == pytest.approx(one_hot_loss(y).item())


def test_gan_loss_terms_skip_zero_weights(rng):
    terms = gan_loss_terms(_probs(rng, (4, 6)), Tensor(rng.normal(size=(4, 8))), LossConfig(alpha=0.0, beta=0.0))
    assert terms["activation"].item() == 0.0
    assert terms["info_entropy"].item() == 0.0
    assert terms["discrete"].item() < 0.0


def test_gan_loss_matches_hand_sum_of_components(rng):
    with precision(np.float64):
        y = [_probs(rng, (4, 3)), _probs(rng, (4, 3))]
        features = [Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(4, 8)))]
        cfg = LossConfig(alpha=0.1, beta=5.0, gamma=1.0)
        joined = Tensor(np.concatenate([t.data for t in y], axis=1))
        joined_features = Tensor(np.concatenate([f.data for f in features], axis=1))
        expected = (
            one_hot_loss(joined).item()
            + 0.1 * activation_loss(joined_features).item()
            + 5.0 * info_entropy_loss(joined).item()
            + 1.0 * discrete_loss(joined).item()
        )
        assert gan_loss(y, features, cfg).item() == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("weight", ["alpha", "beta", "gamma"])
def test_gan_loss_is_affine_in_each_weight(weight, rng):
    with precision(np.float64):
        y = _probs(rng, (5, 4))
        features = Tensor(rng.normal(size=(5, 6)))
        values = [gan_loss(y, features, LossConfig(**{weight: w})).item() for w in (0.0, 1.0, 2.0)]
    assert values[2] - values[1] == pytest.approx(values[1] - values[0], rel=1e-9, abs=1e-12)


GRADIENT_TRIALS = range(10)
GRADIENT_STEP = 1e-5


def _clear_of_threshold(rng, shape):
    # every prediction sits at least 0.1 from 0.5, so thresholded labels never flip
    return rng.uniform(0.1, 0.4, size=shape) + rng.choice([0.0, 0.5], size=shape)


def _away_from_zero(rng, shape):
    return rng.uniform(0.1, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _gradient_error(f, x):
    return finite_difference_check(f, x, step=GRADIENT_STEP)


@pytest.mark.parametrize("trial", GRADIENT_TRIALS)
def test_gan_loss_gradient_matches_finite_differences(trial):
    rng = np.random.default_rng(trial)
    with precision(np.float64):
        y = Tensor(_clear_of_threshold(rng, (3, 4)))
        features = Tensor(_away_from_zero(rng, (3, 5)))
        cfg = LossConfig(alpha=0.1, beta=5.0, gamma=1.0)
        assert _gradient_error(lambda t: gan_loss(t, features, cfg), y) < 1e-3
        assert _gradient_error(lambda t: gan_loss(y, t, cfg), features) < 1e-3


@pytest.mark.parametrize("trial", GRADIENT_TRIALS)
def test_one_hot_loss_gradient_matches_finite_differences(trial):
    rng = np.random.default_rng(100 + trial)
    with precision(np.float64):
        y = Tensor(_clear_of_threshold(rng, (4, 5)))
        assert _gradient_error(one_hot_loss, y) < 1e-3


@pytest.mark.parametrize("trial", GRADIENT_TRIALS)
def test_discrete_and_activation_gradients_match_finite_differences(trial):
    rng = np.random.default_rng(200 + trial)
    with precision(np.float64):
        y = _probs(rng, (4, 5))
        features = Tensor(_away_from_zero(rng, (3, 6)))
        assert _gradient_error(discrete_loss, y) < 1e-3
        assert _gradient_error(activation_loss, features) < 1e-3


@pytest.mark.parametrize("trial", GRADIENT_TRIALS)
def test_info_entropy_gradient_matches_finite_differences(trial):
    rng = np.random.default_rng(300 + trial)
    with precision(np.float64):
        y = _probs(rng, (6, 4))
        assert _gradient_error(info_entropy_loss, y) < 1e-3


@pytest.mark.parametrize("trial", GRADIENT_TRIALS)
def test_joint_loss_gradient_through_intermediate_groups(trial):
    rng = np.random.default_rng(400 + trial)
    with precision(np.float64):
        first, second = _probs(rng, (3, 5)), _probs(rng, (3, 5))
        image = Tensor(_clear_of_threshold(rng, (3, 5)))
        features = Tensor(_away_from_zero(rng, (3, 4)))
        cfg = LossConfig()
        assert _gradient_error(lambda t: joint_generator_loss([t, second, image], features, cfg), first) < 1e-3
        assert _gradient_error(lambda t: joint_generator_loss([first, t, image], features, cfg), second) < 1e-3
        assert _gradient_error(lambda t: joint_generator_loss([first, second, image], t, cfg), features) < 1e-3


@pytest.mark.parametrize("trial", GRADIENT_TRIALS)
def test_dual_branch_gradient_matches_finite_differences(trial):
    rng = np.random.default_rng(500 + trial)
    with precision(np.float64):
        student = _probs(rng, (4, 5))
        teacher = rng.uniform(0.0, 1.0, size=(4, 5))
        g = TaskFilter(tuple(rng.choice(5, size=3, replace=False)), 5)
        assert _gradient_error(lambda t: dual_branch_loss(t, teacher, g), student) < 1e-3


@pytest.mark.parametrize("trial", GRADIENT_TRIALS)
def test_dual_block_gradient_matches_finite_differences(trial):
    rng = np.random.default_rng(600 + trial)
    with precision(np.float64):
        own, generated = _probs(rng, (3, 4)), _probs(rng, (3, 4))
        teachers = [rng.uniform(0.0, 1.0, size=(3, 4)) for _ in range(2)]
        filters = [TaskFilter((0, 1), 4), TaskFilter((1, 3), 4)]
        cfg = LossConfig(
            lambda_m=list(rng.uniform(0.5, 2.0, size=2)),
            lambda_in1=float(rng.uniform(0.5, 2.0)),
            lambda_in2=float(rng.uniform(0.5, 2.0)),
        )

        def stream(student):
            return [dual_branch_loss(student, t, g) for t, g in zip(teachers, filters)]

        assert _gradient_error(lambda t: dual_block_loss(stream(t), stream(generated), cfg), own) < 1e-3
        assert _gradient_error(lambda t: dual_block_loss(stream(own), stream(t), cfg), generated) < 1e-3


def test_joint_loss_with_one_group_equals_gan_loss(rng):
    y = _probs(rng, (4, 6))
    features = Tensor(rng.normal(size=(4, 8)))
    cfg = LossConfig()
    terms = joint_generator_terms([y], features, cfg)
    assert terms["consistency"].item() == 0.0
    assert terms["total"].item() == pytest.approx(gan_loss(y, features, cfg).item())


def test_joint_consistency_is_self_bce_when_predictions_agree(rng):
    with precision(np.float64):
        image = _probs(rng, (4, 6))
        copy_ = Tensor(image.data.copy())
        terms = joint_generator_terms([copy_, copy_, image], Tensor(rng.normal(size=(4, 8))), LossConfig())
    assert terms["consistency"].item() == pytest.approx(_self_bce(image.data), rel=1e-9)


def test_joint_loss_matches_two_pass_recomputation(rng):
    with precision(np.float64):
        groups = [_probs(rng, (3, 5)) for _ in range(3)]
        features = Tensor(rng.normal(size=(3, 4)))
        cfg = LossConfig()
        image = groups[-1].data

        def bce(p):
            return float(-np.mean(image * np.log(p) + (1 - image) * np.log(1 - p)))

        expected = gan_loss(groups[-1], features, cfg).item() + (bce(groups[0].data) + bce(groups[1].data)) / 2
        assert joint_generator_loss(groups, features, cfg).item() == pytest.approx(expected, rel=1e-10)


def test_joint_loss_with_two_groups_uses_unaveraged_term(rng):
    with precision(np.float64):
        groups = [_probs(rng, (3, 5)), _probs(rng, (3, 5))]
        terms = joint_generator_terms(groups, Tensor(rng.normal(size=(3, 4))), LossConfig())
        image = groups[1].data
        p = groups[0].data
        expected = float(-np.mean(image * np.log(p) + (1 - image) * np.log(1 - p)))
    assert terms["consistency"].item() == pytest.approx(expected, rel=1e-10)


def test_joint_loss_rejects_empty_groups(rng):
    with pytest.raises(ValueError, match="at least"):
        joint_generator_loss([], Tensor(rng.normal(size=(2, 3))), LossConfig())


def test_dual_branch_loss_identical_inputs_give_self_bce(rng):
    with precision(np.float64):
        teacher = rng.uniform(0.05, 0.95, size=(4, 4))
        g = TaskFilter((0, 2), 4)
        loss = dual_branch_loss(Tensor(teacher.copy()), teacher, g)
    assert loss.item() == pytest.approx(_self_bce(teacher[:, [0, 2]]), rel=1e-9)


def test_dual_branch_loss_matches_hand_bce(rng):
    with precision(np.float64):
        student = rng.uniform(0.05, 0.95, size=(3, 4))
        teacher = rng.uniform(0.05, 0.95, size=(3, 4))
        loss = dual_branch_loss(Tensor(student), Tensor(teacher), TaskFilter((1, 3), 4))
    p, t = student[:, [1, 3]], teacher[:, [1, 3]]
    assert loss.item() == pytest.approx(float(-np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))), rel=1e-9)


def test_dual_branch_loss_rejects_empty_filter_and_width_mismatch(rng):
    with pytest.raises(ValueError, match="selects no labels"):
        dual_branch_loss(_probs(rng, (2, 4)), rng.uniform(size=(2, 4)), TaskFilter((), 4))
    with pytest.raises(ShapeError):
        dual_branch_loss(_probs(rng, (2, 4)), rng.uniform(size=(2, 3)), TaskFilter((0,), 4))


def _scalars(*values):
    return [Tensor(np.asarray(v)) for v in values]


def test_dual_block_loss_plain_sum_with_unit_weights():
    loss = dual_block_loss(_scalars(0.1, 0.2), _scalars(0.3, 0.4), LossConfig())
    assert loss.item() == pytest.approx(1.0)


def test_dual_block_loss_matches_hand_weighted_sum():
    cfg = LossConfig(lambda_m=[0.5, 2.0], lambda_in1=0.3, lambda_in2=1.5)
    loss = dual_block_loss(_scalars(0.1, 0.2), _scalars(0.3, 0.4), cfg)
    expected = 0.3 * (0.5 * 0.1 + 2.0 * 0.2) + 1.5 * (0.5 * 0.3 + 2.0 * 0.4)
    assert loss.item() == pytest.approx(expected, rel=1e-6)


def test_dual_block_loss_decomposes_over_streams():
    stream1, stream2 = _scalars(0.7, 0.2), _scalars(0.05, 0.9)
    both = dual_block_loss(stream1, stream2, LossConfig(lambda_in1=1.0, lambda_in2=1.0)).item()
    first = dual_block_loss(stream1, None, LossConfig(lambda_in1=1.0, lambda_in2=0.0)).item()
    second = dual_block_loss(None, stream2, LossConfig(lambda_in1=0.0, lambda_in2=1.0)).item()
    assert both == pytest.approx(first + second, rel=1e-6)


def test_dual_block_loss_rejects_missing_training_signal():
    with pytest.raises(ValueError, match="both zero"):
        dual_block_loss(_scalars(0.1), _scalars(0.2), LossConfig(lambda_in1=0.0, lambda_in2=0.0))
    with pytest.raises(ValueError, match="stream 2"):
        dual_block_loss(_scalars(0.1), None, LossConfig())


def test_loss_config_rejects_bad_values():
    with pytest.raises(ValueError, match="epsilon"):
        LossConfig(epsilon=1.0)
    with pytest.raises(ValueError, match="beta"):
        LossConfig(beta=-1.0)
    LossConfig(gamma=-1.0)
