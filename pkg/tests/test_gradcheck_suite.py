import numpy as np
import pytest

from gradcheck_suite import (
    LOSS_NAMES,
    RESOLVABLE_GRADIENT,
    audit_loss,
    check_point,
    corrupt_largest,
    run_suite,
    sample_point,
)
from losses import GRADCHECK_TOLERANCE, RELATIVE_ERROR_FLOOR, base_objective, finetune_objective
from mathcore import RandomStream
from model import GradientBundle


def test_every_loss_matches_finite_differences_over_random_configurations():
    audits = run_suite(n_configs=100, seed=0)
    assert [audit.loss for audit in audits] == list(LOSS_NAMES)
    for audit in audits:
        assert audit.configurations == 100
        assert audit.max_relative_error < GRADCHECK_TOLERANCE, audit.line()


@pytest.mark.parametrize("name", LOSS_NAMES)
def test_corrupted_gradient_is_flagged(name):
    audit = audit_loss(name, 3, seed=1, corrupt=True)
    assert not audit.passed()
    assert audit.max_relative_error > 0.1
    assert "FAIL" in audit.line()


def test_base_loss_through_two_layer_extractor_and_head():
    stream = RandomStream(7, "test/base-point")
    point = sample_point(stream, "base")
    while len(point.extractor.layers) != 3:
        point = sample_point(stream, "base")
    result = check_point("base", point)
    assert result.max_relative_error < GRADCHECK_TOLERANCE
    assert result.parameter


def test_sampled_points_are_reproducible():
    first = sample_point(RandomStream(3, "test/point"))
    second = sample_point(RandomStream(3, "test/point"))
    np.testing.assert_array_equal(first.inputs, second.inputs)
    assert first.describe() == second.describe()


def test_corrupt_largest_doubles_one_coordinate_of_a_copy():
    grads = GradientBundle({"a": np.array([1.0, -4.0]), "b": np.array([[2.0]])})
    corrupted = corrupt_largest(grads)
    np.testing.assert_array_equal(corrupted["a"], [1.0, -8.0])
    np.testing.assert_array_equal(corrupted["b"], [[2.0]])
    np.testing.assert_array_equal(grads["a"], [1.0, -4.0])


def test_unknown_loss_name_is_rejected():
    with pytest.raises(ValueError):
        audit_loss("hinge", 1, seed=0)


def test_audits_compare_at_the_strict_relative_error_floor():
    assert RELATIVE_ERROR_FLOOR == 1e-8
    audit = audit_loss("ce_baseline", 10, seed=2)
    assert audit.passed(), audit.line()


@pytest.mark.parametrize("name", ["ce", "ce_baseline"])
def test_sampled_points_keep_every_gradient_above_round_off(name):
    stream = RandomStream(11, f"test/resolvable/{name}")
    for _ in range(20):
        point = sample_point(stream, name)
        if name == "ce":
            result = finetune_objective(point.extractor, point.classifier, point.inputs, point.label_indices)
        else:
            result = base_objective(
                point.extractor, point.classifier, None, point.inputs, point.label_indices, point.hp
            )
        threshold = RESOLVABLE_GRADIENT * max(1.0, abs(result.loss.value))
        for grad in result.grads.values():
            nonzero = np.abs(grad[grad != 0.0])
            assert nonzero.size == 0 or nonzero.min() >= threshold
        assert check_point(name, point, floor=RELATIVE_ERROR_FLOOR).max_relative_error < GRADCHECK_TOLERANCE
