import math

import numpy as np
import pytest

from mathcore import COSINE_EPS, DimensionError, RandomStream, linear_forward, stable_softmax
from model import (
    CLASSIFIER_PROTOTYPES,
    DenseLayer,
    GaussianStats,
    LossNode,
    MlpExtractor,
    PrototypeClassifier,
    StatisticsHead,
    backward,
    classify,
    classify_batch,
    compute_prototype,
    extract_features,
    forward_pass,
    perturb,
    predict_label,
    predict_labels,
    predict_statistics,
)


def _unit_classifier():
    return PrototypeClassifier(np.array([[1.0, 0.0], [0.0, 1.0]]), (3, 7))


def test_identity_extractor_returns_input():
    extractor = MlpExtractor([DenseLayer(np.eye(2), np.zeros(2), "identity")])
    np.testing.assert_array_equal(extract_features(extractor, [1.0, 2.0]), [1.0, 2.0])


def test_relu_zeroes_negative_preactivation():
    extractor = MlpExtractor([DenseLayer(np.array([[-1.0, 0.0], [0.0, 1.0]]), np.zeros(2), "relu")])
    np.testing.assert_array_equal(extract_features(extractor, [2.0, 3.0]), [0.0, 3.0])


def test_two_layer_network_matches_hand_composition():
    stream = RandomStream(1, "test/extractor")
    extractor = MlpExtractor.he_init(4, [5], 3, stream)
    x = stream.normal(4)
    hidden = np.maximum(linear_forward(extractor.layers[0].weights, extractor.layers[0].bias, x), 0.0)
    expected = linear_forward(extractor.layers[1].weights, extractor.layers[1].bias, hidden)
    np.testing.assert_allclose(extract_features(extractor, x), expected, atol=1e-12)


def test_extractor_rejects_wrong_input_dimension():
    extractor = MlpExtractor.identity(3)
    with pytest.raises(DimensionError):
        extract_features(extractor, [1.0, 2.0])


def test_extractor_rejects_unchained_layers():
    with pytest.raises(DimensionError):
        MlpExtractor([DenseLayer(np.eye(2), np.zeros(2)), DenseLayer(np.eye(3), np.zeros(3))])


def test_he_init_uses_identity_output_layer():
    extractor = MlpExtractor.he_init(6, [8, 8], 4, RandomStream(0, "init.extractor"))
    assert [layer.activation for layer in extractor.layers] == ["relu", "relu", "identity"]
    assert extractor.input_dim == 6
    assert extractor.feature_dim == 4


def test_classify_matches_cosine_softmax():
    probs = classify(_unit_classifier(), [1.0, 0.0])
    assert probs[0] == pytest.approx(0.73105858, abs=1e-8)
    assert probs[1] == pytest.approx(0.26894142, abs=1e-8)
    expected = stable_softmax([1.0, 0.0])
    np.testing.assert_allclose(probs, expected, atol=1e-12)


def test_classify_equidistant_feature_is_uniform():
    np.testing.assert_allclose(classify(_unit_classifier(), [1.0, 1.0]), [0.5, 0.5], atol=1e-12)


def test_classify_single_class_is_certain():
    classifier = PrototypeClassifier(np.array([[0.3, -0.2]]), (0,))
    np.testing.assert_array_equal(classify(classifier, [1.0, 5.0]), [1.0])


def test_classify_is_invariant_to_feature_scale():
    stream = RandomStream(2, "test/scale")
    classifier = PrototypeClassifier(stream.normal((4, 3)), (0, 1, 2, 3))
    f = stream.normal(3)
    np.testing.assert_allclose(classify(classifier, 7.5 * f), classify(classifier, f), atol=1e-9)


def test_classify_is_scale_invariant_for_small_features():
    stream = RandomStream(12, "test/small-scale")
    classifier = PrototypeClassifier(stream.normal((4, 3)), (0, 1, 2, 3))
    f = stream.normal(3)
    for scale in (1e-2, 1e-3):
        np.testing.assert_allclose(classify(classifier, scale * f), classify(classifier, f), atol=1e-12)


def test_classify_sums_to_one_over_random_cases():
    stream = RandomStream(3, "test/probabilities")
    for _ in range(1000):
        classes = stream.integers(1, 6)
        classifier = PrototypeClassifier(stream.normal((classes, 4)), tuple(range(classes)))
        assert classify(classifier, stream.normal(4)).sum() == pytest.approx(1.0, abs=1e-9)


def test_empty_classifier_is_rejected():
    classifier = PrototypeClassifier(np.empty((0, 2)), ())
    with pytest.raises(ValueError):
        classify(classifier, [1.0, 0.0])


def test_predict_label_picks_dominant_cosine_and_breaks_ties_low():
    classifier = _unit_classifier()
    assert predict_label(classifier, [1.0, 0.0]) == 3
    assert predict_label(classifier, [0.0, 2.0]) == 7
    assert predict_label(classifier, [1.0, 1.0]) == 3


def test_predict_labels_matches_max_scan():
    stream = RandomStream(4, "test/predict")
    classifier = PrototypeClassifier(stream.normal((5, 3)), (2, 4, 6, 8, 10))
    features = stream.normal((40, 3))
    probabilities = classify_batch(classifier, features)
    for row, label in zip(probabilities, predict_labels(classifier, features)):
        best = 0
        for index in range(1, len(row)):
            if row[index] > row[best]:
                best = index
        assert label == classifier.class_ids[best]


def test_predict_label_is_invariant_to_prototype_scale():
    stream = RandomStream(5, "test/prototype-scale")
    prototypes = stream.normal((4, 3))
    f = stream.normal(3)
    small = PrototypeClassifier(prototypes, (0, 1, 2, 3))
    large = PrototypeClassifier(prototypes * 12.0, (0, 1, 2, 3))
    assert predict_label(small, f) == predict_label(large, f)


def test_classifier_requires_increasing_class_ids():
    with pytest.raises(ValueError):
        PrototypeClassifier(np.eye(2), (5, 1))


def test_extended_classifier_keeps_existing_rows_and_sorts_ids():
    base = PrototypeClassifier(np.array([[1.0, 0.0], [0.0, 1.0]]), (0, 4))
    grown = base.extended([2], np.array([[0.5, 0.5]]))
    assert grown.class_ids == (0, 2, 4)
    np.testing.assert_array_equal(grown.prototypes, [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        grown.extended([4], np.array([[1.0, 1.0]]))


def test_compute_prototype_examples():
    np.testing.assert_array_equal(compute_prototype([np.array([1.0, 0.0]), np.array([0.0, 1.0])]), [0.5, 0.5])
    np.testing.assert_array_equal(compute_prototype([np.array([2.0, -3.0])]), [2.0, -3.0])
    with pytest.raises(ValueError):
        compute_prototype([])


def test_compute_prototype_is_mean_and_permutation_invariant():
    stream = RandomStream(6, "test/prototype")
    rows = stream.normal((5, 4))
    expected = [math.fsum(rows[:, j]) / 5 for j in range(4)]
    np.testing.assert_allclose(compute_prototype(rows), expected, atol=1e-12)
    np.testing.assert_allclose(compute_prototype(rows[::-1]), compute_prototype(rows), atol=1e-12)


def test_zero_weight_head_returns_biases_with_clamp():
    head = StatisticsHead(np.zeros((2, 2)), np.array([0.5, -1.0]), np.zeros((2, 2)), np.array([3.0, -25.0]))
    stats = predict_statistics(head, [9.0, 9.0])
    np.testing.assert_array_equal(stats.mu_hat, [0.5, -1.0])
    np.testing.assert_array_equal(stats.logvar_hat, [3.0, -10.0])


def test_random_head_matches_linear_composition():
    stream = RandomStream(7, "test/head")
    head = StatisticsHead.linear_init(3, stream)
    f = stream.normal(3)
    stats = predict_statistics(head, f)
    assert stats.mu_hat.shape == stats.logvar_hat.shape == (3,)
    np.testing.assert_allclose(stats.mu_hat, linear_forward(head.mu_weights, head.mu_bias, f), atol=1e-12)
    expected = np.clip(linear_forward(head.logvar_weights, head.logvar_bias, f), -10.0, 10.0)
    np.testing.assert_allclose(stats.logvar_hat, expected, atol=1e-12)


def test_perturb_identity_and_degenerate_scale():
    f = np.array([1.5, -2.0])
    np.testing.assert_array_equal(perturb(f, GaussianStats(np.zeros(2), np.zeros(2))), f)
    mu = np.array([0.25, 0.75])
    squashed = perturb(f, GaussianStats(mu, np.full(2, -10.0)))
    assert np.max(np.abs(squashed - mu)) <= math.exp(-5.0) * np.max(np.abs(f)) * (1.0 + 1e-12)


def test_perturb_matches_elementwise_oracle():
    stream = RandomStream(8, "test/perturb")
    f, mu, logvar = stream.normal(4), stream.normal(4), stream.uniform(-2.0, 2.0, 4)
    out = perturb(f, GaussianStats(mu, logvar))
    for i in range(4):
        assert out[i] == pytest.approx(mu[i] + math.exp(logvar[i] / 2.0) * f[i], abs=1e-12)


def test_perturb_rejects_dimension_mismatch():
    with pytest.raises(DimensionError):
        perturb([1.0, 2.0, 3.0], GaussianStats(np.zeros(2), np.zeros(2)))


def test_backward_of_half_squared_norm_is_the_input():
    extractor = MlpExtractor.identity(3)
    x = np.array([[0.5, -1.0, 2.0]])
    cache = forward_pass(extractor, x)
    grads = backward(LossNode(value=0.5 * float(np.sum(x**2)), grad_features=cache.features), cache)
    np.testing.assert_array_equal(grads["extractor.0.bias"], x[0])
    np.testing.assert_array_equal(grads["extractor.0.weights"], np.outer(x[0], x[0]))


def test_backward_leaves_untouched_parameters_at_zero():
    stream = RandomStream(9, "test/untouched")
    extractor = MlpExtractor.he_init(3, [4], 2, stream)
    classifier = PrototypeClassifier(stream.normal((3, 2)), (0, 1, 2))
    head = StatisticsHead.linear_init(2, stream)
    cache = forward_pass(extractor, stream.normal((2, 3)), classifier=classifier, head=head)
    grads = backward(LossNode(value=0.0, grad_logits=np.ones((2, 3))), cache)
    for name in ("head.mu.weights", "head.mu.bias", "head.logvar.weights", "head.logvar.bias"):
        assert not np.any(grads[name])
    assert grads[CLASSIFIER_PROTOTYPES].shape == (3, 2)


def test_cosine_backward_below_the_norm_floor_keeps_only_the_numerator():
    extractor = MlpExtractor.identity(2)
    classifier = PrototypeClassifier(np.array([[1.0, 0.0], [0.0, 2.0]]), (0, 1))
    x = np.array([[1e-10, 2e-10]])
    grad_logits = np.array([[1.0, -1.0]])
    grads = backward(LossNode(value=0.0, grad_logits=grad_logits), forward_pass(extractor, x, classifier=classifier))
    np.testing.assert_allclose(grads["extractor.0.bias"], [1e8, -2e8], rtol=1e-12)
    np.testing.assert_allclose(grads[CLASSIFIER_PROTOTYPES], grad_logits.T @ x / COSINE_EPS, rtol=1e-12)


def test_backward_requires_a_cached_forward_pass():
    with pytest.raises(ValueError):
        backward(LossNode(value=0.0), None)


def test_copies_do_not_share_storage():
    extractor = MlpExtractor.identity(2)
    clone = extractor.copy()
    clone.layers[0].weights[0, 0] = 5.0
    assert extractor.layers[0].weights[0, 0] == 1.0
