"""Scalar objectives of the base and incremental sessions, plus gradient checking.

Sign conventions
----------------
* The covariance constraint is ``-1/2 * sum(1 + logvar - exp(logvar))``, which
  is non-negative and vanishes exactly at unit variance.
* The incremental objective adds ``alpha * KL`` (the KL term is minimized).
* Similarity weights over "other classes" are normalized over the other
  classes only, so the prior mean is a convex combination of prototypes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from mathcore import (
    DimensionError,
    Mat64,
    RandomStream,
    Vec64,
    as_vector,
    cosine_matrix,
    ensure_finite,
)
from model import (
    CLASSIFIER_PROTOTYPES,
    ForwardCache,
    GaussianStats,
    GradientBundle,
    LossNode,
    MlpExtractor,
    PrototypeClassifier,
    StatisticsHead,
    backward,
    classify,
    forward_pass,
)

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12
FD_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4
RELATIVE_ERROR_FLOOR = 1e-8


class GradientCheckError(RuntimeError):
    """Raised when analytic and finite-difference gradients disagree."""


@dataclass(frozen=True)
class Hyperparams:
    """``gamma`` weights the covariance constraint, ``alpha`` the KL perturbation term."""

    gamma: float = 0.01
    alpha: float = 0.1

    def __post_init__(self) -> None:
        for name in ("gamma", "alpha"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class LossValue:
    """A loss with its labeled breakdown; ``value = sum(weights[k] * components[k])``."""

    value: float
    components: Mapping[str, float]
    weights: Mapping[str, float] = field(default_factory=dict)

    @classmethod
    def combine(cls, components: Mapping[str, float], weights: Mapping[str, float] | None = None) -> "LossValue":
        weights = dict(weights or {})
        value = 0.0
        for name, component in components.items():
            value = value + weights.setdefault(name, 1.0) * component
        if not math.isfinite(value):
            raise ArithmeticError(f"loss is not finite: {dict(components)}")
        return cls(value=value, components=dict(components), weights=weights)


@dataclass(frozen=True)
class SimilarityWeights:
    """Softmax-normalized similarity to every class other than ``own_class``."""

    weights: Vec64
    own_class: int


# ---------------------------------------------------------------------------
# Cross-entropy
# ---------------------------------------------------------------------------


def ce_cosine_loss(probabilities: Sequence[float] | Vec64, label_index: int) -> float:
    """``-log p[label]`` with the probability floored at 1e-12."""

    p = as_vector(probabilities, "probabilities")
    if not 0 <= label_index < p.shape[0]:
        raise IndexError(f"label index {label_index} out of range for {p.shape[0]} classes")
    return -math.log(max(float(p[label_index]), PROBABILITY_FLOOR))


def ce_batch(probabilities: Mat64, label_indices: np.ndarray) -> tuple[float, Mat64]:
    """Mean cross-entropy over rows and its gradient with respect to the logits."""

    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(label_indices, dtype=np.int64)
    n, classes = p.shape
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} probability rows")
    if np.any(labels < 0) or np.any(labels >= classes):
        raise IndexError(f"label index out of range for {classes} classes")
    picked = p[np.arange(n), labels]
    value = float(np.mean(-np.log(np.maximum(picked, PROBABILITY_FLOOR))))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad[picked < PROBABILITY_FLOOR] = 0.0
    return value, grad / n


# ---------------------------------------------------------------------------
# Covariance constraint
# ---------------------------------------------------------------------------


def _as_logvar_batch(logvar_batch: Sequence[Vec64] | Mat64) -> Mat64:
    if len(logvar_batch) == 0:
        raise ValueError("the covariance constraint needs a nonempty batch")
    batch = np.vstack([np.asarray(row, dtype=np.float64) for row in logvar_batch])
    return ensure_finite(batch, "logvar batch")


def ccl_loss(logvar_batch: Sequence[Vec64] | Mat64) -> float:
    """Batch mean of ``-1/2 * sum_i (1 + logvar_i - exp(logvar_i))``."""

    batch = _as_logvar_batch(logvar_batch)
    per_sample = -0.5 * np.sum(1.0 + batch - np.exp(batch), axis=1)
    return float(np.mean(per_sample))


def ccl_grad(logvar_batch: Mat64) -> Mat64:
    batch = _as_logvar_batch(logvar_batch)
    return 0.5 * (np.exp(batch) - 1.0) / batch.shape[0]


def base_loss(
    probabilities: Sequence[float] | Mat64,
    label: int | Sequence[int],
    logvar_batch: Sequence[Vec64] | Mat64,
    hp: Hyperparams,
) -> LossValue:
    """``ce + gamma * ccl``; accepts one probability vector or a batch of rows."""

    p = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    ce, _ = ce_batch(p, labels)
    return LossValue.combine({"ce": ce, "ccl": ccl_loss(logvar_batch)}, {"ce": 1.0, "ccl": hp.gamma})


# ---------------------------------------------------------------------------
# Semantic prior
# ---------------------------------------------------------------------------


def similarity_matrix(features: Mat64, prototypes: Mat64, own_indices: np.ndarray) -> Mat64:
    """Row n: exp(cos) over every class except ``own_indices[n]``, normalized; zero at the own class."""

    if prototypes.shape[0] < 2:
        raise ValueError("similarity scores need at least two classes")
    cosines = cosine_matrix(features, prototypes)
    rows = np.arange(cosines.shape[0])
    masked = cosines.copy()
    masked[rows, own_indices] = -np.inf
    shifted = np.exp(masked - np.max(masked, axis=1, keepdims=True))
    return shifted / np.sum(shifted, axis=1, keepdims=True)


def similarity_scores(f: Sequence[float] | Vec64, classifier: PrototypeClassifier, own_class: int) -> SimilarityWeights:
    if len(classifier) < 2:
        raise ValueError("similarity scores need at least two classes; there are no other classes")
    if not 0 <= own_class < len(classifier):
        raise IndexError(f"own class index {own_class} out of range for {len(classifier)} classes")
    feature = as_vector(f, "feature")
    if feature.shape[0] != classifier.feature_dim:
        raise DimensionError(f"feature dimension {feature.shape[0]} does not match prototypes {classifier.feature_dim}")
    weights = similarity_matrix(feature[None, :], classifier.prototypes, np.array([own_class]))[0]
    return SimilarityWeights(weights=weights, own_class=own_class)


def prior_means(similarities: Mat64, prototypes: Mat64) -> Mat64:
    if similarities.shape[1] != prototypes.shape[0]:
        raise DimensionError(f"{similarities.shape[1]} weights for {prototypes.shape[0]} prototypes")
    return similarities @ prototypes


def prior_mean(weights: SimilarityWeights, classifier: PrototypeClassifier) -> Vec64:
    """Similarity-weighted combination of the other classes' prototypes."""

    return prior_means(weights.weights[None, :], classifier.prototypes)[0]


# ---------------------------------------------------------------------------
# KL divergence to N(mu_tilde, I)
# ---------------------------------------------------------------------------


def kl_batch(mu: Mat64, logvar: Mat64, mu_tilde: Mat64) -> tuple[float, Mat64, Mat64]:
    """Mean KL over rows and its gradients with respect to ``mu`` and ``logvar``."""

    if not (mu.shape == logvar.shape == mu_tilde.shape):
        raise DimensionError(f"KL shapes disagree: {mu.shape}, {logvar.shape}, {mu_tilde.shape}")
    n = mu.shape[0]
    variance = np.exp(logvar)
    diff = mu - mu_tilde
    per_sample = 0.5 * np.sum(variance + diff * diff - 1.0 - logvar, axis=1)
    return float(np.mean(per_sample)), diff / n, 0.5 * (variance - 1.0) / n


def kl_to_prior(stats: GaussianStats, mu_tilde: Sequence[float] | Vec64) -> float:
    """Closed-form KL[N(mu_hat, sigma_hat^2) || N(mu_tilde, I)]."""

    target = as_vector(mu_tilde, "mu_tilde")
    if target.shape != stats.mu_hat.shape:
        raise DimensionError(f"mu_tilde dimension {target.shape[0]} does not match statistics {stats.mu_hat.shape[0]}")
    value, _, _ = kl_batch(stats.mu_hat[None, :], stats.logvar_hat[None, :], target[None, :])
    return max(value, 0.0)


def kl_monte_carlo(
    stats: GaussianStats, mu_tilde: Sequence[float] | Vec64, stream: RandomStream, n_samples: int = 1_000_000
) -> float:
    """Sampling estimate of the same KL, ``E_q[log q(z) - log p(z)]``."""

    target = as_vector(mu_tilde, "mu_tilde")
    sigma = stats.std
    eps = stream.normal((n_samples, target.shape[0]))
    z = stats.mu_hat + sigma * eps
    log_ratio = np.sum(-0.5 * stats.logvar_hat - 0.5 * eps * eps + 0.5 * (z - target) ** 2, axis=1)
    return float(np.mean(log_ratio))


def incremental_loss(
    f: Sequence[float] | Vec64,
    perturbed_f: Sequence[float] | Vec64,
    classifier: PrototypeClassifier,
    label: int,
    stats: GaussianStats,
    mu_tilde: Sequence[float] | Vec64,
    hp: Hyperparams,
) -> LossValue:
    """``ce(f) + ce(perturbed f) + alpha * KL`` for one sample; ``label`` is a class index."""

    components = {
        "ce": ce_cosine_loss(classify(classifier, f), label),
        "ce_perturbed": ce_cosine_loss(classify(classifier, perturbed_f), label),
        "kl": kl_to_prior(stats, mu_tilde),
    }
    return LossValue.combine(components, {"ce": 1.0, "ce_perturbed": 1.0, "kl": hp.alpha})


# ---------------------------------------------------------------------------
# Batch objectives with gradients
# ---------------------------------------------------------------------------


@dataclass
class ObjectiveResult:
    loss: LossValue
    grads: GradientBundle
    cache: ForwardCache


def _gradients(node: LossNode, cache: ForwardCache, with_grads: bool) -> GradientBundle:
    return backward(node, cache) if with_grads else GradientBundle()


def base_objective(
    extractor: MlpExtractor,
    classifier: PrototypeClassifier,
    head: StatisticsHead | None,
    inputs: Mat64,
    label_indices: np.ndarray,
    hp: Hyperparams,
    *,
    with_grads: bool = True,
) -> ObjectiveResult:
    """Base-session loss and gradients; without a head this is the plain CE baseline."""

    cache = forward_pass(extractor, inputs, classifier=classifier, head=head)
    ce, grad_logits = ce_batch(cache.clean.probabilities, label_indices)
    if head is None:
        loss = LossValue.combine({"ce": ce})
        node = LossNode(loss.value, grad_logits=grad_logits)
    else:
        logvar = cache.head_trace.logvar
        loss = LossValue.combine({"ce": ce, "ccl": ccl_loss(logvar)}, {"ce": 1.0, "ccl": hp.gamma})
        node = LossNode(loss.value, grad_logits=grad_logits, grad_logvar=hp.gamma * ccl_grad(logvar))
    return ObjectiveResult(loss, _gradients(node, cache, with_grads), cache)


def finetune_objective(
    extractor: MlpExtractor,
    classifier: PrototypeClassifier,
    inputs: Mat64,
    label_indices: np.ndarray,
    *,
    with_grads: bool = True,
) -> ObjectiveResult:
    cache = forward_pass(extractor, inputs, classifier=classifier)
    ce, grad_logits = ce_batch(cache.clean.probabilities, label_indices)
    loss = LossValue.combine({"ce": ce})
    return ObjectiveResult(loss, _gradients(LossNode(loss.value, grad_logits=grad_logits), cache, with_grads), cache)


def semantic_prior(features: Mat64, classifier: PrototypeClassifier, label_indices: np.ndarray) -> Mat64:
    """Per-sample prior means; treated as constants by the incremental objective."""

    similarities = similarity_matrix(features, classifier.prototypes, np.asarray(label_indices, dtype=np.int64))
    return prior_means(similarities, classifier.prototypes)


def incremental_objective(
    extractor: MlpExtractor,
    classifier: PrototypeClassifier,
    head: StatisticsHead,
    inputs: Mat64,
    label_indices: np.ndarray,
    hp: Hyperparams,
    mu_tilde: Mat64 | None = None,
    *,
    with_grads: bool = True,
) -> ObjectiveResult:
    """Batch mean of ``ce(f) + ce(mu_hat + sigma_hat * f) + alpha * KL``."""

    cache = forward_pass(extractor, inputs, classifier=classifier, head=head, perturb_features=True)
    if mu_tilde is None:
        mu_tilde = semantic_prior(cache.features, classifier, label_indices)
    ce, grad_logits = ce_batch(cache.clean.probabilities, label_indices)
    ce_perturbed, grad_perturbed = ce_batch(cache.perturbed.probabilities, label_indices)
    kl, grad_mu, grad_logvar = kl_batch(cache.head_trace.mu, cache.head_trace.logvar, mu_tilde)
    loss = LossValue.combine(
        {"ce": ce, "ce_perturbed": ce_perturbed, "kl": kl},
        {"ce": 1.0, "ce_perturbed": 1.0, "kl": hp.alpha},
    )
    node = LossNode(
        loss.value,
        grad_logits=grad_logits,
        grad_perturbed_logits=grad_perturbed,
        grad_mu=hp.alpha * grad_mu,
        grad_logvar=hp.alpha * grad_logvar,
    )
    return ObjectiveResult(loss, _gradients(node, cache, with_grads), cache)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckResult:
    max_relative_error: float
    parameter: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    coordinates: int

    def passed(self, tolerance: float = GRADCHECK_TOLERANCE) -> bool:
        return self.max_relative_error < tolerance

    def describe(self) -> str:
        return (
            f"max_rel_error={self.max_relative_error:.3e} at {self.parameter}{list(self.index)} "
            f"(analytic={self.analytic:.6e}, numeric={self.numeric:.6e}, coordinates={self.coordinates})"
        )


def relative_error(analytic: float, numeric: float, floor: float = RELATIVE_ERROR_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    *,
    step: float = FD_STEP,
    floor: float = RELATIVE_ERROR_FLOOR,
) -> GradCheckResult:
    """Compare ``analytic`` against central differences over every coordinate of ``params``.

    ``loss_fn`` must read the arrays in ``params``; each coordinate is nudged
    in place and restored to its exact original value afterwards.
    """

    worst = GradCheckResult(0.0, "", (), 0.0, 0.0, 0)
    coordinates = 0
    for name, array in params.items():
        grad = np.asarray(analytic[name], dtype=np.float64)
        if grad.shape != array.shape:
            raise DimensionError(f"gradient for {name} has shape {grad.shape}, parameter has {array.shape}")
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + step
            plus = loss_fn()
            array[index] = original - step
            minus = loss_fn()
            array[index] = original
            numeric = (plus - minus) / (2.0 * step)
            error = relative_error(float(grad[index]), numeric, floor)
            coordinates += 1
            if error > worst.max_relative_error or not worst.parameter:
                worst = GradCheckResult(error, name, tuple(int(i) for i in index), float(grad[index]), numeric, 0)
    result = GradCheckResult(
        worst.max_relative_error, worst.parameter, worst.index, worst.analytic, worst.numeric, coordinates
    )
    logger.debug("gradient check: %s", result.describe())
    return result


def assert_gradients(result: GradCheckResult, tolerance: float = GRADCHECK_TOLERANCE) -> None:
    if not result.passed(tolerance):
        raise GradientCheckError(result.describe())


__all__ = [
    "CLASSIFIER_PROTOTYPES",
    "FD_STEP",
    "GRADCHECK_TOLERANCE",
    "GradCheckResult",
    "GradientCheckError",
    "Hyperparams",
    "LossValue",
    "ObjectiveResult",
    "PROBABILITY_FLOOR",
    "RELATIVE_ERROR_FLOOR",
    "SimilarityWeights",
    "assert_gradients",
    "base_loss",
    "base_objective",
    "ccl_grad",
    "ccl_loss",
    "ce_batch",
    "ce_cosine_loss",
    "finetune_objective",
    "grad_check",
    "incremental_loss",
    "incremental_objective",
    "kl_batch",
    "kl_monte_carlo",
    "kl_to_prior",
    "prior_mean",
    "prior_means",
    "relative_error",
    "semantic_prior",
    "similarity_matrix",
    "similarity_scores",
]
