"""Learnable components with explicit forward and hand-derived backward passes.

Three parts make up a model:

* ``MlpExtractor`` maps raw inputs to feature vectors (relu hidden layers,
  identity output layer).
* ``PrototypeClassifier`` holds one prototype per known class and scores a
  feature by the softmax of its cosine similarities to every prototype.
* ``StatisticsHead`` predicts a per-sample diagonal Gaussian (mean and
  log-variance) in feature space.

Parameters are exposed as ``name -> ndarray`` mappings whose arrays are the
live storage, so optimizers and the gradient checker update them in place.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from mathcore import (
    COSINE_EPS,
    DimensionError,
    Mat64,
    RandomStream,
    Vec64,
    as_matrix,
    as_vector,
    cosine_matrix,
    ensure_finite,
    linear_forward,
    stable_softmax,
)


Activation = Literal["relu", "identity"]
ACTIVATIONS: tuple[str, ...] = ("relu", "identity")

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

EXTRACTOR_PREFIX = "extractor"
CLASSIFIER_PROTOTYPES = "classifier.prototypes"
HEAD_PREFIX = "head"


# ---------------------------------------------------------------------------
# Feature extractor
# ---------------------------------------------------------------------------


@dataclass
class DenseLayer:
    """One fully connected layer ``activation(weights @ x + bias)``."""

    weights: Mat64
    bias: Vec64
    activation: Activation = "relu"

    def __post_init__(self) -> None:
        self.weights = as_matrix(self.weights, "layer weights")
        self.bias = as_vector(self.bias, "layer bias")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise DimensionError(
                f"layer bias dimension {self.bias.shape[0]} does not match {self.weights.shape[0]} weight rows"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unsupported activation: {self.activation}")

    @property
    def in_dim(self) -> int:
        return int(self.weights.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weights.shape[0])


@dataclass
class ExtractorTrace:
    inputs: Mat64
    pre_activations: list[Mat64]
    activations: list[Mat64]

    @property
    def features(self) -> Mat64:
        return self.activations[-1]

    def min_abs_relu_preactivation(self, layers: Sequence[DenseLayer]) -> float:
        """Smallest |pre-activation| feeding a relu, ``inf`` when there is none."""

        values = [np.min(np.abs(z)) for z, layer in zip(self.pre_activations, layers) if layer.activation == "relu"]
        return float(min(values)) if values else float("inf")


@dataclass
class MlpExtractor:
    layers: list[DenseLayer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("an extractor needs at least one layer")
        for index, (prev, layer) in enumerate(zip(self.layers, self.layers[1:]), start=1):
            if prev.out_dim != layer.in_dim:
                raise DimensionError(
                    f"layer {index} expects {layer.in_dim} inputs but layer {index - 1} outputs {prev.out_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].out_dim

    @classmethod
    def he_init(
        cls,
        input_dim: int,
        hidden_widths: Sequence[int],
        feature_dim: int,
        stream: RandomStream,
    ) -> "MlpExtractor":
        """Relu hidden layers plus an identity output layer, weights ~ N(0, 2/fan_in)."""

        widths = [input_dim, *hidden_widths, feature_dim]
        layers = []
        for index, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
            activation: Activation = "identity" if index == len(widths) - 2 else "relu"
            weights = stream.normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
            layers.append(DenseLayer(weights, np.zeros(fan_out), activation))
        return cls(layers)

    @classmethod
    def identity(cls, dim: int) -> "MlpExtractor":
        return cls([DenseLayer(np.eye(dim), np.zeros(dim), "identity")])

    def forward(self, inputs: Mat64) -> ExtractorTrace:
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"extractor expects inputs of dimension {self.input_dim}, got shape {x.shape}")
        pre_activations: list[Mat64] = []
        activations: list[Mat64] = []
        current = x
        for layer in self.layers:
            z = linear_forward(layer.weights, layer.bias, current)
            current = np.maximum(z, 0.0) if layer.activation == "relu" else z
            pre_activations.append(z)
            activations.append(current)
        return ExtractorTrace(inputs=x, pre_activations=pre_activations, activations=activations)

    def backward(self, trace: ExtractorTrace, grad_features: Mat64) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        upstream = grad_features
        for index in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[index]
            z = trace.pre_activations[index]
            dz = upstream * (z > 0.0) if layer.activation == "relu" else upstream
            previous = trace.activations[index - 1] if index > 0 else trace.inputs
            grads[f"{EXTRACTOR_PREFIX}.{index}.weights"] = dz.T @ previous
            grads[f"{EXTRACTOR_PREFIX}.{index}.bias"] = dz.sum(axis=0)
            upstream = dz @ layer.weights
        return grads

    def parameters(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for index, layer in enumerate(self.layers):
            params[f"{EXTRACTOR_PREFIX}.{index}.weights"] = layer.weights
            params[f"{EXTRACTOR_PREFIX}.{index}.bias"] = layer.bias
        return params

    def copy(self) -> "MlpExtractor":
        return MlpExtractor([DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers])


def extract_features_batch(extractor: MlpExtractor, inputs: Mat64) -> Mat64:
    return ensure_finite(extractor.forward(inputs).features, "features")


def extract_features(extractor: MlpExtractor, x: Vec64 | Sequence[float]) -> Vec64:
    """Run one input through the extractor."""

    vector = as_vector(x, "input")
    if vector.shape[0] != extractor.input_dim:
        raise DimensionError(f"input dimension {vector.shape[0]} does not match extractor input {extractor.input_dim}")
    return extract_features_batch(extractor, vector[None, :])[0]


# ---------------------------------------------------------------------------
# Prototype classifier
# ---------------------------------------------------------------------------


@dataclass
class PrototypeClassifier:
    """Ordered prototypes, one row per class, sorted by class id.

    Prototypes are stored unnormalized; normalization happens inside the
    cosine similarity.
    """

    prototypes: Mat64
    class_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        self.prototypes = as_matrix(self.prototypes, "prototypes")
        self.class_ids = tuple(int(c) for c in self.class_ids)
        if self.prototypes.shape[0] != len(self.class_ids):
            raise DimensionError(
                f"{self.prototypes.shape[0]} prototypes for {len(self.class_ids)} class ids"
            )
        if any(b <= a for a, b in zip(self.class_ids, self.class_ids[1:])):
            raise ValueError("class_ids must be strictly increasing")

    def __len__(self) -> int:
        return len(self.class_ids)

    @property
    def feature_dim(self) -> int:
        return int(self.prototypes.shape[1])

    def index_of(self, class_id: int) -> int:
        try:
            return self.class_ids.index(int(class_id))
        except ValueError:
            raise KeyError(f"class {class_id} is not known to the classifier") from None

    def indices_of(self, class_ids: Iterable[int]) -> np.ndarray:
        return np.array([self.index_of(c) for c in class_ids], dtype=np.int64)

    def extended(self, class_ids: Sequence[int], prototypes: Mat64) -> "PrototypeClassifier":
        """Return a new classifier with ``prototypes`` added for ``class_ids``.

        Existing rows are copied unchanged; rows are re-sorted by class id.
        """

        new_ids = [int(c) for c in class_ids]
        collisions = sorted(set(new_ids) & set(self.class_ids))
        if collisions:
            raise ValueError(f"classes already present in the classifier: {collisions}")
        rows = np.vstack([self.prototypes, as_matrix(prototypes, "new prototypes")])
        ids = list(self.class_ids) + new_ids
        order = np.argsort(ids, kind="stable")
        return PrototypeClassifier(rows[order].copy(), tuple(ids[i] for i in order))

    def parameters(self) -> dict[str, np.ndarray]:
        return {CLASSIFIER_PROTOTYPES: self.prototypes}

    def copy(self) -> "PrototypeClassifier":
        return PrototypeClassifier(self.prototypes.copy(), self.class_ids)


def _require_classifier(classifier: PrototypeClassifier) -> None:
    if len(classifier) == 0:
        raise ValueError("the classifier has no classes")


def classify_batch(classifier: PrototypeClassifier, features: Mat64) -> Mat64:
    _require_classifier(classifier)
    return stable_softmax(cosine_matrix(np.asarray(features, dtype=np.float64), classifier.prototypes))


def classify(classifier: PrototypeClassifier, f: Vec64 | Sequence[float]) -> Vec64:
    """Softmax of the cosine similarities between ``f`` and every prototype."""

    _require_classifier(classifier)
    feature = as_vector(f, "feature")
    if feature.shape[0] != classifier.feature_dim:
        raise DimensionError(f"feature dimension {feature.shape[0]} does not match prototypes {classifier.feature_dim}")
    return classify_batch(classifier, feature[None, :])[0]


def predict_labels(classifier: PrototypeClassifier, features: Mat64) -> np.ndarray:
    # argmax keeps the first maximum, and rows are sorted by class id
    winners = np.argmax(classify_batch(classifier, features), axis=1)
    return np.asarray(classifier.class_ids, dtype=np.int64)[winners]


def predict_label(classifier: PrototypeClassifier, f: Vec64 | Sequence[float]) -> int:
    """Class id with the highest score; ties go to the lowest class id."""

    probabilities = classify(classifier, f)
    return classifier.class_ids[int(np.argmax(probabilities))]


def compute_prototype(features: Sequence[Vec64] | Mat64) -> Vec64:
    """Coordinate-wise mean of a class's features."""

    if len(features) == 0:
        raise ValueError("cannot compute a prototype from an empty feature list")
    stacked = as_matrix(np.vstack([np.asarray(f, dtype=np.float64) for f in features]), "features")
    return stacked.mean(axis=0)


# ---------------------------------------------------------------------------
# Statistics head
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianStats:
    """Predicted diagonal Gaussian; ``logvar_hat`` is already clamped."""

    mu_hat: Vec64
    logvar_hat: Vec64

    @property
    def variance(self) -> Vec64:
        return np.exp(self.logvar_hat)

    @property
    def std(self) -> Vec64:
        return np.exp(0.5 * self.logvar_hat)


@dataclass
class HeadTrace:
    features: Mat64
    mu: Mat64
    logvar_raw: Mat64
    logvar: Mat64

    def stats(self, row: int) -> GaussianStats:
        return GaussianStats(self.mu[row].copy(), self.logvar[row].copy())


@dataclass
class StatisticsHead:
    """Two linear maps d -> d predicting the mean and the log-variance."""

    mu_weights: Mat64
    mu_bias: Vec64
    logvar_weights: Mat64
    logvar_bias: Vec64

    def __post_init__(self) -> None:
        self.mu_weights = as_matrix(self.mu_weights, "mu weights")
        self.mu_bias = as_vector(self.mu_bias, "mu bias")
        self.logvar_weights = as_matrix(self.logvar_weights, "logvar weights")
        self.logvar_bias = as_vector(self.logvar_bias, "logvar bias")
        d = self.mu_weights.shape[0]
        for name, array in (
            ("mu weights", self.mu_weights),
            ("logvar weights", self.logvar_weights),
        ):
            if array.shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}, got {array.shape}")
        for name, array in (("mu bias", self.mu_bias), ("logvar bias", self.logvar_bias)):
            if array.shape != (d,):
                raise DimensionError(f"{name} must have dimension {d}, got {array.shape[0]}")

    @property
    def dim(self) -> int:
        return int(self.mu_weights.shape[0])

    @classmethod
    def zeros(cls, dim: int) -> "StatisticsHead":
        """Head predicting mean 0 and unit variance for every input."""

        return cls(np.zeros((dim, dim)), np.zeros(dim), np.zeros((dim, dim)), np.zeros(dim))

    @classmethod
    def linear_init(cls, dim: int, stream: RandomStream) -> "StatisticsHead":
        """Uniform(-1/sqrt(d), 1/sqrt(d)) for weights and biases, the usual linear-layer default."""

        bound = 1.0 / np.sqrt(dim)
        return cls(
            stream.uniform(-bound, bound, (dim, dim)),
            stream.uniform(-bound, bound, dim),
            stream.uniform(-bound, bound, (dim, dim)),
            stream.uniform(-bound, bound, dim),
        )

    def forward(self, features: Mat64) -> HeadTrace:
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != self.dim:
            raise DimensionError(f"statistics head expects features of dimension {self.dim}, got shape {f.shape}")
        mu = linear_forward(self.mu_weights, self.mu_bias, f)
        logvar_raw = linear_forward(self.logvar_weights, self.logvar_bias, f)
        logvar = np.clip(logvar_raw, LOGVAR_MIN, LOGVAR_MAX)
        return HeadTrace(features=f, mu=mu, logvar_raw=logvar_raw, logvar=logvar)

    def backward(
        self, trace: HeadTrace, grad_mu: Mat64, grad_logvar: Mat64
    ) -> tuple[dict[str, np.ndarray], Mat64]:
        """Return parameter gradients and the gradient with respect to the features."""

        inside = (trace.logvar_raw > LOGVAR_MIN) & (trace.logvar_raw < LOGVAR_MAX)
        grad_raw = grad_logvar * inside
        grads = {
            f"{HEAD_PREFIX}.mu.weights": grad_mu.T @ trace.features,
            f"{HEAD_PREFIX}.mu.bias": grad_mu.sum(axis=0),
            f"{HEAD_PREFIX}.logvar.weights": grad_raw.T @ trace.features,
            f"{HEAD_PREFIX}.logvar.bias": grad_raw.sum(axis=0),
        }
        grad_features = grad_mu @ self.mu_weights + grad_raw @ self.logvar_weights
        return grads, grad_features

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            f"{HEAD_PREFIX}.mu.weights": self.mu_weights,
            f"{HEAD_PREFIX}.mu.bias": self.mu_bias,
            f"{HEAD_PREFIX}.logvar.weights": self.logvar_weights,
            f"{HEAD_PREFIX}.logvar.bias": self.logvar_bias,
        }

    def copy(self) -> "StatisticsHead":
        return StatisticsHead(
            self.mu_weights.copy(), self.mu_bias.copy(), self.logvar_weights.copy(), self.logvar_bias.copy()
        )


def predict_statistics(head: StatisticsHead, f: Vec64 | Sequence[float]) -> GaussianStats:
    feature = as_vector(f, "feature")
    if feature.shape[0] != head.dim:
        raise DimensionError(f"feature dimension {feature.shape[0]} does not match head dimension {head.dim}")
    return head.forward(feature[None, :]).stats(0)


def perturb_batch(features: Mat64, mu: Mat64, logvar: Mat64) -> Mat64:
    if not (features.shape == mu.shape == logvar.shape):
        raise DimensionError(f"perturbation shapes disagree: {features.shape}, {mu.shape}, {logvar.shape}")
    return mu + np.exp(0.5 * logvar) * features


def perturb(f: Vec64 | Sequence[float], stats: GaussianStats) -> Vec64:
    """Deterministic perturbation ``mu_hat + sigma_hat * f``."""

    feature = as_vector(f, "feature")
    return ensure_finite(
        perturb_batch(feature[None, :], stats.mu_hat[None, :], stats.logvar_hat[None, :])[0], "perturbed feature"
    )


# ---------------------------------------------------------------------------
# Cached forward pass and backward
# ---------------------------------------------------------------------------


@dataclass
class CosineTrace:
    features: Mat64
    prototypes: Mat64
    logits: Mat64
    probabilities: Mat64


def _cosine_forward(features: Mat64, prototypes: Mat64) -> CosineTrace:
    logits = cosine_matrix(features, prototypes)
    return CosineTrace(features, prototypes, logits, stable_softmax(logits))


def _cosine_backward(trace: CosineTrace, grad_logits: Mat64) -> tuple[Mat64, Mat64]:
    """Gradients of ``F W^T / max(|F||W|, eps)`` with respect to F and W.

    Where the floor is active the denominator is a constant, so only the
    numerator contributes.
    """

    features, prototypes = trace.features, trace.prototypes
    feature_norms = np.linalg.norm(features, axis=1)
    prototype_norms = np.linalg.norm(prototypes, axis=1)
    norm_products = np.outer(feature_norms, prototype_norms)
    q = np.maximum(norm_products, COSINE_EPS)
    s = features @ prototypes.T
    a = grad_logits / q
    b = np.where(norm_products > COSINE_EPS, grad_logits * s / (q * q), 0.0)
    unit_features = np.divide(
        features, feature_norms[:, None], out=np.zeros_like(features), where=feature_norms[:, None] > 0
    )
    unit_prototypes = np.divide(
        prototypes, prototype_norms[:, None], out=np.zeros_like(prototypes), where=prototype_norms[:, None] > 0
    )
    grad_features = a @ prototypes - (b @ prototype_norms)[:, None] * unit_features
    grad_prototypes = a.T @ features - (b.T @ feature_norms)[:, None] * unit_prototypes
    return grad_features, grad_prototypes


@dataclass
class ForwardCache:
    """Everything a backward pass needs from one forward evaluation."""

    extractor: MlpExtractor
    classifier: PrototypeClassifier | None
    head: StatisticsHead | None
    extractor_trace: ExtractorTrace
    clean: CosineTrace | None = None
    head_trace: HeadTrace | None = None
    perturbed_features: Mat64 | None = None
    perturbed: CosineTrace | None = None

    @property
    def features(self) -> Mat64:
        return self.extractor_trace.features


def forward_pass(
    extractor: MlpExtractor,
    inputs: Mat64,
    *,
    classifier: PrototypeClassifier | None = None,
    head: StatisticsHead | None = None,
    perturb_features: bool = False,
) -> ForwardCache:
    """Evaluate the model on a row batch and keep the intermediates."""

    trace = extractor.forward(inputs)
    cache = ForwardCache(extractor=extractor, classifier=classifier, head=head, extractor_trace=trace)
    if classifier is not None:
        _require_classifier(classifier)
        cache.clean = _cosine_forward(trace.features, classifier.prototypes)
    if head is not None:
        cache.head_trace = head.forward(trace.features)
    if perturb_features:
        if head is None or classifier is None or cache.head_trace is None:
            raise ValueError("perturbation needs both a classifier and a statistics head")
        ht = cache.head_trace
        cache.perturbed_features = perturb_batch(trace.features, ht.mu, ht.logvar)
        cache.perturbed = _cosine_forward(cache.perturbed_features, classifier.prototypes)
    return cache


@dataclass
class LossNode:
    """A scalar loss together with its gradients at the model outputs it read."""

    value: float
    grad_logits: Mat64 | None = None
    grad_perturbed_logits: Mat64 | None = None
    grad_mu: Mat64 | None = None
    grad_logvar: Mat64 | None = None
    grad_features: Mat64 | None = None


class GradientBundle(dict):
    """Gradients keyed by parameter name, shaped like the parameters."""

    @classmethod
    def zeros_for(cls, parameters: Mapping[str, np.ndarray]) -> "GradientBundle":
        return cls({name: np.zeros_like(value) for name, value in parameters.items()})

    def accumulate(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, value in grads.items():
            self[name] = self[name] + value


def model_parameters(
    extractor: MlpExtractor,
    classifier: PrototypeClassifier | None = None,
    head: StatisticsHead | None = None,
) -> dict[str, np.ndarray]:
    params = dict(extractor.parameters())
    if classifier is not None:
        params.update(classifier.parameters())
    if head is not None:
        params.update(head.parameters())
    return params


def backward(node: LossNode, cache: ForwardCache | None) -> GradientBundle:
    """Analytic gradients of ``node.value`` for every parameter in the cached forward pass."""

    if cache is None:
        raise ValueError("backward requires the cached state of a forward pass")
    grads = GradientBundle.zeros_for(model_parameters(cache.extractor, cache.classifier, cache.head))
    features = cache.features
    grad_features = np.zeros_like(features)
    if node.grad_features is not None:
        grad_features += node.grad_features

    grad_mu = np.zeros_like(features) if node.grad_mu is None else np.array(node.grad_mu, dtype=np.float64)
    grad_logvar = np.zeros_like(features) if node.grad_logvar is None else np.array(node.grad_logvar, dtype=np.float64)

    if node.grad_logits is not None:
        if cache.clean is None:
            raise ValueError("loss reads classifier logits but the forward pass had no classifier")
        d_features, d_prototypes = _cosine_backward(cache.clean, node.grad_logits)
        grad_features += d_features
        grads.accumulate({CLASSIFIER_PROTOTYPES: d_prototypes})

    if node.grad_perturbed_logits is not None:
        if cache.perturbed is None or cache.head_trace is None:
            raise ValueError("loss reads perturbed logits but the forward pass did not perturb")
        d_perturbed, d_prototypes = _cosine_backward(cache.perturbed, node.grad_perturbed_logits)
        grads.accumulate({CLASSIFIER_PROTOTYPES: d_prototypes})
        sigma = np.exp(0.5 * cache.head_trace.logvar)
        grad_mu += d_perturbed
        grad_logvar += 0.5 * d_perturbed * sigma * features
        grad_features += d_perturbed * sigma

    if node.grad_mu is not None or node.grad_logvar is not None or node.grad_perturbed_logits is not None:
        if cache.head is None or cache.head_trace is None:
            raise ValueError("loss reads head statistics but the forward pass had no head")
        head_grads, d_features = cache.head.backward(cache.head_trace, grad_mu, grad_logvar)
        grads.accumulate(head_grads)
        grad_features += d_features

    grads.accumulate(cache.extractor.backward(cache.extractor_trace, grad_features))
    for name, value in grads.items():
        ensure_finite(value, f"gradient of {name}")
    return grads


__all__ = [
    "ACTIVATIONS",
    "CLASSIFIER_PROTOTYPES",
    "DenseLayer",
    "EXTRACTOR_PREFIX",
    "ExtractorTrace",
    "ForwardCache",
    "GaussianStats",
    "GradientBundle",
    "HEAD_PREFIX",
    "HeadTrace",
    "LOGVAR_MAX",
    "LOGVAR_MIN",
    "LossNode",
    "MlpExtractor",
    "PrototypeClassifier",
    "StatisticsHead",
    "backward",
    "classify",
    "classify_batch",
    "compute_prototype",
    "extract_features",
    "extract_features_batch",
    "forward_pass",
    "model_parameters",
    "perturb",
    "perturb_batch",
    "predict_label",
    "predict_labels",
    "predict_statistics",
]
