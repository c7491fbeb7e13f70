"""Randomized finite-difference audit of every analytic gradient.

Each audited loss is evaluated on many small random configurations
(architecture, inputs, labels, head) and its backward pass is compared to
central differences over every parameter coordinate it touches.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from losses import (
    FD_STEP,
    GRADCHECK_TOLERANCE,
    RELATIVE_ERROR_FLOOR,
    GradCheckResult,
    Hyperparams,
    base_objective,
    ccl_grad,
    ccl_loss,
    finetune_objective,
    grad_check,
    incremental_objective,
    kl_batch,
    semantic_prior,
)
from mathcore import RandomStream
from model import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    GradientBundle,
    LossNode,
    MlpExtractor,
    PrototypeClassifier,
    StatisticsHead,
    backward,
    forward_pass,
    model_parameters,
    perturb_batch,
)

logger = logging.getLogger(__name__)

RESOLVABLE_GRADIENT = 1e-6
KINK_MARGIN = 1e-3
MAX_RESAMPLES = 200
LOSS_NAMES: tuple[str, ...] = ("ce", "ccl", "base", "ce_baseline", "kl", "incremental")


@dataclass
class AuditPoint:
    """One random point at which gradients are compared."""

    extractor: MlpExtractor
    classifier: PrototypeClassifier
    head: StatisticsHead
    inputs: np.ndarray
    label_indices: np.ndarray
    mu_tilde: np.ndarray
    hp: Hyperparams

    def describe(self) -> str:
        widths = [self.extractor.input_dim] + [layer.out_dim for layer in self.extractor.layers]
        return f"widths={widths} classes={len(self.classifier)} batch={self.inputs.shape[0]}"


def _is_smooth(point: AuditPoint) -> bool:
    trace = point.extractor.forward(point.inputs)
    if trace.min_abs_relu_preactivation(point.extractor.layers) < KINK_MARGIN:
        return False
    features = trace.features
    if np.min(np.linalg.norm(features, axis=1)) < KINK_MARGIN:
        return False
    if np.min(np.linalg.norm(point.classifier.prototypes, axis=1)) < KINK_MARGIN:
        return False
    head_trace = point.head.forward(features)
    raw = head_trace.logvar_raw
    if np.min(np.abs(raw - LOGVAR_MIN)) < KINK_MARGIN or np.min(np.abs(raw - LOGVAR_MAX)) < KINK_MARGIN:
        return False
    perturbed = perturb_batch(features, head_trace.mu, head_trace.logvar)
    return bool(np.min(np.linalg.norm(perturbed, axis=1)) >= KINK_MARGIN)


def _draw_point(stream: RandomStream) -> AuditPoint:
    input_dim = stream.integers(2, 5)
    hidden = [stream.integers(2, 6) for _ in range(stream.integers(1, 2))]
    feature_dim = stream.integers(2, 4)
    n_classes = stream.integers(2, 4)
    batch = stream.integers(1, 5)

    extractor = MlpExtractor.he_init(input_dim, hidden, feature_dim, stream)
    classifier = PrototypeClassifier(stream.normal((n_classes, feature_dim)), tuple(range(n_classes)))
    head = StatisticsHead.linear_init(feature_dim, stream)
    inputs = stream.normal((batch, input_dim))
    labels = np.array([stream.integers(0, n_classes - 1) for _ in range(batch)], dtype=np.int64)
    features = extractor.forward(inputs).features
    mu_tilde = semantic_prior(features, classifier, labels)
    hp = Hyperparams(gamma=float(stream.uniform(0.1, 1.0, 1)[0]), alpha=float(stream.uniform(0.1, 1.0, 1)[0]))
    return AuditPoint(extractor, classifier, head, inputs, labels, mu_tilde, hp)


def _is_resolvable(name: str, point: AuditPoint) -> bool:
    # central differences carry round-off near eps * |loss| / step
    value, grads = _evaluate(name, point, with_grads=True)
    threshold = RESOLVABLE_GRADIENT * max(1.0, abs(value))
    for grad in grads.values():
        magnitudes = np.abs(grad[grad != 0.0])
        if magnitudes.size and float(magnitudes.min()) < threshold:
            return False
    return True


def sample_point(stream: RandomStream, loss: str | None = None) -> AuditPoint:
    """Draw configurations until one sits away from every relu kink and clamp edge.

    With ``loss`` the configuration must also give every nonzero gradient
    coordinate of that loss a magnitude above ``RESOLVABLE_GRADIENT * max(1, |loss|)``.
    """

    for _ in range(MAX_RESAMPLES):
        point = _draw_point(stream)
        if _is_smooth(point) and (loss is None or _is_resolvable(loss, point)):
            return point
    raise RuntimeError(f"no smooth configuration found in {MAX_RESAMPLES} draws")


def _ccl_only(point: AuditPoint, with_grads: bool) -> tuple[float, GradientBundle]:
    cache = forward_pass(point.extractor, point.inputs, head=point.head)
    logvar = cache.head_trace.logvar
    node = LossNode(ccl_loss(logvar), grad_logvar=ccl_grad(logvar))
    return node.value, backward(node, cache) if with_grads else GradientBundle()


def _kl_only(point: AuditPoint, with_grads: bool) -> tuple[float, GradientBundle]:
    cache = forward_pass(point.extractor, point.inputs, head=point.head)
    value, grad_mu, grad_logvar = kl_batch(cache.head_trace.mu, cache.head_trace.logvar, point.mu_tilde)
    node = LossNode(value, grad_mu=grad_mu, grad_logvar=grad_logvar)
    return node.value, backward(node, cache) if with_grads else GradientBundle()


def _evaluate(name: str, point: AuditPoint, with_grads: bool) -> tuple[float, GradientBundle]:
    if name == "ce":
        result = finetune_objective(
            point.extractor, point.classifier, point.inputs, point.label_indices, with_grads=with_grads
        )
    elif name == "ccl":
        return _ccl_only(point, with_grads)
    elif name == "base":
        result = base_objective(
            point.extractor, point.classifier, point.head, point.inputs, point.label_indices, point.hp,
            with_grads=with_grads,
        )
    elif name == "ce_baseline":
        result = base_objective(
            point.extractor, point.classifier, None, point.inputs, point.label_indices, point.hp,
            with_grads=with_grads,
        )
    elif name == "kl":
        return _kl_only(point, with_grads)
    elif name == "incremental":
        # the prior mean is held fixed, as during training
        result = incremental_objective(
            point.extractor, point.classifier, point.head, point.inputs, point.label_indices, point.hp,
            point.mu_tilde, with_grads=with_grads,
        )
    else:
        raise ValueError(f"Unknown loss for gradient audit: {name}")
    return result.loss.value, result.grads


def corrupt_largest(grads: GradientBundle) -> GradientBundle:
    """Copy of ``grads`` with its largest-magnitude coordinate doubled."""

    corrupted = GradientBundle({name: value.copy() for name, value in grads.items()})
    name = max(corrupted, key=lambda key: float(np.max(np.abs(corrupted[key]))) if corrupted[key].size else -1.0)
    array = corrupted[name]
    index = np.unravel_index(int(np.argmax(np.abs(array))), array.shape)
    array[index] *= 2.0
    return corrupted


def check_point(
    name: str,
    point: AuditPoint,
    *,
    floor: float = RELATIVE_ERROR_FLOOR,
    corrupt: bool = False,
) -> GradCheckResult:
    _, analytic = _evaluate(name, point, with_grads=True)
    if corrupt:
        analytic = corrupt_largest(analytic)
    live = model_parameters(point.extractor, point.classifier, point.head)
    params = {key: live[key] for key in analytic}
    loss_fn: Callable[[], float] = lambda: _evaluate(name, point, with_grads=False)[0]
    return grad_check(loss_fn, params, analytic, step=FD_STEP, floor=floor)


@dataclass(frozen=True)
class LossAudit:
    loss: str
    configurations: int
    worst: GradCheckResult
    point: str

    @property
    def max_relative_error(self) -> float:
        return self.worst.max_relative_error

    def passed(self, tolerance: float = GRADCHECK_TOLERANCE) -> bool:
        return self.worst.passed(tolerance)

    def line(self) -> str:
        status = "ok" if self.passed() else "FAIL"
        return f"{self.loss:<12} configs={self.configurations:<4} {status:<4} {self.worst.describe()}"


def audit_loss(
    name: str,
    n_configs: int,
    seed: int,
    *,
    floor: float = RELATIVE_ERROR_FLOOR,
    corrupt: bool = False,
) -> LossAudit:
    """Worst gradient disagreement for ``name`` over ``n_configs`` random points.

    With ``corrupt`` the first point's analytic gradient has one coordinate
    doubled, which the audit must flag.
    """

    if n_configs < 1:
        raise ValueError("n_configs must be at least 1")
    stream = RandomStream(seed, f"gradcheck/{name}")
    worst: GradCheckResult | None = None
    worst_point = ""
    for index in range(n_configs):
        point = sample_point(stream, name)
        result = check_point(name, point, floor=floor, corrupt=corrupt and index == 0)
        if worst is None or result.max_relative_error > worst.max_relative_error:
            worst, worst_point = result, point.describe()
    assert worst is not None
    logger.info("gradient audit %s: %s", name, worst.describe())
    return LossAudit(loss=name, configurations=n_configs, worst=worst, point=worst_point)


def run_suite(
    n_configs: int = 100,
    seed: int = 0,
    *,
    losses: Sequence[str] = LOSS_NAMES,
    floor: float = RELATIVE_ERROR_FLOOR,
    corrupt: bool = False,
) -> list[LossAudit]:
    return [audit_loss(name, n_configs, seed, floor=floor, corrupt=corrupt) for name in losses]


__all__ = [
    "AuditPoint",
    "KINK_MARGIN",
    "LOSS_NAMES",
    "LossAudit",
    "RESOLVABLE_GRADIENT",
    "audit_loss",
    "check_point",
    "corrupt_largest",
    "run_suite",
    "sample_point",
]
