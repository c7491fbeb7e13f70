"""Base-session training, incremental sessions and the experiment drivers built on them.

Session 0 trains the extractor, the base prototypes and (for the CCL base)
a statistics head. Every later session freezes the extractor and extends the
classifier with one prototype per new class, then optionally refines those new
prototypes under one of the incremental strategies.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Literal, Mapping, Optional, Sequence

import numpy as np

from data_sources import FullDataset, SessionDataset, SplitConfig, cumulative_test, sessions_from_config
from losses import (
    Hyperparams,
    LossValue,
    base_objective,
    finetune_objective,
    incremental_objective,
    semantic_prior,
)
from mathcore import RandomStream
from metrics import SessionReport, evaluate
from model import (
    CLASSIFIER_PROTOTYPES,
    EXTRACTOR_PREFIX,
    GradientBundle,
    MlpExtractor,
    PrototypeClassifier,
    StatisticsHead,
    compute_prototype,
    extract_features_batch,
    model_parameters,
    perturb_batch,
)

logger = logging.getLogger(__name__)

Strategy = Literal["prototype", "finetune_ce", "spl"]
BaseMethod = Literal["ccl", "ce"]
ExtractorMode = Literal["mlp", "identity"]
HeadInit = Literal["prior", "zeros"]

STRATEGIES: tuple[str, ...] = ("prototype", "finetune_ce", "spl")
BASE_METHODS: tuple[str, ...] = ("ccl", "ce")
EXTRACTOR_MODES: tuple[str, ...] = ("mlp", "identity")
HEAD_INITS: tuple[str, ...] = ("prior", "zeros")
SWEEP_GRID: tuple[float, ...] = (0.0, 0.0001, 0.001, 0.01, 0.1)
SHOT_GRID: tuple[int, ...] = (1, 3, 5, 10)


class ProtocolError(RuntimeError):
    """Raised when a session cannot be trained or applied to the current state."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.05
    hyperparams: Hyperparams = Hyperparams()
    strategy: Strategy = "spl"
    incremental_epochs: int = 300
    incremental_learning_rate: float = 0.2
    seed: int = 0
    hidden_widths: tuple[int, ...] = (32, 32)
    feature_dim: int = 8
    base_method: BaseMethod = "ccl"
    extractor: ExtractorMode = "mlp"
    spl_head_init: HeadInit = "prior"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        for name in ("epochs", "batch_size", "incremental_epochs", "feature_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if any(width < 1 for width in self.hidden_widths):
            raise ValueError(f"hidden widths must be >= 1, got {list(self.hidden_widths)}")
        for name in ("learning_rate", "incremental_learning_rate"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be a finite value > 0, got {value}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"Unsupported strategy: {self.strategy}")
        if self.base_method not in BASE_METHODS:
            raise ValueError(f"Unsupported base method: {self.base_method}")
        if self.extractor not in EXTRACTOR_MODES:
            raise ValueError(f"Unsupported extractor mode: {self.extractor}")
        if self.spl_head_init not in HEAD_INITS:
            raise ValueError(f"Unsupported SPL head init: {self.spl_head_init}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")

    def with_hyperparams(self, gamma: float, alpha: float) -> "TrainConfig":
        return replace(self, hyperparams=Hyperparams(gamma=gamma, alpha=alpha))


@dataclass(frozen=True)
class EpochRecord:
    session: int
    epoch: int
    value: float
    components: Mapping[str, float]


@dataclass
class TrainedState:
    """Model after some prefix of the session schedule.

    ``head`` is the base-session statistics head; it only lives until the
    first incremental session.
    """

    extractor: MlpExtractor
    classifier: PrototypeClassifier
    head: Optional[StatisticsHead]
    base_class_ids: tuple[int, ...]
    session_index: int = 0
    session_log: list[EpochRecord] = field(default_factory=list)

    def copy(self) -> "TrainedState":
        return TrainedState(
            extractor=self.extractor.copy(),
            classifier=self.classifier.copy(),
            head=None if self.head is None else self.head.copy(),
            base_class_ids=self.base_class_ids,
            session_index=self.session_index,
            session_log=list(self.session_log),
        )

    def losses(self, session: int) -> list[float]:
        return [record.value for record in self.session_log if record.session == session]


def _descend(params: Mapping[str, np.ndarray], grads: GradientBundle, learning_rate: float) -> None:
    for name, array in params.items():
        array -= learning_rate * grads[name]


def _record(log: list[EpochRecord], session: int, epoch: int, loss: LossValue) -> None:
    log.append(EpochRecord(session, epoch, loss.value, dict(loss.components)))


# ---------------------------------------------------------------------------
# Base session
# ---------------------------------------------------------------------------


def initial_state(cfg: TrainConfig, session0: SessionDataset) -> TrainedState:
    input_dim = session0.train.input_dim
    if cfg.extractor == "identity":
        extractor = MlpExtractor.identity(input_dim)
    else:
        extractor = MlpExtractor.he_init(
            input_dim, cfg.hidden_widths, cfg.feature_dim, RandomStream(cfg.seed, "init.extractor")
        )
    class_ids = session0.class_ids
    prototypes = RandomStream(cfg.seed, "init.classifier").normal((len(class_ids), extractor.feature_dim))
    head = None
    if cfg.base_method == "ccl":
        head = StatisticsHead.linear_init(extractor.feature_dim, RandomStream(cfg.seed, "init.head"))
    return TrainedState(extractor, PrototypeClassifier(prototypes, class_ids), head, class_ids)


def train_base(cfg: TrainConfig, session0: SessionDataset) -> TrainedState:
    """Mini-batch gradient descent on ``ce + gamma * ccl`` (plain ``ce`` for the CE base)."""

    if session0.session_index != 0:
        raise ProtocolError(f"base training needs session 0, got session {session0.session_index}")
    if len(session0.train) == 0:
        raise ProtocolError("base session has no training samples")

    state = initial_state(cfg, session0)
    params = model_parameters(state.extractor, state.classifier, state.head)
    if cfg.extractor == "identity":
        params = {name: value for name, value in params.items() if not name.startswith(EXTRACTOR_PREFIX)}

    inputs = session0.train.inputs
    labels = state.classifier.indices_of(session0.train.labels)
    shuffle = RandomStream(cfg.seed, "shuffle")
    n = inputs.shape[0]
    hp = cfg.hyperparams
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n)
        totals: Dict[str, float] = {}
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            result = base_objective(state.extractor, state.classifier, state.head, inputs[rows], labels[rows], hp)
            _descend(params, result.grads, cfg.learning_rate)
            for name, value in result.loss.components.items():
                totals[name] = totals.get(name, 0.0) + value * rows.size
        epoch_loss = LossValue.combine({k: v / n for k, v in totals.items()}, dict(result.loss.weights))
        _record(state.session_log, 0, epoch, epoch_loss)
        logger.debug("base epoch %d: %s", epoch, epoch_loss.components)

    logger.info(
        "trained base session on %d samples of %d classes (%s, %d epochs)",
        n, len(state.classifier), cfg.base_method, cfg.epochs,
    )
    return state


def mean_abs_logvar(state: TrainedState, inputs: np.ndarray) -> float:
    """Mean |log variance| the base statistics head predicts over ``inputs``."""

    if state.head is None:
        raise ProtocolError("state has no statistics head")
    features = extract_features_batch(state.extractor, inputs)
    return float(np.mean(np.abs(state.head.forward(features).logvar)))


# ---------------------------------------------------------------------------
# Incremental sessions
# ---------------------------------------------------------------------------


def _new_prototypes(features: np.ndarray, labels: np.ndarray, class_ids: Sequence[int]) -> np.ndarray:
    return np.vstack([compute_prototype(features[labels == class_id]) for class_id in class_ids])


def _finetune_ce(state: TrainedState, features: np.ndarray, labels: np.ndarray, new_rows: np.ndarray, cfg: TrainConfig, session: int) -> None:
    # the extractor is frozen, so the session runs in feature space
    feature_space = MlpExtractor.identity(features.shape[1])
    prototypes = state.classifier.prototypes
    for epoch in range(cfg.incremental_epochs):
        result = finetune_objective(feature_space, state.classifier, features, labels)
        prototypes[new_rows] -= cfg.incremental_learning_rate * result.grads[CLASSIFIER_PROTOTYPES][new_rows]
        _record(state.session_log, session, epoch, result.loss)


def _fresh_head(classifier: PrototypeClassifier, features: np.ndarray, labels: np.ndarray, init: HeadInit) -> StatisticsHead:
    """Zero weights and unit variance; the ``prior`` init starts the mean at the session's average prior."""

    dim = features.shape[1]
    if init == "zeros":
        return StatisticsHead.zeros(dim)
    mu_bias = semantic_prior(features, classifier, labels).mean(axis=0)
    return StatisticsHead(np.zeros((dim, dim)), mu_bias, np.zeros((dim, dim)), np.zeros(dim))


def _semantic_perturbation(
    state: TrainedState, features: np.ndarray, labels: np.ndarray, new_rows: np.ndarray, cfg: TrainConfig, session: int
) -> StatisticsHead:
    feature_space = MlpExtractor.identity(features.shape[1])
    head = _fresh_head(state.classifier, features, labels, cfg.spl_head_init)
    head_params = head.parameters()
    prototypes = state.classifier.prototypes
    for epoch in range(cfg.incremental_epochs):
        mu_tilde = semantic_prior(features, state.classifier, labels)
        result = incremental_objective(
            feature_space, state.classifier, head, features, labels, cfg.hyperparams, mu_tilde
        )
        prototypes[new_rows] -= cfg.incremental_learning_rate * result.grads[CLASSIFIER_PROTOTYPES][new_rows]
        _descend(head_params, result.grads, cfg.incremental_learning_rate)
        _record(state.session_log, session, epoch, result.loss)
    return head


def incremental_update(state: TrainedState, session: SessionDataset, cfg: TrainConfig) -> TrainedState:
    """Return the state after ``session``; ``state`` itself is left untouched."""

    return _apply_session(state, session, cfg)[0]


def _apply_session(
    state: TrainedState, session: SessionDataset, cfg: TrainConfig
) -> tuple[TrainedState, Optional[StatisticsHead]]:
    t = session.session_index
    if t < 1:
        raise ProtocolError(f"incremental sessions start at 1, got session {t}")
    if t != state.session_index + 1:
        raise ProtocolError(f"state is at session {state.session_index}; cannot apply session {t}")
    collisions = sorted(session.label_set & set(state.classifier.class_ids))
    if collisions:
        raise ProtocolError(f"session {t} classes {collisions} are already in the classifier")
    if len(session.train) == 0:
        raise ProtocolError(f"session {t} has no training samples")

    updated = state.copy()
    updated.head = None
    features = extract_features_batch(updated.extractor, session.train.inputs)
    new_ids = session.class_ids
    updated.classifier = updated.classifier.extended(
        new_ids, _new_prototypes(features, session.train.labels, new_ids)
    )
    labels = updated.classifier.indices_of(session.train.labels)
    new_rows = updated.classifier.indices_of(new_ids)

    spl_head = None
    if cfg.strategy == "finetune_ce":
        _finetune_ce(updated, features, labels, new_rows, cfg, t)
    elif cfg.strategy == "spl":
        spl_head = _semantic_perturbation(updated, features, labels, new_rows, cfg, t)
    updated.session_index = t
    logger.info("session %d: %s added classes %s", t, cfg.strategy, list(new_ids))
    return updated, spl_head


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass
class ExperimentRun:
    base_state: TrainedState
    final_state: TrainedState
    reports: list[SessionReport]


def _check_schedule(sessions: Sequence[SessionDataset]) -> None:
    if not sessions:
        raise ProtocolError("the session schedule is empty")
    indices = [s.session_index for s in sessions]
    if indices != list(range(len(sessions))):
        raise ProtocolError(f"sessions must be numbered 0..{len(sessions) - 1}, got {indices}")
    seen: set[int] = set()
    for s in sessions:
        overlap = seen & s.label_set
        if overlap:
            raise ProtocolError(f"session {s.session_index} repeats classes {sorted(overlap)}")
        seen |= s.label_set


def run_sessions(
    cfg: TrainConfig,
    sessions: Sequence[SessionDataset],
    *,
    base_state: Optional[TrainedState] = None,
) -> ExperimentRun:
    """Train (or reuse) the base state, apply every incremental session and evaluate after each."""

    _check_schedule(sessions)
    base = base_state if base_state is not None else train_base(cfg, sessions[0])
    state = base
    reports = [evaluate(state, cumulative_test(sessions, 0))]
    for session in sessions[1:]:
        state = incremental_update(state, session, cfg)
        reports.append(evaluate(state, cumulative_test(sessions, session.session_index)))
    return ExperimentRun(base_state=base, final_state=state, reports=reports)


def run_experiment(cfg: TrainConfig, sessions: Sequence[SessionDataset]) -> list[SessionReport]:
    return run_sessions(cfg, sessions).reports


@dataclass(frozen=True)
class SessionPerturbation:
    """Few-shot features of one session next to their perturbed copies under the trained SPL head."""

    session_index: int
    labels: np.ndarray
    features: np.ndarray
    perturbed: np.ndarray


def collect_perturbations(
    cfg: TrainConfig,
    sessions: Sequence[SessionDataset],
    *,
    base_state: Optional[TrainedState] = None,
) -> list[SessionPerturbation]:
    """Run SPL over every incremental session and keep what its head did to the few-shot features."""

    _check_schedule(sessions)
    if len(sessions) < 2:
        raise ProtocolError("the schedule has no incremental session to perturb")
    spl = replace(cfg, strategy="spl")
    state = base_state if base_state is not None else train_base(spl, sessions[0])
    collected = []
    for session in sessions[1:]:
        state, head = _apply_session(state, session, spl)
        assert head is not None
        features = extract_features_batch(state.extractor, session.train.inputs)
        stats = head.forward(features)
        collected.append(
            SessionPerturbation(
                session.session_index,
                session.train.labels.copy(),
                features,
                perturb_batch(features, stats.mu, stats.logvar),
            )
        )
    return collected


@dataclass(frozen=True)
class MethodRun:
    method: str
    seed: int
    reports: tuple[SessionReport, ...]

    def as_triple(self) -> tuple[str, int, tuple[SessionReport, ...]]:
        return self.method, self.seed, self.reports


def compare_strategies(
    cfg: TrainConfig,
    sessions: Sequence[SessionDataset],
    strategies: Sequence[str] = STRATEGIES,
) -> list[MethodRun]:
    """Run every strategy from one shared base state."""

    if not strategies:
        raise ProtocolError("no strategies to compare")
    base = train_base(cfg, sessions[0])
    runs = []
    for strategy in strategies:
        run = run_sessions(replace(cfg, strategy=strategy), sessions, base_state=base)
        runs.append(MethodRun(strategy, cfg.seed, tuple(run.reports)))
    return runs


ABLATION_ROWS: tuple[tuple[str, str, str], ...] = (
    ("CE", "ce", "prototype"),
    ("CE+SPL", "ce", "spl"),
    ("CE+CCL", "ccl", "prototype"),
    ("CE+CCL+SPL", "ccl", "spl"),
)


def ablation_study(cfg: TrainConfig, sessions: Sequence[SessionDataset]) -> list[MethodRun]:
    """The four CE / CCL / SPL combinations; base training is shared per base method."""

    bases: Dict[str, TrainedState] = {}
    runs = []
    for label, base_method, strategy in ABLATION_ROWS:
        row_cfg = replace(cfg, base_method=base_method, strategy=strategy)
        if base_method not in bases:
            bases[base_method] = train_base(row_cfg, sessions[0])
        run = run_sessions(row_cfg, sessions, base_state=bases[base_method])
        runs.append(MethodRun(label, cfg.seed, tuple(run.reports)))
    return runs


@dataclass(frozen=True)
class ShotResult:
    k_shot: int
    reports: tuple[SessionReport, ...]

    @property
    def final_accuracy(self) -> float:
        return self.reports[-1].acc_overall


def shot_study(
    cfg: TrainConfig,
    dataset: FullDataset,
    split: SplitConfig,
    shots: Sequence[int] = SHOT_GRID,
) -> list[ShotResult]:
    """Re-run the incremental sessions with each K in ``shots``; the class schedule and base stay fixed."""

    if not shots:
        raise ProtocolError("no shot counts to study")
    base: Optional[TrainedState] = None
    results = []
    for k in shots:
        sessions = sessions_from_config(dataset, replace(split, k_shot=int(k)))
        if base is None:
            base = train_base(cfg, sessions[0])
        run = run_sessions(cfg, sessions, base_state=base)
        results.append(ShotResult(int(k), tuple(run.reports)))
        logger.info("%d-shot final accuracy %.4f", k, results[-1].final_accuracy)
    return results


# ---------------------------------------------------------------------------
# Hyperparameter sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepResult:
    gamma_grid: tuple[float, ...]
    alpha_grid: tuple[float, ...]
    accuracy: np.ndarray
    reports: tuple[tuple[tuple[SessionReport, ...], ...], ...]

    def cell(self, gamma: float, alpha: float) -> float:
        return float(self.accuracy[self.gamma_grid.index(gamma), self.alpha_grid.index(alpha)])


def _sweep_row(
    cfg: TrainConfig, sessions: Sequence[SessionDataset], gamma: float, alpha_grid: Sequence[float]
) -> tuple[tuple[SessionReport, ...], ...]:
    # base training ignores alpha, so one base state serves the whole row
    base = train_base(cfg.with_hyperparams(gamma, alpha_grid[0]), sessions[0])
    row = []
    for alpha in alpha_grid:
        run = run_sessions(cfg.with_hyperparams(gamma, alpha), sessions, base_state=base)
        row.append(tuple(run.reports))
        logger.info("sweep gamma=%g alpha=%g final accuracy %.4f", gamma, alpha, run.reports[-1].acc_overall)
    return tuple(row)


def sweep_hyperparams(
    cfg: TrainConfig,
    sessions: Sequence[SessionDataset],
    gamma_grid: Sequence[float] = SWEEP_GRID,
    alpha_grid: Sequence[float] = SWEEP_GRID,
    *,
    workers: int = 1,
) -> SweepResult:
    """Final-session accuracy for every (gamma, alpha) pair, all with ``cfg.seed``."""

    if not gamma_grid or not alpha_grid:
        raise ProtocolError("sweep grids must be nonempty")
    gammas = tuple(float(g) for g in gamma_grid)
    alphas = tuple(float(a) for a in alpha_grid)
    for gamma in gammas:
        for alpha in alphas:
            Hyperparams(gamma=gamma, alpha=alpha)
    _check_schedule(sessions)

    if workers > 1 and len(gammas) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_row, cfg, list(sessions), gamma, alphas) for gamma in gammas]
            rows = tuple(future.result() for future in futures)
    else:
        rows = tuple(_sweep_row(cfg, sessions, gamma, alphas) for gamma in gammas)

    accuracy = np.array([[reports[-1].acc_overall for reports in row] for row in rows], dtype=np.float64)
    return SweepResult(gammas, alphas, accuracy, rows)


__all__ = [
    "ABLATION_ROWS",
    "EpochRecord",
    "ExperimentRun",
    "MethodRun",
    "ProtocolError",
    "STRATEGIES",
    "SWEEP_GRID",
    "SessionPerturbation",
    "ShotResult",
    "SweepResult",
    "TrainConfig",
    "TrainedState",
    "ablation_study",
    "collect_perturbations",
    "compare_strategies",
    "incremental_update",
    "initial_state",
    "mean_abs_logvar",
    "run_experiment",
    "run_sessions",
    "shot_study",
    "sweep_hyperparams",
    "train_base",
]
