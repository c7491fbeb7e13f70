"""Helpers for building labeled datasets from interchangeable sources.

Two sources feed the session protocol: seeded synthetic Gaussian blobs and
externally computed embeddings stored as CSV. Either way the result is a
:class:`FullDataset` whose train split is later cut into sessions by
:func:`split_sessions`.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Iterable, Iterator, Literal, Optional, Sequence

import numpy as np
import pandas as pd

from manifests import atomic_write_text, write_provenance
from mathcore import Mat64, RandomStream, Vec64, as_vector
from model import MlpExtractor, extract_features_batch

if TYPE_CHECKING:
    from protocol import SessionPerturbation

logger = logging.getLogger(__name__)

DatasetSource = Literal["synthetic", "embeddings"]
Split = Literal["train", "test"]
SPLITS: tuple[str, ...] = ("train", "test")

CSV_FLOAT_FORMAT = "%.17g"
LABEL_COLUMN = "label"


class DatasetError(ValueError):
    """Raised when a dataset or a session schedule cannot be built."""


class EmbeddingFormatError(DatasetError):
    """Raised when an embeddings CSV is malformed."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True, eq=False)
class LabeledSample:
    input: Vec64
    label: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "input", as_vector(self.input, "sample input"))
        label = int(self.label)
        if label < 0:
            raise DatasetError(f"labels must be >= 0, got {label}")
        object.__setattr__(self, "label", label)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Row-aligned ``inputs`` (N x D) and integer ``labels`` (N); read-only after construction."""

    inputs: Mat64
    labels: np.ndarray
    split: Split = "train"

    def __post_init__(self) -> None:
        inputs = np.array(self.inputs, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if inputs.ndim != 2:
            raise DatasetError(f"inputs must be a two-dimensional array, got shape {inputs.shape}")
        if labels.shape[0] != inputs.shape[0]:
            raise DatasetError(f"{labels.shape[0]} labels for {inputs.shape[0]} inputs")
        if not np.all(np.isfinite(inputs)):
            raise DatasetError("inputs contain non-finite values")
        if labels.size and int(labels.min()) < 0:
            raise DatasetError(f"labels must be >= 0, got {int(labels.min())}")
        if self.split not in SPLITS:
            raise DatasetError(f"Unsupported split: {self.split}")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_samples(cls, samples: Iterable[LabeledSample], input_dim: int, split: Split = "train") -> "LabeledDataset":
        rows = list(samples)
        if not rows:
            return cls(np.empty((0, input_dim)), np.empty(0, dtype=np.int64), split)
        return cls(np.vstack([s.input for s in rows]), np.array([s.label for s in rows]), split)

    @classmethod
    def concat(cls, parts: Sequence["LabeledDataset"], split: Split | None = None) -> "LabeledDataset":
        if not parts:
            raise DatasetError("nothing to concatenate")
        return cls(
            np.vstack([p.inputs for p in parts]),
            np.concatenate([p.labels for p in parts]),
            split or parts[0].split,
        )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __iter__(self) -> Iterator[LabeledSample]:
        for row, label in zip(self.inputs, self.labels):
            yield LabeledSample(row, int(label))

    @property
    def samples(self) -> list[LabeledSample]:
        return list(self)

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def label_set(self) -> frozenset[int]:
        return frozenset(int(c) for c in np.unique(self.labels))

    def class_counts(self) -> Dict[int, int]:
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(c): int(n) for c, n in zip(ids, counts)}

    def subset(self, rows: np.ndarray) -> "LabeledDataset":
        index = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(self.inputs[index], self.labels[index], self.split)

    def of_classes(self, class_ids: Iterable[int]) -> "LabeledDataset":
        wanted = np.array(sorted(int(c) for c in class_ids), dtype=np.int64)
        return self.subset(np.flatnonzero(np.isin(self.labels, wanted)))

    def with_split(self, split: Split) -> "LabeledDataset":
        return LabeledDataset(self.inputs, self.labels, split)


@dataclass(frozen=True, eq=False)
class FullDataset:
    """Train and test splits over one label space, plus where they came from."""

    train: LabeledDataset
    test: LabeledDataset
    source: DatasetSource
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.train.split != "train" or self.test.split != "test":
            raise DatasetError("FullDataset needs a train split and a test split")
        if len(self.test) and self.test.input_dim != self.train.input_dim:
            raise DatasetError(
                f"train inputs have dimension {self.train.input_dim}, test inputs {self.test.input_dim}"
            )

    @property
    def input_dim(self) -> int:
        return self.train.input_dim

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.train.label_set | self.test.label_set))


# ---------------------------------------------------------------------------
# Synthetic blobs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Isotropic Gaussian classes around centers on a scaled random orthonormal frame."""

    input_dim: int = 16
    n_classes: int = 24
    train_per_class: int = 50
    test_per_class: int = 20
    separation: float = 5.0
    std: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("input_dim", "n_classes", "train_per_class", "test_per_class"):
            if int(getattr(self, name)) < 1:
                raise DatasetError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("separation", "std"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value <= 0:
                raise DatasetError(f"{name} must be a finite value > 0, got {value}")
        if self.seed < 0:
            raise DatasetError(f"seed must be >= 0, got {self.seed}")


def class_centers(cfg: SyntheticConfig) -> Mat64:
    """Centers at ``+-scale * q_i`` for the columns ``q_i`` of a seeded random rotation.

    Two centers on the same axis sit ``2 * scale`` apart and centers on
    different axes ``sqrt(2) * scale`` apart, so ``scale = separation / sqrt(2)``
    keeps every pair at least ``separation`` apart.
    """

    if cfg.n_classes > 2 * cfg.input_dim:
        raise DatasetError(
            f"cannot place {cfg.n_classes} classes at separation {cfg.separation} in {cfg.input_dim} dimensions; "
            f"the frame holds at most {2 * cfg.input_dim} centers"
        )
    stream = RandomStream(cfg.seed, "data").child("frame")
    frame, _ = np.linalg.qr(stream.normal((cfg.input_dim, cfg.input_dim)))
    scale = cfg.separation / math.sqrt(2.0)
    centers = np.empty((cfg.n_classes, cfg.input_dim))
    for k in range(cfg.n_classes):
        sign = 1.0 if k % 2 == 0 else -1.0
        centers[k] = sign * scale * frame[:, k // 2]
    return centers


def generate_synthetic(cfg: SyntheticConfig) -> FullDataset:
    centers = class_centers(cfg)
    stream = RandomStream(cfg.seed, "data")
    labels_for = lambda count: np.repeat(np.arange(cfg.n_classes, dtype=np.int64), count)

    splits = {}
    for split, count in (("train", cfg.train_per_class), ("test", cfg.test_per_class)):
        noise = stream.child(split).normal((cfg.n_classes * count, cfg.input_dim)) * cfg.std
        splits[split] = LabeledDataset(np.repeat(centers, count, axis=0) + noise, labels_for(count), split)

    metadata = {"source": "synthetic", **asdict(cfg)}
    logger.debug("generated %d train / %d test synthetic samples", len(splits["train"]), len(splits["test"]))
    return FullDataset(splits["train"], splits["test"], "synthetic", metadata)


# ---------------------------------------------------------------------------
# Session schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitConfig:
    """Arguments of :func:`split_sessions` as one validated value."""

    base_classes: int = 12
    n_way: int = 3
    k_shot: int = 5
    n_sessions: int = 4
    seed: int = 0
    class_order_seed: Optional[int] = None

    def __post_init__(self) -> None:
        for name, minimum in (("base_classes", 1), ("n_way", 1), ("k_shot", 1), ("n_sessions", 0), ("seed", 0)):
            if int(getattr(self, name)) < minimum:
                raise DatasetError(f"{name} must be >= {minimum}, got {getattr(self, name)}")

    @property
    def total_classes(self) -> int:
        return self.base_classes + self.n_sessions * self.n_way


@dataclass(frozen=True, eq=False)
class SessionDataset:
    """One session's classes with both of its splits.

    ``k_shot`` is set for incremental sessions, whose train split must hold
    exactly that many samples of every class in ``label_set``.
    """

    session_index: int
    label_set: frozenset[int]
    train: LabeledDataset
    test: LabeledDataset
    k_shot: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "label_set", frozenset(int(c) for c in self.label_set))
        if self.session_index < 0:
            raise DatasetError(f"session index must be >= 0, got {self.session_index}")
        if not self.label_set:
            raise DatasetError(f"session {self.session_index} has no classes")
        for part in (self.train, self.test):
            stray = sorted(part.label_set - self.label_set)
            if stray:
                raise DatasetError(f"session {self.session_index} {part.split} split holds foreign labels {stray}")
        if self.k_shot is not None:
            counts = self.train.class_counts()
            wrong = {c: counts.get(c, 0) for c in sorted(self.label_set) if counts.get(c, 0) != self.k_shot}
            if wrong:
                raise DatasetError(
                    f"session {self.session_index} needs {self.k_shot} train samples per class, got {wrong}"
                )

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.label_set))


def class_order(dataset: FullDataset, class_order_seed: Optional[int] = None) -> list[int]:
    order = sorted(dataset.train.label_set)
    if class_order_seed is not None:
        permutation = RandomStream(class_order_seed, "split/class-order").permutation(len(order))
        order = [order[i] for i in permutation]
    return order


def split_sessions(
    dataset: FullDataset,
    base_classes: int,
    n_way: int,
    k_shot: int,
    n_sessions: int,
    *,
    seed: int = 0,
    class_order_seed: Optional[int] = None,
) -> list[SessionDataset]:
    """Cut ``dataset`` into a base session and ``n_sessions`` N-way K-shot sessions.

    Few-shot samples are drawn without replacement from a stream per class,
    so a class's shots depend only on ``seed``, the class id and ``k_shot``.
    """

    for name, value, minimum in (
        ("base_classes", base_classes, 1),
        ("n_way", n_way, 1),
        ("k_shot", k_shot, 1),
        ("n_sessions", n_sessions, 0),
    ):
        if value < minimum:
            raise DatasetError(f"{name} must be >= {minimum}, got {value}")

    order = class_order(dataset, class_order_seed)
    needed = base_classes + n_sessions * n_way
    if needed > len(order):
        raise DatasetError(
            f"schedule needs {needed} classes ({base_classes} base + {n_sessions} x {n_way}-way) "
            f"but the dataset has {len(order)}; short by {needed - len(order)}"
        )

    counts = dataset.train.class_counts()
    base_ids = order[:base_classes]
    sessions = [
        SessionDataset(0, frozenset(base_ids), dataset.train.of_classes(base_ids), dataset.test.of_classes(base_ids))
    ]
    shots = RandomStream(seed, "split/shots")
    for t in range(1, n_sessions + 1):
        start = base_classes + (t - 1) * n_way
        ids = order[start : start + n_way]
        short = {c: counts.get(c, 0) for c in ids if counts.get(c, 0) < k_shot}
        if short:
            raise DatasetError(f"session {t} needs {k_shot} train samples per class; classes short: {short}")
        picks = []
        for class_id in ids:
            rows = np.flatnonzero(dataset.train.labels == class_id)
            chosen = shots.child(f"class-{class_id}").choice_without_replacement(rows.size, k_shot)
            picks.append(rows[np.sort(chosen)])
        train = dataset.train.subset(np.concatenate(picks))
        sessions.append(SessionDataset(t, frozenset(ids), train, dataset.test.of_classes(ids), k_shot=k_shot))

    logger.info(
        "split %d classes into %d base + %d sessions of %d-way %d-shot",
        len(order), base_classes, n_sessions, n_way, k_shot,
    )
    return sessions


def sessions_from_config(dataset: FullDataset, split: SplitConfig) -> list[SessionDataset]:
    return split_sessions(
        dataset,
        split.base_classes,
        split.n_way,
        split.k_shot,
        split.n_sessions,
        seed=split.seed,
        class_order_seed=split.class_order_seed,
    )


def cumulative_test(sessions: Sequence[SessionDataset], upto: int) -> LabeledDataset:
    """Union of the test splits of sessions ``0..upto``."""

    if not 0 <= upto < len(sessions):
        raise DatasetError(f"session {upto} is outside the schedule of {len(sessions)} sessions")
    return LabeledDataset.concat([s.test for s in sessions[: upto + 1]], split="test")


# ---------------------------------------------------------------------------
# Embedding CSV files
# ---------------------------------------------------------------------------


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _is_missing(value: Any) -> bool:
    return not isinstance(value, str)


def load_embeddings_csv(path: str | os.PathLike[str]) -> LabeledDataset:
    """Read a ``label,f0,f1,...`` file; line numbers in errors are 1-based and count the header."""

    source = Path(path)
    if not source.is_file():
        raise DatasetError(f"embeddings file not found: {source}")
    try:
        frame = pd.read_csv(
            source, header=None, dtype=str, keep_default_na=False, skip_blank_lines=False, encoding="utf-8"
        )
    except pd.errors.EmptyDataError:
        raise EmbeddingFormatError("file is empty", line=1) from None
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        raise EmbeddingFormatError(f"ragged row: {exc}", line=int(match.group(1)) if match else None) from exc

    records = frame.to_numpy(dtype=object)
    header = [value.strip() if isinstance(value, str) else value for value in records[0]]
    width = len(header) - 1
    expected = [LABEL_COLUMN] + [f"f{i}" for i in range(width)]
    if width < 1 or header != expected:
        raise EmbeddingFormatError(f"header must be {','.join(expected[:3])},... got {header}", line=1)

    inputs: list[list[float]] = []
    labels: list[int] = []
    for offset, row in enumerate(records[1:], start=2):
        if all(_is_missing(value) for value in row):
            continue
        present = sum(not _is_missing(value) for value in row)
        if present != width + 1:
            raise EmbeddingFormatError(f"expected {width + 1} fields, got {present}", line=offset)
        try:
            label = int(row[0])
        except ValueError:
            raise EmbeddingFormatError(f"label {row[0]!r} is not an integer", line=offset) from None
        if label < 0:
            raise EmbeddingFormatError(f"label {label} is negative", line=offset)
        values = []
        for column, text in enumerate(row[1:]):
            try:
                number = float(text)
            except ValueError:
                raise EmbeddingFormatError(f"field f{column} {text!r} is not a number", line=offset) from None
            if not math.isfinite(number):
                raise EmbeddingFormatError(f"field f{column} is not finite", line=offset)
            values.append(number)
        inputs.append(values)
        labels.append(label)

    if not labels:
        raise DatasetError(f"embeddings file has no samples: {source}")
    logger.debug("loaded %d embeddings of dimension %d from %s", len(labels), width, source)
    return LabeledDataset(np.array(inputs, dtype=np.float64), np.array(labels, dtype=np.int64), "train")


def export_embeddings_csv(
    extractor: MlpExtractor,
    dataset: LabeledDataset,
    path: str | os.PathLike[str],
    *,
    provenance: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write one ``label,f0..`` row per sample with the extractor's features at full precision."""

    if len(dataset):
        features = extract_features_batch(extractor, dataset.inputs)
    else:
        features = np.empty((0, extractor.feature_dim))
    frame = pd.DataFrame(features, columns=[f"f{i}" for i in range(features.shape[1])])
    frame.insert(0, LABEL_COLUMN, dataset.labels)
    target = atomic_write_text(path, frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n"))
    if provenance is not None:
        write_provenance(target, provenance)
    return target


def export_perturbations_csv(
    perturbations: Sequence["SessionPerturbation"],
    path: str | os.PathLike[str],
    *,
    provenance: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write ``session,label,kind,f0..`` rows: per session the few-shot features, then their perturbed copies."""

    if not perturbations:
        raise DatasetError("no perturbed sessions to export")
    frames = []
    for item in perturbations:
        for kind, values in (("feature", item.features), ("perturbed", item.perturbed)):
            frame = pd.DataFrame(values, columns=[f"f{i}" for i in range(values.shape[1])])
            frame.insert(0, "kind", kind)
            frame.insert(0, LABEL_COLUMN, item.labels)
            frame.insert(0, "session", item.session_index)
            frames.append(frame)
    table = pd.concat(frames, ignore_index=True)
    target = atomic_write_text(path, table.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n"))
    if provenance is not None:
        write_provenance(target, provenance)
    return target


def holdout_split(
    dataset: LabeledDataset, test_per_class: int, seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset]:
    """Move ``test_per_class`` seeded samples of every class into a test split."""

    if test_per_class < 1:
        raise DatasetError(f"test_per_class must be >= 1, got {test_per_class}")
    stream = RandomStream(seed, "data/holdout")
    test_rows = []
    for class_id, count in dataset.class_counts().items():
        if count <= test_per_class:
            raise DatasetError(f"class {class_id} has {count} samples; cannot hold out {test_per_class} for testing")
        rows = np.flatnonzero(dataset.labels == class_id)
        test_rows.append(rows[np.sort(stream.child(f"class-{class_id}").choice_without_replacement(rows.size, test_per_class))])
    held = np.concatenate(test_rows)
    keep = np.setdiff1d(np.arange(len(dataset)), held)
    return dataset.subset(keep).with_split("train"), dataset.subset(np.sort(held)).with_split("test")


def _load_embeddings_dataset(
    path: str | os.PathLike[str],
    test_path: Optional[str | os.PathLike[str]],
    test_per_class: int,
    seed: int,
) -> FullDataset:
    train = load_embeddings_csv(path)
    metadata: Dict[str, Any] = {"source": "embeddings", "path": str(path), "sha256": _file_digest(Path(path))}
    if test_path is not None:
        test = load_embeddings_csv(test_path).with_split("test")
        metadata.update({"test_path": str(test_path), "test_sha256": _file_digest(Path(test_path))})
    else:
        train, test = holdout_split(train, test_per_class, seed)
        metadata.update({"test_per_class": test_per_class, "holdout_seed": seed})
    return FullDataset(train, test, "embeddings", metadata)


def load_dataset(
    source: DatasetSource,
    *,
    synthetic: Optional[SyntheticConfig] = None,
    path: Optional[str | os.PathLike[str]] = None,
    test_path: Optional[str | os.PathLike[str]] = None,
    test_per_class: int = 20,
    seed: int = 0,
) -> FullDataset:
    """Return the full dataset for the requested data source."""

    if source == "synthetic":
        return generate_synthetic(synthetic or SyntheticConfig())
    if source == "embeddings":
        if path is None:
            raise DatasetError("path is required when loading from the embeddings source")
        return _load_embeddings_dataset(path, test_path, test_per_class, seed)
    raise DatasetError(f"Unsupported dataset source: {source}")


__all__ = [
    "CSV_FLOAT_FORMAT",
    "DatasetError",
    "DatasetSource",
    "EmbeddingFormatError",
    "FullDataset",
    "LabeledDataset",
    "LabeledSample",
    "SessionDataset",
    "SplitConfig",
    "SyntheticConfig",
    "class_centers",
    "class_order",
    "cumulative_test",
    "export_embeddings_csv",
    "export_perturbations_csv",
    "generate_synthetic",
    "holdout_split",
    "load_dataset",
    "load_embeddings_csv",
    "sessions_from_config",
    "split_sessions",
]
