"""Model checkpoints as ``.npz`` archives.

Every parameter is stored under its parameter name (``extractor.0.weights``,
``classifier.prototypes``, ``head.mu.bias``, ...) as a float64 array, next to
a few bookkeeping arrays. Arrays are written and read without pickling, so a
checkpoint round-trips bit for bit.
"""
from __future__ import annotations

import io
import logging
import os
import zipfile
from pathlib import Path

import numpy as np

from manifests import atomic_write_bytes
from model import (
    CLASSIFIER_PROTOTYPES,
    EXTRACTOR_PREFIX,
    HEAD_PREFIX,
    DenseLayer,
    MlpExtractor,
    PrototypeClassifier,
    StatisticsHead,
)
from protocol import TrainedState

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CHECKPOINT_SUFFIX = ".npz"

_VERSION_KEY = "format_version"
_ACTIVATIONS_KEY = f"{EXTRACTOR_PREFIX}.activations"
_CLASS_IDS_KEY = "classifier.class_ids"
_BASE_CLASS_IDS_KEY = "base_class_ids"
_SESSION_KEY = "session_index"


class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be written or read back."""


def checkpoint_arrays(state: TrainedState) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {
        _VERSION_KEY: np.array(FORMAT_VERSION, dtype=np.int64),
        _ACTIVATIONS_KEY: np.array([layer.activation for layer in state.extractor.layers], dtype=np.str_),
        _CLASS_IDS_KEY: np.array(state.classifier.class_ids, dtype=np.int64),
        _BASE_CLASS_IDS_KEY: np.array(state.base_class_ids, dtype=np.int64),
        _SESSION_KEY: np.array(state.session_index, dtype=np.int64),
    }
    arrays.update({name: np.asarray(value) for name, value in state.extractor.parameters().items()})
    arrays.update(state.classifier.parameters())
    if state.head is not None:
        arrays.update(state.head.parameters())
    return arrays


def save_checkpoint(state: TrainedState, path: str | os.PathLike[str]) -> Path:
    buffer = io.BytesIO()
    np.savez(buffer, **checkpoint_arrays(state))
    try:
        target = atomic_write_bytes(path, buffer.getvalue())
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    logger.debug("wrote checkpoint %s", target)
    return target


def _require(arrays: dict[str, np.ndarray], key: str) -> np.ndarray:
    if key not in arrays:
        raise CheckpointError(f"checkpoint is missing {key}")
    return arrays[key]


def state_from_arrays(arrays: dict[str, np.ndarray]) -> TrainedState:
    version = int(_require(arrays, _VERSION_KEY))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")

    activations = [str(a) for a in _require(arrays, _ACTIVATIONS_KEY)]
    layers = [
        DenseLayer(
            _require(arrays, f"{EXTRACTOR_PREFIX}.{i}.weights"),
            _require(arrays, f"{EXTRACTOR_PREFIX}.{i}.bias"),
            activation,
        )
        for i, activation in enumerate(activations)
    ]
    classifier = PrototypeClassifier(
        _require(arrays, CLASSIFIER_PROTOTYPES), tuple(int(c) for c in _require(arrays, _CLASS_IDS_KEY))
    )
    head = None
    if f"{HEAD_PREFIX}.mu.weights" in arrays:
        head = StatisticsHead(
            _require(arrays, f"{HEAD_PREFIX}.mu.weights"),
            _require(arrays, f"{HEAD_PREFIX}.mu.bias"),
            _require(arrays, f"{HEAD_PREFIX}.logvar.weights"),
            _require(arrays, f"{HEAD_PREFIX}.logvar.bias"),
        )
    return TrainedState(
        extractor=MlpExtractor(layers),
        classifier=classifier,
        head=head,
        base_class_ids=tuple(int(c) for c in _require(arrays, _BASE_CLASS_IDS_KEY)),
        session_index=int(_require(arrays, _SESSION_KEY)),
    )


def load_checkpoint(path: str | os.PathLike[str]) -> TrainedState:
    source = Path(path)
    if not source.is_file():
        raise CheckpointError(f"checkpoint not found: {source}")
    try:
        with np.load(source, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"could not read checkpoint {source}: {exc}") from exc
    try:
        return state_from_arrays(arrays)
    except (ValueError, KeyError, ArithmeticError) as exc:
        raise CheckpointError(f"checkpoint {source} is inconsistent: {exc}") from exc


__all__ = [
    "CHECKPOINT_SUFFIX",
    "CheckpointError",
    "FORMAT_VERSION",
    "checkpoint_arrays",
    "load_checkpoint",
    "save_checkpoint",
    "state_from_arrays",
]
