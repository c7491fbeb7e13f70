"""Deterministic numerical primitives shared by every other module.

Vectors and matrices are plain float64 ``numpy`` arrays. The helpers here
validate shapes and finiteness at the public boundary so that no NaN or
infinity leaks into the model or loss code.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence, TypeAlias

import numpy as np

Vec64: TypeAlias = np.ndarray
Mat64: TypeAlias = np.ndarray

COSINE_EPS = 1e-8


class DimensionError(ValueError):
    """Raised when vector or matrix shapes do not line up."""


class NonFiniteError(ArithmeticError):
    """Raised when a NaN or infinity would escape a public operation."""


def ensure_finite(array: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return array


def as_vector(values: Sequence[float] | np.ndarray, name: str = "vector") -> Vec64:
    """Return ``values`` as a finite 1-D float64 array."""

    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1:
        raise DimensionError(f"{name} must be one-dimensional, got shape {vector.shape}")
    return ensure_finite(vector, name)


def as_matrix(values: Sequence[Sequence[float]] | np.ndarray, name: str = "matrix") -> Mat64:
    """Return ``values`` as a finite 2-D float64 array (row-major)."""

    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimensionError(f"{name} must be two-dimensional, got shape {matrix.shape}")
    return ensure_finite(matrix, name)


def require_same_dim(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"{what} dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def cosine_similarity(a: Sequence[float] | Vec64, b: Sequence[float] | Vec64) -> float:
    """Return ``dot(a, b) / max(|a| |b|, eps)`` clamped to [-1, 1]."""

    left = as_vector(a, "a")
    right = as_vector(b, "b")
    require_same_dim(left, right, "cosine_similarity")
    denominator = max(float(np.linalg.norm(left) * np.linalg.norm(right)), COSINE_EPS)
    value = float(np.dot(left, right)) / denominator
    return min(1.0, max(-1.0, value))


def cosine_matrix(features: Mat64, prototypes: Mat64) -> Mat64:
    """Batched cosine similarities: entry (n, c) compares feature n with prototype c.

    Uses the same floored denominator as :func:`cosine_similarity`, so a zero
    row scores 0 against every prototype. Entries are clipped to [-1, 1]
    against rounding at exactly parallel pairs.
    """

    require_same_dim(features, prototypes, "cosine_matrix")
    feature_norms = np.linalg.norm(features, axis=1)
    prototype_norms = np.linalg.norm(prototypes, axis=1)
    denominator = np.maximum(np.outer(feature_norms, prototype_norms), COSINE_EPS)
    return np.clip((features @ prototypes.T) / denominator, -1.0, 1.0)


def stable_softmax(logits: Sequence[float] | np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max-subtraction.

    Accepts a single logit vector or a batch (one row per sample).
    """

    values = np.asarray(logits, dtype=np.float64)
    if values.size == 0 or values.shape[-1] == 0:
        raise ValueError("stable_softmax requires at least one logit")
    ensure_finite(values, "logits")
    shifted = values - np.max(values, axis=-1, keepdims=True)
    exponentials = np.exp(shifted)
    return exponentials / np.sum(exponentials, axis=-1, keepdims=True)


def linear_forward(weights: Mat64, bias: Vec64, x: np.ndarray) -> np.ndarray:
    """Return ``weights @ x + bias``; ``x`` may be a single vector or a row batch."""

    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    inputs = np.asarray(x, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"weights must be two-dimensional, got shape {w.shape}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"bias dimension {b.shape[-1] if b.ndim else 0} does not match {w.shape[0]} weight rows")
    if inputs.shape[-1] != w.shape[1]:
        raise DimensionError(f"input dimension {inputs.shape[-1]} does not match {w.shape[1]} weight columns")
    return inputs @ w.T + b


def _stream_entropy(seed: int, purpose: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


@dataclass(eq=False)
class RandomStream:
    """A seeded, single-owner random stream identified by ``(seed, purpose)``.

    The generator is numpy's PCG64 seeded from the first 128 bits of
    ``sha256(f"{seed}:{purpose}")``. For a pinned numpy version the draws are
    bit-identical across runs and platforms.
    """

    seed: int
    purpose: str
    _generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        entropy = _stream_entropy(self.seed, self.purpose)
        self._generator = np.random.Generator(np.random.PCG64(entropy))

    def child(self, purpose: str) -> "RandomStream":
        """Return an independent stream for a sub-purpose of this one."""

        return RandomStream(self.seed, f"{self.purpose}/{purpose}")

    def normal(self, shape: int | tuple[int, ...]) -> np.ndarray:
        return self._generator.standard_normal(shape)

    def uniform(self, low: float, high: float, shape: int | tuple[int, ...]) -> np.ndarray:
        return self._generator.uniform(low, high, shape)

    def integers(self, low: int, high: int) -> int:
        """One integer drawn uniformly from ``[low, high]`` inclusive."""

        return int(self._generator.integers(low, high, endpoint=True))

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def choice_without_replacement(self, population: int, k: int) -> np.ndarray:
        return self._generator.choice(population, size=k, replace=False)


def draw_normal(stream: RandomStream, n: int) -> Vec64:
    """Draw ``n`` standard normal values from ``stream`` and advance it."""

    if n < 1:
        raise ValueError(f"draw_normal requires n >= 1, got {n}")
    return stream.normal(n)


__all__ = [
    "COSINE_EPS",
    "DimensionError",
    "Mat64",
    "NonFiniteError",
    "RandomStream",
    "Vec64",
    "as_matrix",
    "as_vector",
    "cosine_matrix",
    "cosine_similarity",
    "draw_normal",
    "ensure_finite",
    "linear_forward",
    "require_same_dim",
]
