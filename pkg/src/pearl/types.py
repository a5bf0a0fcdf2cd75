"""Shared domain types exchanged between the alignment, propagation and
pipeline stages. All of them are immutable after construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError

IGNORE_LABEL = 255


@dataclass(frozen=True)
class HeadTensors:
    """Per-head query/key/value token matrices (N x d each)."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    cls_index: int | None = None

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        k = np.asarray(self.k, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if not (q.ndim == 2 and q.shape == k.shape == v.shape):
            raise DimensionError(
                f"Q/K/V must share an N x d shape, got {q.shape}, {k.shape}, {v.shape}"
            )
        if self.cls_index is not None and not (0 <= self.cls_index < q.shape[0]):
            raise ValidationError(f"cls_index {self.cls_index} outside token range")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)

    @property
    def tokens(self) -> int:
        return self.q.shape[0]

    @property
    def width(self) -> int:
        return self.q.shape[1]


@dataclass(frozen=True)
class PrototypeMatrix:
    """Unit-norm class prototypes, one row per class."""

    vectors: np.ndarray           # C x D
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[0] < 1:
            raise DimensionError(f"prototypes must be a C x D matrix with C >= 1, got {vec.shape}")
        norms = np.linalg.norm(vec, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise ValidationError(f"prototype rows must be unit norm within 1e-4 (worst deviation {worst:.2e})")
        names = tuple(self.class_names) or tuple(f"class_{i}" for i in range(vec.shape[0]))
        if len(names) != vec.shape[0]:
            raise ValidationError(f"{len(names)} class names for {vec.shape[0]} prototype rows")
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "class_names", names)

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class LogitGrid:
    """Per-cell class scores on an H x W grid (last axis = classes)."""

    scores: np.ndarray  # H x W x C

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 3:
            raise DimensionError(f"logit grid must be H x W x C, got {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise ValidationError("logit grid contains non-finite entries")
        object.__setattr__(self, "scores", scores)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    @property
    def classes(self) -> int:
        return self.scores.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """Integer class indices per pixel; ignore_value marks unlabeled pixels."""

    labels: np.ndarray  # H x W int32
    ignore_value: int = IGNORE_LABEL

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise DimensionError(f"label map must be 2-D, got {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            rounded = np.rint(labels)
            if not np.allclose(labels, rounded):
                raise ValidationError("label map holds non-integer values")
            labels = rounded
        object.__setattr__(self, "labels", labels.astype(np.int32))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def valid_mask(self) -> np.ndarray:
        return self.labels != self.ignore_value
