"""Soft and hard label types and the one-hot encoding between them."""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class SoftLabel:
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValidationError("soft label must be a non-empty vector")
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise ValidationError("soft label entries must lie in [0, 1]")
        if abs(p.sum() - 1.0) > NORMALIZATION_TOL:
            raise ValidationError(f"soft label sums to {p.sum():.9f}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)

    @property
    def num_classes(self):
        return self.probabilities.size


@dataclass(frozen=True)
class HardLabel:
    class_index: int
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 1 or not 0 <= self.class_index < self.num_classes:
            raise ValidationError(f"class index {self.class_index} outside [0, {self.num_classes})")

    @property
    def one_hot(self):
        v = np.zeros(self.num_classes, dtype=np.int64)
        v[self.class_index] = 1
        return v


def harden(soft):
    """One-hot encode a prediction; ties go to the lowest class index."""
    if not isinstance(soft, SoftLabel):
        soft = SoftLabel(soft)
    # np.argmax returns the first maximal entry
    return HardLabel(int(np.argmax(soft.probabilities)), soft.num_classes)


def harden_batch(probabilities):
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] == 0:
        raise ValidationError("expected an (N, K) probability matrix")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > NORMALIZATION_TOL):
        raise ValidationError("probability rows must sum to 1")
    k = p.shape[1]
    return [HardLabel(int(i), k) for i in np.argmax(p, axis=1)]
