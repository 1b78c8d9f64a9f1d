"""Types shared by the asdf evaluators and the descent driver."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np


@dataclass(frozen=True, eq=False)
class AsdfEvaluation:
    """Value, gradient and (symmetric) Hessian at a single query point."""

    value: float
    gradient: np.ndarray
    hessian: np.ndarray


@dataclass(frozen=True, eq=False)
class BatchEvaluation:
    """Evaluations at ``m`` points.

    Rows with ``valid == False`` hold NaN; ``errors`` carries the domain error
    raised for that row (or ``None``).
    """

    values: np.ndarray
    gradients: np.ndarray
    hessians: np.ndarray
    valid: np.ndarray
    errors: tuple

    def single(self, i: int = 0) -> AsdfEvaluation:
        if not self.valid[i]:
            raise self.errors[i]
        return AsdfEvaluation(float(self.values[i]), self.gradients[i].copy(), self.hessians[i].copy())


class Evaluator(Protocol):
    """What :func:`ridgecraft.ridge.run_descent` needs from an asdf.

    Descent runs in the evaluator's internal coordinates; ``to_internal`` and
    ``to_external`` convert point arrays of shape ``(m, n)``.
    """

    intrinsic_dim: int

    @property
    def ambient_dim(self) -> int: ...

    @property
    def default_step(self) -> float: ...

    def to_internal(self, points: np.ndarray) -> np.ndarray: ...

    def to_external(self, points: np.ndarray) -> np.ndarray: ...

    def evaluate_many(self, points: np.ndarray) -> BatchEvaluation: ...


def empty_batch(m: int, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.full(m, np.nan), np.full((m, n), np.nan), np.full((m, n, n), np.nan)
