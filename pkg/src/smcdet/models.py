"""Abstract deterioration-model interface shared by the filters.

A model binds a parameter matrix and a time index to a predicted observable
and a per-measurement log-likelihood, and owns the model-evaluation counter.
One evaluation is one computation of the deterioration output for a single
(parameter vector, time) pair; a multi-sensor likelihood at one time counts
once per particle.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

__all__ = ["DeteriorationModel"]


class DeteriorationModel(ABC):
    def __init__(self):
        self.evaluations = 0

    def reset_counter(self) -> None:
        self.evaluations = 0

    @abstractmethod
    def predict(self, thetas, k: int, data) -> np.ndarray:
        """Predicted observable(s) at step k for each parameter row."""

    @abstractmethod
    def step_log_lik(self, thetas, k: int, data) -> np.ndarray:
        """log L(y_k | theta) per particle; increments the counter."""

    @abstractmethod
    def n_steps(self, data) -> int:
        """Number of measurement steps in the dataset."""

    def history_log_lik(self, thetas, data, k: int) -> np.ndarray:
        """Running log L(y_{1:k} | theta): sum of the per-step terms."""
        thetas = np.atleast_2d(thetas)
        total = np.zeros(thetas.shape[0])
        for j in range(1, k + 1):
            total += self.step_log_lik(thetas, j, data)
        return total
