"""Shared episodic environment interface."""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any

import numpy as np


@dataclass(frozen=True)
class StepResult:
    next_state: Any
    reward: float
    done: bool
    config_label: int  # oracle contact configuration of next_state


class EpisodeFinishedError(RuntimeError):
    """Stepping an environment whose episode already ended."""


class Env(ABC):
    """Single-owner episodic environment, stepped sequentially."""

    obs_dim: int
    action_dim: int
    horizon: int

    @abstractmethod
    def reset(self, rng: np.random.Generator):
        """Sample and store a fresh initial state; return it."""

    @abstractmethod
    def step(self, action: float) -> StepResult:
        """Advance the stored state by one primitive action."""

    @abstractmethod
    def observe(self, state) -> np.ndarray:
        """Observation vector for a state."""

    @abstractmethod
    def contact_label(self, state) -> int:
        """Oracle contact configuration (graph node id)."""

    @abstractmethod
    def success(self, state) -> bool:
        """Task success predicate for evaluation."""


def require_finite_action(action) -> float:
    arr = np.asarray(action, dtype=float).reshape(-1)
    if arr.size != 1:
        raise ValueError(f"expected a scalar action, got shape {arr.shape}")
    a = float(arr[0])
    if not np.isfinite(a):
        raise ValueError(f"non-finite action {action!r}")
    return min(1.0, max(-1.0, a))
