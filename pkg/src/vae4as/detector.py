"""Adaptive anomaly threshold and the per-instance decision rule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation


@dataclass
class ThresholdState:
    theta: float
    computed_at: int = 0
    window_losses: np.ndarray = field(default_factory=lambda: np.empty(0))


def threshold_from_losses(losses) -> float:
    """mean + 2 * population std."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ContractViolation("no losses to threshold; defer until the window has data")
    return float(losses.mean() + 2.0 * losses.std())


def compute_threshold(model, window, t: int = 0) -> ThresholdState:
    """Threshold from deterministic losses of every instance in ``window``."""
    X = np.asarray(list(window) if not isinstance(window, np.ndarray) else window)
    if X.size == 0:
        raise ContractViolation("cannot compute a threshold from an empty window")
    losses = model.instance_losses(X)
    return ThresholdState(threshold_from_losses(losses), t, losses)


def predict(model, theta: float, x) -> tuple[int, float]:
    """Return ``(label, loss)``; anomalous only when the loss strictly exceeds ``theta``."""
    loss = model.total_loss(x)
    return int(loss > theta), loss
