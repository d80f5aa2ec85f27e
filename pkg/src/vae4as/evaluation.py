"""Prequential G-mean with fading factors, alarm scoring and run aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

UNDEFINED_EPS = 1e-12


@dataclass
class FadedCounts:
    """Exponentially faded confusion counts (``count <- alpha * count + indicator``)."""

    alpha: float = 0.99
    tp: float = 0.0
    tn: float = 0.0
    p: float = 0.0
    n: float = 0.0

    def recalls(self) -> tuple[float, float]:
        """(R+, R-); a class with no (faded) examples yet counts as recall 1."""
        r_pos = self.tp / self.p if self.p >= UNDEFINED_EPS else 1.0
        r_neg = self.tn / self.n if self.n >= UNDEFINED_EPS else 1.0
        return r_pos, r_neg

    def g_mean(self) -> float:
        r_pos, r_neg = self.recalls()
        return math.sqrt(max(0.0, r_pos * r_neg))


def g_mean(r_pos: float, r_neg: float) -> float:
    return math.sqrt(r_pos * r_neg)


def prequential_update(counts: FadedCounts, y_true: int, y_pred: int) -> float:
    """Decay, add this outcome, and return the current G-mean (updates ``counts``)."""
    if y_true not in (0, 1) or y_pred not in (0, 1):
        raise ContractViolation("labels must be 0 or 1")
    a = counts.alpha
    counts.tp *= a
    counts.tn *= a
    counts.p *= a
    counts.n *= a
    if y_true == 1:
        counts.p += 1.0
        counts.tp += float(y_pred == 1)
    else:
        counts.n += 1.0
        counts.tn += float(y_pred == 0)
    return counts.g_mean()


def prequential_series(y_true, y_pred, alpha: float = 0.99) -> np.ndarray:
    counts = FadedCounts(alpha)
    return np.array([prequential_update(counts, int(a), int(b)) for a, b in zip(y_true, y_pred)])


@dataclass
class AlarmScore:
    detected: list
    delays: list
    false_alarms: int

    @property
    def n_detected(self) -> int:
        return sum(self.detected)


def score_alarms(alarm_events, true_drifts, tolerance: int = 1000) -> AlarmScore:
    """Match alarms to drifts.

    The first alarm in ``(g, g + tolerance]`` detects drift ``g``; every
    other alarm is a false alarm.  Delays are ``None`` for missed drifts.
    """
    alarms = sorted(alarm_events)
    drifts = sorted(true_drifts)
    detected = [False] * len(drifts)
    delays = [None] * len(drifts)
    false_alarms = 0
    for a in alarms:
        matched = False
        for j, g in enumerate(drifts):
            if g < a <= g + tolerance and not detected[j]:
                detected[j] = True
                delays[j] = a - g
                matched = True
                break
        if not matched:
            false_alarms += 1
    return AlarmScore(detected, delays, false_alarms)


def aggregate_runs(series_list):
    """Per-step mean and standard error (population std / sqrt(R)) across runs."""
    rows = [np.asarray(s, dtype=np.float64).ravel() for s in series_list]
    if not rows or any(r.size == 0 for r in rows):
        raise ContractViolation("need at least one non-empty series")
    lengths = {r.size for r in rows}
    if len(lengths) != 1:
        raise ContractViolation(f"series lengths differ: {sorted(lengths)}")
    arr = np.vstack(rows)
    return arr.mean(axis=0), arr.std(axis=0) / math.sqrt(arr.shape[0])
