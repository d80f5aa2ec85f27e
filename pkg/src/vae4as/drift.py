"""Dual drift detection.

DD1 runs a two-sample Kolmogorov-Smirnov test per latent dimension between
a reference window and a moving window of normal-classified instances,
with separate warning and alarm p-value levels.  DD2 compares a window of
known anomalies with the window of predicted anomalies by Euclidean
(Frobenius) distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .windows import SlidingWindow

SERIES_TOL = 1e-12
SERIES_MAX_TERMS = 100


@dataclass
class KsResult:
    ks_dis: float
    p_value: float
    dimension: int = 0


def ks_statistic(a, b) -> float:
    """Largest gap between the two empirical CDFs, swept over the merged sample."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    merged = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, merged, side="right") / a.size
    cdf_b = np.searchsorted(b, merged, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_pvalue(ks_dis: float, n_eff: float) -> float:
    """Asymptotic Kolmogorov tail with the small-sample correction on gamma."""
    root = math.sqrt(n_eff)
    gamma = (root + 0.12 + 0.11 / root) * ks_dis
    if gamma < 1e-8:
        return 1.0
    total = 0.0
    for i in range(1, SERIES_MAX_TERMS + 1):
        term = math.exp(-2.0 * i * i * gamma * gamma)
        total += term if i % 2 == 1 else -term
        if term < SERIES_TOL:
            break
    return min(1.0, max(0.0, 2.0 * total))


def ks_two_sample(ref_sample, mov_sample, dimension: int = 0) -> KsResult:
    ref_sample = np.asarray(ref_sample, dtype=np.float64).ravel()
    mov_sample = np.asarray(mov_sample, dtype=np.float64).ravel()
    w = ref_sample.size
    if w != mov_sample.size:
        raise ContractViolation(f"KS samples differ in size ({w} vs {mov_sample.size})")
    if w < 2:
        raise ContractViolation("KS samples need at least 2 values each")
    n_eff = w * w / (2.0 * w)
    d = ks_statistic(ref_sample, mov_sample)
    return KsResult(d, ks_pvalue(d, n_eff), dimension)


@dataclass
class DriftState:
    w_drift: int
    w_distance: int
    p_warn: float = 0.01
    p_alarm: float = 0.001
    expiry_time: int = 100
    dis_thre: float = math.inf
    flag_warn: bool = False
    flag_alarm: bool = False
    alarm_source: str = "none"
    warn_raised_at: int | None = None
    ref_driftx: SlidingWindow = None
    mov_driftx: SlidingWindow = None
    mov_warn: list = field(default_factory=list)
    ref_disx: np.ndarray | None = None
    mov_AN: SlidingWindow = None
    last_ks: list = field(default_factory=list)
    last_distance: float | None = None

    def __post_init__(self):
        if not self.p_alarm < self.p_warn:
            raise ContractViolation("p_alarm must be smaller than p_warn")
        if self.expiry_time < 1:
            raise ContractViolation("expiry_time must be positive")
        if self.ref_driftx is None:
            self.ref_driftx = SlidingWindow(self.w_drift)
        if self.mov_driftx is None:
            self.mov_driftx = SlidingWindow(self.w_drift)
        if self.mov_AN is None:
            self.mov_AN = SlidingWindow(self.w_distance)

    def raise_alarm(self, source: str) -> None:
        if source not in ("ks", "distance"):
            raise ContractViolation(f"unknown alarm source {source!r}")
        self.flag_alarm = True
        self.alarm_source = source

    def clear_flags(self) -> None:
        self.flag_warn = False
        self.flag_alarm = False
        self.alarm_source = "none"
        self.warn_raised_at = None
        self.mov_warn.clear()


def apply_ks_results(state: DriftState, results, t: int) -> DriftState:
    """Turn per-dimension p-values into warn/alarm flags.

    Once warned, only the alarm level is consulted.
    """
    already_warned = state.flag_warn
    for res in results:
        if not already_warned and res.p_value <= state.p_warn and not state.flag_warn:
            state.flag_warn = True
            state.warn_raised_at = t
        if res.p_value <= state.p_alarm and not state.flag_alarm:
            state.raise_alarm("ks")
    state.last_ks = list(results)
    return state


def ks_drift_scan(model, ref_driftx, mov_driftx, state: DriftState, t: int = 0,
                  ref_latent=None, mov_latent=None) -> DriftState:
    """KS-test every latent dimension of the two windows under ``model``.

    Callers that cache encodings pass ``ref_latent``/``mov_latent``
    directly (shape ``(W_drift, k)``).
    """
    if ref_latent is None:
        if not (ref_driftx.is_full() and mov_driftx.is_full()):
            raise ContractViolation("both drift windows must be full before scanning")
        ref_latent = model.encode_mean(np.asarray(ref_driftx.to_list()))
    if mov_latent is None:
        mov_latent = model.encode_mean(np.asarray(mov_driftx.to_list()))
    results = [ks_two_sample(ref_latent[:, i], mov_latent[:, i], i)
               for i in range(ref_latent.shape[1])]
    return apply_ks_results(state, results, t)


def window_distance(ref_disx, mov_an) -> float:
    """Frobenius norm of the row-aligned difference of two equally shaped windows."""
    ref_disx = np.asarray(ref_disx, dtype=np.float64)
    mov_an = np.asarray(mov_an, dtype=np.float64)
    if ref_disx.shape != mov_an.shape:
        raise ContractViolation(f"window shapes differ: {ref_disx.shape} vs {mov_an.shape}")
    diff = ref_disx - mov_an
    return float(np.sqrt(np.sum(diff * diff)))


def calibrate_distance_threshold(an_pool, w: int, n_boot: int = 500,
                                 rng: np.random.Generator | None = None,
                                 normal_pool=None, contamination: float = 0.0) -> float:
    """Offline DD2 threshold: mean + 3 std of distances between disjoint anomaly windows.

    Each bootstrap round draws ``2 * w`` distinct rows from ``an_pool``; the
    first ``w`` (in draw order) form one window, the rest the other.  With
    ``contamination > 0`` that many (fraction of ``w``) rows of the second
    window, at random positions, are replaced by rows from ``normal_pool``,
    so a few false positives in the predicted-anomaly window stay below
    the threshold.
    """
    pool = np.asarray(an_pool, dtype=np.float64)
    if pool.ndim != 2 or pool.shape[0] < 2 * w:
        raise ContractViolation(
            f"need at least {2 * w} anomalous instances to calibrate, got {len(pool)}"
        )
    if not 0.0 <= contamination <= 1.0:
        raise ContractViolation("contamination must lie in [0, 1]")
    n_mix = int(round(contamination * w))
    if n_mix:
        if normal_pool is None or len(normal_pool) == 0:
            raise ContractViolation("contamination needs a pool of normal instances")
        normal_pool = np.asarray(normal_pool, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    dists = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.choice(pool.shape[0], size=2 * w, replace=False)
        other = pool[idx[w:]]
        if n_mix:
            other = other.copy()
            rows = rng.choice(w, size=n_mix, replace=False)
            other[rows] = normal_pool[rng.integers(0, len(normal_pool), size=n_mix)]
        dists[b] = window_distance(pool[idx[:w]], other)
    return float(dists.mean() + 3.0 * dists.std())


def distance_check(state: DriftState) -> bool:
    """DD2: alarm when the full predicted-anomaly window is too far from the reference."""
    if state.ref_disx is None or not state.mov_AN.is_full():
        return False
    dist = window_distance(state.ref_disx, np.asarray(state.mov_AN.to_list()))
    state.last_distance = dist
    if dist > state.dis_thre:
        state.raise_alarm("distance")
        return True
    return False


def warning_expiry_update(state: DriftState, t: int) -> bool:
    """Drop a stale warning (no alarm within ``expiry_time`` steps); True if cleared."""
    if (state.flag_warn and not state.flag_alarm and state.warn_raised_at is not None
            and t - state.warn_raised_at > state.expiry_time):
        state.flag_warn = False
        state.warn_raised_at = None
        state.mov_warn.clear()
        return True
    return False
