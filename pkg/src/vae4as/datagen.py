"""Synthetic drifting streams with anomalous sequences, CSV I/O and scaling.

A stream is a sequence of concepts switched at fixed drift times; each
concept defines a normal (class 0) and an anomalous (class 1) region.
Time steps run from 1 to ``length``; step ``t`` is anomalous when some
interval satisfies ``start <= t < end``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

FEASIBILITY_TRIALS = 100_000
MIN_ACCEPTANCE = 1e-3
_CHUNK = 256


@dataclass(slots=True)
class LabeledInstance:
    x: np.ndarray
    y_true: int
    t: int


# -- regions -------------------------------------------------------------


@dataclass(frozen=True)
class BoxRegion:
    """Uniform proposals over an axis-aligned box, accepted by ``contains``."""

    low: tuple
    high: tuple

    @property
    def n_features(self) -> int:
        return len(self.low)

    def propose(self, rng, n):
        return rng.uniform(self.low, self.high, size=(n, len(self.low)))

    def contains(self, X):
        return np.ones(len(X), dtype=bool)

    def in_box(self, X):
        X = np.atleast_2d(X)
        return np.all((X >= self.low) & (X <= self.high), axis=1)


@dataclass(frozen=True)
class SumRegion(BoxRegion):
    """``x1 + x2 >= threshold`` (``above``) or ``<= threshold``."""

    threshold: float = 0.0
    above: bool = True

    def contains(self, X):
        X = np.atleast_2d(X)
        s = X[:, 0] + X[:, 1]
        inside = s >= self.threshold if self.above else s <= self.threshold
        return inside & self.in_box(X)


@dataclass(frozen=True)
class DiscRegion(BoxRegion):
    center: tuple = (0.5, 0.5)
    radius: float = 0.1

    def contains(self, X):
        X = np.atleast_2d(X)
        r2 = np.sum((X - np.asarray(self.center)) ** 2, axis=1)
        return (r2 <= self.radius ** 2) & self.in_box(X)


@dataclass(frozen=True)
class SineRegion(BoxRegion):
    """``x2 > sin(x1) + offset`` (``above``) or ``x2 < sin(x1) + offset``."""

    offset: float = 0.0
    above: bool = True

    def contains(self, X):
        X = np.atleast_2d(X)
        curve = np.sin(X[:, 0]) + self.offset
        inside = X[:, 1] > curve if self.above else X[:, 1] < curve
        return inside & self.in_box(X)


@dataclass(frozen=True)
class GaussianRegion:
    mean: float
    std: float
    n_features: int

    def sample(self, rng, n=1):
        return rng.normal(self.mean, self.std, size=(n, self.n_features))

    def contains(self, X):
        return np.ones(len(np.atleast_2d(X)), dtype=bool)


@dataclass(frozen=True)
class Concept:
    normal: object
    anomalous: object

    def region(self, label: int):
        return self.anomalous if label else self.normal


# -- stream definitions ---------------------------------------------------


@dataclass(frozen=True)
class StreamSpec:
    name: str
    n_features: int
    length: int
    drift_times: tuple
    anomalous_intervals: tuple
    concepts: tuple
    schedule: tuple = ()

    def __post_init__(self):
        dt = list(self.drift_times)
        if any(b <= a for a, b in zip(dt, dt[1:])):
            raise ConfigError("drift times must be strictly increasing")
        if dt and (dt[0] < 1 or dt[-1] > self.length):
            raise ConfigError("drift times must lie in [1, length]")
        prev_end = -math.inf
        for start, end in self.anomalous_intervals:
            if not start < end or start < prev_end:
                raise ConfigError("anomalous intervals must be ordered, disjoint and non-empty")
            prev_end = end
        if not self.schedule:
            # recurrent by default: concepts cycle A, B, A, ...
            n = len(self.concepts)
            object.__setattr__(self, "schedule",
                               tuple(i % n for i in range(len(dt) + 1)))
        if len(self.schedule) != len(dt) + 1:
            raise ConfigError("schedule needs one concept index per segment")
        if any(not 0 <= i < len(self.concepts) for i in self.schedule):
            raise ConfigError("schedule refers to an unknown concept")

    def segment_at(self, t: int) -> int:
        return int(np.searchsorted(self.drift_times, t, side="right"))

    def concept_at(self, t: int) -> Concept:
        return self.concepts[self.schedule[self.segment_at(t)]]

    def is_anomalous(self, t: int) -> bool:
        return any(start <= t < end for start, end in self.anomalous_intervals)

    def anomalous_steps(self) -> int:
        total = 0
        for start, end in self.anomalous_intervals:
            total += max(0, min(end, self.length + 1) - max(start, 1))
        return total


def _sea(d_box=10.0):
    box = dict(low=(0.0, 0.0), high=(d_box, d_box))
    return (
        Concept(SumRegion(**box, threshold=10.0, above=True),
                SumRegion(**box, threshold=3.0, above=False)),
        Concept(SumRegion(**box, threshold=15.0, above=True),
                SumRegion(**box, threshold=4.0, above=False)),
    )


def _circle():
    box = dict(low=(0.0, 0.0), high=(1.0, 1.0))
    return (
        Concept(DiscRegion(**box, center=(0.6, 0.6), radius=0.2),
                DiscRegion(**box, center=(0.2, 0.2), radius=0.2)),
        Concept(DiscRegion(**box, center=(0.6, 0.6), radius=0.1),
                DiscRegion(**box, center=(0.2, 0.2), radius=0.15)),
    )


def _sine():
    box = dict(low=(0.0, -1.0), high=(math.pi, 1.0))
    return (
        Concept(SineRegion(**box, offset=0.5, above=True),
                SineRegion(**box, offset=-1.0, above=False)),
        Concept(SineRegion(**box, offset=0.0, above=True),
                SineRegion(**box, offset=-1.1, above=False)),
    )


def _vib():
    return (
        Concept(GaussianRegion(0.0, 1.0, 10), GaussianRegion(5.0, 1.0, 10)),
        Concept(GaussianRegion(3.0, 1.0, 10), GaussianRegion(0.0, 0.5, 10)),
    )


def _gauss():
    # B keeps the normals inside A's bulk (only a KS test can notice), and
    # returning to A puts most normals outside what B's model accepts
    return (
        Concept(GaussianRegion(0.0, 1.0, 10), GaussianRegion(5.0, 1.0, 10)),
        Concept(GaussianRegion(0.0, 0.4, 10), GaussianRegion(5.0, 1.0, 10)),
    )


BUILTIN_STREAMS = {
    "sea": lambda: StreamSpec("sea", 2, 15000, (5000, 10000),
                              ((2000, 2100), (7000, 7100), (12000, 12100)), _sea()),
    "circle": lambda: StreamSpec("circle", 2, 15000, (5000, 10000),
                                 ((3000, 3200), (8000, 8200), (13000, 13200)), _circle()),
    "sine": lambda: StreamSpec("sine", 2, 30000, (10000, 20000),
                               ((5000, 5050), (15000, 15050), (25000, 25050)), _sine()),
    "vib": lambda: StreamSpec("vib", 10, 22500, (7500, 15000),
                              ((3000, 3200), (9000, 9200), (17000, 17200)), _vib()),
    "gauss": lambda: StreamSpec("gauss", 10, 15000, (5000, 10000),
                                ((2000, 2100), (7000, 7100), (12000, 12100)), _gauss()),
}


def builtin_stream(name: str) -> StreamSpec:
    try:
        return BUILTIN_STREAMS[name.lower()]()
    except KeyError:
        raise ConfigError(f"unknown dataset {name!r}; builtins: {sorted(BUILTIN_STREAMS)}") from None


# -- sampling ------------------------------------------------------------


def check_feasible(region, trials: int = FEASIBILITY_TRIALS) -> float:
    """Acceptance rate of rejection sampling; raises when below 0.1%."""
    if isinstance(region, GaussianRegion):
        return 1.0
    rng = np.random.default_rng(12345)
    rate = float(np.mean(region.contains(region.propose(rng, trials))))
    if rate < MIN_ACCEPTANCE:
        raise ConfigError(f"region {region!r} is infeasible (acceptance {rate:.2e})")
    return rate


class _RegionSampler:
    """Buffered rejection sampler; draws proposals in chunks from one generator."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.buffers: dict = {}

    def draw(self, region) -> np.ndarray:
        if isinstance(region, GaussianRegion):
            return region.sample(self.rng, 1)[0]
        buf = self.buffers.get(region)
        while not buf:
            cand = region.propose(self.rng, _CHUNK)
            buf = list(cand[region.contains(cand)])
            self.buffers[region] = buf
        return buf.pop(0)

    def draw_many(self, region, n: int) -> np.ndarray:
        return np.array([self.draw(region) for _ in range(n)]).reshape(n, -1)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def generate_stream(spec: StreamSpec, seed: int) -> Iterator[LabeledInstance]:
    """Lazily yield ``LabeledInstance`` for ``t = 1 .. spec.length``."""
    for concept in spec.concepts:
        check_feasible(concept.normal)
        check_feasible(concept.anomalous)
    return _stream_iter(spec, seed)


def _stream_iter(spec, seed):
    sampler = _RegionSampler(_rng(seed, 0))
    for t in range(1, spec.length + 1):
        y = int(spec.is_anomalous(t))
        x = sampler.draw(spec.concept_at(t).region(y))
        yield LabeledInstance(np.asarray(x, dtype=np.float64), y, t)


@dataclass
class PretrainingSets:
    train: np.ndarray
    validation_x: np.ndarray
    validation_y: np.ndarray
    anomaly_reference: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))


def make_pretraining_sets(spec: StreamSpec, seed: int, n_train: int = 1800,
                          n_val_normal: int = 200, n_val_anomalous: int = 50,
                          n_anomaly_reference: int = 500) -> PretrainingSets:
    """Offline data from the initial concept, on an RNG stream separate from the stream's.

    ``anomaly_reference`` is the pool of known anomalies used for the
    distance detector's reference window and its threshold.
    """
    concept = spec.concepts[spec.schedule[0]]
    sampler = _RegionSampler(_rng(seed, 1))
    train = sampler.draw_many(concept.normal, n_train)
    val_n = sampler.draw_many(concept.normal, n_val_normal)
    val_a = sampler.draw_many(concept.anomalous, n_val_anomalous)
    ref = sampler.draw_many(concept.anomalous, n_anomaly_reference)
    val_x = np.vstack([val_n, val_a])
    val_y = np.concatenate([np.zeros(n_val_normal, dtype=int), np.ones(n_val_anomalous, dtype=int)])
    return PretrainingSets(train, val_x, val_y, ref)


# -- CSV ingestion -------------------------------------------------------


def load_csv_stream(path, label_column: str | int = "label") -> Iterator[LabeledInstance]:
    """Stream rows of a headed CSV: feature columns plus one 0/1 label column.

    ``label_column`` is a header name or a column index (``-1`` = last).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    return _csv_iter(path, label_column)


def _csv_iter(path, label_column):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        if isinstance(label_column, int):
            label_idx = label_column % len(header)
        elif label_column in header:
            label_idx = header.index(label_column)
        else:
            raise DataError(f"{path}: no label column {label_column!r} in header {header}")
        n_cols = len(header)
        t = 0
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_cols or any(cell.strip() == "" for cell in row):
                raise DataError(f"{path}: line {line_no}: expected {n_cols} fields, got {row}")
            label = row[label_idx].strip()
            if label not in ("0", "1", "0.0", "1.0"):
                raise DataError(f"{path}: line {line_no}: label must be 0 or 1, got {label!r}")
            try:
                x = np.array([float(v) for i, v in enumerate(row) if i != label_idx])
            except ValueError as exc:
                raise DataError(f"{path}: line {line_no}: {exc}") from None
            t += 1
            yield LabeledInstance(x, int(float(label)), t)


def write_csv_stream(path, instances: Iterable[LabeledInstance],
                     feature_names: Sequence[str] | None = None) -> int:
    """Write instances using the same schema ``load_csv_stream`` reads; returns row count."""
    n = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for inst in instances:
            if n == 0:
                names = feature_names or [f"x{i + 1}" for i in range(len(inst.x))]
                writer.writerow([*names, "label"])
            writer.writerow([*(repr(float(v)) for v in inst.x), inst.y_true])
            n += 1
    return n


def scale_after_drift(instances: Iterable[LabeledInstance], drift_time: int,
                      normal_factor: float, anomalous_factor: float) -> Iterator[LabeledInstance]:
    """Multiply features by a per-class factor from ``drift_time`` on."""
    for inst in instances:
        if inst.t >= drift_time:
            factor = anomalous_factor if inst.y_true else normal_factor
            inst = LabeledInstance(inst.x * factor, inst.y_true, inst.t)
        yield inst


# -- normalization -------------------------------------------------------


@dataclass
class Normalizer:
    minimum: np.ndarray
    maximum: np.ndarray

    @classmethod
    def fit(cls, train) -> "Normalizer":
        X = np.atleast_2d(np.asarray(train, dtype=np.float64))
        if X.shape[0] == 0:
            raise DataError("cannot fit a normalizer on an empty set")
        return cls(X.min(axis=0), X.max(axis=0))

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        span = self.maximum - self.minimum
        degenerate = span <= 0
        scaled = (x - self.minimum) / np.where(degenerate, 1.0, span)
        scaled = np.where(degenerate, 0.5, scaled)
        return np.clip(scaled, 0.0, 1.0)


def fit_normalizer(train) -> Normalizer:
    return Normalizer.fit(train)
