"""Streaming loop: predict, route, retrain, detect drift, rebuild.

Each call to :meth:`Pipeline.step` consumes one raw instance and returns a
:class:`StepOutcome`.  The learner never sees labels.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Iterator, Sequence

import numpy as np

from .datagen import Normalizer
from .detector import compute_threshold, threshold_from_losses
from .drift import (DriftState, apply_ks_results, calibrate_distance_threshold, ks_pvalue,
                    KsResult, warning_expiry_update, window_distance)
from .errors import ConfigError, ContractViolation, DataError
from .vae import VaeModel, train_on_window
from .windows import SlidingWindow

logger = logging.getLogger(__name__)

DD_MODES = ("dual", "ks_only", "distance_only")


@dataclass
class PipelineConfig:
    w_train: int = 2000
    w_drift: int = 1000
    w_distance: int = 50
    p: float = 100.0
    p_warn: float = 0.01
    p_alarm: float = 0.001
    expiry_time: int = 100
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    beta: float = 1.0
    loss_kind: str = "binary_cross_entropy"
    hidden: tuple | None = None
    latent_dim: int | None = None
    pretrain_epochs: int = 100
    dd_mode: str = "dual"
    n_boot: int = 500
    rebuild_min_updates: int = 2000
    dis_contamination: float = 0.1
    an_max_age: int | None = 100
    distance_rebuild: str = "span"
    normalize_with_anomalies: bool = True
    ref_fill: str = "accepted"
    seed: int = 0

    def __post_init__(self):
        for name in ("w_train", "w_drift", "w_distance", "expiry_time", "epochs",
                     "batch_size", "pretrain_epochs", "n_boot"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.w_drift < 2:
            raise ConfigError("w_drift must be at least 2")
        if not 0 < self.p <= 100:
            raise ConfigError("p must lie in (0, 100]")
        if not 0 < self.p_alarm < self.p_warn < 1:
            raise ConfigError("need 0 < p_alarm < p_warn < 1")
        if self.w_distance > self.w_train:
            raise ConfigError("w_distance must not exceed w_train")
        if self.dd_mode not in DD_MODES:
            raise ConfigError(f"dd_mode must be one of {DD_MODES}")
        if self.ref_fill not in ("accepted", "all"):
            raise ConfigError("ref_fill must be 'accepted' or 'all'")
        if self.distance_rebuild not in ("span", "window"):
            raise ConfigError("distance_rebuild must be 'span' or 'window'")
        if not 0.0 <= self.dis_contamination < 1.0:
            raise ConfigError("dis_contamination must lie in [0, 1)")
        if self.an_max_age is not None and self.an_max_age < self.w_distance:
            raise ConfigError("an_max_age must be at least w_distance")
        if self.rebuild_min_updates < 0:
            raise ConfigError("rebuild_min_updates must be non-negative")
        if self.lr <= 0 or self.beta < 0:
            raise ConfigError("lr must be positive and beta non-negative")
        if self.hidden is not None:
            self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class StepOutcome:
    t: int
    y_pred: int
    instance_loss: float
    theta: float
    trained: bool = False
    warn_set: bool = False
    warn_cleared: bool = False
    alarm: str = "none"
    model_rebuilt: bool = False


@dataclass
class DriftEvent:
    t: int
    kind: str  # warn | warn_expired | alarm
    source: str = "none"
    p_values: list | None = None
    distance: float | None = None
    train_size: int | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


class Pipeline:
    """Owns the model, threshold, windows and drift state of one stream."""

    def __init__(self, config: PipelineConfig, model: VaeModel, normalizer: Normalizer,
                 theta: float, ref_disx: np.ndarray | None, dis_thre: float,
                 rngs: dict):
        self.config = config
        self.model = model
        self.normalizer = normalizer
        self.theta = float(theta)
        self.rngs = rngs
        self.t = 0
        self.mov_train = SlidingWindow(config.w_train)
        self.drift = DriftState(config.w_drift, config.w_distance, config.p_warn,
                                config.p_alarm, config.expiry_time, dis_thre,
                                ref_disx=ref_disx)
        self.events: list[DriftEvent] = []
        self.n_trainings = 0
        self._train_trigger = max(1, math.ceil(config.p / 100.0 * config.w_train))
        self._model_version = 0
        self._ref_sorted = None
        self._ref_version = -1
        self._mov_lat = np.empty((config.w_drift, model.k))
        self._mov_head = 0
        self._mov_version = -1
        self._mov_pending: list = []
        self._an_dirty = True
        self._an_times: deque = deque()
        self._recent: deque = deque(maxlen=config.w_train)
        self._pending_pvalues: list | None = None

    # -- construction ----------------------------------------------------

    @staticmethod
    def make_rngs(seed: int) -> dict:
        init, train, calib = np.random.SeedSequence([int(seed), 7]).spawn(3)
        return {"init": np.random.default_rng(init), "train": np.random.default_rng(train),
                "calib": np.random.default_rng(calib)}

    @staticmethod
    def new_model(config: PipelineConfig, d: int, rng) -> VaeModel:
        return VaeModel.build(d, rng, hidden=config.hidden, k=config.latent_dim,
                              beta=config.beta, loss_kind=config.loss_kind, lr=config.lr)

    @classmethod
    def pretrain(cls, D, an_ref, config: PipelineConfig) -> "Pipeline":
        """Fit normalization and the model on unlabeled normal data ``D``.

        ``an_ref`` holds known anomalies: its first ``w_distance`` rows become
        the distance detector's reference window, and the whole pool
        calibrates the distance threshold.
        """
        D = np.atleast_2d(np.asarray(D, dtype=np.float64))
        if D.shape[0] == 0 or D.size == 0:
            raise DataError("pre-training set is empty")
        rngs = cls.make_rngs(config.seed)
        an = np.atleast_2d(np.asarray(an_ref, dtype=np.float64)) if an_ref is not None \
            else np.empty((0, D.shape[1]))
        if config.normalize_with_anomalies and an.size:
            normalizer = Normalizer.fit(np.vstack([D, an]))
        else:
            normalizer = Normalizer.fit(D)
        Dn = normalizer.apply(D)
        model = cls.new_model(config, D.shape[1], rngs["init"])
        train_on_window(model, Dn, config.pretrain_epochs, config.batch_size, rngs["train"])
        theta = threshold_from_losses(model.instance_losses(Dn))

        ref_disx, dis_thre = None, math.inf
        if config.dd_mode != "ks_only":
            if an.size == 0 or an.shape[0] < 2 * config.w_distance:
                raise DataError(
                    f"need at least {2 * config.w_distance} anomalous reference instances, "
                    f"got {0 if an.size == 0 else an.shape[0]}"
                )
            an_n = normalizer.apply(an)
            ref_disx = an_n[:config.w_distance].copy()
            dis_thre = calibrate_distance_threshold(an_n, config.w_distance, config.n_boot,
                                                    rngs["calib"], Dn, config.dis_contamination)
        return cls(config, model, normalizer, theta, ref_disx, dis_thre, rngs)

    # -- helpers ---------------------------------------------------------

    def validation_gmean(self, X, y) -> float:
        """Static G-mean of the current model on a labeled set (raw features)."""
        losses = self.model.instance_losses(self.normalizer.apply(np.asarray(X)))
        pred = (losses > self.theta).astype(int)
        y = np.asarray(y)
        r_pos = np.mean(pred[y == 1] == 1) if np.any(y == 1) else 1.0
        r_neg = np.mean(pred[y == 0] == 0) if np.any(y == 0) else 1.0
        return float(math.sqrt(r_pos * r_neg))

    def _bump_model(self):
        self._model_version += 1

    def _ref_latent_sorted(self):
        if self._ref_version != self._model_version or self._ref_sorted is None:
            R = np.asarray(self.drift.ref_driftx.to_list())
            if self.config.ref_fill == "accepted":
                # compare like with like: mov_driftx only ever holds accepted rows
                R = R[self.model.instance_losses(R) <= self.theta]
            lat = self.model.encode_mean(R) if len(R) else np.empty((0, self.model.k))
            self._ref_sorted = np.sort(lat, axis=0)
            self._ref_version = self._model_version
        return self._ref_sorted

    def _mov_latent(self):
        w = self.config.w_drift
        if self._mov_version != self._model_version or len(self._mov_pending) >= w:
            self._mov_lat[:] = self.model.encode_mean(np.asarray(self.drift.mov_driftx.to_list()))
            self._mov_head = 0
            self._mov_version = self._model_version
        elif self._mov_pending:
            # KS is order-free, so a ring buffer of encodings is enough
            new = self.model.encode_mean(np.asarray(self._mov_pending))
            for row in new:
                self._mov_lat[self._mov_head] = row
                self._mov_head = (self._mov_head + 1) % w
        self._mov_pending.clear()
        return self._mov_lat

    def _ks_scan(self):
        ref = self._ref_latent_sorted()
        mov = np.sort(self._mov_latent(), axis=0)
        n, m = ref.shape[0], mov.shape[0]
        if n < 2:
            return []
        # n * m / (n + m); equals W_drift / 2 when both windows are full
        n_eff = n * m / (n + m)
        results = []
        for i in range(ref.shape[1]):
            a, b = ref[:, i], mov[:, i]
            merged = np.concatenate([a, b])
            d = float(np.max(np.abs(np.searchsorted(a, merged, side="right") / n
                                    - np.searchsorted(b, merged, side="right") / m)))
            results.append(KsResult(d, ks_pvalue(d, n_eff), i))
        apply_ks_results(self.drift, results, self.t)
        return results

    def _distance_check(self) -> bool:
        st = self.drift
        if st.ref_disx is None or not st.mov_AN.is_full():
            return False
        if self._an_dirty:
            st.last_distance = window_distance(st.ref_disx, np.asarray(st.mov_AN.to_list()))
            self._an_dirty = False
        return st.last_distance > st.dis_thre

    def _train_incremental(self):
        cfg = self.config
        X = np.asarray(self.mov_train.to_list())
        train_on_window(self.model, X, cfg.epochs, cfg.batch_size, self.rngs["train"])
        self.theta = compute_threshold(self.model, X, self.t).theta
        self.mov_train.mark_reset()
        self.n_trainings += 1
        self._bump_model()

    # -- main loop -------------------------------------------------------

    def step(self, x) -> StepOutcome:
        cfg = self.config
        st = self.drift
        self.t += 1
        t = self.t
        xn = self.normalizer.apply(x)
        try:
            loss = self.model.total_loss(xn)
        except ContractViolation as exc:
            raise ContractViolation(f"step {t}: {exc}") from exc
        theta_used = self.theta
        y_pred = int(loss > self.theta)
        out = StepOutcome(t, y_pred, loss, theta_used)

        if cfg.distance_rebuild == "span":
            self._recent.append((t, xn))
        if y_pred == 0:
            self.mov_train.push(xn)
            st.mov_driftx.push(xn)
            if cfg.dd_mode != "distance_only":
                self._mov_pending.append(xn)
        else:
            st.mov_AN.push(xn)
            self._an_times.append(t)
            if len(self._an_times) > cfg.w_distance:
                self._an_times.popleft()
            self._an_dirty = True
        if cfg.an_max_age is not None:
            while self._an_times and t - self._an_times[0] >= cfg.an_max_age:
                self._an_times.popleft()
                st.mov_AN.items.popleft()
                self._an_dirty = True

        if (self.mov_train.is_full() and self.mov_train.replaced_since_mark >= self._train_trigger
                and not st.flag_warn):
            self._train_incremental()
            out.trained = True

        if cfg.dd_mode != "distance_only":
            if not st.ref_driftx.is_full():
                st.ref_driftx.push(xn)
                self._ref_version = -1
            elif st.mov_driftx.is_full():
                was_warned = st.flag_warn
                results = self._ks_scan()
                pvals = [r.p_value for r in results]
                if st.flag_warn and not was_warned:
                    out.warn_set = True
                    self.events.append(DriftEvent(t, "warn", "ks", pvals))
                if st.flag_alarm:
                    self._pending_pvalues = pvals

        if st.flag_warn and not st.flag_alarm:
            st.mov_warn.append(xn)
            if warning_expiry_update(st, t):
                out.warn_cleared = True
                self.events.append(DriftEvent(t, "warn_expired"))

        if cfg.dd_mode != "ks_only" and self._distance_check():
            st.raise_alarm("distance")

        if st.flag_alarm:
            out.alarm = st.alarm_source
            self.handle_alarm(st.alarm_source)
            out.model_rebuilt = True
        return out

    def handle_alarm(self, source: str) -> None:
        """Replace the model with a fresh one trained on the post-drift evidence."""
        cfg = self.config
        st = self.drift
        if source == "distance" and cfg.distance_rebuild == "span" and self._an_times:
            # everything that arrived while the alarm window filled, not
            # only the rejected part of it
            start = self._an_times[0]
            train_set = [x for tt, x in self._recent if tt >= start]
        elif source == "distance":
            train_set = st.mov_AN.to_list()
        else:
            train_set = list(st.mov_warn)
        if not train_set:
            recent = st.mov_driftx.to_list()[-cfg.w_train:]
            train_set = recent if recent else [self.normalizer.apply(np.zeros(self.model.d))]
        X = np.asarray(train_set)
        self.model = self.new_model(cfg, self.model.d, self.rngs["init"])
        batches = math.ceil(len(X) / cfg.batch_size)
        epochs = max(cfg.epochs, math.ceil(cfg.rebuild_min_updates / batches))
        train_on_window(self.model, X, epochs, cfg.batch_size, self.rngs["train"])
        self.theta = compute_threshold(self.model, X, self.t).theta

        event = DriftEvent(self.t, "alarm", source, train_size=len(X))
        if source == "distance":
            event.distance = st.last_distance
        else:
            event.p_values = self._pending_pvalues
        self.events.append(event)
        logger.info("t=%d %s alarm: rebuilt model on %d instances", self.t, source, len(X))

        self.mov_train.clear()
        st.mov_driftx.clear()
        st.mov_AN.clear()
        self._an_times.clear()
        self._recent.clear()
        st.ref_driftx.clear()
        st.clear_flags()
        self._mov_pending.clear()
        self._ref_sorted = None
        self._ref_version = -1
        self._an_dirty = True
        self._bump_model()

    def run(self, xs: Iterable) -> Iterator[StepOutcome]:
        for x in xs:
            yield self.step(x)

    @property
    def alarm_steps(self) -> list[int]:
        return [e.t for e in self.events if e.kind == "alarm"]
