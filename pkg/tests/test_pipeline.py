import itertools
import math

import numpy as np
import pytest

from vae4as.datagen import StreamSpec, builtin_stream, generate_stream, make_pretraining_sets
from vae4as.errors import ConfigError, DataError
from vae4as.evaluation import FadedCounts, prequential_update
from vae4as.pipeline import Pipeline, PipelineConfig

SMALL = dict(w_train=100, w_drift=50, w_distance=10, pretrain_epochs=5, n_boot=20,
             rebuild_min_updates=0, an_max_age=None)


@pytest.fixture(scope="module")
def sea_sets():
    return make_pretraining_sets(builtin_stream("sea"), 1)


def small_pipeline(sets, **over):
    cfg = PipelineConfig(**{**SMALL, **over})
    return Pipeline.pretrain(sets.train[:300], sets.anomaly_reference, cfg)


def test_defaults():
    cfg = PipelineConfig()
    assert (cfg.w_drift, cfg.w_train, cfg.p, cfg.w_distance) == (1000, 2000, 100.0, 50)
    assert (cfg.p_warn, cfg.p_alarm, cfg.expiry_time) == (0.01, 0.001, 100)
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.beta) == (10, 64, 1e-3, 1.0)


@pytest.mark.parametrize("over", [dict(w_train=0), dict(p=0), dict(p_warn=0.001, p_alarm=0.01),
                                  dict(dd_mode="both"), dict(w_distance=5000),
                                  dict(ref_fill="x"), dict(distance_rebuild="x"),
                                  dict(dis_contamination=1.0), dict(an_max_age=10),
                                  dict(w_drift=1), dict(lr=0.0)])
def test_config_validation(over):
    with pytest.raises(ConfigError):
        PipelineConfig(**over)


def test_pretraining_validation_gmean(sea_sets):
    pipe = Pipeline.pretrain(sea_sets.train, sea_sets.anomaly_reference, PipelineConfig(seed=1))
    assert pipe.validation_gmean(sea_sets.validation_x, sea_sets.validation_y) > 0.9
    assert np.isfinite(pipe.drift.dis_thre) and pipe.drift.ref_disx.shape == (50, 2)


def test_pretrain_errors(sea_sets):
    with pytest.raises(DataError):
        Pipeline.pretrain(np.empty((0, 2)), sea_sets.anomaly_reference, PipelineConfig(**SMALL))
    with pytest.raises(DataError):
        Pipeline.pretrain(sea_sets.train, sea_sets.anomaly_reference[:5], PipelineConfig(**SMALL))
    # the KS-only detector does not need known anomalies
    Pipeline.pretrain(sea_sets.train[:100], None, PipelineConfig(**SMALL, dd_mode="ks_only"))


def test_pretrain_is_seeded(sea_sets):
    a = small_pipeline(sea_sets, seed=4)
    b = small_pipeline(sea_sets, seed=4)
    assert a.model.fingerprint() == b.model.fingerprint()
    assert (a.theta, a.drift.dis_thre) == (b.theta, b.drift.dis_thre)


def _force(pipe, label):
    pipe.theta = -1.0 if label else math.inf


def test_routing(sea_sets):
    pipe = small_pipeline(sea_sets)
    _force(pipe, 0)
    assert pipe.step(sea_sets.train[0]).y_pred == 0
    assert len(pipe.mov_train) == 1 and len(pipe.drift.mov_driftx) == 1
    assert len(pipe.drift.mov_AN) == 0
    _force(pipe, 1)
    assert pipe.step(np.array([0.2, 0.3])).y_pred == 1
    assert len(pipe.mov_train) == 1 and len(pipe.drift.mov_driftx) == 1
    assert len(pipe.drift.mov_AN) == 1


def test_reference_window_fills_with_every_instance(sea_sets):
    pipe = small_pipeline(sea_sets)
    pipe.step(sea_sets.train[0])
    pipe.step(np.array([0.2, 0.3]))
    assert len(pipe.drift.ref_driftx) == 2


def test_training_after_full_replacement(sea_sets):
    pipe = small_pipeline(sea_sets, dd_mode="distance_only")
    _force(pipe, 0)
    outs = [pipe.step(x) for x in sea_sets.train[300:500]]
    assert [o.t for o in outs if o.trained] == [100, 200]


def test_no_training_while_warned(sea_sets):
    pipe = small_pipeline(sea_sets, expiry_time=10_000, dd_mode="distance_only")
    pipe.drift.flag_warn, pipe.drift.warn_raised_at = True, 0
    for x in sea_sets.train[300:700]:
        assert not pipe.step(x).trained
    assert pipe.n_trainings == 0


def _rebuild_state(pipe):
    st = pipe.drift
    return (len(pipe.mov_train), len(st.mov_driftx), len(st.mov_AN), len(st.mov_warn),
            len(st.ref_driftx), st.flag_warn, st.flag_alarm)


def test_distance_alarm_trains_on_window(sea_sets):
    pipe = small_pipeline(sea_sets, distance_rebuild="window")
    before = pipe.model.fingerprint()
    pipe.drift.dis_thre = 0.0
    _force(pipe, 1)
    outs = [pipe.step(np.array([0.3 * i, 0.0])) for i in range(10)]
    assert [o.alarm for o in outs] == ["none"] * 9 + ["distance"]
    event = pipe.events[-1]
    assert event.kind == "alarm" and event.source == "distance" and event.train_size == 10
    assert pipe.model.fingerprint() != before
    assert _rebuild_state(pipe) == (0, 0, 0, 0, 0, False, False)


def test_distance_alarm_span_includes_accepted_rows(sea_sets):
    pipe = small_pipeline(sea_sets, distance_rebuild="span")
    pipe.drift.dis_thre = 0.0
    anomaly = np.array([0.5, 0.5])
    _force(pipe, 0)
    pipe.step(sea_sets.train[300])
    _force(pipe, 1)
    pipe.step(anomaly)
    for x in sea_sets.train[301:306]:
        _force(pipe, 0)
        pipe.step(x)
    for _ in range(9):
        _force(pipe, 1)
        out = pipe.step(anomaly)
    assert out.alarm == "distance"
    # from the oldest predicted anomaly on: 10 anomalies and 5 accepted rows
    assert pipe.events[-1].train_size == 15


def test_ks_alarm_trains_on_warn_window(sea_sets):
    pipe = small_pipeline(sea_sets, dd_mode="ks_only")
    st = pipe.drift
    st.flag_warn, st.warn_raised_at = True, 0
    st.mov_warn.extend(np.full((80, 2), 0.6))
    pipe.handle_alarm("ks")
    assert pipe.events[-1].train_size == 80
    assert _rebuild_state(pipe) == (0, 0, 0, 0, 0, False, False)


def test_old_predicted_anomalies_expire(sea_sets):
    pipe = small_pipeline(sea_sets, an_max_age=20)
    _force(pipe, 1)
    pipe.step(np.array([0.2, 0.3]))
    assert len(pipe.drift.mov_AN) == 1
    _force(pipe, 0)
    for x in sea_sets.train[300:319]:  # t = 2 .. 20
        pipe.step(x)
    assert len(pipe.drift.mov_AN) == 1
    pipe.step(sea_sets.train[319])  # t = 21, age 20
    assert len(pipe.drift.mov_AN) == 0


def test_ks_effective_size_with_full_windows(sea_sets):
    pipe = small_pipeline(sea_sets, ref_fill="all", dd_mode="ks_only")
    for x in sea_sets.train[300:500]:
        pipe.step(x)
        if pipe.drift.last_ks:
            break
    res = pipe.drift.last_ks
    assert res
    w = pipe.config.w_drift
    from vae4as.drift import ks_pvalue
    assert res[0].p_value == pytest.approx(ks_pvalue(res[0].ks_dis, w / 2))


def test_warning_expires(sea_sets):
    pipe = small_pipeline(sea_sets, expiry_time=5, dd_mode="distance_only")
    pipe.drift.flag_warn, pipe.drift.warn_raised_at = True, 0
    cleared = [pipe.step(x).warn_cleared for x in sea_sets.train[300:310]]
    assert cleared.index(True) == 5
    assert pipe.events[-1].kind == "warn_expired"


def test_stationary_stream_raises_no_alarm():
    spec = builtin_stream("sea")
    calm = StreamSpec("calm", 2, 5000, (), (), spec.concepts[:1])
    sets = make_pretraining_sets(calm, 1)
    pipe = Pipeline.pretrain(sets.train, sets.anomaly_reference, PipelineConfig(seed=1))
    counts = FadedCounts()
    for inst in generate_stream(calm, 1):
        out = pipe.step(inst.x)
        g = prequential_update(counts, inst.y_true, out.y_pred)
    assert pipe.alarm_steps == []
    assert g > 0.9  # only the negative recall is defined


def test_pipeline_is_deterministic(sea_sets):
    stream = [i.x for i in itertools.islice(generate_stream(builtin_stream("sea"), 1), 400)]
    runs = []
    for _ in range(2):
        pipe = small_pipeline(sea_sets, seed=9)
        runs.append([(o.y_pred, o.instance_loss, o.theta) for o in pipe.run(stream)])
    assert runs[0] == runs[1]
    assert all(math.isfinite(l) for _, l, _ in runs[0])
