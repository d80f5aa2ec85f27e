import itertools
import math

import numpy as np
import pytest

from vae4as.datagen import (BUILTIN_STREAMS, DiscRegion, LabeledInstance, Normalizer, StreamSpec,
                            SumRegion, builtin_stream, check_feasible, fit_normalizer,
                            generate_stream, load_csv_stream, make_pretraining_sets,
                            scale_after_drift, write_csv_stream)
from vae4as.errors import ConfigError, DataError


def test_sea_layout():
    spec = builtin_stream("sea")
    assert spec.length == 15000
    assert spec.drift_times == (5000, 10000)
    assert spec.anomalous_intervals == ((2000, 2100), (7000, 7100), (12000, 12100))
    assert spec.schedule == (0, 1, 0)


@pytest.mark.parametrize("name,steps", [("sea", 300), ("circle", 600), ("sine", 150),
                                        ("vib", 600), ("gauss", 300)])
def test_anomalous_fraction_matches_intervals(name, steps):
    spec = builtin_stream(name)
    assert spec.anomalous_steps() == steps
    labels = [spec.is_anomalous(t) for t in range(1, spec.length + 1)]
    assert sum(labels) == steps


def test_unknown_builtin():
    with pytest.raises(ConfigError):
        builtin_stream("nope")


def _predicates(name):
    """Class regions written out independently of the generator."""
    if name == "sea":
        return {(0, 0): lambda x: x[0] + x[1] >= 10, (0, 1): lambda x: x[0] + x[1] <= 3,
                (1, 0): lambda x: x[0] + x[1] >= 15, (1, 1): lambda x: x[0] + x[1] <= 4}
    if name == "circle":
        def disc(c, r):
            return lambda x: (x[0] - c) ** 2 + (x[1] - c) ** 2 <= r * r
        return {(0, 0): disc(0.6, 0.2), (0, 1): disc(0.2, 0.2),
                (1, 0): disc(0.6, 0.1), (1, 1): disc(0.2, 0.15)}
    return {(0, 0): lambda x: x[1] > math.sin(x[0]) + 0.5,
            (0, 1): lambda x: x[1] < math.sin(x[0]) - 1,
            (1, 0): lambda x: x[1] > math.sin(x[0]),
            (1, 1): lambda x: x[1] < math.sin(x[0]) - 1.1}


@pytest.mark.parametrize("name", ["sea", "circle", "sine"])
def test_every_instance_satisfies_its_class_region(name):
    spec = builtin_stream(name)
    preds = _predicates(name)
    for inst in generate_stream(spec, 1):
        concept = spec.schedule[spec.segment_at(inst.t)]
        assert preds[(concept, inst.y_true)](inst.x), (inst.t, inst.x)


def test_sine_box():
    xs = np.array([i.x for i in itertools.islice(generate_stream(builtin_stream("sine"), 0), 3000)])
    assert xs[:, 0].min() >= 0 and xs[:, 0].max() <= math.pi
    assert xs[:, 1].min() >= -1 and xs[:, 1].max() <= 1


def test_vib_concepts():
    spec = builtin_stream("vib")
    rows = list(generate_stream(spec, 2))
    pre = np.array([r.x for r in rows[:2500] if r.y_true == 0])
    post = np.array([r.x for r in rows[7600:8900] if r.y_true == 0])
    assert pre.shape[1] == 10
    assert abs(pre.mean()) < 0.05 and abs(pre.std() - 1) < 0.05
    assert abs(post.mean() - 3) < 0.05


def test_gauss_second_concept_is_narrow():
    rows = list(itertools.islice(generate_stream(builtin_stream("gauss"), 0), 6500))
    a = np.array([r.x for r in rows[:1900]])
    b = np.array([r.x for r in rows[5100:6500]])
    assert abs(a.std() - 1.0) < 0.05 and abs(b.std() - 0.4) < 0.05
    assert abs(a.mean()) < 0.05 and abs(b.mean()) < 0.05


def test_stream_is_seeded():
    spec = builtin_stream("sea")
    a = [i.x for i in itertools.islice(generate_stream(spec, 5), 50)]
    b = [i.x for i in itertools.islice(generate_stream(spec, 5), 50)]
    c = [i.x for i in itertools.islice(generate_stream(spec, 6), 50)]
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_stream_spec_validation():
    concepts = BUILTIN_STREAMS["sea"]().concepts
    with pytest.raises(ConfigError):
        StreamSpec("x", 2, 100, (50, 40), (), concepts)
    with pytest.raises(ConfigError):
        StreamSpec("x", 2, 100, (50,), ((10, 5),), concepts)
    with pytest.raises(ConfigError):
        StreamSpec("x", 2, 100, (50,), (), concepts, schedule=(0, 5))


def test_infeasible_region():
    tiny = DiscRegion(low=(0.0, 0.0), high=(1.0, 1.0), center=(0.5, 0.5), radius=0.001)
    with pytest.raises(ConfigError):
        check_feasible(tiny)
    assert check_feasible(SumRegion(low=(0.0, 0.0), high=(10.0, 10.0), threshold=10.0)) > 0.4


def test_pretraining_sets():
    spec = builtin_stream("sea")
    sets = make_pretraining_sets(spec, 3)
    assert sets.train.shape == (1800, 2)
    assert np.all(sets.train.sum(axis=1) >= 10)
    assert (sets.validation_y == 1).sum() == 50 and (sets.validation_y == 0).sum() == 200
    assert np.all(sets.validation_x[sets.validation_y == 1].sum(axis=1) <= 3)
    assert sets.anomaly_reference.shape == (500, 2)
    again = make_pretraining_sets(spec, 3)
    assert np.array_equal(sets.train, again.train)


def test_csv_round_trip(tmp_path):
    rows = [LabeledInstance(np.array([0.1, 2.0]), 0, 1), LabeledInstance(np.array([3.0, -1.5]), 1, 2),
            LabeledInstance(np.array([1e-9, 7.25]), 0, 3)]
    path = tmp_path / "s.csv"
    assert write_csv_stream(path, rows) == 3
    back = list(load_csv_stream(path))
    assert [r.t for r in back] == [1, 2, 3]
    assert [r.y_true for r in back] == [0, 1, 0]
    assert all(np.array_equal(a.x, b.x) for a, b in zip(rows, back))


def test_csv_label_column_by_index(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("y,a,b\n1,0.5,0.25\n")
    (inst,) = load_csv_stream(path, 0)
    assert inst.y_true == 1 and np.array_equal(inst.x, [0.5, 0.25])


def test_csv_missing_field_names_line(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("a,b,label\n1.0,,0\n")
    with pytest.raises(DataError, match="line 2"):
        list(load_csv_stream(path))


def test_csv_bad_label(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("a,b,label\n1.0,2.0,2\n")
    with pytest.raises(DataError, match="label"):
        list(load_csv_stream(path))


def test_csv_other_errors(tmp_path):
    with pytest.raises(DataError):
        load_csv_stream(tmp_path / "missing.csv")
    empty = tmp_path / "e.csv"
    empty.write_text("")
    with pytest.raises(DataError):
        list(load_csv_stream(empty))
    nolabel = tmp_path / "n.csv"
    nolabel.write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        list(load_csv_stream(nolabel))
    text = tmp_path / "t.csv"
    text.write_text("a,label\nabc,0\n")
    with pytest.raises(DataError, match="line 2"):
        list(load_csv_stream(text))


def test_scale_after_drift():
    rows = [LabeledInstance(np.ones(2), y, t) for t, y in [(1, 0), (2, 0), (3, 1)]]
    out = list(scale_after_drift(rows, 2, 2.0, 3.0))
    assert [float(r.x[0]) for r in out] == [1.0, 2.0, 3.0]


def test_normalizer_examples():
    norm = fit_normalizer(np.array([[0.0, 4.0], [10.0, 4.0]]))
    assert norm.apply([5.0, 4.0]) == pytest.approx([0.5, 0.5])
    assert norm.apply([-3.0, 9.0])[0] == 0.0
    assert norm.apply([11.0, -1.0]) == pytest.approx([1.0, 0.5])
    with pytest.raises(DataError):
        Normalizer.fit(np.empty((0, 2)))
