import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from baar.data import (
    DEFAULT_RULES,
    DataError,
    EmptyDatasetError,
    EventStream,
    PhenotypeRule,
    SchemaError,
    ValidationError,
    gen_event_streams,
    gen_shapelet_dataset,
    load_events_csv,
    load_labels_csv,
    load_series_csv,
    write_events_csv,
    write_labels_csv,
    write_series_csv,
)


def template_matcher(sequences, templates):
    """Brute force: slide every template over every offset, keep the best correlation."""
    preds = []
    L = templates.shape[1]
    for x in sequences:
        sig = x.mean(axis=1)
        best = []
        for tpl in templates:
            score = -np.inf
            for s in range(len(sig) - L + 1):
                w = sig[s : s + L] - sig[s : s + L].mean()
                score = max(score, float(w @ tpl) / (np.linalg.norm(w) + 1e-12))
            best.append(score)
        preds.append(int(np.argmax(best)))
    return np.array(preds)


def test_shapelet_dataset_shapes_and_spans():
    ds = gen_shapelet_dataset(20, 128, V=3, n_classes=3, seed=1)
    assert ds.sequences.shape == (20, 128, 3)
    assert len(ds) == 20
    assert np.all(ds.shapelet_spans[:, 1] - ds.shapelet_spans[:, 0] == 16)
    assert np.all(ds.shapelet_spans[:, 0] >= 0) and np.all(ds.shapelet_spans[:, 1] <= 128)
    assert set(ds.labels) <= {0, 1, 2}


def test_standardized_per_channel():
    x = gen_shapelet_dataset(10, 64, V=2, seed=3).sequences
    assert np.abs(x.mean(axis=1)).max() < 1e-6
    assert np.abs(x.std(axis=1) - 1.0).max() < 1e-6


def test_same_seed_same_data():
    a = gen_shapelet_dataset(5, 64, seed=7)
    b = gen_shapelet_dataset(5, 64, seed=7)
    np.testing.assert_array_equal(a.sequences, b.sequences)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.sequences, gen_shapelet_dataset(5, 64, seed=8).sequences)


def test_generator_validation():
    with pytest.raises(ValueError, match="snr"):
        gen_shapelet_dataset(2, 64, snr=0.0)
    with pytest.raises(ValueError, match="shapelet"):
        gen_shapelet_dataset(2, 64, shapelet_len=20)


def test_noiseless_span_nearest_waveform_is_perfect():
    ds = gen_shapelet_dataset(30, 64, n_classes=3, snr=np.inf, seed=2)
    for x, y, (s, e) in zip(ds.sequences, ds.labels, ds.shapelet_spans):
        seg = x[s:e, 0] - x[s:e, 0].mean()
        seg /= np.linalg.norm(seg)
        dist = [np.linalg.norm(seg - (t - t.mean()) / np.linalg.norm(t - t.mean())) for t in ds.templates]
        assert int(np.argmin(dist)) == y


def test_shapelet_sits_inside_its_span():
    ds = gen_shapelet_dataset(10, 64, snr=np.inf, seed=4)
    for x, (s, e) in zip(ds.sequences, ds.shapelet_spans):
        outside = np.concatenate([x[:s, 0], x[e:, 0]])
        assert np.ptp(outside) < 1e-12  # the background is flat without noise


def test_template_matcher_finds_the_classes():
    ds = gen_shapelet_dataset(500, 128, n_classes=2, snr=5.0, seed=0)
    acc = np.mean(template_matcher(ds.sequences, ds.templates) == ds.labels)
    assert acc >= 0.95


def test_event_streams_follow_rules():
    streams = gen_event_streams(300, vocab=47, mean_events=20, seed=0)
    assert len(streams) == 300
    for s in streams:
        assert len(s) >= 10
        assert np.all(np.diff(s.timestamps) >= 0)
        assert s.codes.min() >= 0 and s.codes.max() < 47
        for rule, lab in zip(DEFAULT_RULES, s.labels):
            assert lab == int(all(c in s.codes for c in rule.codes))
    chf = [s for s in streams if s.labels[0] == 1]
    assert chf and all(3 in s.codes for s in chf)


def test_event_gap_mean():
    streams = gen_event_streams(400, mean_events=30, mean_gap=2.0, seed=1)
    gaps = np.concatenate([np.diff(s.timestamps) for s in streams])
    assert gaps.size >= 10_000
    assert abs(gaps.mean() - 2.0) <= 0.2


def test_event_generator_validation():
    with pytest.raises(ValueError, match="vocab"):
        gen_event_streams(1, vocab=1)
    with pytest.raises(ValueError, match="outside"):
        gen_event_streams(1, vocab=4, phenotype_rules=[PhenotypeRule("x", (9,))])
    with pytest.raises(ValidationError):
        EventStream([1, 2], [3.0, 1.0], [])


@given(n=st.integers(1, 4), t=st.integers(2, 12), v=st.integers(1, 3), seed=st.integers(0, 1000))
@settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
def test_series_round_trip(tmp_path_factory, n, t, v, seed):
    x = np.random.default_rng(seed).normal(size=(n, t, v)) * 1e3
    path = tmp_path_factory.mktemp("rt") / "s.csv"
    write_series_csv(path, x)
    back, ids = load_series_csv(path, standardize_values=False)
    np.testing.assert_allclose(back, x, rtol=1e-9)
    assert len(ids) == n


def test_series_loader_standardizes(tmp_path):
    x = np.random.default_rng(0).normal(loc=5.0, scale=3.0, size=(3, 20, 2))
    write_series_csv(tmp_path / "s.csv", x)
    back, _ = load_series_csv(tmp_path / "s.csv")
    assert np.abs(back.mean(axis=1)).max() < 1e-6


def test_events_and_labels_round_trip(tmp_path):
    streams = gen_event_streams(5, vocab=20, mean_events=12, seed=3)
    write_events_csv(tmp_path / "e.csv", streams)
    ids = [s.patient_id for s in streams]
    write_labels_csv(tmp_path / "l.csv", ids, np.stack([s.labels for s in streams]), ["chf", "copd", "dm"])
    labels = load_labels_csv(tmp_path / "l.csv")
    back = load_events_csv(tmp_path / "e.csv", vocab=20, labels=labels)
    for a, b in zip(streams, back):
        np.testing.assert_array_equal(a.codes, b.codes)
        np.testing.assert_array_equal(a.timestamps, b.timestamps)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_loader_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(EmptyDatasetError):
        load_series_csv(empty)
    only_header = tmp_path / "h.csv"
    only_header.write_text("seq_id,channel,t,value\n")
    with pytest.raises(EmptyDatasetError):
        load_series_csv(only_header)
    wrong = tmp_path / "w.csv"
    wrong.write_text("seq_id,chan,t,value\na,0,0,1.0\n")
    with pytest.raises(SchemaError, match="chan"):
        load_series_csv(wrong)
    bad = tmp_path / "b.csv"
    bad.write_text("seq_id,channel,t,value\na,0,0,1.0\na,0,1,oops\n")
    with pytest.raises(DataError, match=":3:"):
        load_series_csv(bad)
    back_in_time = tmp_path / "e.csv"
    back_in_time.write_text("patient_id,month,code\np,2,1\np,1,1\n")
    with pytest.raises(ValidationError, match=":3:"):
        load_events_csv(back_in_time)
    with pytest.raises(ValidationError, match="vocabulary"):
        load_events_csv(_write(tmp_path / "v.csv", "patient_id,month,code\np,0,9\n"), vocab=5)
    with pytest.raises(FileNotFoundError):
        load_series_csv(tmp_path / "missing.csv")


def _write(path, text):
    path.write_text(text)
    return path
