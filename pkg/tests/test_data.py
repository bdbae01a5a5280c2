from __future__ import annotations

import numpy as np
import pytest

from fedstg import data as stg


def _series(T, V=2, d=1, seed=0):
    rng = np.random.default_rng(seed)
    return stg.STGDataset(rng.standard_normal((T, V, d)), np.ones((V, V)) - np.eye(V), np.arange(T))


def test_window_count_and_alignment():
    ds = _series(10)
    ws = stg.window(ds, 3, 2)
    assert len(ws) == 6
    assert ws[0].target_stamps[0] == 3
    np.testing.assert_array_equal(ws[2].history, ds.series[2:5])
    np.testing.assert_array_equal(ws[2].target, ds.series[5:7])


def test_window_boundary_and_error():
    assert len(stg.window(_series(5), 3, 2)) == 1
    with pytest.raises(ValueError):
        stg.window(_series(4), 3, 2)


@pytest.mark.parametrize("n,expected", [(100, (70, 10, 20)), (10, (7, 1, 2)), (13, (9, 1, 3))])
def test_split_sizes(n, expected):
    ws = stg.window(_series(n + 1), 1, 1)
    assert len(ws) == n
    assert tuple(map(len, stg.split(ws))) == expected


def test_split_is_chronological():
    train, val, test = stg.split(stg.window(_series(60), 4, 2))
    assert max(w.history_stamps[0] for w in train) < min(w.history_stamps[0] for w in val)
    assert max(w.history_stamps[0] for w in val) < min(w.history_stamps[0] for w in test)


def test_normalize_round_trip_and_train_only():
    ds = _series(80, V=3, d=2)
    train, val, _ = stg.split(stg.window(ds, 4, 2))
    stats = stg.fit_normalize(train)
    w = val[0]
    back = stats.invert_window(stats.apply_window(w))
    np.testing.assert_allclose(back.history, w.history, atol=1e-10)
    # statistics come from the steps the training windows cover
    covered = ds.series[: len(train) + 5].reshape(-1, 2)
    np.testing.assert_allclose(stats.mean, covered.mean(0), atol=1e-12)
    np.testing.assert_allclose(stats.std, covered.std(0), atol=1e-12)


def test_constant_series_normalizes_to_zero():
    ds = stg.STGDataset(np.full((30, 2, 1), 4.0), np.zeros((2, 2)), np.arange(30))
    train, _, _ = stg.split(stg.window(ds, 2, 1))
    stats = stg.fit_normalize(train)
    assert stats.std[0] == stg.STD_FLOOR
    np.testing.assert_array_equal(stats.apply(ds.series), 0.0)


def test_encode_time_examples():
    enc = stg.encode_time(np.array([0, 288, 288 * 7 + 5]), 288)
    assert enc.shape == (3, 295)
    assert enc[0, 0] == 1 and enc[0, 7] == 1
    assert enc[1, 1] == 1 and enc[1, 7] == 1
    assert enc[2, 0] == 1 and enc[2, 12] == 1
    np.testing.assert_array_equal(enc.sum(1), 2.0)


def test_encode_time_any_shape():
    enc = stg.encode_time(np.arange(12).reshape(3, 4), 4)
    assert enc.shape == (3, 4, 11)
    np.testing.assert_array_equal(enc.sum(-1), 2.0)


def test_generator_determinism_and_zero_case():
    a = stg.generate_synthetic(2, 8, 50, seed=3)
    b = stg.generate_synthetic(2, 8, 50, seed=3)
    for (da, _), (db, _) in zip(a, b):
        np.testing.assert_array_equal(da.series, db.series)
        np.testing.assert_array_equal(da.adjacency, db.adjacency)
    zero = stg.generate_synthetic(2, 8, 50, shared_strength=0, specific_strength=0, noise_std=0, seed=1)
    assert all(np.all(ds.series == 0) for ds, _ in zero)


def test_generator_is_additive_and_has_motif():
    (ds, gt), = stg.generate_synthetic(1, 12, 300, seed=5)
    np.testing.assert_allclose(ds.series, gt.shared_signal + gt.specific_signal + gt.noise, atol=1e-15)
    m = len(gt.motif_nodes)
    motif = ds.adjacency[:m, :m]
    assert np.all(motif == motif.T) and motif.sum() > 0


def test_generator_rejects_small_graph():
    with pytest.raises(ValueError):
        stg.generate_synthetic(1, 3, 50)


def _node_mean_corr(gen):
    means = np.stack([ds.series.mean(axis=(1, 2)) for ds, _ in gen])
    c = np.corrcoef(means)
    return c[np.triu_indices(len(gen), 1)]


def test_shared_factor_correlates_clients():
    gen = stg.generate_synthetic(5, 20, 2000, specific_strength=0.0, seed=0)
    assert _node_mean_corr(gen).min() > 0.9


def test_planted_factor_separability():
    with_shared = stg.generate_synthetic(5, 20, 2000, specific_strength=0.0, seed=1)
    without = stg.generate_synthetic(5, 20, 2000, shared_strength=0.0, seed=1)
    assert _node_mean_corr(with_shared).mean() > _node_mean_corr(without).mean()


def test_csv_round_trip(tmp_path):
    (ds, _), = stg.generate_synthetic(1, 6, 40, seed=2)
    stg.save_csv(ds, tmp_path / "v.csv", tmp_path / "a.csv")
    back = stg.load_csv(tmp_path / "v.csv", tmp_path / "a.csv", ds.slots_per_day)
    np.testing.assert_array_equal(back.series, ds.series)
    np.testing.assert_array_equal(back.adjacency, ds.adjacency)


def test_csv_errors_name_position(tmp_path):
    (tmp_path / "a.csv").write_text("0,1\n1,0\n")
    (tmp_path / "v.csv").write_text("1,2\n3,x\n")
    with pytest.raises(ValueError, match="row 2, column 2"):
        stg.load_csv(tmp_path / "v.csv", tmp_path / "a.csv")
    (tmp_path / "v.csv").write_text("1,2\n3\n")
    with pytest.raises(ValueError, match="ragged row 2"):
        stg.load_csv(tmp_path / "v.csv", tmp_path / "a.csv")
    (tmp_path / "v.csv").write_text("1,2\n3,4\n")
    (tmp_path / "a.csv").write_text("0,1,1\n1,0,1\n")
    with pytest.raises(ValueError, match="not square"):
        stg.load_csv(tmp_path / "v.csv", tmp_path / "a.csv")
