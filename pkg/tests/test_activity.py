import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import find_peaks

from lvo.activity import (
    ActivityAnalyzer,
    TopKRecord,
    active_timesteps,
    build_profiles,
    default_min_separation,
    max_activation_profile,
    peak_candidates,
    read_peaks_json,
    read_profiles_csv,
    record_topk,
    select_peaks,
    write_peaks_json,
    write_profiles_csv,
)


def candidates_oracle(y):
    peaks, props = find_peaks(np.asarray(y, dtype=float), plateau_size=1)
    return props["left_edges"].tolist()


def select_oracle(y, p, min_sep):
    """Exhaustive search: among all feasible subsets of at most ``p`` candidates, the one whose
    sorted ranks (padded with inf) are lexicographically smallest.  Rank orders candidates by
    descending activity, then ascending time-step."""
    ranked = sorted(candidates_oracle(y), key=lambda t: (-y[t], t))
    best, best_key = (), (np.inf,) * p
    for size in range(1, p + 1):
        # combinations() of a rank-sorted list come out in lexicographic rank order,
        # so the first feasible one is the best of its size
        for combo in itertools.combinations(range(len(ranked)), size):
            ts = [ranked[i] for i in combo]
            if all(abs(a - b) >= min_sep for a, b in itertools.combinations(ts, 2)):
                key = combo + (np.inf,) * (p - size)
                if key < best_key:
                    best, best_key = tuple(ts), key
                break
    return best


def random_profile(rng, T=200):
    """Activity-like profile: binomial frequencies around a smooth random rate, with ties."""
    rate = np.convolve(rng.random(T + 20), np.ones(21) / 21, mode="valid")[:T]
    n = int(rng.integers(5, 40))
    return rng.binomial(n, rate) / n


def test_default_min_separation():
    assert default_min_separation(1000) == 100
    assert default_min_separation(100) == 10
    assert default_min_separation(5) == 1


def test_record_topk_rank_order_and_ties():
    assert record_topk([0.1, 0.9, 0.5, 0.9], 3).tolist() == [1, 3, 2]
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.integers(0, 5, size=12).astype(float)
        expect = sorted(range(12), key=lambda i: (-a[i], i))[:4]
        assert record_topk(a, 4).tolist() == expect


def test_build_profiles_worked_example():
    records = [TopKRecord(0, 0, (1, 2)), TopKRecord(0, 1, (2, 0)), TopKRecord(1, 0, (2, 1))]
    prof = build_profiles(records, 3, 3)
    np.testing.assert_array_equal(prof.frequency, [[0.5, 0, 0], [0.5, 1, 0], [1, 1, 0]])
    assert prof.samples.tolist() == [2, 1, 0]
    with pytest.raises(ValueError):
        TopKRecord(0, 0, (1, 1))


def test_peak_candidates_worked_examples():
    assert peak_candidates([0, 1, 0]).tolist() == [1]
    assert peak_candidates([0, 2, 2, 2, 1]).tolist() == [1]
    assert peak_candidates([3, 1, 2]).tolist() == []
    assert peak_candidates([0, 2, 2]).tolist() == []
    assert peak_candidates([1, 1, 1]).tolist() == []


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=0, max_size=40))
def test_peak_candidates_match_find_peaks(values):
    assert peak_candidates(values).tolist() == candidates_oracle(values)


def test_select_peaks_worked_example():
    y = np.zeros(60)
    y[[10, 15, 40, 55]] = [0.9, 0.95, 0.5, 0.5]
    assert select_peaks(y, 3, 10).timesteps == (15, 40, 55)
    assert select_peaks(y, 2, 10).timesteps == (15, 40)
    assert select_peaks(y, 3, 16).timesteps == (15, 40)
    assert select_peaks(y, 0, 10).timesteps == ()


@pytest.mark.parametrize("p,min_sep", [(1, 5), (3, 20), (4, 7)])
def test_select_peaks_matches_exhaustive_search(p, min_sep):
    rng = np.random.default_rng(p * 100 + min_sep)
    for _ in range(100):
        y = random_profile(rng, T=int(rng.integers(3, 120)))
        assert select_peaks(y, p, min_sep).timesteps == select_oracle(y, p, min_sep)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=80), st.integers(0, 4), st.integers(1, 30))
def test_select_peaks_invariants(values, p, min_sep):
    y = np.asarray(values)
    peaks = select_peaks(y, p, min_sep).timesteps
    cands = set(candidates_oracle(values))
    assert len(peaks) <= p and set(peaks) <= cands
    assert all(abs(a - b) >= min_sep for a, b in itertools.combinations(peaks, 2))
    # maximality: no leftover candidate fits
    if len(peaks) < p:
        assert all(any(abs(c - q) < min_sep for q in peaks) for c in cands - set(peaks))


def test_select_peaks_validates():
    with pytest.raises(ValueError):
        select_peaks([0, 1, 0], 3, 0)


def test_active_timesteps_and_max_profile():
    assert active_timesteps([0, 0.2, 0, 1]) == frozenset({1, 3})
    traces = np.array([[1.0, 5.0], [3.0, 2.0]])
    assert max_activation_profile(traces).tolist() == [3.0, 5.0]
    with pytest.raises(ValueError):
        max_activation_profile(np.zeros((0, 3)))


def test_analyzer_on_synthetic_sweep():
    n, T, F = 6, 30, 5
    X = np.zeros((n, T, F))
    t = np.arange(T)
    # feature 3 dominates around t=8 and t=22, feature 0 elsewhere
    X[:, :, 0] = 1.0
    X[:, :, 3] = 2.0 * (np.exp(-0.5 * ((t - 8) / 2) ** 2) + np.exp(-0.5 * ((t - 22) / 2) ** 2))
    X[:, :, 3] += np.linspace(0, 0.1, n)[:, None]
    X[:, 25:, :] = np.nan
    an = ActivityAnalyzer(k=1, p=3, min_separation=5).fit(X)
    # frequency-1 plateaus span t=6..10 and t=20..24; each counts at its left edge
    assert an.peaks_[3].timesteps == (6, 20)
    assert an.peaks_[0].timesteps == (11,)  # the 0..5 plateau touches the boundary
    assert an.profiles_.samples.tolist() == [n] * 25 + [0] * 5
    assert len(an.records_) == n * 25
    assert np.isnan(an.max_activation_[:, 25:]).all()
    np.testing.assert_allclose(an.max_activation_[3, :25], X[:, :25, 3].max(axis=0))
    assert an.min_separation_ == 5
    assert an.top_examples(3, 8, 2) == [(5, pytest.approx(X[5, 8, 3])), (4, pytest.approx(X[4, 8, 3]))]
    an2 = ActivityAnalyzer(k=2, p=3).fit(X)
    assert an2.min_separation_ == default_min_separation(T)


def test_analyzer_peaks_follow_activity():
    rng = np.random.default_rng(0)
    n, T, F = 40, 50, 4
    X = rng.random((n, T, F))
    t = np.arange(T)
    bump = 0.9 * (np.exp(-0.5 * ((t - 12) / 3) ** 2) + np.exp(-0.5 * ((t - 35) / 3) ** 2))
    # sample i carries feature 2 at t iff i < round(n * bump[t]), so frequency tracks bump exactly
    X[:, :, 2] = 3 * (np.arange(n)[:, None] < np.round(n * bump)[None])
    an = ActivityAnalyzer(k=1, p=2, min_separation=10).fit(X)
    np.testing.assert_allclose(an.profiles_.frequency[2], np.round(n * bump) / n)
    assert an.peaks_[2].timesteps == (12, 35)
    with pytest.raises(ValueError):
        ActivityAnalyzer().fit(np.zeros((0, 3, 2)))
    with pytest.raises(ValueError):
        ActivityAnalyzer().fit(np.zeros((3, 2)))


def test_profile_and_peak_files_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    X = rng.random((10, 20, 6))
    an = ActivityAnalyzer(k=3, p=2, min_separation=3).fit(X)
    write_profiles_csv(an.profiles_, tmp_path / "p.csv")
    back = read_profiles_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.counts, an.profiles_.counts)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "feature_id,t,frequency,samples"
    write_peaks_json(an.peaks_, tmp_path / "peaks.json", k=3)
    peaks = read_peaks_json(tmp_path / "peaks.json")
    assert [peaks[f].timesteps for f in range(6)] == [pk.timesteps for pk in an.peaks_]
    assert json.loads((tmp_path / "peaks.json").read_text())["k"] == 3
