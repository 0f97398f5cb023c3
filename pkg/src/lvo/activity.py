"""Time-step activity analysis: top-k capture, activity profiles, peak selection."""

from __future__ import annotations

import csv
import json
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from lvo._validation import check_int


@dataclass(frozen=True)
class TopKRecord:
    t: int
    sample_id: int
    features: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.features)) != len(self.features):
            raise ValueError(f"duplicate feature ids in record {self.features}")


@dataclass(frozen=True)
class ActivityProfile:
    """Per-time-step frequency with which one feature lands in the top-k."""

    feature_id: int
    frequency: np.ndarray
    samples: np.ndarray


@dataclass(frozen=True)
class PeakSet:
    feature_id: int
    timesteps: tuple[int, ...]

    def __len__(self):
        return len(self.timesteps)

    def __iter__(self):
        return iter(self.timesteps)


class ActivityProfiles:
    """All features' profiles as one ``(n_features, T)`` frequency matrix."""

    def __init__(self, counts: np.ndarray, samples: np.ndarray):
        self.counts = np.asarray(counts, dtype=np.int64)
        self.samples = np.asarray(samples, dtype=np.int64)
        with np.errstate(invalid="ignore", divide="ignore"):
            freq = self.counts / self.samples[None, :]
        self.frequency = np.where(self.samples[None, :] > 0, freq, 0.0)

    @property
    def n_features(self) -> int:
        return self.counts.shape[0]

    @property
    def T(self) -> int:
        return self.counts.shape[1]

    def __len__(self):
        return self.n_features

    def __getitem__(self, feature_id: int) -> ActivityProfile:
        return ActivityProfile(int(feature_id), self.frequency[feature_id].copy(), self.samples.copy())

    def __iter__(self):
        return (self[f] for f in range(self.n_features))


def default_min_separation(T: int) -> int:
    """Peak separation of 100 steps on a 1000-step schedule, rescaled to ``T``."""
    return max(1, round(100 * T / 1000))


def _topk_ids(activations: np.ndarray, k: int) -> np.ndarray:
    # stable sort of the negated values: among ties the lower index ranks first
    order = np.argsort(-activations, axis=-1, kind="stable")
    return order[..., :k]


def record_topk(activations, k: int) -> np.ndarray:
    """Ids of the ``k`` largest activations in rank order (ties toward lower id)."""
    k = check_int(k, "k", minimum=1)
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError("record_topk expects a 1-D vector of per-feature activations")
    return _topk_ids(a, k)


def build_profiles(records: Iterable[TopKRecord], n_features: int, n_timesteps: int) -> ActivityProfiles:
    """Count, for every ``(feature, t)``, the fraction of records at ``t`` containing the feature."""
    counts = np.zeros((n_features, n_timesteps), dtype=np.int64)
    samples = np.zeros(n_timesteps, dtype=np.int64)
    for rec in records:
        samples[rec.t] += 1
        counts[list(rec.features), rec.t] += 1
    return ActivityProfiles(counts, samples)


def _as_profile(profile):
    if isinstance(profile, ActivityProfile):
        return profile.feature_id, np.asarray(profile.frequency, dtype=np.float64)
    return -1, np.asarray(profile, dtype=np.float64)


def peak_candidates(profile) -> np.ndarray:
    """Strict interior local maxima; a flat top counts once, at its leftmost index."""
    _, y = _as_profile(profile)
    n = len(y)
    out = []
    i = 1
    while i < n - 1:
        if y[i] > y[i - 1]:
            j = i
            while j + 1 < n and y[j + 1] == y[i]:
                j += 1
            if j + 1 < n and y[j + 1] < y[i]:
                out.append(i)
            i = j + 1
        else:
            i += 1
    return np.asarray(out, dtype=np.int64)


def select_peaks(profile, p: int, min_separation: int) -> PeakSet:
    """Up to ``p`` highest candidates, greedily, keeping them ``min_separation`` apart."""
    check_int(min_separation, "min_separation", minimum=1)
    check_int(p, "p", minimum=0)
    feature_id, y = _as_profile(profile)
    cands = peak_candidates(y)
    # descending activity, ties toward smaller t
    order = sorted(cands.tolist(), key=lambda t: (-y[t], t))
    chosen: list[int] = []
    for t in order:
        if len(chosen) >= p:
            break
        if all(abs(t - c) >= min_separation for c in chosen):
            chosen.append(t)
    return PeakSet(feature_id, tuple(chosen))


def active_timesteps(profile) -> frozenset[int]:
    """Time-steps at which the feature was ever in the top-k."""
    _, y = _as_profile(profile)
    return frozenset(np.flatnonzero(y > 0).tolist())


def max_activation_profile(traces) -> np.ndarray:
    """Element-wise max over samples (axis 0) of per-time-step activation traces."""
    a = np.asarray(traces, dtype=np.float64)
    if a.ndim < 2 or a.shape[0] == 0:
        raise ValueError("expected traces shaped (n_samples, T, ...)")
    return a.max(axis=0)


class ActivityAnalyzer(BaseEstimator):
    """Fit activity profiles, peaks, and max-activation tables from a dataset sweep.

    ``fit`` takes ``X`` of shape ``(n_samples, T, n_features)``: the aggregated
    activation of every feature for every sample at every recorded time-step.
    Time-steps not covered (all-NaN slices) are skipped.
    """

    def __init__(self, k: int = 20, p: int = 3, min_separation: int | None = None):
        self.k = k
        self.p = p
        self.min_separation = min_separation

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"X must be (n_samples, T, n_features), got shape {X.shape}")
        if X.shape[0] == 0:
            raise ValueError("cannot analyze an empty dataset")
        check_int(self.k, "k", minimum=1)
        n, T, F = X.shape
        covered = ~np.isnan(X).all(axis=(0, 2))
        ids = _topk_ids(np.nan_to_num(X, nan=-np.inf), min(self.k, F))
        self.records_ = [TopKRecord(t, s, tuple(int(f) for f in ids[s, t]))
                         for s in range(n) for t in range(T) if covered[t]]
        self.profiles_ = build_profiles(self.records_, F, T)
        max_act = np.where(np.isnan(X), -np.inf, X).max(axis=0).T
        max_act[:, ~covered] = np.nan
        self.max_activation_ = max_act
        sep = self.min_separation if self.min_separation is not None else default_min_separation(T)
        self.min_separation_ = sep
        self.peaks_ = [select_peaks(self.profiles_[f], self.p, sep) for f in range(F)]
        self.activations_ = X
        self.n_features_in_ = F
        return self

    def top_examples(self, feature: int, t: int, n: int = 5) -> list[tuple[int, float]]:
        """``(sample_id, activation)`` of the ``n`` strongest samples, descending."""
        check_is_fitted(self, "activations_")
        col = self.activations_[:, t, feature]
        order = np.argsort(-col, kind="stable")[:n]
        return [(int(i), float(col[i])) for i in order]


def write_profiles_csv(profiles: ActivityProfiles, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_id", "t", "frequency", "samples"])
        for f in range(profiles.n_features):
            for t in range(profiles.T):
                w.writerow([f, t, repr(float(profiles.frequency[f, t])), int(profiles.samples[t])])
    return path


def read_profiles_csv(path) -> ActivityProfiles:
    rows = list(csv.DictReader(Path(path).open()))
    F = max(int(r["feature_id"]) for r in rows) + 1
    T = max(int(r["t"]) for r in rows) + 1
    counts = np.zeros((F, T), dtype=np.int64)
    samples = np.zeros(T, dtype=np.int64)
    for r in rows:
        f, t, n = int(r["feature_id"]), int(r["t"]), int(r["samples"])
        samples[t] = n
        counts[f, t] = round(float(r["frequency"]) * n)
    return ActivityProfiles(counts, samples)


def write_peaks_json(peaks: list[PeakSet], path, **extra) -> Path:
    path = Path(path)
    payload = dict(extra)
    payload["peaks"] = {str(p.feature_id): list(p.timesteps) for p in peaks}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_peaks_json(path) -> dict[int, PeakSet]:
    payload = json.loads(Path(path).read_text())
    return {int(f): PeakSet(int(f), tuple(ts)) for f, ts in payload["peaks"].items()}
