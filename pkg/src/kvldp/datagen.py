"""Synthetic dataset generators, ratings-file ingestion, and exact oracles.

Datasets are held densely as an (n, d) float matrix with NaN marking an
absent key; that form feeds the vectorized encoders directly and keeps
the exact ground-truth statistics one nan-aware reduction away.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import DomainError, RandomSource
from .conditional import Condition
from .mechanisms import KeyValueRecord

FREQUENCY_REGIMES = {"extreme_low": 0.05, "low": 0.2, "middle": 0.6, "high": 0.8}
MEAN_REGIMES = {"low": -0.8, "middle": 0.0, "high": 0.8}


@dataclass
class Dataset:
    """n user records over d keys; values[i, k] is NaN when user i lacks key k."""

    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DomainError(f"dataset values must be a 2-d matrix, got shape {self.values.shape}")
        finite = self.values[~np.isnan(self.values)]
        if finite.size and (finite.min() < -1.0 or finite.max() > 1.0):
            raise DomainError("dataset values must lie in [-1, 1]")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def record(self, i: int) -> KeyValueRecord:
        row = self.values[i]
        keys = np.flatnonzero(~np.isnan(row))
        return KeyValueRecord({int(k): float(row[k]) for k in keys}, self.d)

    def records(self):
        for i in range(self.n):
            yield self.record(i)


@dataclass(frozen=True)
class GroundTruth:
    """Exact per-key frequency and mean; mean is NaN where no user holds the key."""

    frequency: np.ndarray
    mean: np.ndarray


def _materialize(freq_targets, mean_targets, n, rng, value_spread):
    """Draw the user/key presence matrix and jittered values around the targets.

    Values are drawn uniformly on [m - w, m + w] with w capped at 1 - |m|,
    which keeps them inside [-1, 1] and leaves the expected value exactly
    at the target (a clipped bell around m would bias extreme targets).
    """
    freq_targets = np.asarray(freq_targets, dtype=np.float64)
    mean_targets = np.asarray(mean_targets, dtype=np.float64)
    d = len(freq_targets)
    half_width = np.minimum(value_spread, 1.0 - np.abs(mean_targets))
    present = rng.random((n, d)) < freq_targets[None, :]
    jitter = rng.uniform(-1.0, 1.0, size=(n, d)) * half_width[None, :]
    values = np.where(present, mean_targets[None, :] + jitter, np.nan)
    return values


def _check_sizes(d, n):
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise DomainError(f"key count d must be a positive integer, got {d!r}")
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise DomainError(f"user count n must be a positive integer, got {n!r}")


def gen_synthetic(dist: str, d: int, n: int, seed: int, value_spread: float = 0.1,
                  freq_params=None, mean_params=None) -> Dataset:
    """Generate a dataset whose per-key frequency/mean targets follow the named law.

    dist='gaussian': f_k ~ Normal(0.5, 0.15) clipped to [0.05, 0.95] and
    m_k ~ Normal(0, 0.4) clipped to [-0.9, 0.9].  dist='uniform':
    f_k ~ Uniform(0.05, 0.95) and m_k ~ Uniform(-0.9, 0.9).  Pass
    freq_params/mean_params to override the law parameters.
    """
    _check_sizes(d, n)
    rng = RandomSource(seed).generator()
    if dist == "gaussian":
        loc, scale = freq_params or (0.5, 0.15)
        freq_targets = np.clip(rng.normal(loc, scale, size=d), 0.05, 0.95)
        loc, scale = mean_params or (0.0, 0.4)
        mean_targets = np.clip(rng.normal(loc, scale, size=d), -0.9, 0.9)
    elif dist == "uniform":
        lo, hi = freq_params or (0.05, 0.95)
        freq_targets = rng.uniform(lo, hi, size=d)
        lo, hi = mean_params or (-0.9, 0.9)
        mean_targets = rng.uniform(lo, hi, size=d)
    else:
        raise DomainError(f"unknown distribution {dist!r}; expected 'gaussian' or 'uniform'")
    values = _materialize(freq_targets, mean_targets, n, rng, value_spread)
    provenance = {"generator": "gen_synthetic", "dist": dist, "d": int(d), "n": int(n),
                  "seed": int(seed), "value_spread": value_spread}
    return Dataset(values, provenance)


def gen_regime(frequency_regime: str, mean_regime: str, d: int, n: int, seed: int,
               value_spread: float = 0.1) -> Dataset:
    """Generate a dataset with every key pinned to the named frequency/mean regime."""
    _check_sizes(d, n)
    if frequency_regime not in FREQUENCY_REGIMES:
        raise DomainError(f"unknown frequency regime {frequency_regime!r}; choose from {sorted(FREQUENCY_REGIMES)}")
    if mean_regime not in MEAN_REGIMES:
        raise DomainError(f"unknown mean regime {mean_regime!r}; choose from {sorted(MEAN_REGIMES)}")
    rng = RandomSource(seed).generator()
    freq_targets = np.full(d, FREQUENCY_REGIMES[frequency_regime])
    mean_targets = np.full(d, MEAN_REGIMES[mean_regime])
    values = _materialize(freq_targets, mean_targets, n, rng, value_spread)
    provenance = {"generator": "gen_regime", "frequency_regime": frequency_regime,
                  "mean_regime": mean_regime, "d": int(d), "n": int(n), "seed": int(seed),
                  "value_spread": value_spread}
    return Dataset(values, provenance)


# ---------------------------------------------------------------------------
# Ratings ingestion
# ---------------------------------------------------------------------------


def _scan_rows(path, rating_scale, max_rows, max_users):
    """Yield (user_id, item_id, value) from a user,item,rating[,...] file.

    Comma- or tab-delimited with an optional header row, both auto-detected.
    Ratings are affinely mapped from [lo, hi] onto [-1, 1].  The same
    admission rules (row cap, first-seen user cap) are applied on every
    scan so two passes see identical data.
    """
    lo, hi = rating_scale
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise DomainError(f"rating scale must satisfy min < max, got {rating_scale!r}")
    admitted_users = {}
    rows_seen = 0
    with open(path, newline="") as handle:
        sample = handle.readline()
        delimiter = "\t" if "\t" in sample else ","
        handle.seek(0)
        reader = csv.reader(handle, delimiter=delimiter)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 3:
                raise DomainError(f"{path}: line {lineno}: expected at least 3 columns, got {len(row)}")
            user, item, rating_text = row[0].strip(), row[1].strip(), row[2].strip()
            try:
                rating = float(rating_text)
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise DomainError(f"{path}: line {lineno}: rating {rating_text!r} is not a number")
            if not lo <= rating <= hi:
                raise DomainError(f"{path}: line {lineno}: rating {rating} outside scale [{lo}, {hi}]")
            if max_rows is not None and rows_seen >= max_rows:
                return
            rows_seen += 1
            if user not in admitted_users:
                if max_users is not None and len(admitted_users) >= max_users:
                    continue
                admitted_users[user] = True
            yield user, item, 2.0 * (rating - lo) / (hi - lo) - 1.0


def _item_sort_key(items):
    try:
        return {item: (int(item),) for item in items}
    except ValueError:
        return {item: (item,) for item in items}


def ingest_ratings(path, top_k: int, rating_scale=(1.0, 5.0), max_rows=None, max_users=None) -> Dataset:
    """Build a dataset from a ratings file over the top_k most-rated items.

    The key domain is the top_k items by rating count (ties broken by
    ascending item id); users keep their ratings on those items (last
    occurrence wins on duplicates) and users left with none are dropped.
    If fewer than top_k distinct items exist, all of them are used.
    """
    if not isinstance(top_k, (int, np.integer)) or top_k < 1:
        raise DomainError(f"top_k must be a positive integer, got {top_k!r}")
    counts = {}
    for _, item, _ in _scan_rows(path, rating_scale, max_rows, max_users):
        counts[item] = counts.get(item, 0) + 1
    if not counts:
        raise DomainError(f"{path}: no usable rating rows")
    order_key = _item_sort_key(counts)
    ranked = sorted(counts, key=lambda item: (-counts[item], order_key[item]))
    chosen = ranked[: min(int(top_k), len(ranked))]
    key_of = {item: index for index, item in enumerate(chosen)}

    user_rows = {}
    user_order = []
    for user, item, value in _scan_rows(path, rating_scale, max_rows, max_users):
        key = key_of.get(item)
        if key is None:
            continue
        if user not in user_rows:
            user_rows[user] = {}
            user_order.append(user)
        user_rows[user][key] = value

    values = np.full((len(user_order), len(chosen)), np.nan)
    for i, user in enumerate(user_order):
        for key, value in user_rows[user].items():
            values[i, key] = value
    provenance = {"generator": "ingest_ratings", "path": str(path), "top_k": int(top_k),
                  "rating_scale": [float(rating_scale[0]), float(rating_scale[1])],
                  "keys": [str(item) for item in chosen],
                  "max_rows": max_rows, "max_users": max_users}
    return Dataset(values, provenance)


# ---------------------------------------------------------------------------
# Exact oracles
# ---------------------------------------------------------------------------


def true_stats(ds: Dataset) -> GroundTruth:
    """Exact per-key frequency and mean by direct counting."""
    present = ~np.isnan(ds.values)
    holders = present.sum(axis=0)
    frequency = holders / ds.n
    sums = np.where(present, ds.values, 0.0).sum(axis=0)
    mean = np.where(holders > 0, sums / np.where(holders > 0, holders, 1), np.nan)
    return GroundTruth(frequency, mean)


def true_conditional(ds: Dataset, k: int, cond: Condition):
    """Exact conditional (frequency, mean) of key k by brute-force filtering.

    Filters users whose key-existence pattern matches the condition, then
    counts key-k holders among them and averages their raw values.  NaN
    marks an empty conditioned population / no holders.
    """
    if cond.d != ds.d:
        raise DomainError(f"condition length {cond.d} does not match dataset dimension {ds.d}")
    if not 0 <= k < ds.d:
        raise DomainError(f"target key {k} outside domain of size {ds.d}")
    if cond.alpha[k]:
        raise DomainError(f"target key {k} must not be constrained by the condition")
    present = ~np.isnan(ds.values)
    matched = np.ones(ds.n, dtype=bool)
    for key, (a, b) in enumerate(zip(cond.alpha, cond.beta)):
        if a:
            matched &= present[:, key] == bool(b)
    n_matched = int(matched.sum())
    if n_matched == 0:
        return math.nan, math.nan
    holders = matched & present[:, k]
    n_holders = int(holders.sum())
    frequency = n_holders / n_matched
    mean = float(ds.values[holders, k].mean()) if n_holders else math.nan
    return frequency, mean


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_DATASET_MAGIC = "# kvldp-dataset "


def save_dataset(ds: Dataset, path):
    """Write 'user_index,key_index,value' rows under a provenance header."""
    header = dict(ds.provenance)
    header.update({"n": ds.n, "d": ds.d})
    with open(path, "w", newline="\n") as handle:
        handle.write(_DATASET_MAGIC + json.dumps(header, sort_keys=True) + "\n")
        rows, keys = np.nonzero(~np.isnan(ds.values))
        for user, key in zip(rows, keys):
            handle.write("%d,%d,%.17g\n" % (user, key, ds.values[user, key]))


def load_dataset(path) -> Dataset:
    with open(path) as handle:
        first = handle.readline()
        if not first.startswith(_DATASET_MAGIC):
            raise DomainError(f"{path}: not a kvldp dataset file")
        header = json.loads(first[len(_DATASET_MAGIC):])
        values = np.full((int(header["n"]), int(header["d"])), np.nan)
        for lineno, line in enumerate(handle, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                user, key, value = line.split(",")
                values[int(user), int(key)] = float(value)
            except (ValueError, IndexError) as exc:
                raise DomainError(f"{path}: line {lineno}: malformed row {line!r}") from exc
    provenance = {key: header[key] for key in header if key not in ("n", "d")}
    return Dataset(values, provenance)
