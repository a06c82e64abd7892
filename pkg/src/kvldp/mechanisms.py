"""Client-side encoders and aggregator-side estimators for key-value data.

Four single-key mechanisms are implemented.  Each user samples one key
index uniformly, perturbs the (key presence, value) pair under local
differential privacy, and ships a small report; the aggregator groups
reports by sampled index and inverts the known perturbation channel to
recover per-key frequency and mean estimates.

  privkv  - key bit via randomized response, value via the sign-flip
            primitive; reports one of the three states <0,0>, <1,-1>,
            <1,1>.  Two decoders exist: the original frequency/count
            calibration and an improved estimator that removes the bias
            the key flips induce on the value counts.
  f2m     - key bit and value sign perturbed independently; absent keys
            carry a configurable default value, later subtracted out.
  kvue    - the whole ternary state pushed through a 3-category
            generalized randomized response.
  kvoh    - the ternary state one-hot encoded into 3 bits, each bit
            flipped independently with budget eps/2.

Scalar functions operate on one record/report and match the contracts
used by the tests; the *_population functions are vectorized equivalents
drawing a fixed number of variates from one generator, which is what the
experiment harness runs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core import (
    DiscretizedState,
    DomainError,
    IllConditionedError,
    PrivacyBudget,
    direct_encode,
    discretize,
    discretize_array,
    ensure_generator,
    flip_keep_probability,
    randomized_response_bit,
    rr_bit_array,
    rr_sign_array,
    vpp,
)

_MIN_CONDITIONING = 1e-12

NEG, ABSENT, POS = (int(DiscretizedState.NEG), int(DiscretizedState.ABSENT), int(DiscretizedState.POS))


class Mechanism(str, enum.Enum):
    PRIVKV = "privkv"
    F2M = "f2m"
    KVUE = "kvue"
    KVOH = "kvoh"


@dataclass(frozen=True)
class KeyValueRecord:
    """One user's sparse key -> value map over the key domain [0, d)."""

    pairs: dict
    d: int

    def __post_init__(self):
        if not isinstance(self.d, (int, np.integer)) or self.d < 1:
            raise DomainError(f"key domain size must be a positive integer, got {self.d!r}")
        for key, value in self.pairs.items():
            if not isinstance(key, (int, np.integer)) or not 0 <= key < self.d:
                raise DomainError(f"key index {key!r} outside [0, {self.d})")
            if not (math.isfinite(value) and -1.0 <= value <= 1.0):
                raise DomainError(f"value for key {key} must lie in [-1, 1], got {value!r}")


@dataclass(frozen=True)
class Report:
    """One perturbed client message: sampled key index plus payload.

    Payload shape depends on the mechanism: a ternary state digit for
    privkv/kvue, a (key bit, value sign) pair for f2m, and a 3-bit tuple
    for kvoh.
    """

    mechanism: Mechanism
    key_index: int
    payload: object

    def __post_init__(self):
        if self.key_index < 0:
            raise DomainError(f"key index must be non-negative, got {self.key_index!r}")
        m = self.mechanism
        p = self.payload
        if m in (Mechanism.PRIVKV, Mechanism.KVUE):
            if p not in (0, 1, 2):
                raise DomainError(f"{m.value} payload must be a state digit in {{0,1,2}}, got {p!r}")
        elif m is Mechanism.F2M:
            if not (isinstance(p, tuple) and len(p) == 2 and p[0] in (0, 1) and p[1] in (-1, 1)):
                raise DomainError(f"f2m payload must be (key bit, value sign), got {p!r}")
        elif m is Mechanism.KVOH:
            if not (isinstance(p, tuple) and len(p) == 3 and all(b in (0, 1) for b in p)):
                raise DomainError(f"kvoh payload must be a 3-bit tuple, got {p!r}")
        else:
            raise DomainError(f"unknown mechanism {m!r}")

    def to_line(self) -> str:
        if self.mechanism in (Mechanism.PRIVKV, Mechanism.KVUE):
            payload = str(self.payload)
        elif self.mechanism is Mechanism.F2M:
            payload = f"{self.payload[0]}{1 if self.payload[1] > 0 else 0}"
        else:
            payload = "".join(str(b) for b in self.payload)
        return f"{self.mechanism.value},{self.key_index},{payload}"

    @classmethod
    def from_line(cls, line: str) -> "Report":
        try:
            name, index, payload = line.strip().split(",")
            mechanism = Mechanism(name)
            key_index = int(index)
        except ValueError as exc:
            raise DomainError(f"malformed report line {line!r}") from exc
        if mechanism in (Mechanism.PRIVKV, Mechanism.KVUE):
            return cls(mechanism, key_index, int(payload))
        if mechanism is Mechanism.F2M:
            if len(payload) != 2 or any(c not in "01" for c in payload):
                raise DomainError(f"malformed f2m payload in {line!r}")
            return cls(mechanism, key_index, (int(payload[0]), 1 if payload[1] == "1" else -1))
        if len(payload) != 3 or any(c not in "01" for c in payload):
            raise DomainError(f"malformed kvoh payload in {line!r}")
        return cls(mechanism, key_index, tuple(int(c) for c in payload))


@dataclass(frozen=True)
class StateCounts:
    """Observed numbers of the three report states for one key."""

    m_absent: int
    m_pos: int
    m_neg: int

    def __post_init__(self):
        for name in ("m_absent", "m_pos", "m_neg"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise DomainError(f"{name} must be a non-negative integer, got {value!r}")

    @property
    def total(self) -> int:
        return int(self.m_absent + self.m_pos + self.m_neg)

    def as_digit_array(self) -> np.ndarray:
        """Counts indexed by state digit [neg, absent, pos]."""
        return np.array([self.m_neg, self.m_absent, self.m_pos], dtype=np.int64)

    @classmethod
    def from_digit_array(cls, row) -> "StateCounts":
        return cls(m_absent=int(row[ABSENT]), m_pos=int(row[POS]), m_neg=int(row[NEG]))


@dataclass(frozen=True)
class StateEstimates:
    """Calibrated (possibly negative) estimates of the true state counts.

    For the state-channel decoders (privkv improved, kvue) the three parts
    sum to the number of reports; the per-bit kvoh decoder calibrates each
    position independently, so its raw parts need not sum to anything.
    """

    n_absent: float
    n_pos: float
    n_neg: float
    total: float

    def as_digit_array(self) -> np.ndarray:
        return np.array([self.n_neg, self.n_absent, self.n_pos], dtype=np.float64)


@dataclass(frozen=True)
class KeyStats:
    """Final per-key estimates: frequency in [0,1], mean in [-1,1].

    mean is NaN (and mean_defined False) when the estimated support for the
    key is below one report, where a mean carries no signal.
    """

    frequency: float
    mean: float
    mean_defined: bool
    support: int


# ---------------------------------------------------------------------------
# Scalar encoders
# ---------------------------------------------------------------------------


def _sample_index(record: KeyValueRecord, g: np.random.Generator) -> int:
    if record.d < 1:
        raise DomainError("empty key domain")
    return int(g.integers(record.d))


def lpp_encode(record: KeyValueRecord, budget: PrivacyBudget, rng) -> Report:
    """Local perturbation protocol behind privkv.

    Samples one key uniformly.  A present key perturbs its value sign with
    the value budget, then survives as <1, sign> with probability
    e^eps1/(e^eps1+1), otherwise degrades to <0,0>.  An absent key draws a
    uniform placeholder value in [-1,1], perturbs it the same way, and
    stays <0,0> with probability e^eps1/(e^eps1+1), otherwise materializes
    as <1, sign>.
    """
    g = ensure_generator(rng)
    j = _sample_index(record, g)
    p1 = flip_keep_probability(budget.epsilon_key)
    if j in record.pairs:
        sign = vpp(record.pairs[j], budget.epsilon_value, g)
        state = DiscretizedState.from_pair(1, sign) if g.random() < p1 else DiscretizedState.ABSENT
    else:
        placeholder = float(g.uniform(-1.0, 1.0))
        sign = vpp(placeholder, budget.epsilon_value, g)
        state = DiscretizedState.ABSENT if g.random() < p1 else DiscretizedState.from_pair(1, sign)
    return Report(Mechanism.PRIVKV, j, int(state))


def f2m_encode(record: KeyValueRecord, budget: PrivacyBudget, default_value: float, rng) -> Report:
    """Perturb key bit and value sign independently; absent keys carry the default value."""
    if not -1.0 <= default_value <= 1.0:
        raise DomainError(f"default value must lie in [-1, 1], got {default_value!r}")
    g = ensure_generator(rng)
    j = _sample_index(record, g)
    key_bit = 1 if j in record.pairs else 0
    perturbed_bit = randomized_response_bit(key_bit, budget.epsilon_key, g)
    value = record.pairs.get(j, default_value)
    sign = vpp(value, budget.epsilon_value, g)
    return Report(Mechanism.F2M, j, (perturbed_bit, sign))


def _true_state(record: KeyValueRecord, j: int, g: np.random.Generator) -> DiscretizedState:
    if j in record.pairs:
        return DiscretizedState.from_pair(1, discretize(record.pairs[j], g))
    return DiscretizedState.ABSENT


def kvue_encode(record: KeyValueRecord, epsilon: float, rng) -> Report:
    """Generalized randomized response over the three discretized states."""
    g = ensure_generator(rng)
    j = _sample_index(record, g)
    state = _true_state(record, j, g)
    reported = direct_encode(int(state), 3, epsilon, g)
    return Report(Mechanism.KVUE, j, int(reported))


def kvoh_encode(record: KeyValueRecord, epsilon: float, rng) -> Report:
    """One-hot encode the discretized state into 3 bits, flip each with budget eps/2.

    Any two states differ in exactly two bits, so the per-bit budget eps/2
    composes to eps for the whole array.  The output may contain any number
    of set bits.
    """
    g = ensure_generator(rng)
    j = _sample_index(record, g)
    state = int(_true_state(record, j, g))
    bits = tuple(
        randomized_response_bit(1 if position == state else 0, epsilon / 2.0, g)
        for position in range(3)
    )
    return Report(Mechanism.KVOH, j, bits)


# ---------------------------------------------------------------------------
# Vectorized population encoders
# ---------------------------------------------------------------------------
#
# All take a (n, d) float matrix with NaN marking absent keys (the dense
# form datasets use) and one generator; the number and order of draws is
# fixed, so a fixed (seed, stream) reproduces the cell bit-for-bit no
# matter how cells are scheduled across workers.


class TernaryReports(NamedTuple):
    key_index: np.ndarray
    states: np.ndarray
    true_states: np.ndarray


class F2MReports(NamedTuple):
    key_index: np.ndarray
    key_bits: np.ndarray
    signs: np.ndarray
    true_states: np.ndarray


class KVOHReports(NamedTuple):
    key_index: np.ndarray
    bits: np.ndarray
    true_states: np.ndarray


def _gather_sampled(values: np.ndarray, g: np.random.Generator):
    n, d = values.shape
    key_index = g.integers(0, d, size=n)
    sampled = values[np.arange(n), key_index]
    present = ~np.isnan(sampled)
    return key_index, sampled, present


def _digits(present: np.ndarray, signs: np.ndarray) -> np.ndarray:
    return np.where(present, np.where(signs > 0, POS, NEG), ABSENT).astype(np.int8)


def lpp_encode_population(values: np.ndarray, budget: PrivacyBudget, rng) -> TernaryReports:
    g = ensure_generator(rng)
    key_index, sampled, present = _gather_sampled(values, g)
    placeholder = g.uniform(-1.0, 1.0, size=sampled.shape)
    effective = np.where(present, sampled, placeholder)
    v_star = discretize_array(effective, g)
    v_prime = rr_sign_array(v_star, budget.epsilon_value, g)
    keep = g.random(sampled.shape) < flip_keep_probability(budget.epsilon_key)
    emit_key = np.where(present, keep, ~keep)
    states = np.where(emit_key, np.where(v_prime > 0, POS, NEG), ABSENT).astype(np.int8)
    return TernaryReports(key_index, states, _digits(present, v_star))


def f2m_encode_population(values: np.ndarray, budget: PrivacyBudget, default_value: float, rng) -> F2MReports:
    if not -1.0 <= default_value <= 1.0:
        raise DomainError(f"default value must lie in [-1, 1], got {default_value!r}")
    g = ensure_generator(rng)
    key_index, sampled, present = _gather_sampled(values, g)
    key_bits = rr_bit_array(present.astype(np.int8), budget.epsilon_key, g)
    effective = np.where(present, sampled, default_value)
    v_star = discretize_array(effective, g)
    signs = rr_sign_array(v_star, budget.epsilon_value, g)
    return F2MReports(key_index, key_bits, signs, _digits(present, v_star))


def kvue_encode_population(values: np.ndarray, epsilon: float, rng) -> TernaryReports:
    g = ensure_generator(rng)
    key_index, sampled, present = _gather_sampled(values, g)
    v_star = discretize_array(np.where(present, sampled, 0.0), g)
    true_states = _digits(present, v_star)
    p = 1.0 / (1.0 + 2.0 * math.exp(-float(epsilon)))
    keep = g.random(sampled.shape) < p
    offsets = g.integers(1, 3, size=sampled.shape)
    states = np.where(keep, true_states, (true_states + offsets) % 3).astype(np.int8)
    return TernaryReports(key_index, states, true_states)


def kvoh_encode_population(values: np.ndarray, epsilon: float, rng) -> KVOHReports:
    g = ensure_generator(rng)
    key_index, sampled, present = _gather_sampled(values, g)
    v_star = discretize_array(np.where(present, sampled, 0.0), g)
    true_states = _digits(present, v_star)
    p = flip_keep_probability(float(epsilon) / 2.0)
    onehot = true_states[:, None] == np.arange(3, dtype=np.int8)[None, :]
    u = g.random((sampled.shape[0], 3))
    bits = np.where(onehot, u < p, u < 1.0 - p).astype(np.int8)
    return KVOHReports(key_index, bits, true_states)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def tally_ternary(key_index: np.ndarray, states: np.ndarray, d: int) -> np.ndarray:
    """Per-key counts of the three states, shape (d, 3) indexed by state digit."""
    flat = np.asarray(key_index, dtype=np.int64) * 3 + np.asarray(states, dtype=np.int64)
    return np.bincount(flat, minlength=3 * d).reshape(d, 3)


def tally_f2m(key_index, key_bits, signs, d: int):
    """Per-key aggregates for f2m: (set key bits, report totals, +1 signs, -1 signs)."""
    key_index = np.asarray(key_index, dtype=np.int64)
    totals = np.bincount(key_index, minlength=d)
    ones = np.bincount(key_index[np.asarray(key_bits, dtype=bool)], minlength=d)
    pos = np.bincount(key_index[np.asarray(signs) > 0], minlength=d)
    return ones, totals, pos, totals - pos


def tally_kvoh(key_index, bits, d: int):
    """Per-key bit-position sums, shape (d, 3), plus per-key report totals."""
    key_index = np.asarray(key_index, dtype=np.int64)
    bits = np.asarray(bits)
    sums = np.stack(
        [np.bincount(key_index[bits[:, position] > 0], minlength=d) for position in range(3)],
        axis=1,
    )
    return sums, np.bincount(key_index, minlength=d)


def tally_reports(reports: Sequence[Report], d: int):
    """Aggregate scalar reports (all of one mechanism) into decoder inputs."""
    if not reports:
        raise DomainError("no reports to tally")
    mechanism = reports[0].mechanism
    if any(r.mechanism is not mechanism for r in reports):
        raise DomainError("mixed mechanisms in one tally")
    key_index = np.array([r.key_index for r in reports], dtype=np.int64)
    if mechanism in (Mechanism.PRIVKV, Mechanism.KVUE):
        states = np.array([r.payload for r in reports], dtype=np.int64)
        return tally_ternary(key_index, states, d)
    if mechanism is Mechanism.F2M:
        key_bits = np.array([r.payload[0] for r in reports], dtype=np.int64)
        signs = np.array([r.payload[1] for r in reports], dtype=np.int64)
        return tally_f2m(key_index, key_bits, signs, d)
    bits = np.array([r.payload for r in reports], dtype=np.int64)
    return tally_kvoh(key_index, bits, d)


# ---------------------------------------------------------------------------
# Decoders
# ---------------------------------------------------------------------------


def _require_conditioned(value: float, what: str):
    if value < _MIN_CONDITIONING:
        raise IllConditionedError(f"{what} = {value:.3e} is below {_MIN_CONDITIONING:g}; epsilon too small")


def privkv_decode_original_array(counts: np.ndarray, budget: PrivacyBudget):
    """Original privkv calibration, vectorized over keys.

    counts has shape (d, 3) indexed by state digit.  Returns (frequency,
    mean, mean_defined) arrays; keys with no reports get NaN frequency.
    """
    counts = np.asarray(counts, dtype=np.float64)
    p1 = flip_keep_probability(budget.epsilon_key)
    p2 = flip_keep_probability(budget.epsilon_value)
    _require_conditioned(2.0 * p1 - 1.0, "2*p1 - 1")
    _require_conditioned(2.0 * p2 - 1.0, "2*p2 - 1")
    m_total = counts.sum(axis=1)
    n_pos = counts[:, POS]
    n_neg = counts[:, NEG]
    n_signed = n_pos + n_neg
    with np.errstate(invalid="ignore", divide="ignore"):
        f_hat = np.where(m_total > 0, n_signed / m_total, np.nan)
        frequency = np.clip((p1 - 1.0 + f_hat) / (2.0 * p1 - 1.0), 0.0, 1.0)
        shift = (p2 - 1.0) / (2.0 * p2 - 1.0) * n_signed
        n1 = np.clip(shift + n_pos / (2.0 * p2 - 1.0), 0.0, n_signed)
        n2 = np.clip(shift + n_neg / (2.0 * p2 - 1.0), 0.0, n_signed)
        defined = n_signed >= 1
        mean = np.where(defined, (n1 - n2) / np.where(n_signed > 0, n_signed, 1.0), np.nan)
    return frequency, mean, defined


def privkv_decode_improved_array(counts: np.ndarray, budget: PrivacyBudget) -> np.ndarray:
    """Unbiased state-count estimates under the privkv channel, shape (d, 3).

    Solves the two linear relations the channel imposes on the observed
    counts: the signed total (M1 + M-1 - M(1-p1)) / (2p1 - 1) recovers
    N1 + N-1, and (M1 - M-1) / (p1 (2p2 - 1)) recovers N1 - N-1.  The
    absent estimate keeps the three parts summing to the report total.
    """
    counts = np.asarray(counts, dtype=np.float64)
    p1 = flip_keep_probability(budget.epsilon_key)
    p2 = flip_keep_probability(budget.epsilon_value)
    _require_conditioned(2.0 * p1 - 1.0, "2*p1 - 1")
    _require_conditioned(2.0 * p2 - 1.0, "2*p2 - 1")
    m_total = counts.sum(axis=1)
    m_pos = counts[:, POS]
    m_neg = counts[:, NEG]
    signed_sum = (m_pos + m_neg - m_total * (1.0 - p1)) / (2.0 * p1 - 1.0)
    signed_diff = (m_pos - m_neg) / (p1 * (2.0 * p2 - 1.0))
    estimates = np.empty_like(counts)
    estimates[:, POS] = (signed_sum + signed_diff) / 2.0
    estimates[:, NEG] = (signed_sum - signed_diff) / 2.0
    estimates[:, ABSENT] = m_total - signed_sum
    return estimates


def kvue_decode_array(counts: np.ndarray, epsilon: float) -> np.ndarray:
    """Invert the 3-state generalized randomized response: N_i* = (2 M_i - (1-p) M) / (3p - 1)."""
    counts = np.asarray(counts, dtype=np.float64)
    p = 1.0 / (1.0 + 2.0 * math.exp(-float(epsilon)))
    _require_conditioned(3.0 * p - 1.0, "3*p - 1")
    m_total = counts.sum(axis=1, keepdims=True)
    return (2.0 * counts - (1.0 - p) * m_total) / (3.0 * p - 1.0)


def kvoh_decode_array(bit_sums: np.ndarray, n_reports: np.ndarray, epsilon: float) -> np.ndarray:
    """Per-position calibration N_i* = ((e^{eps/2}+1) M_i - N) / (e^{eps/2}-1).

    Positions are calibrated independently and deliberately not
    renormalized; the three estimates need not sum to N.
    """
    bit_sums = np.asarray(bit_sums, dtype=np.float64)
    n_reports = np.asarray(n_reports, dtype=np.float64)
    if np.any(bit_sums < 0) or np.any(bit_sums > n_reports[..., None]):
        raise DomainError("bit sums must lie in [0, n_reports]")
    denom = math.expm1(float(epsilon) / 2.0)
    _require_conditioned(denom, "e^{eps/2} - 1")
    return ((denom + 2.0) * bit_sums - n_reports[..., None]) / denom


def stats_from_estimates(estimates: np.ndarray, n_reports: np.ndarray):
    """Clip state estimates and form (frequency, mean, mean_defined) arrays.

    Clips the signed-state estimates to [0, N] first, then builds the
    frequency and mean; a clipped support below one report leaves the mean
    undefined instead of dividing by a near-zero frequency.
    """
    estimates = np.asarray(estimates, dtype=np.float64)
    n_reports = np.asarray(n_reports, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        n_pos = np.clip(estimates[..., POS], 0.0, n_reports)
        n_neg = np.clip(estimates[..., NEG], 0.0, n_reports)
        support = n_pos + n_neg
        frequency = np.where(n_reports > 0, np.clip(support / np.where(n_reports > 0, n_reports, 1.0), 0.0, 1.0), np.nan)
        defined = support >= 1.0
        mean = np.where(defined, np.clip((n_pos - n_neg) / np.where(support > 0, support, 1.0), -1.0, 1.0), np.nan)
    return frequency, mean, defined


def f2m_decode_array(ones, totals, pos, neg, budget: PrivacyBudget, default_value: float):
    """f2m calibration, vectorized over keys.

    The key channel is the same randomized response as privkv, so the
    frequency uses the identical calibration with the key budget.  The
    all-report mean uses the value budget, then the default-value mass of
    the absent keys is subtracted and rescaled by the frequency.
    """
    ones = np.asarray(ones, dtype=np.float64)
    totals = np.asarray(totals, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    p1 = flip_keep_probability(budget.epsilon_key)
    _require_conditioned(2.0 * p1 - 1.0, "2*p1 - 1")
    factor = 1.0 / math.tanh(budget.epsilon_value / 2.0)  # (e^eps2 + 1) / (e^eps2 - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        f_hat = np.where(totals > 0, ones / totals, np.nan)
        frequency = np.clip((p1 - 1.0 + f_hat) / (2.0 * p1 - 1.0), 0.0, 1.0)
        signed = pos + neg
        mean_all = factor * np.where(signed > 0, (pos - neg) / np.where(signed > 0, signed, 1.0), np.nan)
        defined = (totals > 0) & (frequency >= 1.0 / np.where(totals > 0, totals, 1.0))
        mean = np.where(
            defined,
            np.clip((mean_all - (1.0 - frequency) * default_value) / np.where(defined, frequency, 1.0), -1.0, 1.0),
            np.nan,
        )
    return frequency, mean, defined


# Scalar wrappers over the array decoders.


def privkv_decode_original(counts: StateCounts, budget: PrivacyBudget) -> KeyStats:
    frequency, mean, defined = privkv_decode_original_array(counts.as_digit_array()[None, :], budget)
    return KeyStats(float(frequency[0]), float(mean[0]), bool(defined[0]), counts.total)


def privkv_decode_improved(counts: StateCounts, budget: PrivacyBudget) -> StateEstimates:
    row = privkv_decode_improved_array(counts.as_digit_array()[None, :], budget)[0]
    return StateEstimates(n_absent=float(row[ABSENT]), n_pos=float(row[POS]), n_neg=float(row[NEG]), total=float(counts.total))


def kvue_decode(counts: StateCounts, epsilon: float) -> StateEstimates:
    row = kvue_decode_array(counts.as_digit_array()[None, :], epsilon)[0]
    return StateEstimates(n_absent=float(row[ABSENT]), n_pos=float(row[POS]), n_neg=float(row[NEG]), total=float(counts.total))


def kvoh_decode(bit_sums, n_reports: int, epsilon: float) -> StateEstimates:
    sums = np.asarray(bit_sums, dtype=np.float64)
    if sums.shape != (3,):
        raise DomainError(f"bit sums must have 3 positions, got shape {sums.shape}")
    row = kvoh_decode_array(sums[None, :], np.array([n_reports], dtype=np.float64), epsilon)[0]
    return StateEstimates(n_absent=float(row[ABSENT]), n_pos=float(row[POS]), n_neg=float(row[NEG]), total=float(n_reports))


def counts_to_stats(estimates: StateEstimates, n_sampled_for_key: int) -> KeyStats:
    frequency, mean, defined = stats_from_estimates(
        estimates.as_digit_array()[None, :], np.array([n_sampled_for_key], dtype=np.float64)
    )
    return KeyStats(float(frequency[0]), float(mean[0]), bool(defined[0]), int(n_sampled_for_key))


def f2m_decode(key_bit_counts, value_sign_counts, budget: PrivacyBudget, default_value: float) -> KeyStats:
    ones, total = key_bit_counts
    m_pos, m_neg = value_sign_counts
    frequency, mean, defined = f2m_decode_array(
        np.array([ones]), np.array([total]), np.array([m_pos]), np.array([m_neg]), budget, default_value
    )
    return KeyStats(float(frequency[0]), float(mean[0]), bool(defined[0]), int(total))


# ---------------------------------------------------------------------------
# Closed-form error bounds and communication cost
# ---------------------------------------------------------------------------

BOUND_VACUOUS = math.inf


def theoretical_bound(mechanism: Mechanism, epsilon: float, n: int, delta: float, f_k: float):
    """Hoeffding-style (frequency, mean) error bounds for one key.

    n is the number of reports carrying the key's index.  Each bound holds
    with probability at least (1 - delta)^2.  A mean bound whose
    denominator is non-positive (n too small for the guarantee to bite)
    is reported as the vacuous marker math.inf.  For f2m, epsilon is the
    budget of the individual channel (key or value), matching the
    single-epsilon form of its derivation.
    """
    mechanism = Mechanism(mechanism)
    if not (math.isfinite(epsilon) and epsilon > 0):
        raise DomainError(f"epsilon must be positive and finite, got {epsilon!r}")
    if n < 1:
        raise DomainError(f"n must be at least 1, got {n!r}")
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta!r}")
    if not 0.0 < f_k <= 1.0:
        raise DomainError(f"f_k must lie in (0, 1], got {f_k!r}")
    log_term = math.log(2.0 / delta)
    root_2l = math.sqrt(2.0 * log_term)
    if mechanism is Mechanism.KVUE:
        w = math.exp(-epsilon)
        factor = (1.0 + 2.0 * w) / (1.0 - w)  # (e^eps + 2) / (e^eps - 1)
        freq_bound = factor * math.sqrt(2.0 / n * log_term)
        denom = (1.0 - w) * f_k * math.sqrt(n) - (1.0 + 2.0 * w) * root_2l
        mean_bound = (1.0 + 2.0 * w) * root_2l / denom if denom > 0 else BOUND_VACUOUS
        return freq_bound, mean_bound
    if mechanism is Mechanism.KVOH:
        w = math.exp(-epsilon / 2.0)
        factor = (1.0 + w) / (1.0 - w)  # (e^{eps/2} + 1) / (e^{eps/2} - 1)
        freq_bound = factor * math.sqrt(2.0 / n * log_term)
        denom = f_k * (1.0 - w) * math.sqrt(n) - (1.0 + w) * root_2l
        mean_bound = (1.0 + w) * root_2l / denom if denom > 0 else BOUND_VACUOUS
        return freq_bound, mean_bound
    if mechanism is Mechanism.F2M:
        factor = 1.0 / math.tanh(epsilon / 2.0)  # (e^eps + 1) / (e^eps - 1)
        freq_bound = factor * math.sqrt(log_term / (2.0 * n))
        # 2 (f+1) (e^eps+1) sqrt(L) / (sqrt(2n) f^2 (e^eps-1) - f (e^eps-1) sqrt(L))
        denom = f_k * (math.sqrt(2.0 * n) * f_k - math.sqrt(log_term))
        mean_bound = 2.0 * (f_k + 1.0) * factor * math.sqrt(log_term) / denom if denom > 0 else BOUND_VACUOUS
        return freq_bound, mean_bound
    raise DomainError(f"no closed-form bound for mechanism {mechanism.value!r}")


def count_deviation_bound(mechanism: Mechanism, epsilon: float, n: int, delta: float) -> float:
    """Bound on |N_i* - N_i| holding with probability at least 1 - delta."""
    mechanism = Mechanism(mechanism)
    log_term = math.log(2.0 / delta)
    if mechanism is Mechanism.KVUE:
        w = math.exp(-epsilon)
        return (1.0 + 2.0 * w) / (1.0 - w) * math.sqrt(n / 2.0 * log_term)
    if mechanism is Mechanism.KVOH:
        w = math.exp(-epsilon / 2.0)
        return (1.0 + w) / (1.0 - w) * math.sqrt(n / 2.0 * log_term)
    raise DomainError(f"no count deviation bound for mechanism {mechanism.value!r}")


def report_size_bits(mechanism: Mechanism, d: int) -> float:
    """Nominal communication cost in bits for one report (index included)."""
    mechanism = Mechanism(mechanism)
    if d < 1:
        raise DomainError(f"key domain size must be at least 1, got {d!r}")
    if mechanism in (Mechanism.PRIVKV, Mechanism.KVUE):
        return math.log2(3 * d)
    if mechanism is Mechanism.F2M:
        return 2.0 * math.log2(d) if d > 1 else 0.0
    return 3.0 * math.log2(d) if d > 1 else 0.0


_PAYLOAD_BITS = {Mechanism.PRIVKV: 2, Mechanism.KVUE: 2, Mechanism.F2M: 2, Mechanism.KVOH: 3}


def _index_bits(d: int) -> int:
    return (d - 1).bit_length() if d > 1 else 0


def packed_size_bits(mechanism: Mechanism, d: int) -> int:
    """Bits one report occupies in the packed wire form."""
    return _index_bits(d) + _PAYLOAD_BITS[Mechanism(mechanism)]


def _payload_bits(report: Report):
    if report.mechanism in (Mechanism.PRIVKV, Mechanism.KVUE):
        return [(report.payload >> 1) & 1, report.payload & 1]
    if report.mechanism is Mechanism.F2M:
        return [report.payload[0], 1 if report.payload[1] > 0 else 0]
    return list(report.payload)


def pack_reports(reports: Sequence[Report], d: int) -> bytes:
    """Bit-pack reports (all one mechanism) at packed_size_bits each."""
    if not reports:
        return b""
    mechanism = reports[0].mechanism
    index_bits = _index_bits(d)
    bits = []
    for report in reports:
        if report.mechanism is not mechanism:
            raise DomainError("mixed mechanisms in one packed block")
        if report.key_index >= d:
            raise DomainError(f"key index {report.key_index} outside domain of size {d}")
        for position in range(index_bits - 1, -1, -1):
            bits.append((report.key_index >> position) & 1)
        bits.extend(_payload_bits(report))
    return np.packbits(np.array(bits, dtype=np.uint8)).tobytes()


def unpack_reports(data: bytes, mechanism: Mechanism, count: int, d: int):
    """Inverse of pack_reports."""
    mechanism = Mechanism(mechanism)
    stride = packed_size_bits(mechanism, d)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if len(bits) < count * stride:
        raise DomainError("packed data too short for the requested report count")
    index_bits = _index_bits(d)
    reports = []
    for r in range(count):
        chunk = bits[r * stride : (r + 1) * stride]
        key_index = 0
        for b in chunk[:index_bits]:
            key_index = (key_index << 1) | int(b)
        payload_bits = [int(b) for b in chunk[index_bits:]]
        if mechanism in (Mechanism.PRIVKV, Mechanism.KVUE):
            payload = (payload_bits[0] << 1) | payload_bits[1]
        elif mechanism is Mechanism.F2M:
            payload = (payload_bits[0], 1 if payload_bits[1] == 1 else -1)
        else:
            payload = tuple(payload_bits)
        reports.append(Report(mechanism, key_index, payload))
    return reports


# ---------------------------------------------------------------------------
# Channel tables (closed-form privacy audit surface)
# ---------------------------------------------------------------------------
#
# Probabilities are built from the keep/flip pair computed independently
# (never as 1 - p), so worst-case likelihood ratios come out at e^eps up
# to a few ulps and can be asserted at 1e-12 relative tolerance.


def _rr_pair(epsilon: float):
    w = math.exp(-float(epsilon))
    return 1.0 / (1.0 + w), w / (1.0 + w)


def lpp_channel(budget: PrivacyBudget) -> np.ndarray:
    """(3, 3) table Pr[output state | input state], rows/cols by state digit."""
    p1, q1 = _rr_pair(budget.epsilon_key)
    p2, q2 = _rr_pair(budget.epsilon_value)
    table = np.empty((3, 3))
    table[ABSENT] = [q1 / 2.0, p1, q1 / 2.0]
    table[NEG] = [p1 * p2, q1, p1 * q2]
    table[POS] = [p1 * q2, q1, p1 * p2]
    return table


def f2m_channel(budget: PrivacyBudget) -> np.ndarray:
    """(4, 4) table over (key bit, value sign) pairs ordered (0,-1),(0,1),(1,-1),(1,1)."""
    p1, q1 = _rr_pair(budget.epsilon_key)
    p2, q2 = _rr_pair(budget.epsilon_value)
    inputs = [(0, -1), (0, 1), (1, -1), (1, 1)]
    table = np.empty((4, 4))
    for i, (kb, sign) in enumerate(inputs):
        for o, (kb_out, sign_out) in enumerate(inputs):
            table[i, o] = (p1 if kb_out == kb else q1) * (p2 if sign_out == sign else q2)
    return table


def kvue_channel(epsilon: float) -> np.ndarray:
    """(3, 3) generalized randomized response table with keep e^eps/(e^eps+2)."""
    w = math.exp(-float(epsilon))
    keep = 1.0 / (1.0 + 2.0 * w)
    other = w / (1.0 + 2.0 * w)
    table = np.full((3, 3), other)
    np.fill_diagonal(table, keep)
    return table


def kvoh_bit_channel(epsilon: float) -> np.ndarray:
    """(2, 2) per-bit table of the kvoh/ioh bit flip at budget eps/2."""
    p, q = _rr_pair(float(epsilon) / 2.0)
    return np.array([[p, q], [q, p]])


def kvoh_channel(epsilon: float) -> np.ndarray:
    """(3, 8) table: input state digit vs 3-bit output pattern (b0 b1 b2 big-endian)."""
    p, q = _rr_pair(float(epsilon) / 2.0)
    table = np.empty((3, 8))
    for state in range(3):
        for pattern in range(8):
            prob = 1.0
            for position in range(3):
                bit = (pattern >> (2 - position)) & 1
                truth = 1 if position == state else 0
                prob *= p if bit == truth else q
            table[state, pattern] = prob
    return table


def worst_case_ratio(table: np.ndarray) -> float:
    """Max over outputs of the max/min likelihood ratio across inputs."""
    table = np.asarray(table, dtype=np.float64)
    if np.any(table <= 0):
        raise DomainError("channel table must be strictly positive")
    return float(np.max(table.max(axis=0) / table.min(axis=0)))
