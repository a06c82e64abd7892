"""Randomness-driven primitives for locally private key-value collection.

Everything here is a pure function of its inputs plus an explicit random
source, so callers can parallelize freely by handing each worker its own
stream.  The random source is a counter-based generator (Philox) keyed by
(seed, stream_id): the same pair reproduces the same stream on every
platform, and distinct stream ids give statistically independent streams
regardless of iteration order or thread scheduling.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

_UINT64_MASK = (1 << 64) - 1


class DomainError(ValueError):
    """An input lies outside the documented domain of an operation."""


class CapacityError(DomainError):
    """A requested size exceeds a hard capacity limit."""


class IllConditionedError(DomainError):
    """The privacy budget is so small that calibration factors underflow."""


def _splitmix64(x: int) -> int:
    # SplitMix64 finalizer; used only to derive child stream ids.
    x = (x + 0x9E3779B97F4A7C15) & _UINT64_MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _UINT64_MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _UINT64_MASK
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RandomSource:
    """Reproducible, seekable randomness keyed by (seed, stream_id).

    ``generator()`` returns a fresh numpy Generator over a Philox counter
    stream whose 128-bit key is the (seed, stream_id) pair, so repeated
    calls restart the identical stream.  ``substream`` derives independent
    child sources by hashing extra indices into the stream id; use one
    child per user / per experiment cell.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or not 0 <= value <= _UINT64_MASK:
                raise DomainError(f"{name} must be an unsigned 64-bit integer, got {value!r}")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def substream(self, *indices: int) -> "RandomSource":
        sid = self.stream_id
        for index in indices:
            sid = _splitmix64(sid ^ _splitmix64(int(index) & _UINT64_MASK))
        return RandomSource(self.seed, sid)


def ensure_generator(rng) -> np.random.Generator:
    """Accept a RandomSource, a numpy Generator, or a bare integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RandomSource):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RandomSource(int(rng)).generator()
    raise DomainError(f"cannot build a generator from {type(rng).__name__}")


@dataclass(frozen=True)
class PrivacyBudget:
    """Additive privacy budget split between key and value perturbation.

    The total budget is epsilon_key + epsilon_value by sequential
    composition; both parts must be strictly positive and finite.
    """

    epsilon_key: float
    epsilon_value: float

    def __post_init__(self):
        for name in ("epsilon_key", "epsilon_value"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"{name} must be a positive finite real, got {value!r}")

    @property
    def epsilon_total(self) -> float:
        return self.epsilon_key + self.epsilon_value

    @classmethod
    def split(cls, epsilon_total: float, key_share: float = 0.5) -> "PrivacyBudget":
        """Split a total budget; the default is the even split eps/2 + eps/2."""
        if not (math.isfinite(epsilon_total) and epsilon_total > 0):
            raise DomainError(f"epsilon_total must be positive and finite, got {epsilon_total!r}")
        if not 0 < key_share < 1:
            raise DomainError(f"key_share must lie in (0, 1), got {key_share!r}")
        return cls(epsilon_total * key_share, epsilon_total * (1.0 - key_share))


class DiscretizedState(enum.IntEnum):
    """Ternary state of one key-value pair after value discretization.

    The digit is key_bit * value_sign + 1, so NEG=<1,-1> is 0, ABSENT=<0,0>
    is 1 and POS=<1,1> is 2.  This digit doubles as the base-3 digit used by
    the full-record index encoding.
    """

    NEG = 0
    ABSENT = 1
    POS = 2

    @classmethod
    def from_pair(cls, key_bit: int, value_sign: int) -> "DiscretizedState":
        if key_bit not in (0, 1):
            raise DomainError(f"key bit must be 0 or 1, got {key_bit!r}")
        if key_bit == 0:
            return cls.ABSENT
        if value_sign not in (-1, 1):
            raise DomainError(f"value sign must be -1 or 1, got {value_sign!r}")
        return cls(key_bit * value_sign + 1)

    @property
    def key_bit(self) -> int:
        return 0 if self is DiscretizedState.ABSENT else 1

    @property
    def value_sign(self) -> int:
        """Sign carried by the state; 0 for ABSENT."""
        return int(self) - 1


def _check_epsilon(epsilon: float) -> float:
    if not (math.isfinite(epsilon) and epsilon > 0):
        raise DomainError(f"epsilon must be a positive finite real, got {epsilon!r}")
    return float(epsilon)


def flip_keep_probability(epsilon: float) -> float:
    """Randomized-response keep probability p = e^eps / (e^eps + 1).

    Computed as 1 / (1 + e^-eps) so large budgets cannot overflow.
    """
    epsilon = _check_epsilon(epsilon)
    return 1.0 / (1.0 + math.exp(-epsilon))


def _check_value(v: float) -> float:
    if not (isinstance(v, (int, float, np.floating, np.integer)) and math.isfinite(v)):
        raise DomainError(f"value must be a finite real, got {v!r}")
    if not -1.0 <= v <= 1.0:
        raise DomainError(f"value must lie in [-1, 1], got {v!r}")
    return float(v)


def discretize(v: float, rng) -> int:
    """Round v in [-1, 1] to +-1 with Pr[+1] = (1 + v) / 2.

    The expectation of the output equals v, which is what makes downstream
    count-based mean estimators unbiased.
    """
    v = _check_value(v)
    g = ensure_generator(rng)
    return 1 if g.random() < (1.0 + v) / 2.0 else -1


def randomized_response_bit(b: int, epsilon: float, rng) -> int:
    """Report bit b truthfully with probability e^eps/(e^eps+1), else flip."""
    if b not in (0, 1):
        raise DomainError(f"bit must be 0 or 1, got {b!r}")
    p = flip_keep_probability(epsilon)
    g = ensure_generator(rng)
    return int(b) if g.random() < p else 1 - int(b)


def direct_encode(x: int, K: int, epsilon: float, rng) -> int:
    """Generalized randomized response over K categories.

    Keeps the true category with probability e^eps/(e^eps+K-1) and reports
    each other category with probability (1-p)/(K-1).  K=2 reduces to the
    binary randomized response.
    """
    if not isinstance(K, (int, np.integer)) or K < 2:
        raise DomainError(f"domain size K must be an integer >= 2, got {K!r}")
    if not isinstance(x, (int, np.integer)) or not 0 <= x < K:
        raise DomainError(f"category x must lie in [0, {K}), got {x!r}")
    epsilon = _check_epsilon(epsilon)
    p = 1.0 / (1.0 + (K - 1) * math.exp(-epsilon))
    g = ensure_generator(rng)
    if g.random() < p:
        return int(x)
    return int((x + g.integers(1, K)) % K)


def vpp(v: float, epsilon: float, rng) -> int:
    """Value perturbation primitive: discretize then randomized-response the sign.

    Pr[+1] = (1+v)/2 * p + (1-v)/2 * (1-p) with p = e^eps/(e^eps+1).
    """
    p = flip_keep_probability(epsilon)
    g = ensure_generator(rng)
    sign = discretize(v, g)
    return sign if g.random() < p else -sign


# Vectorized counterparts.  These consume the stream of a single generator
# with a fixed number of draws per call, so a population encode is exactly
# reproducible for a given (seed, stream_id).


def discretize_array(values: np.ndarray, rng) -> np.ndarray:
    """Vectorized discretize; returns an int8 array of +-1."""
    g = ensure_generator(rng)
    values = np.asarray(values, dtype=np.float64)
    u = g.random(values.shape)
    return np.where(u < (1.0 + values) / 2.0, 1, -1).astype(np.int8)


def rr_bit_array(bits: np.ndarray, epsilon: float, rng) -> np.ndarray:
    """Vectorized binary randomized response on a 0/1 array."""
    p = flip_keep_probability(epsilon)
    g = ensure_generator(rng)
    bits = np.asarray(bits)
    keep = g.random(bits.shape) < p
    return np.where(keep, bits, 1 - bits).astype(np.int8)


def rr_sign_array(signs: np.ndarray, epsilon: float, rng) -> np.ndarray:
    """Vectorized randomized response on a +-1 array (sign kept w.p. p)."""
    p = flip_keep_probability(epsilon)
    g = ensure_generator(rng)
    signs = np.asarray(signs)
    keep = g.random(signs.shape) < p
    return np.where(keep, signs, -signs).astype(np.int8)


def vpp_array(values: np.ndarray, epsilon: float, rng) -> np.ndarray:
    g = ensure_generator(rng)
    return rr_sign_array(discretize_array(values, g), epsilon, g)


def direct_encode_array(xs: np.ndarray, K: int, epsilon: float, rng) -> np.ndarray:
    """Vectorized generalized randomized response over [0, K)."""
    if K < 2:
        raise DomainError(f"domain size K must be >= 2, got {K!r}")
    epsilon = _check_epsilon(epsilon)
    p = 1.0 / (1.0 + (K - 1) * math.exp(-epsilon))
    g = ensure_generator(rng)
    xs = np.asarray(xs)
    keep = g.random(xs.shape) < p
    offsets = g.integers(1, K, size=xs.shape)
    return np.where(keep, xs, (xs + offsets) % K)
