"""Decoding error and delivery probabilities for the AWGN slot model.

A slot is ``n`` uses of a real AWGN channel. A device spending ``b`` energy
units transmits with power ``b / n``; error probabilities follow the
normal approximation of the finite-blocklength achievable rate.

Interference is described in energy units: ``s1 = sum_i i * L_i`` and
``s2 = sum_i i**2 * L_i`` over the interfering packets still present.
"""

from __future__ import annotations

import enum
import functools
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erfc
from scipy.stats import binom

from .errors import ConfigError

LOG2E_SQ = math.log2(math.e) ** 2
Q_ARG_CLAMP = 38.0
DEFAULT_DP_TOL = 1e-16


class DecodingMode(enum.Enum):
    NO_CAPTURE = "no-capture"
    CAPTURE = "capture"

    @classmethod
    def parse(cls, value: "str | DecodingMode") -> "DecodingMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for mode in cls:
            if mode.value == key:
                return mode
        raise ConfigError("mode", f"unknown decoding mode {value!r}")


@dataclass(frozen=True)
class ChannelParams:
    """Slot length ``n``, rate ``R`` (bits/channel use) and linear noise power.

    ``ideal=True`` replaces the finite-blocklength model with an error-free
    decoder: every packet carrying energy is decoded, whatever the
    interference. Useful for analytical cross-checks.
    """

    slot_length: int = 100
    rate: float = 0.8
    noise_power: float = 0.01
    ideal: bool = False

    def __post_init__(self):
        if int(self.slot_length) != self.slot_length or self.slot_length < 1:
            raise ConfigError("slot_length", f"must be a positive integer, got {self.slot_length}")
        if not self.rate > 0:
            raise ConfigError("rate", f"must be positive, got {self.rate}")
        if not self.noise_power > 0:
            raise ConfigError("noise_power", f"must be positive, got {self.noise_power}")
        object.__setattr__(self, "slot_length", int(self.slot_length))
        object.__setattr__(self, "rate", float(self.rate))
        object.__setattr__(self, "noise_power", float(self.noise_power))

    @classmethod
    def from_db(cls, noise_db: float, **kwargs) -> "ChannelParams":
        return cls(noise_power=10.0 ** (noise_db / 10.0), **kwargs)

    @property
    def noise_db(self) -> float:
        return 10.0 * math.log10(self.noise_power)

    @property
    def unit_snr(self) -> float:
        """Received SNR of one energy unit, ``1 / (n sigma^2)``."""
        return 1.0 / (self.slot_length * self.noise_power)


def q_function(x):
    """Gaussian tail probability, ``Q(x) = erfc(x / sqrt 2) / 2``."""
    x = np.clip(x, -Q_ARG_CLAMP, Q_ARG_CLAMP)
    return 0.5 * erfc(x / math.sqrt(2.0))


def raw_error_prob(signal, s1, s2, slot_length, rate, noise_power, ideal):
    """Scalar error probability from plain numbers (also compiled for the simulator)."""
    if signal <= 0:
        return 1.0
    if ideal:
        return 0.0
    g = 1.0 / (slot_length * noise_power)
    snr = signal * g
    p_int = s1 * g
    p_sq = s2 * g * g
    one = p_int + 1.0
    capacity = 0.5 * math.log2(1.0 + snr / one)
    dispersion = (
        (snr * snr * (1.0 + 2.0 * p_int + p_int * p_int - p_sq) + 2.0 * snr * one**3)
        / (2.0 * one * one * (snr + one) ** 2)
        * LOG2E_SQ
    )
    arg = math.sqrt(slot_length / dispersion) * (capacity - rate)
    arg = min(max(arg, -Q_ARG_CLAMP), Q_ARG_CLAMP)
    eps = 0.5 * math.erfc(arg / math.sqrt(2.0))
    return min(max(eps, 0.0), 1.0)


@functools.lru_cache(maxsize=1 << 18)
def error_prob(signal: int, s1: float, s2: float, ch: ChannelParams) -> float:
    """Decoding error probability of a packet with ``signal`` energy units.

    ``s1`` and ``s2`` are the first and second power sums of the packets
    treated as noise. With ``s1 = s2 = 0`` this is the singleton-slot error.
    """
    return raw_error_prob(signal, s1, s2, ch.slot_length, ch.rate, ch.noise_power, ch.ideal)


def singleton_error_prob(b: int, ch: ChannelParams) -> float:
    """Error probability ``eps_b`` of a packet alone in its slot."""
    return error_prob(int(b), 0.0, 0.0, ch)


@dataclass(frozen=True)
class InterferenceState:
    """Numbers of transmitting interferers per energy level, ``(L_0, ..., L_E)``."""

    transmit_counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.transmit_counts)
        if any(c < 0 for c in counts):
            raise ValueError("transmit counts must be nonnegative")
        object.__setattr__(self, "transmit_counts", counts)

    @property
    def power_sum(self) -> int:
        return sum(i * c for i, c in enumerate(self.transmit_counts))

    @property
    def square_sum(self) -> int:
        return sum(i * i * c for i, c in enumerate(self.transmit_counts))

    def interference_to_noise(self, ch: ChannelParams) -> float:
        return self.power_sum * ch.unit_snr

    def second_moment(self, ch: ChannelParams) -> float:
        return self.square_sum * ch.unit_snr**2

    def sinr(self, b: int, ch: ChannelParams) -> float:
        return b * ch.unit_snr / (self.interference_to_noise(ch) + 1.0)


def capture_error_prob(b: int, interferers: InterferenceState | Sequence[int], ch: ChannelParams) -> float:
    """Error probability of a ``b``-unit packet decoded with ``interferers`` as noise."""
    if not isinstance(interferers, InterferenceState):
        interferers = InterferenceState(tuple(interferers))
    return error_prob(int(b), float(interferers.power_sum), float(interferers.square_sum), ch)


def _full_policy(policy) -> np.ndarray:
    if hasattr(policy, "full"):
        return policy.full()
    return np.concatenate(([0.0], np.asarray(policy, dtype=float)))


def success_prob_no_capture(
    b: int,
    profile: Sequence[int],
    policy,
    alpha: float,
    ch: ChannelParams,
    *,
    count_update_prob: bool = True,
) -> float:
    """Delivery probability of a ``b``-unit packet when collisions destroy all packets.

    The tagged packet must be alone in the slot: each of the ``L_i`` other
    devices at level ``i`` stays silent with probability ``1 - alpha pi_i``.
    ``count_update_prob=False`` uses ``1 - pi_i`` instead, i.e. it assumes
    every other device holds a fresh update.
    """
    pi = _full_policy(policy)
    tx = alpha * pi if count_update_prob else pi
    silent = 1.0
    for level, count in enumerate(profile):
        if count:
            silent *= (1.0 - tx[level]) ** count
    return (1.0 - singleton_error_prob(b, ch)) * silent


def sic_success(b: int, tx_counts: Sequence[int], ch: ChannelParams, *, as_printed: bool = False) -> float:
    """Probability that the tagged ``b``-unit packet survives successive cancellation.

    ``tx_counts[i]`` is the number of *other* devices transmitting with
    ``i`` units. Levels are decoded from ``E`` down; every packet of level
    ``j > b`` must be decoded for the tagged packet to be attempted. A
    level-``j`` packet sees the remaining packets of levels ``<= j`` (the
    tagged one included, itself excluded) as noise.

    ``as_printed=True`` decodes the higher-level packets against the
    interference state of the tagged packet instead of their own.
    """
    counts = list(tx_counts)
    own = [c if i <= b else 0 for i, c in enumerate(counts)]
    own_state = InterferenceState(tuple(own))
    prob = 1.0 - capture_error_prob(b, own_state, ch)
    for j in range(b + 1, len(counts)):
        if counts[j] == 0:
            continue
        if as_printed:
            eps = capture_error_prob(j, own_state, ch)
        else:
            hat = [c if i < j else 0 for i, c in enumerate(counts)]
            hat[j] = counts[j] - 1
            hat[b] += 1
            eps = capture_error_prob(j, hat, ch)
        prob *= (1.0 - eps) ** counts[j]
    return prob


def _sic_expectation(
    b: int,
    E: int,
    level_pmf: Callable[[int, int], tuple[np.ndarray, np.ndarray]],
    ch: ChannelParams,
    tol: float = DEFAULT_DP_TOL,
) -> float:
    """Expected :func:`sic_success` over random transmitter counts.

    Levels are swept upwards carrying ``(K, s1, s2)``: the number of other
    transmitters drawn so far and the power sums of the packets below the
    current level. ``level_pmf(j, K)`` returns the admissible counts at
    level ``j`` and their conditional probabilities. Paths whose weight drops
    below ``tol`` are dropped; weights only shrink, so the neglected mass is
    at most ``tol`` per dropped path. Below the tagged level a path is also
    dropped when its weight times the tagged packet's success probability
    against the interference gathered so far is below ``tol``; more
    interference never helps, so this is an upper bound on what the path
    can still contribute.
    """
    cache: dict[tuple[int, int, int], float] = {}

    def eps(signal: int, s1: int, s2: int) -> float:
        key = (signal, s1, s2)
        value = cache.get(key)
        if value is None:
            value = cache[key] = raw_error_prob(
                signal, float(s1), float(s2), ch.slot_length, ch.rate, ch.noise_power, ch.ideal
            )
        return value

    states: dict[tuple[int, int, int], float] = {(0, 0, 0): 1.0}
    for j in range(1, E + 1):
        nxt: dict[tuple[int, int, int], float] = {}
        for (k, s1, s2), weight in states.items():
            counts, probs = level_pmf(j, k)
            for c, p in zip(counts, probs):
                w = weight * p
                if w < tol:
                    continue
                if j <= b and c > 0:
                    bound = 1.0 - eps(b, s1 + j * c, s2 + j * j * c)
                    if w * bound < tol:
                        continue
                if j > b and c > 0:
                    w *= (1.0 - eps(j, s1 + j * (c - 1), s2 + j * j * (c - 1))) ** c
                    if w < tol:
                        continue
                key = (k + c, s1 + j * c, s2 + j * j * c)
                nxt[key] = nxt.get(key, 0.0) + w
        if j == b:
            states = {}
            for (k, s1, s2), weight in nxt.items():
                w = weight * (1.0 - eps(b, s1, s2))
                if w < tol:
                    continue
                key = (k, s1 + b, s2 + b * b)
                states[key] = states.get(key, 0.0) + w
        else:
            states = nxt
    return min(sum(states.values()), 1.0)


def _binom_support(n: int, p: float, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Binomial pmf restricted to the counts whose mass is not negligible."""
    if n == 0 or p <= 0.0:
        return np.array([0]), np.array([1.0])
    if p >= 1.0:
        return np.array([n]), np.array([1.0])
    cutoff = tol * 1e-3
    mode = int((n + 1) * p)
    ratio = p / (1.0 - p)
    # start at the mode and walk outwards with the pmf recurrence
    try:
        start = float(math.comb(n, mode)) * p**mode * (1.0 - p) ** (n - mode)
    except OverflowError:
        start = math.exp(
            math.lgamma(n + 1) - math.lgamma(mode + 1) - math.lgamma(n - mode + 1)
            + mode * math.log(p) + (n - mode) * math.log1p(-p)
        )
    counts = [mode]
    probs = [start]
    value = start
    for c in range(mode, n):
        value *= (n - c) / (c + 1) * ratio
        if value < cutoff:
            break
        counts.append(c + 1)
        probs.append(value)
    value = start
    for c in range(mode, 0, -1):
        value *= c / (n - c + 1) / ratio
        if value < cutoff:
            break
        counts.append(c - 1)
        probs.append(value)
    order = np.argsort(counts)
    return np.asarray(counts)[order], np.asarray(probs)[order]


def success_prob_capture(
    b: int,
    profile: Sequence[int],
    policy,
    alpha: float,
    ch: ChannelParams,
    *,
    method: str = "auto",
    samples: int = 10_000,
    seed: int = 0,
    max_support: int = 100_000,
    as_printed: bool = False,
) -> float:
    """Delivery probability with capture and SIC for a given battery profile.

    The other ``L_i`` devices at level ``i`` transmit independently with
    probability ``alpha pi_i``. ``method``:

    * ``"exact"`` sweeps levels with a pruned dynamic program (any size);
    * ``"enumerate"`` sums over every joint transmitter count (needs the
      support size ``prod(L_i + 1)`` to stay below ``max_support``);
    * ``"monte-carlo"`` averages ``samples`` seeded draws;
    * ``"auto"`` picks ``"exact"``, or ``"enumerate"`` when ``as_printed``
      asks for the alternative interference state.
    """
    pi = _full_policy(policy)
    profile = tuple(int(x) for x in profile)
    E = len(profile) - 1
    tx = alpha * pi
    if method == "auto":
        method = "enumerate" if as_printed else "exact"
    if method == "exact":
        if as_printed:
            raise ValueError("the dynamic program only supports the per-level interference state")
        cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

        def level_pmf(j: int, _k: int):
            if j not in cache:
                cache[j] = _binom_support(profile[j], tx[j], DEFAULT_DP_TOL)
            return cache[j]

        return _sic_expectation(b, E, level_pmf, ch)
    if method == "enumerate":
        support = math.prod(c + 1 for c in profile[1:])
        if support > max_support:
            raise ValueError(f"joint support {support} exceeds max_support={max_support}")
        total = 0.0
        ranges = [range(c + 1) for c in profile[1:]]
        for combo in itertools.product(*ranges):
            p = 1.0
            for level, c in enumerate(combo, start=1):
                p *= binom.pmf(c, profile[level], tx[level])
            if p == 0.0:
                continue
            total += p * sic_success(b, (0,) + combo, ch, as_printed=as_printed)
        return total
    if method == "monte-carlo":
        return _capture_monte_carlo(b, profile, tx, ch, samples, seed, as_printed)[0]
    raise ValueError(f"unknown method {method!r}")


def _capture_monte_carlo(b, profile, tx, ch, samples, seed, as_printed=False):
    rng = np.random.default_rng(seed)
    draws = rng.binomial(np.asarray(profile), tx, size=(samples, len(profile)))
    draws[:, 0] = 0
    cache: dict[tuple[int, ...], float] = {}
    values = np.empty(samples)
    for k, row in enumerate(draws):
        key = tuple(int(x) for x in row)
        if key not in cache:
            cache[key] = sic_success(b, key, ch, as_printed=as_printed)
        values[k] = cache[key]
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(samples))


def avg_success_prob(
    b: int,
    nu: Sequence[float],
    device_count: int,
    policy,
    alpha: float,
    ch: ChannelParams,
    mode: DecodingMode | str,
    *,
    method: str = "auto",
    samples: int = 10_000,
    seed: int = 0,
    count_update_prob: bool = True,
    tol: float = DEFAULT_DP_TOL,
) -> float:
    """Average delivery probability ``w_bar_b`` over the steady-state battery profile.

    The profile of the other ``U - 1`` devices is multinomial with event
    probabilities ``nu``. Without capture the expectation factorises:
    ``(1 - eps_b) * (sum_i nu_i (1 - alpha pi_i)) ** (U - 1)``.

    With capture, thinning a multinomial profile by independent transmit
    decisions leaves a multinomial count of transmitters per level with
    probabilities ``nu_i alpha pi_i``, which ``method="exact"`` (the default)
    sweeps directly. ``"profiles"`` averages :func:`success_prob_capture`
    over every profile (small ``U`` only) and ``"monte-carlo"`` samples.
    ``tol`` is the path-pruning threshold of the exact sweep.
    """
    mode = DecodingMode.parse(mode)
    nu = np.asarray(nu, dtype=float)
    pi = _full_policy(policy)
    E = len(nu) - 1
    others = int(device_count) - 1
    if b <= 0:
        return 0.0
    if mode is DecodingMode.NO_CAPTURE:
        tx = alpha * pi if count_update_prob else pi
        silent = float(np.dot(nu, 1.0 - tx))
        return (1.0 - singleton_error_prob(b, ch)) * silent**others
    q = nu * alpha * pi
    if method in ("auto", "exact"):
        return _thinned_expectation(b, E, others, q, ch, tol)
    if method == "profiles":
        from .model import enumerate_profiles, multinomial_pmf

        total = 0.0
        for prof in enumerate_profiles(others, E):
            weight = multinomial_pmf(prof, nu)
            if weight > 0.0:
                total += weight * success_prob_capture(b, prof, pi[1:], alpha, ch, method="exact")
        return total
    if method == "monte-carlo":
        return avg_success_prob_capture_mc(b, q, others, ch, samples, seed)[0]
    raise ValueError(f"unknown method {method!r}")


def _thinned_expectation(
    b: int, E: int, others: int, q: np.ndarray, ch: ChannelParams, tol: float = DEFAULT_DP_TOL
) -> float:
    # stick-breaking: level j draws Binomial(remaining, q_j / (1 - sum_{i<j} q_i))
    cond = np.zeros(E + 1)
    left = 1.0
    for j in range(1, E + 1):
        cond[j] = 0.0 if left <= 0.0 else min(q[j] / left, 1.0)
        left -= q[j]
    cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def level_pmf(j: int, k: int):
        key = (j, k)
        if key not in cache:
            cache[key] = _binom_support(others - k, cond[j], tol)
        return cache[key]

    return _sic_expectation(b, E, level_pmf, ch, tol)


def avg_success_prob_capture_mc(
    b: int, q: np.ndarray, others: int, ch: ChannelParams, samples: int, seed: int
) -> tuple[float, float]:
    """Monte-Carlo estimate (and standard error) of the capture ``w_bar_b``."""
    rng = np.random.default_rng(seed)
    probs = np.append(q[1:], max(0.0, 1.0 - q[1:].sum()))
    draws = rng.multinomial(others, probs, size=samples)
    cache: dict[tuple[int, ...], float] = {}
    values = np.empty(samples)
    for k, row in enumerate(draws):
        key = (0,) + tuple(int(x) for x in row[:-1])
        if key not in cache:
            cache[key] = sic_success(b, key, ch)
        values[k] = cache[key]
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(samples))


def avg_success_probs(config, policy, nu: Sequence[float], **kwargs) -> np.ndarray:
    """``w_bar_b`` for every level, as a length ``E + 1`` array (entry 0 is 0)."""
    out = np.zeros(config.E + 1)
    for b in range(1, config.E + 1):
        out[b] = avg_success_prob(
            b, nu, config.U, policy, config.alpha, config.channel, config.decoding_mode, **kwargs
        )
    return out


def throughput(config, policy, nu: Sequence[float], wbar: Sequence[float]) -> float:
    """Average number of decoded packets per slot, ``alpha U sum_b nu_b pi_b w_bar_b``."""
    pi = _full_policy(policy)
    nu = np.asarray(nu, dtype=float)
    wbar = np.asarray(wbar, dtype=float)
    if not (len(pi) == len(nu) == len(wbar)):
        raise ValueError("policy, battery distribution and success probabilities must have E + 1 entries")
    return float(config.alpha * config.U * np.sum(nu * pi * wbar))
