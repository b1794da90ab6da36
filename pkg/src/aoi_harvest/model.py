"""Shared domain types and the battery Markov chains.

A single device's battery level evolves as a birth/reset chain over
``0..E``; the occupancy counts of the other ``U - 1`` devices (the battery
profile) form a second chain whose law follows from the first.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .delivery import ChannelParams, DecodingMode
from .errors import ConfigError, DegenerateChainError

ROW_SUM_TOL = 1e-12


def _check_prob(name: str, value: float) -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        raise ConfigError(name, f"must lie in [0, 1], got {value}")
    return value


@dataclass(frozen=True)
class SystemConfig:
    device_count: int
    battery_capacity: int
    update_prob: float
    harvest_prob: float
    channel: ChannelParams = field(default_factory=ChannelParams)
    decoding_mode: DecodingMode = DecodingMode.CAPTURE

    def __post_init__(self):
        if int(self.device_count) != self.device_count or self.device_count < 1:
            raise ConfigError("device_count", f"must be a positive integer, got {self.device_count}")
        if int(self.battery_capacity) != self.battery_capacity or self.battery_capacity < 1:
            raise ConfigError("battery_capacity", f"must be a positive integer, got {self.battery_capacity}")
        object.__setattr__(self, "device_count", int(self.device_count))
        object.__setattr__(self, "battery_capacity", int(self.battery_capacity))
        object.__setattr__(self, "update_prob", _check_prob("update_prob", self.update_prob))
        object.__setattr__(self, "harvest_prob", _check_prob("harvest_prob", self.harvest_prob))
        object.__setattr__(self, "decoding_mode", DecodingMode.parse(self.decoding_mode))

    # short aliases matching the usual notation
    @property
    def U(self) -> int:
        return self.device_count

    @property
    def E(self) -> int:
        return self.battery_capacity

    @property
    def alpha(self) -> float:
        return self.update_prob

    @property
    def eta(self) -> float:
        return self.harvest_prob

    def replace(self, **changes) -> "SystemConfig":
        import dataclasses

        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TransmissionPolicy:
    """Per-level transmit probabilities ``(pi_1, ..., pi_E)``; ``pi_0 = 0``."""

    probs: tuple[float, ...]

    def __post_init__(self):
        probs = tuple(_check_prob(f"pi[{i + 1}]", p) for i, p in enumerate(self.probs))
        if not probs:
            raise ConfigError("pi", "policy must have at least one level")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def of(cls, probs: "Sequence[float] | TransmissionPolicy") -> "TransmissionPolicy":
        if isinstance(probs, cls):
            return probs
        return cls(tuple(float(p) for p in probs))

    @property
    def E(self) -> int:
        return len(self.probs)

    def full(self) -> np.ndarray:
        """Length ``E + 1`` array with the implicit ``pi_0 = 0`` in front."""
        return np.concatenate(([0.0], np.asarray(self.probs, dtype=float)))

    def __str__(self) -> str:
        return "(" + ",".join(f"{p:.6g}" for p in self.probs) + ")"


def _check_policy(config: SystemConfig, policy: TransmissionPolicy) -> None:
    if policy.E != config.E:
        raise ConfigError("pi", f"policy has {policy.E} levels but battery capacity is {config.E}")


def check_stochastic(matrix: np.ndarray, tol: float = ROW_SUM_TOL) -> None:
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {matrix.shape}")
    if np.any(matrix < -tol) or np.any(matrix > 1 + tol):
        raise ValueError("entries must lie in [0, 1]")
    worst = np.max(np.abs(matrix.sum(axis=1) - 1.0))
    if worst > tol:
        raise ValueError(f"row sums deviate from 1 by {worst:.3g}")


def m1_transition_matrix(config: SystemConfig, policy: TransmissionPolicy) -> np.ndarray:
    """Battery-level transition matrix of one device, shape ``(E+1, E+1)``."""
    policy = TransmissionPolicy.of(policy)
    _check_policy(config, policy)
    E, alpha, eta = config.E, config.alpha, config.eta
    tx = alpha * policy.full()
    p = np.zeros((E + 1, E + 1))
    p[0, 0] = 1.0 - eta
    p[0, 1] = eta
    for i in range(1, E):
        p[i, 0] = tx[i]
        p[i, i] = (1.0 - eta) * (1.0 - tx[i])
        p[i, i + 1] = eta * (1.0 - tx[i])
    p[E, 0] += tx[E]
    p[E, E] += 1.0 - tx[E]
    return p


def battery_steady_state(m1: np.ndarray) -> np.ndarray:
    """Stationary battery distribution ``nu`` of ``m1``.

    Solves the balance equations with the last one swapped for the
    normalisation constraint. A chain with no harvesting but positive
    transmission probability drains every battery and is rejected.
    """
    m1 = np.asarray(m1, dtype=float)
    check_stochastic(m1)
    size = m1.shape[0]
    if size > 1 and m1[0, 0] == 1.0 and np.any(m1[1:, 0] > 0):
        raise DegenerateChainError("no harvesting (eta = 0) with transmissions: every battery drains to 0")
    if size > 1 and m1[0, 0] == 1.0:
        raise DegenerateChainError("no harvesting (eta = 0): stationary distribution is not unique")
    a = m1.T - np.eye(size)
    a[-1, :] = 1.0
    rhs = np.zeros(size)
    rhs[-1] = 1.0
    try:
        nu = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateChainError("battery chain has no unique stationary distribution") from exc
    nu = np.clip(nu, 0.0, None)
    return nu / nu.sum()


def enumerate_profiles(device_count: int, E: int) -> list[tuple[int, ...]]:
    """All occupancy vectors ``(L_0, ..., L_E)`` summing to ``device_count``.

    Order is colexicographic: profiles are sorted by ``L_E`` first, then
    ``L_{E-1}`` and so on down to ``L_0``. The first profile puts every
    device at level 0 and the last one puts every device at level ``E``.
    """
    if device_count < 0:
        raise ValueError("device_count must be nonnegative")
    profiles = []
    # stars and bars: choose E bar positions among device_count + E slots
    for bars in itertools.combinations(range(device_count + E), E):
        counts = []
        prev = -1
        for pos in bars:
            counts.append(pos - prev - 1)
            prev = pos
        counts.append(device_count + E - prev - 1)
        profiles.append(tuple(counts))
    profiles.sort(key=lambda prof: prof[::-1])
    return profiles


def profile_transition_prob(src: Sequence[int], dst: Sequence[int], m1: np.ndarray) -> float:
    """Probability that the occupancy counts move from ``src`` to ``dst`` in one slot.

    Enumerates every flow table ``u[j][k]`` (devices moving from level ``j``
    to level ``k``) compatible with both profiles. Only the moves ``j -> j``,
    ``j -> j+1`` and ``j -> 0`` have positive probability, so once
    ``u[0][0]`` and the resets ``u[i][0]`` for ``1 <= i < E`` are chosen the
    rest of the table is forced.
    """
    src = tuple(int(x) for x in src)
    dst = tuple(int(x) for x in dst)
    if len(src) != len(dst) or len(src) != m1.shape[0]:
        raise ValueError("profile lengths must match the battery chain dimension")
    if sum(src) != sum(dst):
        raise ValueError(f"profiles hold different device counts: {sum(src)} vs {sum(dst)}")
    E = len(src) - 1
    if E == 0:
        return 1.0

    total = 0.0

    def walk(level: int, carry_up: int, resets: int, weight: float) -> None:
        # carry_up: devices arriving at `level` from level - 1
        nonlocal total
        if level == E:
            stay = dst[E] - carry_up
            reset = src[E] - stay
            if stay < 0 or reset < 0 or resets + reset != dst[0]:
                return
            total += weight * math.comb(src[E], reset) * m1[E, 0] ** reset * m1[E, E] ** stay
            return
        stay = dst[level] - carry_up
        if stay < 0 or stay > src[level]:
            return
        for reset in range(src[level] - stay + 1):
            up = src[level] - stay - reset
            coef = math.comb(src[level], reset) * math.comb(src[level] - reset, stay)
            term = coef * m1[level, 0] ** reset * m1[level, level] ** stay * m1[level, level + 1] ** up
            if term == 0.0:
                continue
            walk(level + 1, up, resets + reset, weight * term)

    # level 0: u[0][0] stay, u[0][1] move up; no resets from level 0
    for stay0 in range(min(src[0], dst[0]) + 1):
        up0 = src[0] - stay0
        term = math.comb(src[0], stay0) * m1[0, 0] ** stay0 * m1[0, 1] ** up0
        if term == 0.0:
            continue
        walk(1, up0, stay0, term)
    return total


def profile_transition_matrix(profiles: Sequence[tuple[int, ...]], m1: np.ndarray) -> np.ndarray:
    """Full profile transition matrix over ``profiles``.

    Built row by row by convolving, level by level, the multinomial split of
    the devices at each level over their three possible destinations.
    Agrees with :func:`profile_transition_prob` entry by entry.
    """
    E = m1.shape[0] - 1
    index = {prof: k for k, prof in enumerate(profiles)}
    size = len(profiles)
    out = np.zeros((size, size))
    zero = (0,) * (E + 1)
    for row, src in enumerate(profiles):
        dist = {zero: 1.0}
        for level in range(E + 1):
            moves = _level_moves(level, src[level], m1)
            nxt: dict[tuple[int, ...], float] = {}
            for partial, weight in dist.items():
                for delta, prob in moves:
                    key = tuple(a + b for a, b in zip(partial, delta))
                    nxt[key] = nxt.get(key, 0.0) + weight * prob
            dist = nxt
        for dst, prob in dist.items():
            out[row, index[dst]] += prob
    return out


def _level_moves(level: int, count: int, m1: np.ndarray) -> list[tuple[tuple[int, ...], float]]:
    E = m1.shape[0] - 1
    targets = sorted({0, level, min(level + 1, E)})
    probs = [m1[level, t] for t in targets]
    moves = []
    for split in _compositions(count, len(targets)):
        coef = math.factorial(count)
        prob = 1.0
        for n_t, p_t in zip(split, probs):
            coef //= math.factorial(n_t)
            prob *= p_t**n_t
        if prob == 0.0:
            continue
        delta = [0] * (E + 1)
        for n_t, t in zip(split, targets):
            delta[t] += n_t
        moves.append((tuple(delta), coef * prob))
    return moves


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def multinomial_pmf(profile: Sequence[int], probs: Sequence[float]) -> float:
    """Multinomial probability of ``profile`` with event probabilities ``probs``."""
    n = sum(profile)
    log_p = math.lgamma(n + 1)
    for count, p in zip(profile, probs):
        if count == 0:
            continue
        if p <= 0.0:
            return 0.0
        log_p += count * math.log(p) - math.lgamma(count + 1)
    return math.exp(log_p)
