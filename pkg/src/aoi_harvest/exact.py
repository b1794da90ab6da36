"""Exact average age through the ancillary chain (outcome, battery, profile).

The chain tracks, at the end of each slot, whether the tagged device
delivered an update (S) or not (F), its battery level and the battery
profile of the other ``U - 1`` devices. A success empties the battery, so
only ``(S, 0, profile)`` success states are kept. First-step analysis over
the failure states yields the first two moments of the inter-refresh time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

import itertools

from scipy.stats import binom

from .delivery import DecodingMode, sic_success, singleton_error_prob, success_prob_capture, success_prob_no_capture
from .errors import NoRefreshError, StateSpaceTooLarge
from .model import (
    SystemConfig,
    TransmissionPolicy,
    _level_moves,
    enumerate_profiles,
    m1_transition_matrix,
    profile_transition_matrix,
)

DEFAULT_STATE_CAP = 200_000
SUCCESS, FAIL = "S", "F"


def state_space_size(device_count: int, E: int) -> int:
    """Number of composite states ``2 (E+1) C(U+E-1, E)`` before pruning."""
    return 2 * (E + 1) * math.comb(device_count + E - 1, E)


@dataclass(frozen=True)
class IndexedChain:
    """Indexed ancillary chain.

    Failure states ``(F, b, profile)`` have index ``b * n_profiles + k``
    where ``k`` indexes ``profiles``; success state ``(S, 0, profile_k)``
    has index ``(E + 1) * n_profiles + k`` in the full transition matrix.

    ``Q`` holds failure-to-failure transitions, ``r`` the total probability
    of moving from each failure state to any success state, ``to_success``
    the full failure-to-success block and ``from_success`` the success-to-failure block.
    """

    config: SystemConfig
    policy: TransmissionPolicy
    profiles: tuple[tuple[int, ...], ...]
    profile_matrix: np.ndarray
    success_probs: np.ndarray
    Q: np.ndarray
    r: np.ndarray
    to_success: np.ndarray
    from_success: np.ndarray

    @property
    def n_profiles(self) -> int:
        return len(self.profiles)

    @property
    def n_fail(self) -> int:
        return self.Q.shape[0]

    def index(self, outcome: str, b: int, profile: tuple[int, ...]) -> int:
        k = self.profiles.index(tuple(profile))
        if outcome == FAIL:
            return b * self.n_profiles + k
        if outcome == SUCCESS and b == 0:
            return self.n_fail + k
        raise KeyError(f"state ({outcome}, {b}, {profile}) is not part of the chain")

    def state(self, index: int) -> tuple[str, int, tuple[int, ...]]:
        if index < self.n_fail:
            b, k = divmod(index, self.n_profiles)
            return FAIL, b, self.profiles[k]
        return SUCCESS, 0, self.profiles[index - self.n_fail]

    def full_matrix(self) -> np.ndarray:
        """Dense transition matrix over failure states followed by success states."""
        nf, ns = self.n_fail, self.n_profiles
        full = np.zeros((nf + ns, nf + ns))
        full[:nf, :nf] = self.Q
        full[:nf, nf:] = self.to_success
        full[nf:, :nf] = self.from_success
        return full


def _success_table(config: SystemConfig, policy: TransmissionPolicy, profiles, **kwargs) -> np.ndarray:
    """``w[b, k]``: delivery probability at level ``b`` against profile ``k``."""
    E = config.E
    table = np.zeros((E + 1, len(profiles)))
    pi = policy.full()
    for b in range(1, E + 1):
        if pi[b] == 0.0:
            continue
        for k, prof in enumerate(profiles):
            if config.decoding_mode is DecodingMode.NO_CAPTURE:
                table[b, k] = success_prob_no_capture(b, prof, policy, config.alpha, config.channel, **kwargs)
            else:
                table[b, k] = success_prob_capture(b, prof, policy, config.alpha, config.channel, **kwargs)
    return table


def _joint_success_blocks(config: SystemConfig, policy: TransmissionPolicy, profiles) -> np.ndarray:
    """``S[b]``: joint probability of a delivery at level ``b`` and each profile move.

    The others' transmissions both interfere with the tagged packet and
    reset their batteries, so delivery and profile move are drawn from the
    same transmit counts. Given the counts, transmitters drop to level 0 and
    the rest stay or harvest.
    """
    E, eta = config.E, config.eta
    tx = config.alpha * policy.full()
    index = {prof: k for k, prof in enumerate(profiles)}
    n = len(profiles)
    idle = np.zeros((E + 1, E + 1))
    for i in range(E):
        idle[i, i], idle[i, i + 1] = 1.0 - eta, eta
    idle[E, E] = 1.0
    moves_cache: dict[tuple[int, ...], dict[tuple[int, ...], float]] = {}

    def idle_moves(counts: tuple[int, ...]) -> dict[tuple[int, ...], float]:
        if counts not in moves_cache:
            dist = {(0,) * (E + 1): 1.0}
            for level, c in enumerate(counts):
                nxt: dict[tuple[int, ...], float] = {}
                for partial, weight in dist.items():
                    for delta, prob in _level_moves(level, c, idle):
                        key = tuple(a + b for a, b in zip(partial, delta))
                        nxt[key] = nxt.get(key, 0.0) + weight * prob
                dist = nxt
            moves_cache[counts] = dist
        return moves_cache[counts]

    out = np.zeros((E + 1, n, n))
    levels = [b for b in range(1, E + 1) if tx[b] > 0.0]
    for row, src in enumerate(profiles):
        ranges = [range(src[i] + 1) if tx[i] > 0.0 else range(1) for i in range(E + 1)]
        for sent in itertools.product(*ranges):
            p = 1.0
            for i in range(1, E + 1):
                if tx[i] > 0.0:
                    p *= binom.pmf(sent[i], src[i], tx[i])
            if p == 0.0:
                continue
            if config.decoding_mode is DecodingMode.NO_CAPTURE:
                w = {b: (1.0 - singleton_error_prob(b, config.channel)) if sum(sent) == 0 else 0.0 for b in levels}
            else:
                w = {b: sic_success(b, sent, config.channel) for b in levels}
            if not any(w.values()):
                continue
            resets = sum(sent)
            for dst, q in idle_moves(tuple(a - b for a, b in zip(src, sent))).items():
                col = index[(dst[0] + resets,) + dst[1:]]
                for b in levels:
                    out[b, row, col] += p * q * w[b]
    return out


def build_ancillary_chain(
    config: SystemConfig,
    policy,
    *,
    state_cap: int = DEFAULT_STATE_CAP,
    coupling: str = "product",
    **success_kwargs,
) -> IndexedChain:
    """Assemble the ancillary chain for ``config`` and ``policy``.

    ``coupling="product"`` weights every transition by the delivery
    probability given the previous profile times an independent profile
    move. ``"joint"`` accounts for the dependence between the two: the
    other devices that transmit are exactly those whose batteries reset.
    The joint version enumerates transmit counts per profile and is only
    practical for small populations.

    Raises :class:`StateSpaceTooLarge` when the unpruned state count
    exceeds ``state_cap``. Extra keyword arguments go to the per-profile
    delivery probability functions.
    """
    if coupling not in ("product", "joint"):
        raise ValueError(f"unknown coupling {coupling!r}")
    policy = TransmissionPolicy.of(policy)
    size = state_space_size(config.U, config.E)
    if size > state_cap:
        raise StateSpaceTooLarge(
            f"exact chain needs {size} states (U={config.U}, E={config.E}); cap is {state_cap}"
        )
    E, alpha, eta = config.E, config.alpha, config.eta
    m1 = m1_transition_matrix(config, policy)
    profiles = tuple(enumerate_profiles(config.U - 1, E))
    prof_mat = profile_transition_matrix(profiles, m1)
    w = _success_table(config, policy, profiles, **success_kwargs)
    n = len(profiles)
    tx = alpha * policy.full()
    if coupling == "joint":
        joint = _joint_success_blocks(config, policy, profiles)

    Q = np.zeros(((E + 1) * n, (E + 1) * n))
    to_success = np.zeros(((E + 1) * n, n))
    for src in range(E + 1):
        rows = slice(src * n, (src + 1) * n)
        a = tx[src]
        idle = 1.0 - a
        fail_reset = a * (1.0 - w[src])  # transmitted but not decoded
        success = a * w[src]
        # per-source-profile weights for each destination battery level
        dest = {}
        if src < E:
            dest[src] = np.full(n, (1.0 - eta) * idle)
            dest[src + 1] = np.full(n, eta * idle)
        else:
            dest[src] = np.full(n, idle)
        if coupling == "joint":
            for dst, weight in dest.items():
                Q[rows, dst * n : (dst + 1) * n] = weight[:, None] * prof_mat
            Q[rows, 0:n] += a * np.clip(prof_mat - joint[src], 0.0, None)
            to_success[rows] = a * joint[src]
            continue
        dest[0] = dest.get(0, np.zeros(n)) + fail_reset
        for dst, weight in dest.items():
            Q[rows, dst * n : (dst + 1) * n] = weight[:, None] * prof_mat
        to_success[rows] = success[:, None] * prof_mat
    r = to_success.sum(axis=1)

    from_success = np.zeros((n, (E + 1) * n))
    from_success[:, 0:n] = (1.0 - eta) * prof_mat
    from_success[:, n : 2 * n] += eta * prof_mat

    return IndexedChain(config, policy, profiles, prof_mat, w, Q, r, to_success, from_success)


def initial_state_dist(chain: IndexedChain, *, weighting: str = "stationary") -> np.ndarray:
    """Distribution of the state at the end of the first slot after a refresh.

    Supported on ``(F, 0, .)`` and ``(F, 1, .)``; returned over the
    failure-state index. ``weighting`` selects how the profile at the
    refresh instant is distributed:

    * ``"stationary"``: the long-run profile distribution seen at refresh
      instants (stationary law of the full chain restricted to success states);
    * ``"uniform"``: every profile equally weighted before the push forward,
      i.e. the outgoing transition mass of all success states summed as is.
    """
    n = chain.n_profiles
    if weighting == "uniform":
        weights = np.ones(n)
    elif weighting == "stationary":
        weights = refresh_profile_distribution(chain)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    mass = weights @ chain.from_success
    total = mass.sum()
    if total <= 0:
        raise NoRefreshError("no refresh state carries probability")
    return mass / total


def refresh_profile_distribution(chain: IndexedChain) -> np.ndarray:
    """Profile distribution at refresh instants.

    Stationary law of the embedded refresh-to-refresh chain on profiles:
    from a refresh with profile ``k`` the next refresh happens with profile
    ``k'`` with probability ``[from_success (I - Q)^-1 to_success]_{k k'}``.
    """
    a = np.eye(chain.n_fail) - chain.Q
    try:
        absorb = np.linalg.solve(a, chain.to_success)
    except np.linalg.LinAlgError as exc:
        raise NoRefreshError("the age never refreshes under this policy") from exc
    embedded = chain.from_success @ absorb
    n = chain.n_profiles
    sys = embedded.T - np.eye(n)
    sys[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    dist = np.linalg.solve(sys, rhs)
    dist = np.clip(dist, 0.0, None)
    return dist / dist.sum()


def inter_refresh_moments_exact(chain: IndexedChain, *, weighting: str = "stationary") -> tuple[float, float]:
    """``(E[Y], E[Y^2])`` by first-step analysis over the failure states.

    ``e = (I - Q)^-1 (1 + r)`` and ``e2 = (I - Q)^-1 (-1 + 2e + r)`` give
    the conditional moments given the first post-refresh state.
    """
    if not np.any(chain.r > 0):
        raise NoRefreshError("the age never refreshes under this policy")
    ones = np.ones(chain.n_fail)
    try:
        lu = lu_factor(np.eye(chain.n_fail) - chain.Q, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NoRefreshError("the age never refreshes under this policy") from exc
    e = lu_solve(lu, ones + chain.r)
    e2 = lu_solve(lu, -ones + 2.0 * e + chain.r)
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(e2))):
        raise NoRefreshError("the age never refreshes under this policy")
    start = initial_state_dist(chain, weighting=weighting)
    return float(start @ e), float(start @ e2)


def exact_avg_aoi(config: SystemConfig, policy, *, weighting: str = "stationary", **chain_kwargs) -> float:
    """Exact average age ``1 + E[Y^2] / (2 E[Y])``."""
    chain = build_ancillary_chain(config, policy, **chain_kwargs)
    mean, second = inter_refresh_moments_exact(chain, weighting=weighting)
    return 1.0 + second / (2.0 * mean)


def exact_avp(chain: IndexedChain, theta: int, *, weighting: str = "stationary") -> float:
    """Exact age-violation probability ``E[(Y - theta + 1)^+] / E[Y]``.

    With ``t = (I - Q)^-1 1`` the expected remaining failure run, the first
    slot after a refresh gives ``P{Y >= y} = start Q^(y-2) 1`` for ``y >= 2``,
    so the mean excess is ``start Q^(theta-2) t``.
    """
    theta = int(theta)
    if theta < 1:
        raise ValueError("theta must be at least 1")
    if theta == 1:
        return 1.0
    mean, _ = inter_refresh_moments_exact(chain, weighting=weighting)
    lu = lu_factor(np.eye(chain.n_fail) - chain.Q)
    t = lu_solve(lu, np.ones(chain.n_fail))
    vec = initial_state_dist(chain, weighting=weighting)
    for _ in range(theta - 2):
        vec = vec @ chain.Q
    excess = float(vec @ t)
    return min(max(excess / mean, 0.0), 1.0)
