import itertools
import math

import numpy as np
import pytest

from aoi_harvest.errors import ConfigError, DegenerateChainError
from aoi_harvest.model import (
    SystemConfig,
    TransmissionPolicy,
    battery_steady_state,
    check_stochastic,
    enumerate_profiles,
    m1_transition_matrix,
    multinomial_pmf,
    profile_transition_matrix,
    profile_transition_prob,
)


def cfg(U=1, E=1, alpha=0.2, eta=0.1, **kw):
    return SystemConfig(U, E, alpha, eta, **kw)


def power_iteration(m, steps=200_000, tol=1e-15):
    v = np.full(m.shape[0], 1.0 / m.shape[0])
    for _ in range(steps):
        nxt = v @ m
        if np.max(np.abs(nxt - v)) < tol:
            return nxt
        v = nxt
    return v


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs, field",
        [
            (dict(alpha=1.2), "update_prob"),
            (dict(eta=-0.1), "harvest_prob"),
            (dict(U=0), "device_count"),
            (dict(E=0), "battery_capacity"),
        ],
    )
    def test_invalid_values_name_the_field(self, kwargs, field):
        with pytest.raises(ConfigError) as err:
            cfg(**kwargs)
        assert err.value.field == field

    def test_policy_rejects_out_of_range(self):
        with pytest.raises(ConfigError):
            TransmissionPolicy((0.5, 1.5))

    def test_policy_length_must_match_capacity(self):
        with pytest.raises(ConfigError):
            m1_transition_matrix(cfg(E=2), (1.0,))

    def test_full_prepends_zero_level(self):
        assert TransmissionPolicy((0.3, 1.0)).full().tolist() == [0.0, 0.3, 1.0]


class TestBatteryChain:
    def test_single_level_example(self):
        m = m1_transition_matrix(cfg(alpha=0.2, eta=0.1), (1.0,))
        np.testing.assert_allclose(m, [[0.9, 0.1], [0.2, 0.8]], atol=1e-15)

    def test_two_level_row(self):
        m = m1_transition_matrix(cfg(E=2, alpha=0.5, eta=0.05), (1.0, 1.0))
        np.testing.assert_allclose(m[1], [0.5, 0.475, 0.025], atol=1e-15)

    @pytest.mark.parametrize("E", [1, 2, 5])
    def test_no_updates_fill_the_battery(self, E):
        m = m1_transition_matrix(cfg(E=E, alpha=0.0, eta=0.3), np.ones(E))
        assert m[E, E] == 1.0
        nu = battery_steady_state(m)
        np.testing.assert_allclose(nu, np.eye(E + 1)[E], atol=1e-14)

    def test_rows_are_stochastic(self, rng):
        for _ in range(50):
            E = int(rng.integers(1, 9))
            m = m1_transition_matrix(cfg(E=E, alpha=rng.random(), eta=rng.random()), rng.random(E))
            check_stochastic(m)

    def test_two_state_balance(self):
        alpha, eta = 0.3, 0.1
        nu = battery_steady_state(m1_transition_matrix(cfg(alpha=alpha, eta=eta), (1.0,)))
        np.testing.assert_allclose(nu, [alpha / (alpha + eta), eta / (alpha + eta)], rtol=1e-14)

    def test_matches_power_iteration(self, rng):
        for _ in range(20):
            E = int(rng.integers(1, 6))
            m = m1_transition_matrix(cfg(E=E, alpha=rng.uniform(0.05, 1), eta=rng.uniform(0.05, 1)), rng.random(E))
            np.testing.assert_allclose(battery_steady_state(m), power_iteration(m), atol=1e-10)

    def test_no_harvest_is_degenerate(self):
        with pytest.raises(DegenerateChainError):
            battery_steady_state(m1_transition_matrix(cfg(eta=0.0), (1.0,)))

    def test_rejects_non_stochastic(self):
        with pytest.raises(ValueError):
            battery_steady_state(np.array([[0.5, 0.4], [0.2, 0.8]]))


class TestProfiles:
    @pytest.mark.parametrize("n, E, size", [(1, 1, 2), (29, 2, 465), (2, 2, 6), (0, 3, 1)])
    def test_cardinality(self, n, E, size):
        profiles = enumerate_profiles(n, E)
        assert len(profiles) == size == math.comb(n + E, E)
        assert len(set(profiles)) == size
        assert all(sum(p) == n and len(p) == E + 1 for p in profiles)

    def test_order_is_colex(self):
        assert enumerate_profiles(1, 1) == [(1, 0), (0, 1)]
        profiles = enumerate_profiles(3, 2)
        assert profiles == sorted(profiles, key=lambda p: p[::-1])
        assert profiles[0] == (3, 0, 0) and profiles[-1] == (0, 0, 3)

    def test_single_device_reduces_to_battery_chain(self):
        m = m1_transition_matrix(cfg(E=2, alpha=0.4, eta=0.3), (0.5, 1.0))
        for j, k in itertools.product(range(3), repeat=2):
            src = tuple(int(i == j) for i in range(3))
            dst = tuple(int(i == k) for i in range(3))
            assert profile_transition_prob(src, dst, m) == pytest.approx(m[j, k], abs=1e-15)

    def test_rows_sum_to_one(self):
        m = m1_transition_matrix(cfg(E=3, alpha=0.4, eta=0.3), (0.2, 0.7, 1.0))
        profiles = enumerate_profiles(4, 3)
        for src in profiles:
            assert sum(profile_transition_prob(src, dst, m) for dst in profiles) == pytest.approx(1.0, abs=1e-12)

    def test_matrix_builder_agrees_with_flow_enumeration(self, rng):
        for U1, E in [(3, 1), (4, 2), (3, 3)]:
            m = m1_transition_matrix(cfg(E=E, alpha=rng.random(), eta=rng.random()), rng.random(E))
            profiles = enumerate_profiles(U1, E)
            mat = profile_transition_matrix(profiles, m)
            check_stochastic(mat)
            for a, src in enumerate(profiles):
                for b, dst in enumerate(profiles):
                    assert mat[a, b] == pytest.approx(profile_transition_prob(src, dst, m), abs=1e-14)

    def test_two_devices_match_joint_chain(self):
        m = m1_transition_matrix(cfg(alpha=0.3, eta=0.2), (1.0,))
        joint = np.kron(m, m)  # states (s1, s2) in row-major order
        states = list(itertools.product(range(2), repeat=2))

        def counts(state):
            return tuple(state.count(level) for level in range(2))

        for i, src in enumerate(states):
            collapsed = {}
            for j, dst in enumerate(states):
                collapsed[counts(dst)] = collapsed.get(counts(dst), 0.0) + joint[i, j]
            for dst, p in collapsed.items():
                assert profile_transition_prob(counts(src), dst, m) == pytest.approx(p, abs=1e-15)

    def test_inconsistent_totals(self):
        m = m1_transition_matrix(cfg(), (1.0,))
        with pytest.raises(ValueError):
            profile_transition_prob((1, 0), (1, 1), m)

    @pytest.mark.parametrize("U1, E", [(1, 1), (2, 2), (3, 2), (3, 1)])
    def test_stationary_profile_law_is_multinomial(self, U1, E):
        config = cfg(E=E, alpha=0.35, eta=0.25)
        policy = np.linspace(0.4, 1.0, E)
        m = m1_transition_matrix(config, policy)
        nu = battery_steady_state(m)
        profiles = enumerate_profiles(U1, E)
        stat = power_iteration(profile_transition_matrix(profiles, m))
        expected = [multinomial_pmf(p, nu) for p in profiles]
        np.testing.assert_allclose(stat, expected, atol=1e-8)
