"""Randomised invariants, kept fast enough to run as one suite in well under a minute."""

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from aoi_harvest.approx import avp, build_phase_type
from aoi_harvest.delivery import (
    ChannelParams,
    avg_success_prob,
    capture_error_prob,
    sic_success,
    success_prob_capture,
    success_prob_no_capture,
)
from aoi_harvest.model import (
    SystemConfig,
    battery_steady_state,
    check_stochastic,
    enumerate_profiles,
    m1_transition_matrix,
    profile_transition_matrix,
)
from aoi_harvest.simulator import SimParams, _run_block, simulate

PROFILE = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
prob = st.floats(0.0, 1.0)
pos_prob = st.floats(0.01, 1.0)
channel = st.builds(
    ChannelParams.from_db,
    st.floats(-35.0, -10.0),
    slot_length=st.integers(50, 500),
    rate=st.floats(0.2, 1.5),
)


@st.composite
def system(draw, max_u=6, max_e=4, min_eta=0.01):
    E = draw(st.integers(1, max_e))
    config = SystemConfig(
        draw(st.integers(1, max_u)), E, draw(prob), draw(st.floats(min_eta, 1.0)), draw(channel),
        draw(st.sampled_from(["capture", "no-capture"])),
    )
    policy = np.array(draw(st.lists(prob, min_size=E, max_size=E)))
    return config, policy


@PROFILE
@given(system())
def test_battery_and_profile_matrices_are_stochastic(case):
    config, policy = case
    m1 = m1_transition_matrix(config, policy)
    check_stochastic(m1)
    nu = battery_steady_state(m1)
    assert np.all(nu >= 0) and abs(nu.sum() - 1) < 1e-12
    np.testing.assert_allclose(nu @ m1, nu, atol=1e-10)
    if config.U <= 4 and config.E <= 3:
        check_stochastic(profile_transition_matrix(enumerate_profiles(config.U - 1, config.E), m1), tol=1e-10)


@PROFILE
@given(system(), st.data())
def test_delivery_probabilities_in_range(case, data):
    config, policy = case
    nu = battery_steady_state(m1_transition_matrix(config, policy))
    profile = data.draw(st.sampled_from(enumerate_profiles(config.U - 1, config.E)))
    for b in range(1, config.E + 1):
        for value in (
            success_prob_no_capture(b, profile, policy, config.alpha, config.channel),
            success_prob_capture(b, profile, policy, config.alpha, config.channel),
            avg_success_prob(b, nu, config.U, policy, config.alpha, config.channel, config.decoding_mode),
        ):
            assert -1e-15 <= value <= 1 + 1e-12


@PROFILE
@given(channel, st.integers(1, 10), st.lists(st.integers(0, 6), min_size=4, max_size=11), st.data())
def test_more_interferers_never_lower_error(ch, b, counts, data):
    counts = [0] + counts[1:]
    level = data.draw(st.integers(1, len(counts) - 1))
    more = list(counts)
    more[level] += 1
    assert capture_error_prob(b, more, ch) >= capture_error_prob(b, counts, ch)


@PROFILE
@given(channel, st.lists(st.integers(0, 4), min_size=3, max_size=6), st.data())
def test_extra_weaker_transmitter_never_helps(ch, counts, data):
    counts = [0] + counts[1:]
    E = len(counts) - 1
    b = data.draw(st.integers(1, E))
    level = data.draw(st.integers(1, b))
    more = list(counts)
    more[level] += 1
    assert sic_success(b, more, ch) <= sic_success(b, counts, ch) + 1e-15


@PROFILE
@given(
    st.integers(1, 4),
    st.floats(0.05, 1.0),
    st.floats(0.05, 1.0),
    st.lists(st.floats(0.05, 1.0), min_size=8, max_size=8),
    st.integers(1, 300),
    st.integers(1, 300),
)
def test_violation_probability_monotone_in_threshold(E, alpha, eta, values, t1, t2):
    config = SystemConfig(1, E, alpha, eta)
    model = build_phase_type(config, values[:E], values[4 : 4 + E])
    lo, hi = sorted((t1, t2))
    assert 0.0 <= avp(model, hi) <= avp(model, lo) <= 1.0


@settings(max_examples=25, deadline=None)
@given(system(max_u=8), st.integers(0, 2**32 - 1))
def test_simulator_battery_invariants(case, seed):
    config, policy = case
    U, E = config.U, config.E
    rng = np.random.default_rng(seed)
    battery = rng.integers(0, E + 1, size=U).astype(np.int64)
    age = np.zeros(U, dtype=np.int64)
    pi = np.concatenate(([0.0], policy))
    ch = config.channel
    for s in range(200):
        u = rng.random((U, 1, 4))
        before = battery.copy()
        _run_block(
            u, battery, age, np.zeros(U, dtype=np.bool_), s, 0, pi, config.alpha, config.eta, E,
            config.decoding_mode.value == "capture", ch.slot_length, ch.rate, ch.noise_power, ch.ideal,
            10, np.ones(U, dtype=np.bool_), 10**9, np.zeros(1), np.zeros(1), np.zeros(1),
            np.zeros(8, dtype=np.int64), np.zeros(3), np.zeros((0, 2), dtype=np.int64),
        )
        assert np.all((battery >= 0) & (battery <= E))
        sent = (before > 0) & (u[:, 0, 0] < config.alpha) & (u[:, 0, 1] < pi[before])
        assert np.all(battery[sent] == 0)
        step = battery[~sent] - before[~sent]
        assert np.all((step == 0) | (step == 1))
        assert np.all(battery[~sent & (before == E)] == E)


@settings(max_examples=10, deadline=None)
@given(system(max_u=6, min_eta=0.05), st.integers(0, 2**63 - 1))
def test_simulation_seed_determinism(case, seed):
    config, policy = case
    params = SimParams(5_000, seed=seed, warmup_slots=500, theta=20, batches=10)
    a = simulate(config, policy, params)
    b = simulate(config, policy, params)
    assert (a.avg_aoi, a.avp, a.throughput) == (b.avg_aoi, b.avp, b.throughput)
    np.testing.assert_array_equal(a.refresh_hist, b.refresh_hist)
