"""Slot-level Monte-Carlo simulation of the full protocol.

Every slot, each device in turn draws four uniforms from its own random
stream, always in this order: update arrival, transmit decision, harvest,
decoding outcome. Streams are spawned per device from the run seed
(counter-based Philox generators), so a run is reproducible bit for bit.

The age of a device is tracked as the continuous sawtooth: it equals 1
right after a delivery and grows by one per slot. Per slot the simulator
accumulates the slot-average of the sawtooth and whether it stays above
``theta`` during the slot.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np

from .delivery import ChannelParams, DecodingMode, raw_error_prob
from .model import SystemConfig, TransmissionPolicy

DRAWS_PER_SLOT = 4
BLOCK_BUDGET = 2_000_000  # device-slots of random draws held in memory at once

_eps = numba.njit(cache=True)(raw_error_prob)


@dataclass(frozen=True)
class SimParams:
    total_slots: int
    seed: int = 0
    warmup_slots: int = 10_000
    theta: int = 1000
    tracked_devices: Sequence[int] | None = None
    batches: int = 100
    hist_bins: int = 100_000
    trace_path: str | None = None

    def __post_init__(self):
        if not (self.total_slots > self.warmup_slots >= 0):
            raise ValueError("need total_slots > warmup_slots >= 0")
        if self.theta < 1:
            raise ValueError("theta must be at least 1")
        if self.batches < 2 or self.total_slots - self.warmup_slots < self.batches:
            raise ValueError("need at least two batches and one slot per batch")


@dataclass
class SimResult:
    avg_aoi: float
    avg_aoi_se: float
    avp: float
    avp_se: float
    throughput: float
    throughput_se: float
    mean_y: float
    mean_y_se: float
    second_y: float
    refresh_count: int
    refresh_hist: np.ndarray = field(repr=False)
    slots: int = 0
    seed: int = 0

    def y_pmf(self) -> np.ndarray:
        """Empirical ``P{Y = y}`` indexed by ``y`` (last bin collects overflow)."""
        return self.refresh_hist / max(self.refresh_count, 1)


@numba.njit(cache=True)
def _decode(energies, uniforms, capture, E, n, rate, noise, ideal, decoded):
    """Mark ``decoded[k]`` for every packet ``k`` recovered in one slot."""
    m = energies.shape[0]
    for k in range(m):
        decoded[k] = False
    if m == 0:
        return
    if not capture:
        if m == 1:
            eps = _eps(energies[0], 0.0, 0.0, n, rate, noise, ideal)
            decoded[0] = uniforms[0] < 1.0 - eps
        return
    # power sums of all packets at levels <= current level
    s1 = 0.0
    s2 = 0.0
    for k in range(m):
        s1 += energies[k]
        s2 += energies[k] * energies[k]
    for j in range(E, 0, -1):
        present = 0
        failed = False
        for k in range(m):
            if energies[k] == j:
                present += 1
                eps = _eps(j, s1 - j, s2 - j * j, n, rate, noise, ideal)
                if uniforms[k] < 1.0 - eps:
                    decoded[k] = True
                else:
                    failed = True
        if failed:
            return
        s1 -= present * j
        s2 -= present * j * j


@numba.njit(cache=True)
def _run_block(
    u, battery, age, ever_fresh, slot0, warmup, pi, alpha, eta, E, capture, n, rate, noise, ideal,
    theta, tracked, batch_len, batch_age, batch_viol, batch_thr, hist, y_stats, trace,
):
    U = battery.shape[0]
    n_slots = u.shape[1]
    energies = np.empty(U, dtype=np.int64)
    owners = np.empty(U, dtype=np.int64)
    uniforms = np.empty(U)
    decoded = np.zeros(U, dtype=np.bool_)
    n_tracked = 0
    for d in range(U):
        if tracked[d]:
            n_tracked += 1
    nbins = hist.shape[0]
    for s in range(n_slots):
        slot = slot0 + s
        m = 0
        for d in range(U):
            b = battery[d]
            arrival = u[d, s, 0] < alpha
            if b > 0 and arrival and u[d, s, 1] < pi[b]:
                energies[m] = b
                owners[m] = d
                uniforms[m] = u[d, s, 3]
                m += 1
            elif b < E and u[d, s, 2] < eta:
                battery[d] = b + 1
        _decode(energies[:m], uniforms[:m], capture, E, n, rate, noise, ideal, decoded)
        measured = slot >= warmup
        batch = (slot - warmup) // batch_len if measured else -1
        n_dec = 0
        for k in range(m):
            battery[owners[k]] = 0
        if measured:
            area = 0.0
            viol = 0
            for d in range(U):
                a = age[d] + 1
                age[d] = a
                if tracked[d]:
                    area += a + 0.5
                    if a >= theta:
                        viol += 1
        else:
            for d in range(U):
                age[d] += 1
        for k in range(m):
            if decoded[k]:
                n_dec += 1
                d = owners[k]
                if measured and tracked[d] and ever_fresh[d]:
                    y = age[d]
                    hist[min(y, nbins - 1)] += 1
                    y_stats[0] += 1.0
                    y_stats[1] += y
                    y_stats[2] += y * y
                if measured:
                    ever_fresh[d] = True
                age[d] = 0
        if measured and batch < batch_age.shape[0]:
            batch_age[batch] += area / n_tracked
            batch_viol[batch] += viol / n_tracked
            batch_thr[batch] += n_dec
        if trace.shape[0] > 0:
            trace[s, 0] = m
            trace[s, 1] = n_dec


def _device_streams(seed: int, U: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(U)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def decode_slot(
    transmissions: Iterable[tuple[int, int]],
    mode: DecodingMode | str,
    ch: ChannelParams,
    rng: np.random.Generator,
    E: int | None = None,
) -> set[int]:
    """Devices whose packets are recovered in a slot.

    ``transmissions`` lists ``(device, energy)`` pairs. Without capture
    only a lone packet can be decoded. With capture, levels are processed
    from the highest energy down; each packet of a level is decoded against
    the packets of that level and below, and a failure at a level stops
    decoding of all lower levels.
    """
    mode = DecodingMode.parse(mode)
    tx = list(transmissions)
    if not tx:
        return set()
    energies = np.array([e for _, e in tx], dtype=np.int64)
    if np.any(energies < 1):
        raise ValueError("transmit energies must be at least 1")
    E = int(energies.max()) if E is None else int(E)
    uniforms = rng.random(len(tx))
    decoded = np.zeros(len(tx), dtype=np.bool_)
    _decode(
        energies, uniforms, mode is DecodingMode.CAPTURE, E,
        ch.slot_length, ch.rate, ch.noise_power, ch.ideal, decoded,
    )
    return {dev for (dev, _), ok in zip(tx, decoded) if ok}


def simulate(config: SystemConfig, policy, params: SimParams) -> SimResult:
    """Run the protocol for ``params.total_slots`` slots and time-average the metrics.

    Standard errors come from batch means over the post-warmup window.
    """
    policy = TransmissionPolicy.of(policy)
    if policy.E != config.E:
        raise ValueError(f"policy has {policy.E} levels but battery capacity is {config.E}")
    U, E = config.U, config.E
    ch = config.channel
    tracked = np.zeros(U, dtype=np.bool_)
    if params.tracked_devices is None:
        tracked[:] = True
    else:
        tracked[list(params.tracked_devices)] = True
    streams = _device_streams(params.seed, U)
    battery = np.zeros(U, dtype=np.int64)
    age = np.zeros(U, dtype=np.int64)
    ever_fresh = np.zeros(U, dtype=np.bool_)
    measured = params.total_slots - params.warmup_slots
    batch_len = measured // params.batches
    batch_age = np.zeros(params.batches)
    batch_viol = np.zeros(params.batches)
    batch_thr = np.zeros(params.batches)
    hist = np.zeros(params.hist_bins, dtype=np.int64)
    y_stats = np.zeros(3)
    pi = policy.full()
    capture = config.decoding_mode is DecodingMode.CAPTURE
    block = max(1, min(params.total_slots, BLOCK_BUDGET // U))

    trace_file = open(params.trace_path, "w", newline="") if params.trace_path else None
    writer = csv.writer(trace_file) if trace_file else None
    if writer:
        writer.writerow(["slot", "transmissions", "decoded"])
    try:
        slot0 = 0
        while slot0 < params.total_slots:
            length = min(block, params.total_slots - slot0)
            u = np.empty((U, length, DRAWS_PER_SLOT))
            for d, gen in enumerate(streams):
                u[d] = gen.random((length, DRAWS_PER_SLOT))
            trace = np.zeros((length if writer else 0, 2), dtype=np.int64)
            _run_block(
                u, battery, age, ever_fresh, slot0, params.warmup_slots, pi,
                config.alpha, config.eta, E, capture,
                ch.slot_length, ch.rate, ch.noise_power, ch.ideal,
                params.theta, tracked, batch_len, batch_age, batch_viol, batch_thr, hist, y_stats, trace,
            )
            if writer:
                for s in range(length):
                    writer.writerow([slot0 + s, int(trace[s, 0]), int(trace[s, 1])])
            slot0 += length
    finally:
        if trace_file:
            trace_file.close()

    # slots beyond batches * batch_len are dropped from the batch statistics
    batch_age /= batch_len
    batch_viol /= batch_len
    batch_thr /= batch_len

    def mean_se(values: np.ndarray) -> tuple[float, float]:
        return float(values.mean()), float(values.std(ddof=1) / math.sqrt(len(values)))

    aoi, aoi_se = mean_se(batch_age)
    viol, viol_se = mean_se(batch_viol)
    thr, thr_se = mean_se(batch_thr)
    count = int(y_stats[0])
    if count:
        mean_y = y_stats[1] / count
        second_y = y_stats[2] / count
        var = max(second_y - mean_y**2, 0.0)
        mean_y_se = math.sqrt(var / count) if count > 1 else math.nan
    else:
        mean_y = second_y = mean_y_se = math.nan
    return SimResult(
        avg_aoi=aoi,
        avg_aoi_se=aoi_se,
        avp=viol,
        avp_se=viol_se,
        throughput=thr,
        throughput_se=thr_se,
        mean_y=float(mean_y),
        mean_y_se=float(mean_y_se),
        second_y=float(second_y),
        refresh_count=count,
        refresh_hist=hist,
        slots=params.total_slots,
        seed=params.seed,
    )


def write_histogram(result: SimResult, path: str) -> None:
    """Refresh-interval histogram as ``y,count`` rows (nonzero bins only)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "count"])
        for y in np.nonzero(result.refresh_hist)[0]:
            writer.writerow([int(y), int(result.refresh_hist[y])])
