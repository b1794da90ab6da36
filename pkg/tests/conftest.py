import numpy as np
import pytest

from aoi_harvest import ChannelParams, SystemConfig

FIG4 = dict(device_count=30, battery_capacity=2, harvest_prob=0.05)


@pytest.fixture
def reference_channel():
    return ChannelParams.from_db(-20.0, slot_length=100, rate=0.8)


@pytest.fixture
def ideal_channel():
    return ChannelParams(ideal=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fig4_config(u_alpha: float, mode: str = "capture") -> SystemConfig:
    return SystemConfig(update_prob=u_alpha / 30, channel=ChannelParams.from_db(-20.0), decoding_mode=mode, **FIG4)
