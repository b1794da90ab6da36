import numpy as np
import pytest

from aoi_harvest.approx import evaluate
from aoi_harvest.model import SystemConfig, TransmissionPolicy
from aoi_harvest.optimizer import (
    Baseline,
    Metric,
    Objective,
    OptimizerOptions,
    baseline_policy,
    multistart_minimize,
    nelder_mead,
    optimize_policy,
)

FAST = OptimizerOptions(max_evaluations=300, restarts=3)


class TestNelderMead:
    def test_interior_minimum(self):
        res = nelder_mead(lambda x: float((x[0] - 0.3) ** 2), [0.9])
        assert res.x[0] == pytest.approx(0.3, abs=1e-4)
        assert res.converged

    def test_minimum_outside_box_is_clipped(self):
        res = nelder_mead(lambda x: float((x[0] - 1.5) ** 2), [0.2])
        assert res.x[0] == pytest.approx(1.0, abs=1e-6)

    def test_shifted_sphere(self):
        shift = np.linspace(0.15, 0.85, 8)
        opts = OptimizerOptions(max_evaluations=20_000, restarts=2, xatol=1e-7, fatol=1e-14)
        best, _ = multistart_minimize(lambda x: float(np.sum((x - shift) ** 2)), 8, opts)
        np.testing.assert_allclose(best.x, shift, atol=1e-3)

    def test_vertices_stay_in_box(self):
        seen = []

        def f(x):
            seen.append(x.copy())
            return float(np.sum((x - 2.0) ** 2))

        nelder_mead(f, [0.5, 0.5, 0.5])
        seen = np.array(seen)
        assert seen.min() >= 0.0 and seen.max() <= 1.0

    def test_budget_flag(self):
        res = nelder_mead(lambda x: float(np.sum((x - 0.4) ** 2)), np.zeros(6), OptimizerOptions(max_evaluations=10))
        assert not res.converged
        assert res.evaluations <= 12

    def test_options_validation(self):
        with pytest.raises(ValueError):
            OptimizerOptions(restarts=0)
        with pytest.raises(ValueError):
            OptimizerOptions(simplex_scale=2.0)


class TestBaselines:
    def test_shapes(self):
        assert baseline_policy(Baseline.FULL_BATTERY_ONLY, 3).probs == (0.0, 0.0, 1.0)
        assert baseline_policy("always-transmit", 3).probs == (1.0, 1.0, 1.0)

    def test_full_battery_only_unaffected_by_capture(self, reference_channel):
        base = SystemConfig(1000, 8, 1.5 / 1000, 0.005, reference_channel)
        policy = baseline_policy(Baseline.FULL_BATTERY_ONLY, 8)
        a = evaluate(base, policy, 1000)
        b = evaluate(base.replace(decoding_mode="no-capture"), policy, 1000)
        assert a.avg_aoi == pytest.approx(b.avg_aoi, rel=1e-3)
        assert a.throughput == pytest.approx(b.throughput, rel=1e-3)


class TestObjective:
    def test_metric_parsing(self):
        assert Metric.parse("avg_aoi") is Metric.AVG_AOI
        with pytest.raises(ValueError):
            Metric.parse("latency")
        with pytest.raises(ValueError):
            Objective("avp", theta=0)
        with pytest.raises(ValueError):
            Objective("avp", backend="oracle")

    def test_silent_policy_gets_worst_value(self, reference_channel):
        c = SystemConfig(10, 2, 0.1, 0.1, reference_channel)
        assert Objective("avg-aoi").value(c, (0.0, 0.0)) == np.inf
        assert Objective("avp").value(c, (0.0, 0.0)) == 1.0
        assert Objective("throughput").value(c, (0.0, 0.0)) == 0.0

    def test_simulation_backend(self, reference_channel):
        c = SystemConfig(5, 2, 0.1, 0.1, reference_channel)
        obj = Objective("throughput", backend="simulation", sim_slots=20_000)
        assert obj.value(c, (1.0, 1.0)) == obj.value(c, (1.0, 1.0)) > 0


class TestOptimizePolicy:
    @pytest.mark.parametrize("metric", ["avg-aoi", "avp", "throughput"])
    def test_single_level_matches_grid(self, metric, reference_channel):
        c = SystemConfig(20, 1, 0.05, 0.1, reference_channel)
        obj = Objective(metric, theta=60)
        res = optimize_policy(c, obj, FAST)
        grid = np.linspace(0, 1, 1001)
        values = np.array([obj.loss(c, (p,)) for p in grid])
        sign = -1 if obj.maximize else 1
        assert sign * res.value <= values.min() + 1e-9
        assert abs(res.policy.probs[0] - grid[np.argmin(values)]) <= 2e-3

    def test_threshold_structure_without_capture(self, reference_channel):
        c = SystemConfig(1000, 8, 2.1 / 1000, 0.005, reference_channel, "no-capture")
        res = optimize_policy(c, Objective("avg-aoi"), OptimizerOptions(restarts=3))
        p = np.array(res.policy.probs)
        assert np.all(p[:2] < 0.1) and np.all(p[-4:] > 0.9)

    def test_never_worse_than_seeds(self, reference_channel):
        c = SystemConfig(50, 3, 0.02, 0.05, reference_channel, "no-capture")
        for metric in Metric:
            obj = Objective(metric, theta=200)
            res = optimize_policy(c, obj, FAST)
            for _, value in res.starts:
                assert (res.value >= value) if obj.maximize else (res.value <= value)
            assert all(0.0 <= v <= 1.0 for v in res.policy.probs)

    def test_more_restarts_never_hurt(self, reference_channel):
        c = SystemConfig(50, 3, 0.02, 0.05, reference_channel, "no-capture")
        obj = Objective("avg-aoi")
        values = [optimize_policy(c, obj, OptimizerOptions(max_evaluations=100, restarts=k)).value for k in (1, 2, 3, 4)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_deterministic(self, reference_channel):
        c = SystemConfig(50, 3, 0.02, 0.05, reference_channel)
        a = optimize_policy(c, Objective("avp", theta=200), FAST)
        b = optimize_policy(c, Objective("avp", theta=200), FAST)
        assert a.policy == b.policy and a.value == b.value
        assert isinstance(a.policy, TransmissionPolicy)
