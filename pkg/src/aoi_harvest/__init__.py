"""Age of information in energy-harvesting slotted ALOHA.

Exact and approximate analysis, slot-level simulation and policy
optimisation for devices that harvest energy units into a finite battery
and spend the whole battery on each transmission.
"""

__version__ = "0.1.0"

from .approx import ApproxMetrics, PhaseTypeModel, avp, build_phase_type, evaluate, inter_refresh_moments
from .delivery import ChannelParams, DecodingMode, avg_success_probs, error_prob, throughput
from .errors import ConfigError, DegenerateChainError, NoRefreshError, StateSpaceTooLarge
from .exact import build_ancillary_chain, exact_avg_aoi, exact_avp
from .model import SystemConfig, TransmissionPolicy, battery_steady_state, m1_transition_matrix
from .optimizer import Baseline, Metric, Objective, OptimizerOptions, baseline_policy, optimize_policy
from .simulator import SimParams, SimResult, simulate

__all__ = [
    "ApproxMetrics", "Baseline", "ChannelParams", "ConfigError", "DecodingMode", "DegenerateChainError",
    "Metric", "NoRefreshError", "Objective", "OptimizerOptions", "PhaseTypeModel", "SimParams", "SimResult",
    "StateSpaceTooLarge", "SystemConfig", "TransmissionPolicy", "avg_success_probs", "avp",
    "baseline_policy", "battery_steady_state", "build_ancillary_chain", "build_phase_type", "error_prob",
    "evaluate", "exact_avg_aoi", "exact_avp", "inter_refresh_moments", "m1_transition_matrix",
    "optimize_policy", "simulate", "throughput",
]
