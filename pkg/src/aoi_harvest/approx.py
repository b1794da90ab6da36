"""Phase-type approximation of the inter-refresh time.

Treating the other devices' battery profile as independent across slots
turns the tagged device's refresh process into a small terminating chain
over battery levels ``0..E``. State 0 doubles as the start state: right
after a refresh the battery is empty and behaves exactly like a failed
empty-battery slot. Absorption is a successful delivery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NoRefreshError

PMF_TAIL_TOL = 1e-12
MAX_PMF_TERMS = 10_000_000


@dataclass(frozen=True)
class PhaseTypeModel:
    """Transient matrix ``T`` and absorption vector ``t0``; start state is index 0."""

    T: np.ndarray
    t0: np.ndarray

    def __post_init__(self):
        T = np.asarray(self.T, dtype=float)
        t0 = np.asarray(self.t0, dtype=float)
        if T.ndim != 2 or T.shape[0] != T.shape[1] or t0.shape != (T.shape[0],):
            raise ValueError("T must be square and t0 must match its dimension")
        T.setflags(write=False)
        t0.setflags(write=False)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "t0", t0)

    @property
    def size(self) -> int:
        return self.T.shape[0]

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.T))))

    def is_terminating(self) -> bool:
        """True when absorption is certain from the start state."""
        try:
            first, _ = _solve_pair(self)
        except NoRefreshError:
            return False
        return bool(np.isfinite(first[0]))


def build_phase_type(config, policy, wbar: Sequence[float]) -> PhaseTypeModel:
    """Assemble ``T`` and ``t0`` from the policy and per-level success probabilities.

    ``wbar`` holds ``w_bar_1 .. w_bar_E``; a length ``E + 1`` vector whose
    first entry is ignored is accepted too.
    """
    from .model import TransmissionPolicy

    policy = TransmissionPolicy.of(policy)
    E, alpha, eta = config.E, config.alpha, config.eta
    if policy.E != E:
        raise ValueError(f"policy has {policy.E} levels but battery capacity is {E}")
    wbar = np.asarray(wbar, dtype=float)
    if wbar.shape == (E + 1,):
        wbar = wbar[1:]
    if wbar.shape != (E,):
        raise ValueError(f"expected {E} success probabilities, got {wbar.shape}")
    if np.any(wbar < 0) or np.any(wbar > 1):
        raise ValueError("success probabilities must lie in [0, 1]")
    tx = alpha * np.asarray(policy.probs)
    T = np.zeros((E + 1, E + 1))
    t0 = np.zeros(E + 1)
    T[0, 0] = 1.0 - eta
    T[0, 1] = eta
    for b in range(1, E + 1):
        a = tx[b - 1]
        w = wbar[b - 1]
        T[b, 0] = a * (1.0 - w)
        t0[b] = a * w
        if b < E:
            T[b, b] = (1.0 - eta) * (1.0 - a)
            T[b, b + 1] = eta * (1.0 - a)
        else:
            T[b, b] = 1.0 - a
    return PhaseTypeModel(T, t0)


def _solve_pair(model: PhaseTypeModel) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``(I - T) x = 1`` and ``(I - T) z = x``."""
    a = np.eye(model.size) - model.T
    ones = np.ones(model.size)
    try:
        # singular or numerically meaningless systems mean no absorption
        if np.linalg.cond(a) > 1e14:
            raise np.linalg.LinAlgError
        x = np.linalg.solve(a, ones)
        z = np.linalg.solve(a, x)
    except np.linalg.LinAlgError as exc:
        raise NoRefreshError("the refresh chain never absorbs: no successful delivery is possible") from exc
    if not np.all(np.isfinite(x)) or x[0] <= 0:
        raise NoRefreshError("the refresh chain never absorbs: no successful delivery is possible")
    return x, z


def inter_refresh_moments(model: PhaseTypeModel) -> tuple[float, float]:
    """``(E[Y], E[Y^2])`` of the inter-refresh time."""
    x, z = _solve_pair(model)
    mean = float(x[0])
    return mean, float(2.0 * z[0] - mean)


def approx_avg_aoi(model: PhaseTypeModel) -> float:
    """Average age: one half plus the ratio of the first entries of z and x."""
    x, z = _solve_pair(model)
    return float(0.5 + z[0] / x[0])


def avg_aoi_from_moments(mean: float, second: float) -> float:
    return 1.0 + second / (2.0 * mean)


def inter_refresh_pmf(model: PhaseTypeModel, y: int) -> float:
    """``P{Y = y}``, the first entry of ``T^(y-1) t0``."""
    if y < 1:
        raise ValueError("y must be at least 1")
    vec = model.t0.copy()
    for _ in range(y - 1):
        vec = model.T @ vec
    return float(vec[0])


def inter_refresh_ccdf(model: PhaseTypeModel, y: int) -> float:
    """``P{Y >= y}``, the first entry of ``T^(y-1) 1``."""
    if y < 1:
        raise ValueError("y must be at least 1")
    vec = np.ones(model.size)
    for _ in range(y - 1):
        vec = model.T @ vec
    return float(vec[0])


def inter_refresh_pmf_table(model: PhaseTypeModel, tail_tol: float = PMF_TAIL_TOL) -> tuple[np.ndarray, float]:
    """``P{Y = y}`` for ``y = 1, 2, ...`` until ``P{Y >= y} < tail_tol``.

    Returns the table (entry ``k`` is ``P{Y = k + 1}``) and the survival
    probability left beyond it.
    """
    probs = []
    pmf_vec = model.t0.copy()
    surv_vec = np.ones(model.size)
    while surv_vec[0] >= tail_tol:
        probs.append(pmf_vec[0])
        pmf_vec = model.T @ pmf_vec
        surv_vec = model.T @ surv_vec
        if len(probs) > MAX_PMF_TERMS:
            raise NoRefreshError("inter-refresh distribution has no usable tail")
    return np.asarray(probs), float(surv_vec[0])


def _power_sums(T: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(T^m, sum_{k<m} T^k, sum_{k<m} k T^k)`` by binary splitting.

    All three accumulate nonnegative terms only, so no cancellation occurs.
    """
    size = T.shape[0]
    eye = np.eye(size)
    # accumulator for the prefix built so far
    p_acc, a_acc, b_acc, n_acc = eye, np.zeros_like(T), np.zeros_like(T), 0
    # block holding 2^i steps
    p_blk, a_blk, b_blk, n_blk = T.copy(), eye.copy(), np.zeros_like(T), 1
    while m:
        if m & 1:
            # append block after the accumulated prefix
            b_acc = b_acc + p_acc @ (b_blk + n_acc * a_blk)
            a_acc = a_acc + p_acc @ a_blk
            p_acc = p_acc @ p_blk
            n_acc += n_blk
        m >>= 1
        if m:
            b_blk = b_blk + p_blk @ (b_blk + n_blk * a_blk)
            a_blk = a_blk + p_blk @ a_blk
            p_blk = p_blk @ p_blk
            n_blk *= 2
    return p_acc, a_acc, b_acc


def avp(model: PhaseTypeModel, theta: int) -> float:
    """Probability that the age exceeds ``theta`` slots.

    ``1 - (sum_{y<theta} y P{Y=y} + (theta - 1) P{Y >= theta}) / E[Y]``,
    i.e. the mean excess ``E[(Y - theta + 1)^+] / E[Y]``, with the matrix
    power sums evaluated by repeated squaring.
    """
    theta = int(theta)
    if theta < 1:
        raise ValueError("theta must be at least 1")
    x, _ = _solve_pair(model)
    mean = x[0]
    if theta == 1:
        return 1.0
    power, plain, weighted = _power_sums(model.T, theta - 1)
    # sum_{y=1}^{theta-1} y T^(y-1) = sum_{k<theta-1} (k + 1) T^k
    head = float(((weighted + plain) @ model.t0)[0])
    tail = float(power.sum(axis=1)[0])
    value = 1.0 - (head + (theta - 1) * tail) / mean
    return float(min(max(value, 0.0), 1.0))


def avp_iterative(model: PhaseTypeModel, theta: int) -> float:
    """Same quantity as :func:`avp`, accumulated one vector product at a time."""
    theta = int(theta)
    if theta < 1:
        raise ValueError("theta must be at least 1")
    x, _ = _solve_pair(model)
    head = 0.0
    pmf_vec = model.t0.copy()
    surv_vec = np.ones(model.size)
    for y in range(1, theta):
        head += y * pmf_vec[0]
        pmf_vec = model.T @ pmf_vec
        surv_vec = model.T @ surv_vec
    value = 1.0 - (head + (theta - 1) * surv_vec[0]) / x[0]
    return float(min(max(value, 0.0), 1.0))


@dataclass(frozen=True)
class ApproxMetrics:
    avg_aoi: float
    avp: float
    throughput: float
    mean_y: float
    second_y: float
    nu: np.ndarray
    wbar: np.ndarray


def evaluate(config, policy, theta: int, **wbar_kwargs) -> ApproxMetrics:
    """Average age, age-violation probability and throughput under the approximation."""
    from .delivery import avg_success_probs, throughput
    from .model import TransmissionPolicy, battery_steady_state, m1_transition_matrix

    policy = TransmissionPolicy.of(policy)
    nu = battery_steady_state(m1_transition_matrix(config, policy))
    wbar = avg_success_probs(config, policy, nu, **wbar_kwargs)
    model = build_phase_type(config, policy, wbar)
    mean, second = inter_refresh_moments(model)
    return ApproxMetrics(
        avg_aoi=approx_avg_aoi(model),
        avp=avp(model, theta),
        throughput=throughput(config, policy, nu, wbar),
        mean_y=mean,
        second_y=second,
        nu=nu,
        wbar=wbar,
    )
