"""Optimizer step loop and the (alpha, theta, iota) schedule machinery.

Seven methods share one step function: plain stochastic gradient (sgd),
adam, subsampled Newton without averaging (subnewton), fully-averaged
Newton (fan), diagonally-averaged Newton with l1 or l2 averaging (dan,
dan2), and adahessian. Each iteration: the controller fixes the gradient
batch, the update policy optionally refreshes the Hessian estimate, the
method turns the batch gradient into a direction, and the iterate moves
by the scheduled step size. Runs that blow up (non-finite batch loss or
loss exceeding a fixed multiple of the starting value) are flagged as
diverged and halted rather than raising.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from numpy.typing import NDArray

from .averaging import (
    DiagAverageState,
    FullAverageState,
    HutchinsonConfig,
    UpdateFrequencyPolicy,
    hutchinson_diag,
)
from .linalg import pd_modify, spd_solve, weighted_norm_sq
from .problems import FiniteSumOracle, ProblemConstants
from .sampling import (
    GradSampleController,
    approx_norm_test,
    required_size_deterministic,
    required_size_stochastic,
)
from .trace import TraceRecord

__all__ = [
    "METHODS",
    "SECOND_ORDER_METHODS",
    "MethodSpec",
    "AlphaConstant",
    "AlphaTwoPhase",
    "AlphaStepDecay",
    "ThetaConstant",
    "ThetaLocalDet",
    "ThetaLocalStoch",
    "IotaGeometric",
    "IotaSuperDet",
    "IotaSuperStoch",
    "ScheduleSet",
    "schedule_eval",
    "eec",
    "OptState",
    "RunContext",
    "init_state",
    "step",
    "run",
]

METHODS = ("sgd", "adam", "subnewton", "fan", "dan", "dan2", "adahessian")
SECOND_ORDER_METHODS = ("subnewton", "fan", "dan", "dan2", "adahessian")
FULL_HESSIAN_DIM_LIMIT = 2048
DIVERGENCE_FACTOR = 1e6


# ---------------------------------------------------------------------------
# Method specification
# ---------------------------------------------------------------------------


@dataclass
class MethodSpec:
    """A method tag plus its hyperparameters.

    Fields not used by a method are ignored: ``mu_tilde``/``variant`` only
    matter for fan and subnewton, ``rank`` for the Hutchinson-based
    methods, ``eps`` for dan/dan2, the betas for adam/adahessian, and
    ``weights``/``decay`` for the averaging methods.
    """

    name: str
    mu_tilde: float = 1e-4
    variant: str = "plain"  # fan: "plain" (spectral modification) or "abs"
    weights: str = "uniform"  # fan/dan/dan2 averaging: "uniform" or "decaying"
    decay: float = 0.999
    rank: int = 1
    eps: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.name not in METHODS:
            raise ValueError(f"unknown method {self.name!r}; expected one of {METHODS}")
        if self.variant not in ("plain", "abs"):
            raise ValueError(f"variant must be 'plain' or 'abs', got {self.variant!r}")
        if self.weights not in ("uniform", "decaying"):
            raise ValueError(f"weights must be 'uniform' or 'decaying', got {self.weights!r}")
        if self.mu_tilde <= 0:
            raise ValueError("mu_tilde must be positive")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.eps < 0 or self.adam_eps < 0:
            raise ValueError("eps values must be nonnegative")
        for b in (self.beta1, self.beta2, self.decay):
            if not 0 < b < 1:
                raise ValueError("beta/decay parameters must lie in (0, 1)")

    @property
    def uses_full_hessian(self) -> bool:
        return self.name in ("fan", "subnewton")

    @property
    def uses_diag_hessian(self) -> bool:
        return self.name in ("dan", "dan2", "adahessian")


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlphaConstant:
    alpha: float

    def at(self, k: int) -> float:
        return self.alpha


@dataclass(frozen=True)
class AlphaTwoPhase:
    """Cautious global step switching to unit steps at ``k_switch``."""

    alpha_global: float
    k_switch: int
    alpha_local: float = 1.0

    def at(self, k: int) -> float:
        return self.alpha_local if k >= self.k_switch else self.alpha_global


@dataclass(frozen=True)
class AlphaStepDecay:
    alpha0: float
    factor: float
    milestones: tuple[int, ...]

    def at(self, k: int) -> float:
        drops = sum(1 for m in self.milestones if k >= m)
        return self.alpha0 * self.factor**drops


@dataclass(frozen=True)
class ThetaConstant:
    theta: float

    def at(self, k: int) -> float:
        return self.theta


@dataclass(frozen=True)
class ThetaLocalDet:
    """Constant before ``k_switch``, then ``theta_l / (k + 1)``."""

    theta_l: float
    k_switch: int = 0

    def at(self, k: int) -> float:
        return self.theta_l if k < self.k_switch else self.theta_l / (k + 1)


@dataclass(frozen=True)
class ThetaLocalStoch:
    """Constant before ``k_switch``, then ``theta_l / sqrt(k + 1)``."""

    theta_l: float
    k_switch: int = 0

    def at(self, k: int) -> float:
        return self.theta_l if k < self.k_switch else self.theta_l / math.sqrt(k + 1)


@dataclass(frozen=True)
class IotaGeometric:
    iota0: float
    a: float

    def __post_init__(self) -> None:
        if not 0 <= self.a < 1:
            raise ValueError("decay factor a must lie in [0, 1)")

    def at(self, k: int) -> float:
        if self.a == 0.0:
            return self.iota0 if k == 0 else 0.0
        return self.iota0 * self.a**k


class _IotaSuper:
    """Recurrence ``iota_{k+1} = iota_k * a_l / (k + 1)^power`` past the switch.

    Evaluated in log space: for ``k > k_switch`` the closed form is
    ``iota0 * a_l^m / (prod_{j=ks+1..k} j)^power`` with ``m = k - ks``,
    which underflows gracefully to zero.
    """

    power: int = 4

    def __init__(self, iota0: float, a_l: float, k_switch: int = 0):
        if not 0 <= a_l < 1:
            raise ValueError("decay factor a_l must lie in [0, 1)")
        if iota0 < 0:
            raise ValueError("iota0 must be nonnegative")
        self.iota0 = iota0
        self.a_l = a_l
        self.k_switch = k_switch

    def at(self, k: int) -> float:
        if k <= self.k_switch or self.iota0 == 0.0:
            return self.iota0
        if self.a_l == 0.0:
            return 0.0
        m = k - self.k_switch
        log_val = (
            math.log(self.iota0)
            + m * math.log(self.a_l)
            - self.power * (math.lgamma(k + 1) - math.lgamma(self.k_switch + 1))
        )
        if log_val < -745.0:  # below smallest positive float64
            return 0.0
        return math.exp(log_val)


class IotaSuperDet(_IotaSuper):
    power = 4


class IotaSuperStoch(_IotaSuper):
    power = 2


@dataclass(frozen=True)
class ScheduleSet:
    alpha: Union[AlphaConstant, AlphaTwoPhase, AlphaStepDecay]
    theta: Union[ThetaConstant, ThetaLocalDet, ThetaLocalStoch]
    iota: Union[IotaGeometric, IotaSuperDet, IotaSuperStoch]


def schedule_eval(schedules: ScheduleSet, k: int) -> tuple[float, float, float]:
    """(alpha_k, theta_k, iota_k) for iteration ``k``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    return schedules.alpha.at(k), schedules.theta.at(k), schedules.iota.at(k)


DEFAULT_SCHEDULES = ScheduleSet(
    alpha=AlphaConstant(0.1),
    theta=ThetaConstant(0.5),
    iota=IotaGeometric(0.0, 0.0),
)


def eec(epochs: float, rank: int, hessian_freq: int = 1) -> float:
    """Epoch-equivalent compute: gradients plus Hessian probes at 2x cost.

    First-order methods (rank 0) cost exactly their epochs. Otherwise the
    charge is ``(1 + 2 rank / hf) * epochs + 2 rank``, the extra constant
    covering the every-iteration updates of the first epoch.
    """
    if rank < 0:
        raise ValueError("rank must be >= 0")
    if rank == 0:
        return float(epochs)
    if hessian_freq < 1:
        raise ValueError("hessian_freq must be >= 1")
    return (1.0 + 2.0 * rank / hessian_freq) * epochs + 2.0 * rank


# ---------------------------------------------------------------------------
# State and context
# ---------------------------------------------------------------------------


@dataclass
class OptState:
    w: NDArray
    k: int = 0
    diverged: bool = False
    m: Optional[NDArray] = None
    v: Optional[DiagAverageState] = None
    avg: Optional[Union[FullAverageState, DiagAverageState]] = None
    h_current: Optional[NDArray] = None
    grad_samples: int = 0
    hess_sample_units: int = 0
    hvp_probes: int = 0
    last_s_size: int = 0
    wall_ms: float = 0.0


def init_state(method: MethodSpec, oracle: FiniteSumOracle, w0: NDArray) -> OptState:
    d = oracle.dim
    state = OptState(w=np.array(w0, dtype=float))
    decay = method.decay if method.weights == "decaying" else None
    if method.name == "fan":
        if d > FULL_HESSIAN_DIM_LIMIT:
            raise ValueError(
                f"fan assembles dense {d}x{d} Hessians; refusing d > {FULL_HESSIAN_DIM_LIMIT}"
            )
        state.avg = FullAverageState(d, decay=decay, variant=method.variant)
    elif method.name == "dan":
        state.avg = DiagAverageState(d, p=1, decay=decay)
    elif method.name == "dan2":
        state.avg = DiagAverageState(d, p=2, decay=decay)
    elif method.name == "adahessian":
        state.avg = DiagAverageState(d, p=2, decay=method.beta2)
        state.m = np.zeros(d)
    elif method.name == "adam":
        state.v = DiagAverageState(d, p=2, decay=method.beta2)
        state.m = np.zeros(d)
    elif method.name == "subnewton":
        if d > FULL_HESSIAN_DIM_LIMIT:
            raise ValueError(
                f"subnewton assembles dense {d}x{d} Hessians; refusing d > {FULL_HESSIAN_DIM_LIMIT}"
            )
    return state


@dataclass
class RunContext:
    """Everything constant over one optimizer run."""

    oracle: FiniteSumOracle
    method: MethodSpec
    controller: GradSampleController
    hess_sampler: object
    schedules: ScheduleSet = DEFAULT_SCHEDULES
    policy: UpdateFrequencyPolicy = UpdateFrequencyPolicy()
    rngs: dict = field(default_factory=dict)
    iters_per_epoch: int = 100  # expectation problems only
    trace_interval: int = 10
    a_mode: str = "identity"  # norm-test weighting: "identity" | "inverse_hessian"
    constants: Optional[ProblemConstants] = None
    divergence_factor: float = DIVERGENCE_FACTOR
    f0: Optional[float] = None

    def epoch_of(self, state: OptState) -> float:
        n = self.oracle.n_components
        if n is None:
            return state.k / self.iters_per_epoch
        return state.grad_samples / n

    def eec_of(self, state: OptState) -> float:
        n = self.oracle.n_components
        if n is None:
            n = self.iters_per_epoch * self.controller.initial_size
        return (state.grad_samples + 2.0 * state.hess_sample_units) / n


def _sample_size(sample) -> int:
    if hasattr(sample, "size") and not isinstance(sample, np.ndarray):
        return sample.size
    return len(sample)


def _update_hessian(ctx: RunContext, state: OptState) -> None:
    method = ctx.method
    oracle = ctx.oracle
    s_sample = ctx.hess_sampler.next_block(oracle, ctx.rngs.get("hessian"))
    s_size = _sample_size(s_sample)
    state.last_s_size = s_size
    if method.uses_full_hessian:
        h = oracle.hessian_sub(state.w, s_sample)
        state.hvp_probes += oracle.dim
        state.hess_sample_units += oracle.dim * s_size
        if method.name == "fan":
            state.avg.update(h)
        else:
            state.h_current = h
    else:
        config = HutchinsonConfig(rank=method.rank, rng=ctx.rngs.get("probes"))
        d_est = hutchinson_diag(
            lambda v: oracle.hvp_sub(state.w, s_sample, v), oracle.dim, config
        )
        state.hvp_probes += method.rank
        state.hess_sample_units += method.rank * s_size
        state.avg.update(d_est)


def _direction(ctx: RunContext, state: OptState, g: NDArray) -> NDArray:
    method = ctx.method
    name = method.name
    if name == "sgd":
        return g
    if name == "adam":
        state.m = method.beta1 * state.m + (1 - method.beta1) * g
        state.v.update(g)
        m_hat = state.m / (1 - method.beta1 ** (state.k + 1))
        return m_hat / (state.v.preconditioner() + method.adam_eps)
    if name == "adahessian":
        state.m = method.beta1 * state.m + (1 - method.beta1) * g
        m_hat = state.m / (1 - method.beta1 ** (state.k + 1))
        return m_hat / (state.avg.preconditioner() + method.adam_eps)
    if name in ("dan", "dan2"):
        return state.avg.precondition(g, method.eps)
    if name == "fan":
        return state.avg.precondition(g, method.mu_tilde)
    if name == "subnewton":
        h_tilde, _ = pd_modify(state.h_current, method.mu_tilde)
        return spd_solve(h_tilde, g)
    raise AssertionError(f"unhandled method {name}")


def _norm_test_weight(ctx: RunContext, state: OptState) -> Optional[NDArray]:
    """Weighting matrix for the exact norm test (None means identity)."""
    if ctx.a_mode == "identity":
        return None
    method = ctx.method
    if method.name == "fan":
        h_tilde, _ = state.avg.modified(method.mu_tilde)
        return h_tilde
    if method.name == "subnewton":
        h_tilde, _ = pd_modify(state.h_current, method.mu_tilde)
        return h_tilde
    raise ValueError(f"a_mode='inverse_hessian' requires a full-matrix method, not {method.name}")


def _run_controller(
    ctx: RunContext,
    state: OptState,
    g: NDArray,
    comps: Optional[NDArray],
    theta: float,
    iota: float,
) -> None:
    mode = ctx.controller.mode
    if mode == "approx_norm_test":
        dev = comps - g
        variance = float(np.mean(np.sum(dev * dev, axis=1)))
        g_norm_sq = float(g @ g)
        passed = approx_norm_test(comps, g, theta, iota)
        ctx.controller.record_test(passed, variance, g_norm_sq, theta, iota)
    elif mode == "exact_norm_test":
        grad_full = ctx.oracle.grad_full(state.w)
        weight = _norm_test_weight(ctx, state)
        lhs = weighted_norm_sq(g - grad_full, weight)
        rhs_norm = weighted_norm_sq(grad_full, weight)
        passed = lhs <= theta**2 * rhs_norm + iota
        ctx.controller.record_test(passed, lhs, rhs_norm, theta, iota)
    elif mode == "theoretical":
        if ctx.constants is None:
            raise ValueError("theoretical controller mode requires problem constants")
        grad_full = ctx.oracle.grad_full(state.w)
        gsq = float(grad_full @ grad_full)
        n = ctx.oracle.n_components
        if n is None:
            required = required_size_stochastic(ctx.constants, 1.0, gsq, gsq, theta, iota)
        else:
            required = required_size_deterministic(n, ctx.constants, 1.0, gsq, gsq, theta, iota)
        ctx.controller.record_required(required)


def step(ctx: RunContext, state: OptState) -> tuple[OptState, TraceRecord]:
    """One iteration; returns the mutated state and its telemetry record.

    A record describes the iterate the step started from: ``f``,
    ``grad_norm``, and ``dist_to_opt`` are evaluated at ``w_k``, while the
    counters (probes, samples, epoch-equivalent compute) include the work
    this iteration performed.
    """
    t0 = time.perf_counter()
    oracle = ctx.oracle
    x_size = ctx.controller.size(ctx.epoch_of(state))
    sample = oracle.draw_sample(ctx.rngs.get("gradient"), x_size)

    if ctx.controller.mode == "approx_norm_test":
        comps = oracle.component_grads(state.w, sample)
        g = comps.mean(axis=0)
    else:
        comps = None
        g = oracle.grad_sub(state.w, sample)
    f_batch = oracle.loss_sub(state.w, sample)
    grad_norm, dist = _snapshot(ctx, state, force_full=False)

    alpha, theta, iota = schedule_eval(ctx.schedules, state.k)

    # Blow-up guard: a batch loss a million times above the starting value
    # (with a unit floor so near-zero or negative baselines stay usable)
    # marks the run diverged and halts it.
    f0 = ctx.f0 if ctx.f0 is not None else f_batch
    threshold = f0 + ctx.divergence_factor * max(abs(f0), 1.0)
    if not math.isfinite(f_batch) or f_batch > threshold:
        state.diverged = True
    else:
        needs_hessian = ctx.method.uses_full_hessian or ctx.method.uses_diag_hessian
        if needs_hessian and ctx.policy.should_update(state.k):
            _update_hessian(ctx, state)
        p = _direction(ctx, state, g)
        if ctx.controller.adaptive:
            _run_controller(ctx, state, g, comps, theta, iota)
        w_new = state.w - alpha * p
        if not np.all(np.isfinite(w_new)):
            state.diverged = True
        else:
            state.w = w_new

    state.grad_samples += x_size
    record = TraceRecord(
        k=state.k,
        epoch=ctx.epoch_of(state),
        f=f_batch,
        grad_norm=grad_norm,
        x_size=x_size,
        s_size=state.last_s_size,
        hvp_probes=state.hvp_probes,
        eec=ctx.eec_of(state),
        wall_ms=state.wall_ms,
        dist_to_opt=dist,
    )
    state.k += 1
    state.wall_ms += (time.perf_counter() - t0) * 1e3
    return state, record


def _snapshot(ctx: RunContext, state: OptState, force_full: bool) -> tuple[Optional[float], Optional[float]]:
    grad_norm = None
    if force_full or state.k % ctx.trace_interval == 0:
        grad_norm = float(np.linalg.norm(ctx.oracle.grad_full(state.w)))
    dist = None
    opt = ctx.oracle.optimum()
    if opt is not None:
        dist = float(np.linalg.norm(state.w - opt[0]))
    return grad_norm, dist


def run(ctx: RunContext, w0: NDArray, epochs: float) -> tuple[OptState, list[TraceRecord]]:
    """Run until the epoch budget is spent (or divergence halts the loop).

    One record is emitted per iteration plus a terminal record for the
    final iterate, so a zero-epoch run yields exactly the initial record.
    """
    state = init_state(ctx.method, ctx.oracle, w0)
    if ctx.f0 is None:
        ctx.f0 = ctx.oracle.loss_full(state.w)
    records: list[TraceRecord] = []
    while ctx.epoch_of(state) < epochs and not state.diverged:
        state, record = step(ctx, state)
        records.append(record)
    final_sample = ctx.oracle.draw_sample(ctx.rngs.get("gradient"), ctx.controller.current_size)
    f_final = ctx.oracle.loss_sub(state.w, final_sample)
    grad_norm, dist = _snapshot(ctx, state, force_full=True)
    records.append(
        TraceRecord(
            k=state.k,
            epoch=ctx.epoch_of(state),
            f=f_final,
            grad_norm=grad_norm,
            x_size=ctx.controller.current_size,
            s_size=state.last_s_size,
            hvp_probes=state.hvp_probes,
            eec=ctx.eec_of(state),
            wall_ms=state.wall_ms,
            dist_to_opt=dist,
        )
    )
    return state, records
