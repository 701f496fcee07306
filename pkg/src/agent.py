"""
Exploration agents: the spatio-temporal safe explorer and its baselines.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from env import GridWorld
from safesets import (
    LipschitzParams, SafeSets, compute_candidates, compute_expanders,
    compute_expanders_time_invariant, compute_G, compute_S, compute_S_hat,
    compute_S_hat_time_invariant, compute_S_time_invariant, empty_set,
    lower_bound_terms,
)
from stgp import (
    BoundsTable, GpModel, KernelKind, KernelSpec, Product,
    SpaceTimePoint, Sum, confidence_slice, kernel_leaves,
)

logger = logging.getLogger(__name__)


class Policy(Enum):
    """Exploration policies, in canonical order."""
    ST_SAFEMDP = "st_safemdp"
    RANDOM = "random"
    UNSAFE = "unsafe"
    IGNORE_TIME = "ignore_time"
    NO_CROSS_COV = "no_cross_cov"


POLICY_ORDER: Tuple[Policy, ...] = tuple(Policy)
SAFETY_AWARE = (Policy.ST_SAFEMDP, Policy.IGNORE_TIME, Policy.NO_CROSS_COV)


@dataclass(frozen=True)
class AgentConfig:
    """
    Settings of one agent.

    noise_var is the observation noise variance assumed by the GP. kernel is
    the full spatio-temporal kernel; the ablation baselines derive their own
    kernel from it unless it already has the ablated shape. With own_bound a
    state is certified only when its own lower bound also clears h.
    """
    policy: Policy = Policy.ST_SAFEMDP
    beta: float = 2.0
    p: float = 3.0
    lipschitz: LipschitzParams = field(default_factory=lambda: LipschitzParams(0.1, 0.1))
    kernel: Optional[KernelSpec] = None
    noise_var: float = 1e-6
    seed: int = 0
    record_lower_bound: bool = False
    own_bound: bool = True

    def __post_init__(self):
        if not isinstance(self.policy, Policy):
            object.__setattr__(self, 'policy', Policy(self.policy))
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not (np.isfinite(self.p) and self.p >= 0):
            raise ValueError(f"p must be non-negative, got {self.p}")
        if not (np.isfinite(self.noise_var) and self.noise_var >= 0):
            raise ValueError(f"noise_var must be non-negative, got {self.noise_var}")
        if self.kernel is None and self.policy is not Policy.RANDOM:
            raise ValueError(f"Policy {self.policy.value} needs a kernel")


@dataclass
class StepRecord:
    step: int
    t: int
    state: int
    y: float
    unsafe: bool
    stuck: bool
    sets: Optional[SafeSets] = None
    lower_bound: Optional[int] = None


@dataclass
class EpisodeTrace:
    """
    One record per time step plus the posterior means used for RMSE.

    means[t] holds the mean of every state at time t after the step-t
    observation.
    """
    policy: Policy
    seed: int
    records: List[StepRecord]
    means: np.ndarray
    calibration_warnings: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def states(self) -> List[int]:
        return [r.state for r in self.records]

    @property
    def unsafe_visits(self) -> int:
        return sum(r.unsafe for r in self.records)

    @property
    def stuck_steps(self) -> int:
        return sum(r.stuck for r in self.records)

    @property
    def has_snapshots(self) -> bool:
        return all(r.sets is not None for r in self.records)


def additive_kernel(kernel: KernelSpec) -> KernelSpec:
    """k_s + k_t part of (k_s + k_t) + (k_s' * k_t'); other shapes pass through."""
    if isinstance(kernel, Sum) and isinstance(kernel.right, Product):
        return kernel.left
    return kernel


def space_kernel(kernel: KernelSpec) -> KernelSpec:
    """First spatial leaf of a kernel; a kernel without time leaves passes through."""
    leaves = kernel_leaves(kernel)
    if not any(leaf.on_time for leaf in leaves):
        return kernel
    for leaf in leaves:
        if leaf.kind is KernelKind.RBF_SPACE:
            return leaf
    raise ValueError("Kernel has no spatial component")


def _argmax_over(mask: np.ndarray, scores: np.ndarray) -> Optional[int]:
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return None
    return int(idx[np.argmax(scores[idx])])


def select_next(expander_candidates: np.ndarray, safe_candidates: np.ndarray,
                means: np.ndarray, bounds: BoundsTable, t: int, p: float,
                current: int) -> Tuple[int, bool]:
    """
    Pick the next state by mean plus p times confidence width at time t.

    Args:
        expander_candidates: Expanders reachable in one step
        safe_candidates: Safe states reachable in one step (fallback)
        means: Posterior means at time t
        bounds: Running confidence bounds
        t: Current time index
        p: Exploration weight
        current: State to stay in when both sets are empty

    Returns:
        (next state, stuck flag). Ties go to the lowest state index.
    """
    scores = means + p * bounds.width(t)
    for mask in (expander_candidates, safe_candidates):
        choice = _argmax_over(mask, scores)
        if choice is not None:
            return choice, False
    return int(current), True


class _Episode:
    """Shared bookkeeping of one episode: rng, GP, records and means."""

    def __init__(self, w: GridWorld, cfg: AgentConfig, N: int, kernel: Optional[KernelSpec]):
        if N < 1:
            raise ValueError(f"Episode needs at least one step, got N={N}")
        if N > w.horizon:
            raise ValueError(f"Episode of {N} steps exceeds the environment horizon {w.horizon}")
        self.w = w
        self.cfg = cfg
        self.N = N
        self.rng = np.random.default_rng(cfg.seed)
        self.gp = GpModel(kernel, w.coords, cfg.noise_var) if kernel is not None else None
        self.records: List[StepRecord] = []
        self.means = np.zeros((N, w.n_states))
        self.start = int(np.flatnonzero(w.initial_safe)[0])

    def observe(self, t: int, s: int, stuck: bool = False, sets: Optional[SafeSets] = None,
                lower_bound: Optional[int] = None, gp_time: Optional[int] = None) -> float:
        """Measure at (t, s), update the GP and append the step record."""
        y = self.w.observe(t, s, self.rng)
        unsafe = not self.w.is_safe(t, s)
        if unsafe:
            logger.debug(f"[{self.cfg.policy.value}] unsafe visit at t={t}, state={s}")
        key_time = t if gp_time is None else gp_time
        if self.gp is not None:
            self.gp.add_observation(SpaceTimePoint(key_time, s), y)
            mean, _ = self.gp.predict(np.full(self.w.n_states, key_time), np.arange(self.w.n_states))
            self.means[t] = mean
        self.records.append(StepRecord(step=t, t=t, state=int(s), y=y, unsafe=unsafe,
                                       stuck=stuck, sets=sets, lower_bound=lower_bound))
        return y

    def initial_sets(self) -> SafeSets:
        candidates = empty_set(self.w)
        candidates[self.start] = True
        return SafeSets(t=0, S=self.w.initial_safe.copy(), S_hat=self.w.initial_safe.copy(),
                        G_next=empty_set(self.w), expanders=empty_set(self.w), candidates=candidates)

    def finish(self, calibration_warnings: int = 0) -> EpisodeTrace:
        trace = EpisodeTrace(policy=self.cfg.policy, seed=self.cfg.seed, records=self.records,
                             means=self.means, calibration_warnings=calibration_warnings)
        logger.info(f"[{self.cfg.policy.value}] seed={self.cfg.seed}: {len(trace)} steps, "
                    f"{trace.unsafe_visits} unsafe, {trace.stuck_steps} stuck")
        return trace


def _run_safe_episode(w: GridWorld, cfg: AgentConfig, N: int, kernel: KernelSpec) -> EpisodeTrace:
    ep = _Episode(w, cfg, N, kernel)
    p, h, n = cfg.lipschitz, w.h, w.n_states
    bounds = BoundsTable(n, cfg.beta, h, w.initial_safe)
    state = ep.start
    S_hat = w.initial_safe.copy()
    ep.observe(0, state, sets=ep.initial_sets())

    for t in range(1, N):
        means = {}
        for tau in range(t - 1, t + 3):
            lo, hi, means[tau] = confidence_slice(ep.gp, cfg.beta, tau, n)
            bounds.intersect_slice(tau, lo, hi)
        bounds.retain(range(t - 1, t + 3))
        mean_t = means[t]

        S = compute_S(S_hat, bounds, t, p, h, w, cfg.own_bound)
        G_next = compute_G(t - 1, t + 1, S_hat, bounds, p, h, w, cfg.own_bound)
        S_hat = compute_S_hat(S, S_hat, G_next, w)
        expanders = compute_expanders(S_hat, S, bounds, t, p, h, w)
        candidates = compute_candidates(state, w)

        state, stuck = select_next(expanders & candidates, S_hat & candidates,
                                   mean_t, bounds, t, cfg.p, state)
        if stuck:
            logger.warning(f"[{cfg.policy.value}] no safe candidate at t={t}; staying at {state}")

        lower_bound = None
        if cfg.record_lower_bound:
            lower_bound = int(sum(lower_bound_terms(S_hat, bounds, t, N, p, h, w, cfg.own_bound)))
        sets = SafeSets(t=t, S=S, S_hat=S_hat, G_next=G_next, expanders=expanders, candidates=candidates)
        ep.observe(t, state, stuck=stuck, sets=sets, lower_bound=lower_bound)

    return ep.finish(bounds.calibration_warnings)


def run_episode(w: GridWorld, cfg: AgentConfig, N: int) -> EpisodeTrace:
    """
    Run the spatio-temporal safe explorer for N steps.

    Each step intersects the confidence bounds of times t-1 to t+2, derives
    S_t, S_hat_t, the expanders and the one-step candidates, moves to the best
    scoring candidate and observes there. Unsafe visits are recorded and the
    episode continues.
    """
    return _run_safe_episode(w, cfg, N, cfg.kernel)


def run_baseline_random(w: GridWorld, cfg: AgentConfig, N: int) -> EpisodeTrace:
    """Uniformly random actions; the GP (if any) only feeds evaluation."""
    ep = _Episode(w, cfg, N, cfg.kernel)
    state = ep.start
    ep.observe(0, state)
    for t in range(1, N):
        actions = w.available_actions(state)
        action = actions[int(ep.rng.integers(len(actions)))]
        state = w.transition(state, action)
        ep.observe(t, state)
    return ep.finish()


def run_baseline_unsafe(w: GridWorld, cfg: AgentConfig, N: int) -> EpisodeTrace:
    """Greedy maximum posterior width over one-step candidates, ignoring safety."""
    ep = _Episode(w, cfg, N, cfg.kernel)
    state = ep.start
    ep.observe(0, state)
    for t in range(1, N):
        candidates = compute_candidates(state, w)
        idx = np.flatnonzero(candidates)
        _, var = ep.gp.predict(np.full(len(idx), t), idx)
        state = int(idx[np.argmax(var)])
        ep.observe(t, state)
    return ep.finish()


def run_baseline_ignore_time(w: GridWorld, cfg: AgentConfig, N: int) -> EpisodeTrace:
    """
    Time-invariant safe exploration with a space-only GP.

    Observations are keyed by state only, so repeated visits stack. Safe sets
    use the spatial Lipschitz constant and multi-step returnability; the next
    state maximizes the confidence width over one-step expanders.
    """
    ep = _Episode(w, cfg, N, space_kernel(cfg.kernel))
    p, h, n = cfg.lipschitz, w.h, w.n_states
    bounds = BoundsTable(n, cfg.beta, h, w.initial_safe)
    state = ep.start
    S_hat = w.initial_safe.copy()
    ep.observe(0, state, sets=ep.initial_sets(), gp_time=0)

    for t in range(1, N):
        lo, hi, _ = confidence_slice(ep.gp, cfg.beta, 0, n)
        bounds.intersect_slice(0, lo, hi)
        S = compute_S_time_invariant(S_hat, bounds.lower(0), p, h, w, cfg.own_bound)
        S_hat = compute_S_hat_time_invariant(S, S_hat, w)
        expanders = compute_expanders_time_invariant(S_hat, S, bounds.upper(0), p, h, w)
        candidates = compute_candidates(state, w)

        widths = bounds.width(0)
        stuck = False
        choice = _argmax_over(expanders & candidates, widths)
        if choice is None:
            choice = _argmax_over(S_hat & candidates, widths)
        if choice is None:
            stuck = True
            logger.warning(f"[{cfg.policy.value}] no safe candidate at t={t}; staying at {state}")
        else:
            state = choice
        sets = SafeSets(t=t, S=S, S_hat=S_hat, G_next=empty_set(w), expanders=expanders, candidates=candidates)
        ep.observe(t, state, stuck=stuck, sets=sets, gp_time=0)

    return ep.finish(bounds.calibration_warnings)


def run_baseline_no_cross_cov(w: GridWorld, cfg: AgentConfig, N: int) -> EpisodeTrace:
    """The safe explorer with the cross term dropped from the kernel."""
    return _run_safe_episode(w, cfg, N, additive_kernel(cfg.kernel))


RUNNERS: Dict[Policy, Callable[[GridWorld, AgentConfig, int], EpisodeTrace]] = {
    Policy.ST_SAFEMDP: run_episode,
    Policy.RANDOM: run_baseline_random,
    Policy.UNSAFE: run_baseline_unsafe,
    Policy.IGNORE_TIME: run_baseline_ignore_time,
    Policy.NO_CROSS_COV: run_baseline_no_cross_cov,
}


def run_policy(w: GridWorld, cfg: AgentConfig, N: int) -> EpisodeTrace:
    """Run the episode of cfg.policy."""
    logger.debug(f"Running {cfg.policy.value} for {N} steps (seed {cfg.seed})")
    return RUNNERS[cfg.policy](w, cfg, N)
