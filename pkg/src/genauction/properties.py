"""Numerical verifiers for the allocation's incentive-relevant properties.

Hard checks, exact on the finite space:
  * monotonicity of the focal ad's ITCTR in its own bid under the optimal
    allocation (violations above floating slack are failures);
  * a refinement test for continuity: halving the sweep step should halve the
    largest adjacent ITCTR jump, which a step-function allocation (the
    built-in discrete slot-auction negative control) cannot pass;
  * a perturbation test that no valid distribution beats the closed-form
    optimum on the KL-regularized objective;
  * the gap between expected predicted and expected true click rates.

Soft, directional checks mirror the trained-policy experiments: rank
correlation between a perturbed bid and resulting click counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.stats import spearmanr

from .ctr_model import PctrModel
from .domain import AuctionContext, PolicyDistribution, ResponseOutcome
from .irpo import PolicyParams, policy_distribution, policy_features
from .mechanism import (
    BasePolicy,
    CtrSource,
    MechanismConfig,
    ctr_matrix,
    kl_divergence,
    log_partition,
    optimal_policy,
    penalty_vector,
    reward_vector,
    sample_responses,
)
from .user_model import BID_MAX, ScenarioConfig, UserModelParams, sample_clicks, sample_context
from .agents import AuctionEnv

__all__ = [
    "ParametricEnv",
    "StepAllocationEnv",
    "MonotonicityResult",
    "ContinuityResult",
    "OptimalityResult",
    "monotonicity_sweep",
    "continuity_sweep",
    "optimality_perturbation_test",
    "unbiasedness_gap",
    "bid_click_spearman",
    "sample_exact_env",
]

MONOTONICITY_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class ParametricEnv:
    """Bid sweep environment whose allocation is the learned softmax policy.

    ITCTR is evaluated under the ground-truth user model: this is the lens for
    inspecting trained (or untrained) policies, where monotonicity may fail.
    """

    context: AuctionContext
    ad: int
    base: BasePolicy
    params: PolicyParams
    user_model: UserModelParams

    @cached_property
    def _tables(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        space = self.base.space
        # Every policy feature is linear in each single bid, so two probe
        # points recover the focal-bid slope of the logits exactly.
        feats0 = policy_features(space, self.context.with_bid(self.ad, 0.0))
        feats1 = policy_features(space, self.context.with_bid(self.ad, BID_MAX))
        logits_fixed = self.base.log_probs + feats0 @ self.params.theta
        slope = (feats1 - feats0) @ self.params.theta / BID_MAX
        ctr_col = ctr_matrix(space, self.context, self.user_model)[:, self.ad]
        return logits_fixed, slope, ctr_col

    def itctr_curve(self, bids: np.ndarray) -> np.ndarray:
        logits_fixed, slope, ctr_col = self._tables
        logits = logits_fixed[None, :] + np.outer(np.asarray(bids, dtype=float), slope)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        probs = w / w.sum(axis=1, keepdims=True)
        return probs @ ctr_col

    def itctr_at(self, bid: float) -> float:
        return float(self.itctr_curve(np.array([float(bid)]))[0])


@dataclass(frozen=True, eq=False)
class StepAllocationEnv:
    """Discrete slot-auction negative control: winner-take-the-slot allocation.

    The focal ad is shown (single-ad response, top quality) iff its bid
    strictly exceeds the best opponent bid, so ITCTR is a step function of the
    bid and must fail the continuity refinement check.
    """

    context: AuctionContext
    ad: int
    base: BasePolicy
    user_model: UserModelParams

    @cached_property
    def _step(self) -> tuple[float, float]:
        others = np.delete(self.context.bids.values, self.ad)
        threshold = float(others.max()) if others.size else 0.0
        space = self.base.space
        wins = [
            i
            for i, y in enumerate(space)
            if y.exposed == (self.ad,) and y.quality == space.quality_levels - 1
        ]
        if not wins:
            raise ValueError("space has no single-ad response for the focal ad")
        ctr = ctr_matrix(space, self.context, self.user_model)[wins[0], self.ad]
        return threshold, float(ctr)

    def itctr_curve(self, bids: np.ndarray) -> np.ndarray:
        threshold, ctr = self._step
        return np.where(np.asarray(bids, dtype=float) > threshold, ctr, 0.0)

    def itctr_at(self, bid: float) -> float:
        return float(self.itctr_curve(np.array([float(bid)]))[0])


@dataclass(frozen=True)
class MonotonicityResult:
    bids: np.ndarray
    itctr: np.ndarray
    violations: int
    max_violation: float

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def curve_csv_text(self) -> str:
        lines = ["bid,itctr"]
        for b, v in zip(self.bids, self.itctr):
            lines.append(f"{b!r},{v!r}")
        return "\n".join(lines) + "\n"


def monotonicity_sweep(env, bid_grid) -> MonotonicityResult:
    """ITCTR along an ascending bid grid, counting strict decreases beyond slack."""
    bids = np.asarray(bid_grid, dtype=float)
    if np.any(np.diff(bids) <= 0):
        raise ValueError("bid grid must be strictly ascending")
    curve = env.itctr_curve(bids)
    drops = np.diff(curve)
    violations = int(np.sum(drops < -MONOTONICITY_SLACK))
    max_violation = float(max(0.0, -drops.min())) if drops.size else 0.0
    return MonotonicityResult(
        bids=bids, itctr=curve, violations=violations, max_violation=max_violation
    )


@dataclass(frozen=True)
class ContinuityResult:
    bids: np.ndarray
    jumps: np.ndarray
    max_jump: float

    def curve_csv_text(self) -> str:
        lines = ["bid,jump"]
        for b, j in zip(self.bids[1:], self.jumps):
            lines.append(f"{b!r},{j!r}")
        return "\n".join(lines) + "\n"


def continuity_sweep(env, b_min: float, b_max: float, delta: float) -> ContinuityResult:
    """Largest adjacent ITCTR jump on a delta-grid over [b_min, b_max]."""
    if delta <= 0:
        raise ValueError("delta must be > 0")
    if b_max <= b_min:
        raise ValueError("need b_max > b_min")
    n_steps = int(round((b_max - b_min) / delta))
    bids = b_min + delta * np.arange(n_steps + 1)
    curve = env.itctr_curve(bids)
    jumps = np.abs(np.diff(curve))
    return ContinuityResult(bids=bids, jumps=jumps, max_jump=float(jumps.max()))


def refinement_ratio(env, b_min: float, b_max: float, delta: float) -> float:
    """max_jump(delta/2) / max_jump(delta); near 0.5 for smooth allocations."""
    coarse = continuity_sweep(env, b_min, b_max, delta)
    fine = continuity_sweep(env, b_min, b_max, delta / 2.0)
    if coarse.max_jump == 0.0:
        return 0.0 if fine.max_jump == 0.0 else np.inf
    return fine.max_jump / coarse.max_jump


@dataclass(frozen=True)
class OptimalityResult:
    passed: bool
    worst_gap: float
    log_partition_error: float


def optimality_perturbation_test(
    env: AuctionEnv,
    trials: int,
    magnitude: float,
    rng: np.random.Generator,
    tol: float = 1e-10,
) -> OptimalityResult:
    """No sampled distribution may beat the closed-form optimum.

    Half the trials are global Dirichlet draws, half local exponential
    perturbations of the optimum. Also cross-checks the optimal objective
    against beta * log Z.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    base = env.base
    context = env.context
    rewards = reward_vector(base.space, context, env.ctr_source, env.mech.reward)
    beta = env.mech.beta
    star = optimal_policy(context, base, env.ctr_source, env.mech)

    def batched_objective(p: np.ndarray) -> np.ndarray:
        mask = p > 0
        logp = np.where(mask, np.log(np.where(mask, p, 1.0)), 0.0)
        kl = np.sum(np.where(mask, p * (logp - base.log_probs[None, :]), 0.0), axis=1)
        return p @ rewards - beta * kl

    obj_star = batched_objective(star.probs[None, :])[0]
    log_z = log_partition(context, base, env.ctr_source, env.mech)
    lp_err = abs(obj_star - beta * log_z)

    n = len(base.space)
    n_far = trials // 2
    far = rng.dirichlet(np.ones(n), size=n_far) if n_far else np.empty((0, n))
    tilts = np.exp(magnitude * rng.standard_normal((trials - n_far, n)))
    near = star.probs[None, :] * tilts
    near /= near.sum(axis=1, keepdims=True)
    gaps = batched_objective(np.vstack([far, near])) - obj_star
    worst = float(gaps.max())
    return OptimalityResult(passed=worst <= tol and lp_err <= tol, worst_gap=worst,
                            log_partition_error=float(lp_err))


def unbiasedness_gap(
    policy: PolicyDistribution,
    context: AuctionContext,
    pctr: PctrModel,
    user_model: UserModelParams,
) -> np.ndarray:
    """Per-ad |E[pctr_i * exposed] - E[ctr_i * exposed]| under the policy, exact."""
    space = policy.space
    predicted = ctr_matrix(space, context, pctr)
    truth = ctr_matrix(space, context, user_model)
    return np.abs(policy.probs @ (predicted - truth))


def bid_click_spearman(
    params_by_epoch: list[PolicyParams],
    scenario: ScenarioConfig,
    base: BasePolicy,
    rng: np.random.Generator,
    n_contexts: int = 200,
    samples_per_level: int = 1,
    bid_levels=(1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100),
) -> list[float]:
    """Rank correlation between a perturbed bid and total simulated clicks.

    For each policy snapshot: pick a random ad per context, pin its bid to
    each level, sample responses and clicks, and correlate the click totals
    with the levels. Flat (bid-deaf) policies score near zero; a perfectly
    monotone allocation scores one. A degenerate constant click count counts
    as zero correlation.
    """
    contexts = [sample_context(rng, scenario) for _ in range(n_contexts)]
    focal = rng.integers(0, scenario.n_ads, size=n_contexts)
    levels = np.asarray(bid_levels, dtype=float)
    out = []
    for params in params_by_epoch:
        counts = np.zeros(len(levels))
        for context, ad in zip(contexts, focal):
            for k, level in enumerate(levels):
                ctx = context.with_bid(int(ad), float(level))
                dist = policy_distribution(params, ctx, base)
                for y in sample_responses(rng, dist, samples_per_level, base.format_error_rate):
                    if int(ad) in y.exposed:
                        clicks = sample_clicks(rng, scenario.user_model, ctx, y)
                        counts[k] += clicks[int(ad)]
        if np.ptp(counts) == 0:
            out.append(0.0)
            continue
        rho = spearmanr(levels, counts).statistic
        out.append(float(rho))
    return out


def sample_exact_env(
    rng: np.random.Generator,
    scenario: ScenarioConfig,
    base: BasePolicy,
    mech: MechanismConfig,
    ctr_source: CtrSource | None = None,
    ad: int | None = None,
) -> AuctionEnv:
    """Random exact-optimum environment: fresh context, random focal ad."""
    context = sample_context(rng, scenario)
    if ad is None:
        ad = int(rng.integers(0, scenario.n_ads))
    return AuctionEnv(
        context=context,
        ad=ad,
        base=base,
        ctr_source=scenario.user_model if ctr_source is None else ctr_source,
        mech=mech,
    )
