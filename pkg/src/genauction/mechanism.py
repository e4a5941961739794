"""Auction core: response rewards, the optimal allocation tilt, payments.

The mechanism's objective over a distribution pi on the response space is

    E_y[ sum_i b_i * ctr_i(y) * 1{i in y} + lam * s_resp(y) ] - beta * KL(pi || pi0)

where s_resp penalizes ad count and format errors. On a finite space the
maximizer has the closed form pi*(y) = pi0(y) * exp(R(y) / beta) / Z, computed
here with a max-shift before exponentiation. Expected first-price payment is
bid times ITCTR; the realized rule charges the bid on click.

Click probabilities can be sourced from the learned model, from the
ground-truth user model, or from any callable (context, ad, response) -> p;
evaluating rewards under the learned and the true model mirrors the
reward-model/oracle split used in the experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Union

import numpy as np
from scipy.special import expit

from .ctr_model import PctrModel, predict_pctr
from .domain import (
    AuctionContext,
    BidProfile,
    ClickRecord,
    PolicyDistribution,
    ResponseOutcome,
    ResponseSpace,
    enumerate_responses,
)
from .user_model import ScenarioConfig, UserModelParams, true_ctr

__all__ = [
    "CtrSource",
    "RewardConfig",
    "MechanismConfig",
    "BasePolicy",
    "base_policy_for",
    "ctr_fn",
    "ctr_matrix",
    "reward_vector",
    "response_reward",
    "optimal_policy",
    "log_partition",
    "itctr",
    "objective",
    "kl_divergence",
    "expected_payment",
    "realized_payment",
    "sample_responses",
]

CtrFn = Callable[[AuctionContext, int, ResponseOutcome], float]
CtrSource = Union[PctrModel, UserModelParams, CtrFn]


@dataclass(frozen=True)
class RewardConfig:
    """User-experience side of the reward: lam * (-count_pen*N^2 - fe_pen*fe)."""

    lam: float = 1.0
    ad_count_penalty: float = 10.0
    format_error_penalty: float = 500.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.ad_count_penalty < 0 or self.format_error_penalty < 0:
            raise ValueError("penalties must be >= 0")


@dataclass(frozen=True)
class MechanismConfig:
    beta: float = 0.1
    reward: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")


@dataclass(frozen=True)
class BasePolicy:
    """Pre-trained response prior, independent of bids.

    The default prior downweights ad insertion geometrically,
    pi0(y) proportional to exp(-kappa * N_ad(y)), uniform across quality
    levels of a given exposed set. ``format_error_rate`` is the chance a
    sampled non-empty response comes out with broken ad markup.
    """

    dist: PolicyDistribution
    kappa: float = 1.0
    format_error_rate: float = 0.02

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if not (0.0 <= self.format_error_rate < 1.0):
            raise ValueError("format_error_rate must lie in [0, 1)")
        if np.any(self.dist.probs <= 0):
            raise ValueError("base policy must have full support")

    @classmethod
    def from_ad_count_prior(
        cls, space: ResponseSpace, kappa: float = 1.0, format_error_rate: float = 0.02
    ) -> "BasePolicy":
        weights = np.exp(-kappa * space.ad_counts)
        return cls(
            dist=PolicyDistribution.normalized(space, weights),
            kappa=kappa,
            format_error_rate=format_error_rate,
        )

    @property
    def space(self) -> ResponseSpace:
        return self.dist.space

    @property
    def probs(self) -> np.ndarray:
        return self.dist.probs

    @cached_property
    def log_probs(self) -> np.ndarray:
        out = np.log(self.dist.probs)
        out.flags.writeable = False
        return out


def base_policy_for(
    scenario: ScenarioConfig, kappa: float = 1.0, format_error_rate: float = 0.02
) -> BasePolicy:
    """Default ad-count prior over the scenario's enumerated response space."""
    space = enumerate_responses(scenario.n_ads, scenario.k_max, scenario.quality_levels)
    return BasePolicy.from_ad_count_prior(space, kappa, format_error_rate)


def ctr_fn(source: CtrSource) -> CtrFn:
    """Resolve a click-probability source to a plain callable."""
    if isinstance(source, PctrModel):
        return lambda ctx, ad, y: predict_pctr(source, ctx, ad, y)
    if isinstance(source, UserModelParams):
        return lambda ctx, ad, y: true_ctr(source, ctx, ad, y)
    if callable(source):
        return source
    raise TypeError(f"not a CTR source: {source!r}")


def _linear_weights(source: CtrSource) -> np.ndarray | None:
    if isinstance(source, PctrModel):
        return source.weights
    if isinstance(source, UserModelParams):
        return source.as_weights()
    return None


def ctr_matrix(space: ResponseSpace, context: AuctionContext, source: CtrSource) -> np.ndarray:
    """(num responses, n_ads) click probabilities, zero where an ad is unexposed."""
    w = _linear_weights(source)
    if w is not None:
        per_ad = w[1] * context.relevance + w[3] * context.intrinsic_quality
        per_resp = w[0] + w[2] * space.quality_values + w[4] * (space.ad_counts - 1.0)
        return expit(per_resp[:, None] + per_ad[None, :]) * space.exposure_matrix
    fn = ctr_fn(source)
    out = np.zeros((len(space), context.n_ads))
    for row, y in enumerate(space):
        for ad in y.exposed:
            out[row, ad] = fn(context, ad, y)
    return out


def penalty_vector(space: ResponseSpace, cfg: RewardConfig) -> np.ndarray:
    """Experience penalty of each clean response (no format errors in the space)."""
    return -cfg.lam * cfg.ad_count_penalty * space.ad_counts**2


def reward_vector(
    space: ResponseSpace,
    context: AuctionContext,
    source: CtrSource,
    cfg: RewardConfig,
) -> np.ndarray:
    """Per-response reward over the clean space: bid-weighted CTR minus penalties."""
    return ctr_matrix(space, context, source) @ context.bids.values + penalty_vector(space, cfg)


def response_reward(
    context: AuctionContext,
    response: ResponseOutcome,
    source: CtrSource,
    cfg: RewardConfig,
) -> float:
    """Reward of a single (possibly format-broken) sampled response."""
    fn = ctr_fn(source)
    value = sum(context.bids[i] * fn(context, i, response) for i in response.exposed)
    penalty = -cfg.ad_count_penalty * response.n_ads**2
    if response.format_error:
        penalty -= cfg.format_error_penalty
    return float(value + cfg.lam * penalty)


def _tilt(log_base: np.ndarray, rewards: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Normalized exponential tilt of the base policy and log Z."""
    t = rewards / beta
    shift = np.max(t)
    w = np.exp(log_base + (t - shift))
    total = w.sum()
    return w / total, float(shift + np.log(total))


def optimal_policy(
    context: AuctionContext,
    base: BasePolicy,
    source: CtrSource,
    mech: MechanismConfig,
) -> PolicyDistribution:
    """Exact maximizer of the KL-regularized objective on the finite space."""
    rewards = reward_vector(base.space, context, source, mech.reward)
    probs, _ = _tilt(base.log_probs, rewards, mech.beta)
    return PolicyDistribution(space=base.space, probs=probs)


def log_partition(
    context: AuctionContext,
    base: BasePolicy,
    source: CtrSource,
    mech: MechanismConfig,
) -> float:
    """log Z of the optimal tilt; beta * log Z equals the optimal objective."""
    rewards = reward_vector(base.space, context, source, mech.reward)
    _, log_z = _tilt(base.log_probs, rewards, mech.beta)
    return log_z


def log_optimal_policy(
    context: AuctionContext,
    base: BasePolicy,
    source: CtrSource,
    mech: MechanismConfig,
) -> np.ndarray:
    """Exact log-probabilities of the optimal tilt, safe from underflow.

    At small beta the tilt is so sharp that suppressed responses round to
    probability zero in double precision; KL computations against the optimum
    should use these log values instead of log(probs).
    """
    rewards = reward_vector(base.space, context, source, mech.reward)
    t = base.log_probs + rewards / mech.beta
    shift = np.max(t)
    return t - (shift + np.log(np.sum(np.exp(t - shift))))


def itctr(
    policy: PolicyDistribution,
    context: AuctionContext,
    ad: int,
    source: CtrSource,
) -> float:
    """Probability the ad is both exposed and clicked under the policy."""
    col = ctr_matrix(policy.space, context, source)[:, ad]
    return float(policy.probs @ col)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with 0 log 0 = 0; requires support(p) within support(q)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise ValueError("KL undefined: p puts mass where q has none")
    pm = p[mask]
    return float(np.sum(pm * (np.log(pm) - np.log(q[mask]))))


def objective(
    policy: PolicyDistribution,
    context: AuctionContext,
    base: BasePolicy,
    source: CtrSource,
    mech: MechanismConfig,
) -> float:
    """Expected reward under the policy minus the beta-weighted KL to the base."""
    rewards = reward_vector(base.space, context, source, mech.reward)
    value = float(policy.probs @ rewards)
    return value - mech.beta * kl_divergence(policy.probs, base.probs)


def expected_payment(
    policy: PolicyDistribution,
    context: AuctionContext,
    ad: int,
    source: CtrSource,
) -> float:
    """First-price expected payment: bid times ITCTR."""
    return context.bids[ad] * itctr(policy, context, ad, source)


def realized_payment(clicks: ClickRecord, bids: BidProfile) -> np.ndarray:
    """Per-ad click payments: an ad pays its bid if clicked, zero otherwise."""
    out = np.zeros(len(bids))
    for ad, clicked in clicks.clicks.items():
        if clicked:
            out[ad] = bids[ad]
    return out


def sample_responses(
    rng: np.random.Generator,
    dist: PolicyDistribution,
    size: int,
    format_error_rate: float = 0.0,
) -> list[ResponseOutcome]:
    """Draw responses from a distribution, flipping format errors on non-empty draws.

    Format errors model broken ad markup in generated text, so they attach at
    sampling time at a fixed rate and never to the empty response.
    """
    idx = rng.choice(len(dist.space), size=size, p=dist.probs)
    out = []
    for i in idx:
        y = dist.space[int(i)]
        if format_error_rate > 0 and not y.is_empty and rng.random() < format_error_rate:
            y = y.with_format_error()
        out.append(y)
    return out
