"""Iterative training of a bid-conditioned softmax allocation policy.

The policy is a linear-feature softmax over the enumerated response space,

    pi_theta(y) proportional to pi0(y) * exp(theta . f(y, context)),

with features that see normalized bids, so the learned allocation is
bid-aware. Each training epoch alternates two phases: (1) deploy the current
policy, collect simulated clicks, and refit the click model; (2) sample
response candidates per fresh query, score them with the updated click-based
reward, and take preference-pair gradient steps against a reference copy of
the policy that is re-frozen at the start of the epoch. Bids are re-drawn
between phases so the policy cannot memorize a static bid pattern.

Also houses the sample-and-select baseline: draw several candidate responses
from the base prior and keep the reward argmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax

from .ctr_model import ClickDataset, PctrModel, bce_loss, train_pctr
from .domain import AuctionContext, PolicyDistribution, ResponseOutcome, ResponseSpace, frozen_array
from .errors import TrainingError
from .mechanism import (
    BasePolicy,
    MechanismConfig,
    RewardConfig,
    base_policy_for,
    ctr_matrix,
    response_reward,
    reward_vector,
    sample_responses,
)
from .user_model import BID_MAX, ScenarioConfig, sample_clicks, sample_context

__all__ = [
    "N_POLICY_FEATURES",
    "POLICY_FEATURE_NAMES",
    "PolicyParams",
    "DpoConfig",
    "IrpoConfig",
    "EpochRecord",
    "TrainingHistory",
    "policy_features",
    "policy_distribution",
    "log_prob",
    "log_prob_gradient",
    "build_preference_set",
    "dpo_loss_and_gradient",
    "run_irpo",
    "mosaic_select",
]

POLICY_FEATURE_NAMES = (
    "sum_bid",
    "sum_relevance",
    "sum_intrinsic",
    "quality_exposure",
    "n_ads",
    "n_ads_sq",
    "sum_bid_relevance",
    "sum_bid_intrinsic",
    "sum_bid_quality",
    "sum_bid_crowding",
)
N_POLICY_FEATURES = len(POLICY_FEATURE_NAMES)


@dataclass(frozen=True)
class PolicyParams:
    """Softmax policy parameters plus the frozen reference copy used in training."""

    theta: np.ndarray
    ref_theta: np.ndarray

    def __post_init__(self):
        theta = frozen_array(self.theta)
        ref = frozen_array(self.ref_theta)
        for name, w in (("theta", theta), ("ref_theta", ref)):
            if w.shape != (N_POLICY_FEATURES,):
                raise ValueError(f"{name} must have shape ({N_POLICY_FEATURES},)")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"{name} must be finite")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "ref_theta", ref)

    @classmethod
    def zeros(cls) -> "PolicyParams":
        z = np.zeros(N_POLICY_FEATURES)
        return cls(theta=z, ref_theta=z)

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(theta=theta, ref_theta=self.ref_theta)

    def reference(self) -> "PolicyParams":
        """The reference policy as standalone params."""
        return PolicyParams(theta=self.ref_theta, ref_theta=self.ref_theta)

    def reset_reference(self) -> "PolicyParams":
        """Freeze the current parameters as the new reference."""
        return PolicyParams(theta=self.theta, ref_theta=self.theta)


@dataclass(frozen=True)
class DpoConfig:
    """Preference-pair optimization knobs."""

    beta: float = 0.1
    delta_th: float = 10.0
    m_samples: int = 5
    learning_rate: float = 0.05
    steps_per_epoch: int = 80

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.delta_th < 0:
            raise ValueError("delta_th must be >= 0")
        if self.m_samples < 2:
            raise ValueError("m_samples must be >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps_per_epoch < 0:
            raise ValueError("steps_per_epoch must be >= 0")


@dataclass(frozen=True)
class IrpoConfig:
    """Epoch plan: click-model refresh followed by policy preference updates.

    The candidate count per query in the policy phase lives in ``dpo.m_samples``.
    """

    epochs: int = 3
    reward_samples: int = 10
    pctr_lr: float = 0.1
    pctr_epochs: int = 200
    train_contexts: int = 500
    eval_contexts: int = 100
    dpo: DpoConfig = field(default_factory=DpoConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.reward_samples < 1:
            raise ValueError("reward_samples must be >= 1")
        if self.pctr_lr <= 0:
            raise ValueError("pctr_lr must be > 0")
        if min(self.pctr_epochs, self.train_contexts, self.eval_contexts) < 1:
            raise ValueError("pctr_epochs, train_contexts, eval_contexts must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    bce: float
    dpo_loss: float
    oracle_reward_per_query: float
    revenue_per_query: float
    unbiasedness_gap: float
    theta: np.ndarray

    def csv_row(self) -> list:
        return [
            self.epoch,
            repr(self.bce),
            repr(self.dpo_loss),
            repr(self.oracle_reward_per_query),
            repr(self.revenue_per_query),
            repr(self.unbiasedness_gap),
        ]


@dataclass
class TrainingHistory:
    """One record per completed epoch."""

    records: list[EpochRecord] = field(default_factory=list)

    CSV_HEADER = "epoch,bce,dpo_loss,oracle_reward_per_query,revenue_per_query,unbiasedness_gap"

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i: int) -> EpochRecord:
        return self.records[i]

    def to_csv_text(self) -> str:
        lines = [self.CSV_HEADER]
        for rec in self.records:
            lines.append(",".join(str(v) for v in rec.csv_row()))
        return "\n".join(lines) + "\n"


def policy_features(space: ResponseSpace, context: AuctionContext) -> np.ndarray:
    """(num responses, 10) feature matrix of the softmax policy.

    Per exposed ad, summed over the exposed set: normalized bid, relevance,
    intrinsic quality, and the bid's interactions with relevance, intrinsic
    quality, placement quality, and co-exposure. Per response: quality value
    scaled by exposure count, ad count, squared ad count. The interactions
    let a linear tilt track a bid-weighted clickability sum to first order.
    All sums are symmetric under jointly permuting the ads' bids and features.
    """
    exposure = space.exposure_matrix
    nbids = context.bids.values / BID_MAX
    counts = space.ad_counts
    bid_sum = exposure @ nbids
    cols = [
        bid_sum,
        exposure @ context.relevance,
        exposure @ context.intrinsic_quality,
        counts * space.quality_values,
        counts,
        counts**2,
        exposure @ (nbids * context.relevance),
        exposure @ (nbids * context.intrinsic_quality),
        bid_sum * space.quality_values,
        bid_sum * (counts - 1.0).clip(min=0.0),
    ]
    return np.column_stack(cols)


def _logits(params: PolicyParams, context: AuctionContext, base: BasePolicy) -> np.ndarray:
    return base.log_probs + policy_features(base.space, context) @ params.theta


def policy_distribution(
    params: PolicyParams, context: AuctionContext, base: BasePolicy
) -> PolicyDistribution:
    """Exactly normalized softmax over the enumerated response space."""
    logits = _logits(params, context, base)
    w = np.exp(logits - np.max(logits))
    return PolicyDistribution(space=base.space, probs=w / w.sum())


def log_prob(
    params: PolicyParams,
    context: AuctionContext,
    base: BasePolicy,
    response: ResponseOutcome,
) -> float:
    """Log-probability of a response (format-error variants score as their base).

    The error flag is bid- and parameter-independent sampling noise, so it
    contributes an additive constant that cancels in every preference margin.
    """
    logp = log_softmax(_logits(params, context, base))
    return float(logp[base.space.index_of(response)])


def log_prob_gradient(
    params: PolicyParams,
    context: AuctionContext,
    base: BasePolicy,
    response: ResponseOutcome,
) -> np.ndarray:
    """d log pi(y) / d theta = f(y) - E_pi[f]."""
    feats = policy_features(base.space, context)
    logits = base.log_probs + feats @ params.theta
    w = np.exp(logits - np.max(logits))
    probs = w / w.sum()
    return feats[base.space.index_of(response)] - probs @ feats


def build_preference_set(rewards, delta_th: float) -> tuple[int, list[int]]:
    """Winner (reward argmax, ties to the lowest index) and strict losers.

    A sample loses only when the winner's margin strictly exceeds ``delta_th``.
    """
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size < 2:
        raise ValueError("need at least two rewards to form preferences")
    winner = int(np.argmax(rewards))
    losers = [i for i in range(rewards.size) if rewards[winner] - rewards[i] > delta_th]
    return winner, losers


def dpo_loss_and_gradient(
    params: PolicyParams,
    ref_params: PolicyParams,
    context: AuctionContext,
    base: BasePolicy,
    winner: ResponseOutcome,
    losers: list[ResponseOutcome],
    beta: float,
) -> tuple[float, np.ndarray]:
    """Preference loss against the reference policy and its analytic gradient.

    loss = -(1/|S|) * sum_l log sigmoid(beta * margin_l) with
    margin_l = (log pi(y_w) - log pi_ref(y_w)) - (log pi(y_l) - log pi_ref(y_l)).
    The gradient uses d margin/d theta = f(y_w) - f(y_l); the softmax
    normalizer cancels inside each margin.
    """
    if not losers:
        raise ValueError("empty loser set: no preference signal in this sample")
    feats = policy_features(base.space, context)
    logp = log_softmax(base.log_probs + feats @ params.theta)
    logp_ref = log_softmax(base.log_probs + feats @ ref_params.theta)
    w_idx = base.space.index_of(winner)
    loss = 0.0
    grad = np.zeros(N_POLICY_FEATURES)
    for loser in losers:
        l_idx = base.space.index_of(loser)
        margin = (logp[w_idx] - logp_ref[w_idx]) - (logp[l_idx] - logp_ref[l_idx])
        # -log sigmoid(x) = log(1 + exp(-x)), stable via logaddexp
        loss += float(np.logaddexp(0.0, -beta * margin))
        grad += -beta * float(expit(-beta * margin)) * (feats[w_idx] - feats[l_idx])
    n = len(losers)
    return loss / n, grad / n


@dataclass(frozen=True)
class _PreferenceBatch:
    """All preference pairs of one epoch, flattened for full-batch steps."""

    deltas: np.ndarray  # (num pairs, num features): f(winner) - f(loser)
    weights: np.ndarray  # per-pair weight: 1 / (|losers| * num samples with pairs)

    def loss_and_gradient(self, theta: np.ndarray, ref_theta: np.ndarray, beta: float):
        margins = self.deltas @ (theta - ref_theta)
        loss = float(self.weights @ np.logaddexp(0.0, -beta * margins))
        grad = -beta * ((self.weights * expit(-beta * margins)) @ self.deltas)
        return loss, grad


def _collect_preferences(
    rng: np.random.Generator,
    params: PolicyParams,
    base: BasePolicy,
    pctr: PctrModel,
    reward_cfg: RewardConfig,
    contexts: list[AuctionContext],
    dpo: DpoConfig,
) -> _PreferenceBatch | None:
    deltas: list[np.ndarray] = []
    weights: list[float] = []
    groups: list[int] = []
    for context in contexts:
        dist = policy_distribution(params, context, base)
        samples = sample_responses(rng, dist, dpo.m_samples, base.format_error_rate)
        rewards = [response_reward(context, y, pctr, reward_cfg) for y in samples]
        winner, losers = build_preference_set(rewards, dpo.delta_th)
        if not losers:
            continue
        feats = policy_features(base.space, context)
        f_w = feats[base.space.index_of(samples[winner])]
        for l in losers:
            deltas.append(f_w - feats[base.space.index_of(samples[l])])
            groups.append(len(losers))
    if not deltas:
        return None
    n_samples_with_pairs = sum(1 / g for g in groups)  # == number of contributing samples
    weights = [1.0 / (g * n_samples_with_pairs) for g in groups]
    return _PreferenceBatch(deltas=np.array(deltas), weights=np.array(weights))


def run_irpo(
    scenario: ScenarioConfig,
    irpo_cfg: IrpoConfig,
    mech_cfg: MechanismConfig,
    rng: np.random.Generator,
    base: BasePolicy | None = None,
    pctr_feature_mask: np.ndarray | None = None,
) -> tuple[PolicyParams, PctrModel, TrainingHistory]:
    """Alternating click-model and policy optimization over ``epochs`` rounds.

    Per epoch: deploy the current policy on fresh contexts, log simulated
    clicks, and warm-start-refit the click model; then, on fresh contexts with
    fresh bids, sample candidate responses, build preference pairs under the
    updated reward, and run full-batch preference-gradient steps with the
    reference reset to the epoch's starting parameters. History records exact
    clean-space expectations on a fixed evaluation batch.
    """
    if base is None:
        base = base_policy_for(scenario)
    space = base.space
    um = scenario.user_model
    reward_cfg = mech_cfg.reward
    dpo = irpo_cfg.dpo

    eval_contexts = [sample_context(rng, scenario) for _ in range(irpo_cfg.eval_contexts)]
    eval_oracle_rewards = [reward_vector(space, c, um, reward_cfg) for c in eval_contexts]
    eval_true_ctr = [ctr_matrix(space, c, um) for c in eval_contexts]

    params = PolicyParams.zeros()
    pctr = PctrModel.zeros()
    history = TrainingHistory()

    for epoch in range(1, irpo_cfg.epochs + 1):
        # Phase 1: refit the click model on clicks logged under the current policy.
        data = ClickDataset()
        for _ in range(irpo_cfg.train_contexts):
            context = sample_context(rng, scenario)
            dist = policy_distribution(params, context, base)
            for y in sample_responses(rng, dist, irpo_cfg.reward_samples, base.format_error_rate):
                if y.is_empty:
                    continue
                data.add_clicks(context, y, sample_clicks(rng, um, context, y))
        if len(data) == 0:
            raise TrainingError(f"epoch {epoch}: no exposed ads sampled; cannot fit click model")
        pctr = train_pctr(
            pctr, data, irpo_cfg.pctr_lr, irpo_cfg.pctr_epochs, feature_mask=pctr_feature_mask
        )
        bce = bce_loss(pctr, data)

        # Gap between predicted and true click rates under the policy that
        # produced this epoch's click log: the regime the refreshed model is
        # supposed to be unbiased in.
        gap = 0.0
        for context, true_c in zip(eval_contexts, eval_true_ctr):
            probs = policy_distribution(params, context, base).probs
            pred_c = ctr_matrix(space, context, pctr)
            gap += float(np.max(np.abs(probs @ (pred_c - true_c))))

        # Phase 2: preference updates on fresh contexts and fresh bids.
        params = params.reset_reference()
        ref = params.reference()
        contexts_off = [sample_context(rng, scenario) for _ in range(irpo_cfg.train_contexts)]
        batch = _collect_preferences(rng, params, base, pctr, reward_cfg, contexts_off, dpo)
        mean_dpo = float(np.log(2.0))
        if batch is not None:
            theta = params.theta.copy()
            for step in range(dpo.steps_per_epoch):
                loss, grad = batch.loss_and_gradient(theta, ref.theta, dpo.beta)
                if not np.isfinite(loss):
                    raise TrainingError(f"epoch {epoch}, step {step}: non-finite DPO loss")
                theta -= dpo.learning_rate * grad
            mean_dpo, _ = batch.loss_and_gradient(theta, ref.theta, dpo.beta)
            params = params.with_theta(theta)
        if not np.all(np.isfinite(params.theta)):
            raise TrainingError(f"epoch {epoch}: non-finite policy parameters")

        # Bookkeeping: exact expectations on the fixed evaluation batch.
        oracle_reward = 0.0
        revenue = 0.0
        for context, rewards, true_c in zip(eval_contexts, eval_oracle_rewards, eval_true_ctr):
            probs = policy_distribution(params, context, base).probs
            oracle_reward += float(probs @ rewards)
            revenue += float(probs @ (true_c @ context.bids.values))
        n_eval = len(eval_contexts)
        history.records.append(
            EpochRecord(
                epoch=epoch,
                bce=bce,
                dpo_loss=mean_dpo,
                oracle_reward_per_query=oracle_reward / n_eval,
                revenue_per_query=revenue / n_eval,
                unbiasedness_gap=gap / n_eval,
                theta=frozen_array(params.theta),
            )
        )

    return params, pctr, history


def mosaic_select(
    base: BasePolicy,
    context: AuctionContext,
    pctr: PctrModel,
    reward_cfg: RewardConfig,
    m: int,
    rng: np.random.Generator,
) -> ResponseOutcome:
    """Sample-and-select baseline: best-of-m candidates from the base prior.

    Ties go to the first sampled candidate.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    samples = sample_responses(rng, base.dist, m, base.format_error_rate)
    rewards = [response_reward(context, y, pctr, reward_cfg) for y in samples]
    return samples[int(np.argmax(rewards))]
