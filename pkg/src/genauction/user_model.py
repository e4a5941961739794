"""Feature-based simulated user: ground-truth CTR and click sampling.

The simulated user clicks an exposed ad with a logistic probability driven by
the ad's relevance to the query, the placement quality of the response, the
ad's intrinsic appeal, and a crowding penalty per co-exposed ad. Clicks are
independent Bernoulli draws across exposed ads; a response with a format
error is never clicked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import isfinite

import numpy as np
from scipy.special import expit

from .domain import (
    AdCandidate,
    AuctionContext,
    BidProfile,
    ClickRecord,
    ResponseOutcome,
    frozen_array,
)

__all__ = [
    "BID_MAX",
    "UserModelParams",
    "ScenarioConfig",
    "sample_context",
    "true_ctr",
    "sample_clicks",
]

# Upper end of the bid support; also the constant used to normalize bids
# wherever they enter policy features.
BID_MAX = 100


@dataclass(frozen=True)
class UserModelParams:
    """Weights of the ground-truth click model.

    The click probability of ad i exposed in response y is
    sigmoid(bias + w_relevance*rel_i + w_quality*q(y) + w_intrinsic*iq_i
            - w_crowding*(|y| - 1)).
    Defaults are tuned so CTRs span roughly [0.05, 0.8].
    """

    bias: float = -2.0
    w_relevance: float = 3.0
    w_quality: float = 1.0
    w_intrinsic: float = 0.5
    w_crowding: float = 0.7

    def __post_init__(self):
        for name in ("bias", "w_relevance", "w_quality", "w_intrinsic", "w_crowding"):
            if not isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.w_crowding < 0:
            raise ValueError("w_crowding must be >= 0: more ads never raise per-ad CTR")

    def as_weights(self) -> np.ndarray:
        """Weights in shared feature order (1, rel, quality, iq, co-count).

        The crowding weight flips sign because the feature counts co-exposed
        ads while the parameter is a penalty.
        """
        return frozen_array(
            [self.bias, self.w_relevance, self.w_quality, self.w_intrinsic, -self.w_crowding]
        )


@dataclass(frozen=True)
class ScenarioConfig:
    """Shape and sampling plan of one synthetic auction environment.

    Relevance and intrinsic quality are i.i.d. uniform on [0, 1]; bids are
    uniform integers on [bid_low, bid_high] (default 1..100).
    """

    n_ads: int = 5
    k_max: int = 2
    quality_levels: int = 2
    user_model: UserModelParams = field(default_factory=UserModelParams)
    seed: int = 0
    feature_dim: int = 4
    bid_low: int = 1
    bid_high: int = BID_MAX

    def __post_init__(self):
        if self.n_ads < 1 or self.k_max < 0 or self.quality_levels < 1:
            raise ValueError("invalid response-space dimensions")
        if not (0 <= self.bid_low <= self.bid_high):
            raise ValueError("need 0 <= bid_low <= bid_high")
        if self.feature_dim < 0:
            raise ValueError("feature_dim must be >= 0")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def sample_context(rng: np.random.Generator, scenario: ScenarioConfig) -> AuctionContext:
    """Draw one auction context: features, ad candidates, and a bid profile."""
    query = rng.standard_normal(scenario.feature_dim)
    user = rng.standard_normal(scenario.feature_dim)
    relevance = rng.uniform(0.0, 1.0, scenario.n_ads)
    intrinsic = rng.uniform(0.0, 1.0, scenario.n_ads)
    bids = rng.integers(scenario.bid_low, scenario.bid_high + 1, scenario.n_ads)
    ads = tuple(
        AdCandidate(id=i, relevance=float(relevance[i]), intrinsic_quality=float(intrinsic[i]))
        for i in range(scenario.n_ads)
    )
    return AuctionContext(
        query_features=query,
        user_features=user,
        ads=ads,
        bids=BidProfile(bids.astype(float)),
    )


def true_ctr(
    params: UserModelParams,
    context: AuctionContext,
    ad: int,
    response: ResponseOutcome,
) -> float:
    """Ground-truth click probability of an exposed ad. Never reads bids."""
    if ad not in response.exposed:
        raise ValueError(f"ad {ad} not exposed in {response.key()}: CTR undefined")
    a = context.ads[ad]
    logit = (
        params.bias
        + params.w_relevance * a.relevance
        + params.w_quality * response.quality_value
        + params.w_intrinsic * a.intrinsic_quality
        - params.w_crowding * (response.n_ads - 1)
    )
    return float(expit(logit))


def sample_clicks(
    rng: np.random.Generator,
    params: UserModelParams,
    context: AuctionContext,
    response: ResponseOutcome,
) -> ClickRecord:
    """Independent Bernoulli clicks for each exposed ad.

    Format-error responses click nothing: the simulated user refuses broken
    ad markup regardless of relevance.
    """
    if any(i < 0 or i >= context.n_ads for i in response.exposed):
        raise ValueError("response exposes ads outside this context")
    clicks: dict[int, bool] = {}
    for ad in response.exposed:
        if response.format_error:
            clicks[ad] = False
        else:
            p = true_ctr(params, context, ad, response)
            clicks[ad] = bool(rng.random() < p)
    return ClickRecord.for_response(response, clicks)
