"""Core data types and the finite, enumerable response space.

Instead of an open-ended generation space, every ad-integrated response is
described by three coordinates: the set of exposed ad candidates, a placement
quality level on a small grid in (0, 1], and a format-error flag. Allocation
rules are explicit probability vectors over the enumerated space, which makes
expectations, optimal tilts, and incentive properties exactly computable.

All types here are immutable after construction and safe to share across
workers. Numpy array fields are locked read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from math import comb
from typing import Iterator, Mapping

import numpy as np

PROB_TOL = 1e-12

__all__ = [
    "PROB_TOL",
    "AdCandidate",
    "BidProfile",
    "AuctionContext",
    "ResponseOutcome",
    "ResponseSpace",
    "PolicyDistribution",
    "ClickRecord",
    "enumerate_responses",
]


def frozen_array(values, dtype=float) -> np.ndarray:
    """Copy ``values`` into a read-only numpy array."""
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


def _require_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr!r}")


@dataclass(frozen=True)
class AdCandidate:
    """One fixed ad: an index plus its match quality and standalone appeal."""

    id: int
    relevance: float
    intrinsic_quality: float

    def __post_init__(self):
        for name in ("relevance", "intrinsic_quality"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class BidProfile:
    """Per-click bids, one non-negative entry per ad candidate."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", frozen_array(self.values))
        _require_finite(self.values, "bids")
        if self.values.ndim != 1 or self.values.size == 0:
            raise ValueError("bids must be a non-empty 1-d vector")
        if np.any(self.values < 0):
            raise ValueError("bids must be non-negative")

    def __len__(self) -> int:
        return int(self.values.size)

    def __getitem__(self, i: int) -> float:
        return float(self.values[i])

    def replace(self, ad: int, bid: float) -> "BidProfile":
        """New profile with ad's bid swapped out."""
        vals = self.values.copy()
        vals[ad] = bid
        return BidProfile(vals)


@dataclass(frozen=True)
class AuctionContext:
    """One query instance: query/user features, ad candidates, and bids.

    Query and user feature vectors are carried for completeness (they fix the
    identity of the instance) but the simulated user and the click estimator
    read only per-ad and per-response features.
    """

    query_features: np.ndarray
    user_features: np.ndarray
    ads: tuple[AdCandidate, ...]
    bids: BidProfile

    def __post_init__(self):
        object.__setattr__(self, "query_features", frozen_array(self.query_features))
        object.__setattr__(self, "user_features", frozen_array(self.user_features))
        object.__setattr__(self, "ads", tuple(self.ads))
        _require_finite(self.query_features, "query_features")
        _require_finite(self.user_features, "user_features")
        if not self.ads:
            raise ValueError("context needs at least one ad candidate")
        if len(self.bids) != len(self.ads):
            raise ValueError(
                f"bid profile length {len(self.bids)} != ad count {len(self.ads)}"
            )

    @property
    def n_ads(self) -> int:
        return len(self.ads)

    @cached_property
    def relevance(self) -> np.ndarray:
        return frozen_array([a.relevance for a in self.ads])

    @cached_property
    def intrinsic_quality(self) -> np.ndarray:
        return frozen_array([a.intrinsic_quality for a in self.ads])

    def with_bid(self, ad: int, bid: float) -> "AuctionContext":
        """Same context with a single bid replaced (features untouched)."""
        return AuctionContext(
            query_features=self.query_features,
            user_features=self.user_features,
            ads=self.ads,
            bids=self.bids.replace(ad, bid),
        )

    def with_bids(self, bids) -> "AuctionContext":
        return AuctionContext(
            query_features=self.query_features,
            user_features=self.user_features,
            ads=self.ads,
            bids=bids if isinstance(bids, BidProfile) else BidProfile(bids),
        )


@dataclass(frozen=True)
class ResponseOutcome:
    """One element of the response space.

    ``exposed`` is the sorted tuple of inserted ad indices, ``quality`` the
    placement-quality level index and ``quality_value`` its grid value in
    (0, 1] (both None/0 only for the empty response, which has a single
    canonical form). ``format_error`` marks a sampled response whose ad
    insertion violates the required format; such variants arise only during
    generation, never in the enumerated analytic space.
    """

    exposed: tuple[int, ...]
    quality: int | None
    quality_value: float = 0.0
    format_error: bool = False

    def __post_init__(self):
        exposed = tuple(sorted(self.exposed))
        if len(set(exposed)) != len(exposed):
            raise ValueError(f"duplicate ad indices in {exposed}")
        object.__setattr__(self, "exposed", exposed)
        if exposed:
            if self.quality is None or self.quality < 0:
                raise ValueError("non-empty response needs a quality level >= 0")
            if not (0.0 < self.quality_value <= 1.0):
                raise ValueError("quality_value must lie in (0, 1]")
        else:
            if self.quality is not None:
                raise ValueError("empty response has no quality variants")
            if self.quality_value != 0.0:
                raise ValueError("empty response has quality_value 0")
            if self.format_error:
                raise ValueError("empty response cannot carry a format error")

    @property
    def n_ads(self) -> int:
        return len(self.exposed)

    @property
    def is_empty(self) -> bool:
        return not self.exposed

    def key(self) -> str:
        """Canonical text key, e.g. 'S=0,2;q=1;fe=0' ('S=;q=-;fe=0' if empty)."""
        s = ",".join(str(i) for i in self.exposed)
        q = "-" if self.quality is None else str(self.quality)
        return f"S={s};q={q};fe={int(self.format_error)}"

    def clean(self) -> "ResponseOutcome":
        """The format-error-free base of this outcome."""
        if not self.format_error:
            return self
        return ResponseOutcome(self.exposed, self.quality, self.quality_value, False)

    def with_format_error(self) -> "ResponseOutcome":
        return ResponseOutcome(self.exposed, self.quality, self.quality_value, True)


EMPTY_RESPONSE = ResponseOutcome(exposed=(), quality=None)


def enumerate_responses(n_ads: int, k_max: int, quality_levels: int) -> "ResponseSpace":
    """Enumerate the clean response space in canonical order.

    Order: by exposed-set size, then lexicographic exposed set, then quality
    index; the empty response comes first. The count is
    1 + quality_levels * sum_{s=1..min(k_max, n_ads)} C(n_ads, s).
    """
    if n_ads < 1:
        raise ValueError(f"n_ads must be >= 1, got {n_ads}")
    if k_max < 0:
        raise ValueError(f"k_max must be >= 0, got {k_max}")
    if quality_levels < 1:
        raise ValueError(f"quality_levels must be >= 1, got {quality_levels}")
    responses = [EMPTY_RESPONSE]
    for size in range(1, min(k_max, n_ads) + 1):
        for subset in combinations(range(n_ads), size):
            for q in range(quality_levels):
                responses.append(
                    ResponseOutcome(
                        exposed=subset,
                        quality=q,
                        quality_value=(q + 1) / quality_levels,
                    )
                )
    return ResponseSpace(
        n_ads=n_ads,
        k_max=k_max,
        quality_levels=quality_levels,
        responses=tuple(responses),
    )


def expected_space_size(n_ads: int, k_max: int, quality_levels: int) -> int:
    return 1 + quality_levels * sum(
        comb(n_ads, s) for s in range(1, min(k_max, n_ads) + 1)
    )


@dataclass(frozen=True)
class ResponseSpace:
    """Ordered, duplicate-free enumeration of clean response outcomes.

    Index lookup treats a format-error variant as its clean base: the error
    flag is generation noise layered on top of the analytic space.
    """

    n_ads: int
    k_max: int
    quality_levels: int
    responses: tuple[ResponseOutcome, ...]

    def __post_init__(self):
        keys = [r.key() for r in self.responses]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate responses in space")

    def __len__(self) -> int:
        return len(self.responses)

    def __iter__(self) -> Iterator[ResponseOutcome]:
        return iter(self.responses)

    def __getitem__(self, i: int) -> ResponseOutcome:
        return self.responses[i]

    @cached_property
    def _index(self) -> Mapping[str, int]:
        return {r.key(): i for i, r in enumerate(self.responses)}

    def index_of(self, response: ResponseOutcome) -> int:
        """Position of a response (or of its clean base) in canonical order."""
        key = response.clean().key()
        try:
            return self._index[key]
        except KeyError:
            raise KeyError(f"response {key} not in space") from None

    def __contains__(self, response: ResponseOutcome) -> bool:
        return response.clean().key() in self._index

    @cached_property
    def ad_counts(self) -> np.ndarray:
        return frozen_array([r.n_ads for r in self.responses])

    @cached_property
    def quality_values(self) -> np.ndarray:
        return frozen_array([r.quality_value for r in self.responses])

    @cached_property
    def exposure_matrix(self) -> np.ndarray:
        """(num responses, n_ads) 0/1 matrix marking exposed ads."""
        m = np.zeros((len(self.responses), self.n_ads))
        for row, r in enumerate(self.responses):
            for i in r.exposed:
                m[row, i] = 1.0
        m.flags.writeable = False
        return m


@dataclass(frozen=True)
class PolicyDistribution:
    """Explicit probability vector aligned with a response space's ordering."""

    space: ResponseSpace
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.shape != (len(self.space),):
            raise ValueError(
                f"probs shape {probs.shape} does not match space size {len(self.space)}"
            )
        _require_finite(probs, "probs")
        if np.any(probs < -PROB_TOL):
            raise ValueError(f"negative probability beyond tolerance: {probs.min()}")
        np.clip(probs, 0.0, None, out=probs)
        total = probs.sum()
        if abs(total - 1.0) > PROB_TOL:
            raise ValueError(f"probabilities sum to {total}, expected 1 +/- {PROB_TOL}")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @classmethod
    def normalized(cls, space: ResponseSpace, weights) -> "PolicyDistribution":
        """Build a distribution from non-negative weights, renormalizing exactly."""
        w = np.asarray(weights, dtype=float)
        _require_finite(w, "weights")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights must have positive mass")
        return cls(space=space, probs=w / total)

    def renormalize(self) -> "PolicyDistribution":
        return PolicyDistribution.normalized(self.space, self.probs)

    def __getitem__(self, i: int) -> float:
        return float(self.probs[i])

    def prob_of(self, response: ResponseOutcome) -> float:
        return float(self.probs[self.space.index_of(response)])


@dataclass(frozen=True)
class ClickRecord:
    """Per-ad click outcomes, defined exactly for the exposed ads of a response."""

    clicks: Mapping[int, bool]

    def __post_init__(self):
        object.__setattr__(self, "clicks", dict(self.clicks))

    @classmethod
    def for_response(cls, response: ResponseOutcome, clicks: Mapping[int, bool]) -> "ClickRecord":
        if set(clicks) != set(response.exposed):
            raise ValueError(
                f"click keys {sorted(clicks)} must equal exposed set {response.exposed}"
            )
        return cls(clicks=clicks)

    @property
    def clicked_ads(self) -> tuple[int, ...]:
        return tuple(sorted(i for i, c in self.clicks.items() if c))

    def __getitem__(self, ad: int) -> bool:
        return self.clicks[ad]

    def __len__(self) -> int:
        return len(self.clicks)

    def __iter__(self):
        return iter(self.clicks)
