"""Learnable click-probability model trained on simulated click logs.

A logistic model over an explicit feature map stands in for a text-encoder
network: the features of (context, ad, response) are
(1, relevance_i, placement_quality, intrinsic_quality_i, co-exposure count),
in that fixed order. Bids never enter the features. Training is full-batch
gradient descent on binary cross-entropy, deterministic at desk scale.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .domain import AuctionContext, ResponseOutcome, frozen_array
from .errors import TrainingError

__all__ = [
    "N_FEATURES",
    "FEATURE_NAMES",
    "PctrModel",
    "ClickDataset",
    "featurize",
    "predict_pctr",
    "bce_loss",
    "bce_gradient",
    "train_pctr",
]

FEATURE_NAMES = ("bias", "relevance", "quality", "intrinsic_quality", "co_exposure")
N_FEATURES = len(FEATURE_NAMES)

_P_CLAMP = 1e-12


@dataclass(frozen=True)
class PctrModel:
    """Logistic click estimator: p = sigmoid(weights . features)."""

    weights: np.ndarray
    version: int = 0

    def __post_init__(self):
        w = frozen_array(self.weights)
        if w.shape != (N_FEATURES,):
            raise ValueError(f"weights must have shape ({N_FEATURES},), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls) -> "PctrModel":
        return cls(weights=np.zeros(N_FEATURES), version=0)

    def to_json(self) -> str:
        return json.dumps(
            {"version": self.version, "weights": [float(w) for w in self.weights]},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "PctrModel":
        obj = json.loads(text)
        return cls(weights=np.asarray(obj["weights"], dtype=float), version=int(obj["version"]))


def featurize(context: AuctionContext, ad: int, response: ResponseOutcome) -> np.ndarray:
    """Fixed-order feature vector for one exposed ad in one response."""
    if ad not in response.exposed:
        raise ValueError(f"ad {ad} not exposed in {response.key()}")
    a = context.ads[ad]
    return np.array(
        [1.0, a.relevance, response.quality_value, a.intrinsic_quality, float(response.n_ads - 1)]
    )


def predict_pctr(
    model: PctrModel, context: AuctionContext, ad: int, response: ResponseOutcome
) -> float:
    """Predicted click probability, in (0, 1)."""
    return float(expit(model.weights @ featurize(context, ad, response)))


@dataclass
class ClickDataset:
    """Rows of (context, response, ad, click label), with a cached design matrix.

    Context ids are assigned in the order contexts are first seen; the same
    id is reused for repeated appends from one context object.
    """

    contexts: list[AuctionContext] = field(default_factory=list)
    rows: list[tuple[int, ResponseOutcome, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self._context_ids: dict[int, int] = {id(c): i for i, c in enumerate(self.contexts)}
        self._features: np.ndarray | None = None
        self._labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def add(self, context: AuctionContext, response: ResponseOutcome, ad: int, click: bool) -> None:
        if ad not in response.exposed:
            raise ValueError(f"ad {ad} not exposed in {response.key()}")
        cid = self._context_ids.get(id(context))
        if cid is None:
            cid = len(self.contexts)
            self.contexts.append(context)
            self._context_ids[id(context)] = cid
        self.rows.append((cid, response, ad, int(click)))
        self._features = None
        self._labels = None

    def add_clicks(self, context: AuctionContext, response: ResponseOutcome, clicks) -> None:
        for ad in response.exposed:
            self.add(context, response, ad, clicks[ad])

    def design_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """(features, labels) arrays over all rows, built once and cached."""
        if self._features is None:
            if not self.rows:
                raise ValueError("empty click dataset")
            feats = np.empty((len(self.rows), N_FEATURES))
            labels = np.empty(len(self.rows))
            for k, (cid, response, ad, click) in enumerate(self.rows):
                feats[k] = featurize(self.contexts[cid], ad, response)
                labels[k] = click
            self._features = feats
            self._labels = labels
        return self._features, self._labels

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["context_id", "response_key", "ad_id", "click"])
            for cid, response, ad, click in self.rows:
                writer.writerow([cid, response.key(), ad, click])


def _clamped_probs(model: PctrModel, features: np.ndarray) -> np.ndarray:
    p = expit(features @ model.weights)
    return np.clip(p, _P_CLAMP, 1.0 - _P_CLAMP)


def bce_loss(model: PctrModel, data: ClickDataset) -> float:
    """Mean binary cross-entropy over the dataset, probabilities clamped."""
    features, labels = data.design_matrix()
    p = _clamped_probs(model, features)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)))


def bce_gradient(model: PctrModel, data: ClickDataset) -> np.ndarray:
    """Analytic gradient of ``bce_loss``: mean of (p - label) * features."""
    features, labels = data.design_matrix()
    p = _clamped_probs(model, features)
    return (features.T @ (p - labels)) / len(labels)


def train_pctr(
    model: PctrModel,
    data: ClickDataset,
    learning_rate: float,
    epochs: int,
    rng: np.random.Generator | None = None,
    feature_mask: np.ndarray | None = None,
) -> PctrModel:
    """Full-batch gradient descent, warm-started from ``model``.

    ``rng`` is accepted for interface stability but unused: full-batch descent
    is deterministic. ``feature_mask`` zeroes selected weight updates, which
    deliberately misspecifies the model (e.g. blinding it to co-exposure).
    """
    if learning_rate <= 0:
        raise ValueError("learning_rate must be > 0")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    features, labels = data.design_matrix()
    mask = np.ones(N_FEATURES) if feature_mask is None else np.asarray(feature_mask, dtype=float)
    w = model.weights.copy()
    w *= mask
    for epoch in range(epochs):
        p = np.clip(expit(features @ w), _P_CLAMP, 1.0 - _P_CLAMP)
        grad = (features.T @ (p - labels)) / len(labels)
        w -= learning_rate * mask * grad
        if not np.all(np.isfinite(w)):
            raise TrainingError(
                f"pctr training diverged at epoch {epoch}: non-finite weights"
            )
    return PctrModel(weights=w, version=model.version + 1)
