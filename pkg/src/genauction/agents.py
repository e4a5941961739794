"""Bidder behavior models and equilibrium dynamics under first-price payments.

Two advertiser types: a utility maximizer (quasi-linear, pays bid per click in
expectation) and a value maximizer constrained to a target return on
investment. The auction environment fixes everything except one focal bid and
exposes the exact optimal allocation as a function of that bid, precomputed so
bid grids sweep fast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np

from .domain import AuctionContext, PolicyDistribution
from .mechanism import BasePolicy, CtrSource, MechanismConfig, ctr_matrix, penalty_vector

__all__ = [
    "AgentSpec",
    "AuctionEnv",
    "DynamicsResult",
    "um_utility",
    "vm_objective",
    "best_response",
    "ic_regret",
    "truthful_bid",
    "best_response_dynamics",
]


@dataclass(frozen=True)
class AgentSpec:
    """An advertiser: UM maximizes value minus payment, VM value under ROI cap."""

    kind: Literal["UM", "VM"]
    value: float
    roi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("UM", "VM"):
            raise ValueError(f"kind must be 'UM' or 'VM', got {self.kind!r}")
        if self.value < 0:
            raise ValueError("value must be >= 0")
        if self.kind == "VM" and self.roi < 1.0:
            raise ValueError("VM target ROI must be >= 1")


@dataclass(frozen=True, eq=False)
class AuctionEnv:
    """A fixed query, fixed opponents, and the exact optimal allocation rule.

    The same CTR source feeds both the reward the allocator optimizes and the
    ITCTR read off the resulting policy, which is the regime in which the
    allocation's monotonicity and continuity hold exactly.
    """

    context: AuctionContext
    ad: int
    base: BasePolicy
    ctr_source: CtrSource
    mech: MechanismConfig

    def __post_init__(self):
        if not (0 <= self.ad < self.context.n_ads):
            raise ValueError(f"focal ad {self.ad} out of range")

    @cached_property
    def _tables(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(fixed reward part, focal reward slope, focal CTR column)."""
        space = self.base.space
        ctr = ctr_matrix(space, self.context, self.ctr_source)
        bids_rest = self.context.bids.values.copy()
        bids_rest[self.ad] = 0.0
        fixed = ctr @ bids_rest + penalty_vector(space, self.mech.reward)
        return fixed, ctr[:, self.ad].copy(), ctr[:, self.ad].copy()

    def _probs_at(self, bids: np.ndarray) -> np.ndarray:
        """(len(bids), num responses) optimal-policy rows, vectorized over bids."""
        fixed, slope, _ = self._tables
        logits = self.base.log_probs[None, :] + (
            fixed[None, :] + np.outer(bids, slope)
        ) / self.mech.beta
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        return w / w.sum(axis=1, keepdims=True)

    def allocation(self, bid: float) -> PolicyDistribution:
        probs = self._probs_at(np.array([float(bid)]))[0]
        return PolicyDistribution(space=self.base.space, probs=probs)

    def itctr_at(self, bid: float) -> float:
        return float(self.itctr_curve(np.array([float(bid)]))[0])

    def itctr_curve(self, bids: np.ndarray) -> np.ndarray:
        """Focal ad's ITCTR at each bid, other bids held fixed."""
        _, _, ctr_col = self._tables
        return self._probs_at(np.asarray(bids, dtype=float)) @ ctr_col

    def with_opponent_bids(self, bids) -> "AuctionEnv":
        return AuctionEnv(
            context=self.context.with_bids(np.asarray(bids, dtype=float)),
            ad=self.ad,
            base=self.base,
            ctr_source=self.ctr_source,
            mech=self.mech,
        )


def um_utility(env: AuctionEnv, agent: AgentSpec, bid: float) -> float:
    """(value - bid) * itctr: quasi-linear surplus under first-price payment."""
    if bid < 0:
        raise ValueError("bid must be >= 0")
    return (agent.value - bid) * env.itctr_at(bid)


def vm_objective(env: AuctionEnv, agent: AgentSpec, bid: float) -> tuple[float, bool]:
    """(value * itctr, ROI feasibility). Zero allocation is trivially feasible."""
    if bid < 0:
        raise ValueError("bid must be >= 0")
    it = env.itctr_at(bid)
    feasible = it == 0.0 or agent.roi * bid <= agent.value
    return agent.value * it, feasible


def truthful_bid(agent: AgentSpec) -> float:
    """v for a UM; the ROI-normalized value v/roi for a VM."""
    return agent.value if agent.kind == "UM" else agent.value / agent.roi


def _utilities_on_grid(env: AuctionEnv, agent: AgentSpec, bid_grid: np.ndarray) -> np.ndarray:
    """Grid utilities; infeasible VM bids score -inf."""
    itctrs = env.itctr_curve(bid_grid)
    if agent.kind == "UM":
        return (agent.value - bid_grid) * itctrs
    values = agent.value * itctrs
    infeasible = (itctrs > 0.0) & (agent.roi * bid_grid > agent.value)
    values[infeasible] = -np.inf
    return values


def best_response(
    env: AuctionEnv, agent: AgentSpec, bid_grid
) -> tuple[float, float]:
    """Grid argmax of the agent's objective; ties go to the lowest bid."""
    grid = np.asarray(bid_grid, dtype=float)
    if grid.size == 0:
        raise ValueError("bid grid must be non-empty")
    utils = _utilities_on_grid(env, agent, grid)
    best = int(np.argmax(utils))  # first max = lowest bid on an ascending grid
    if not np.isfinite(utils[best]):
        # every positive-allocation bid breaks the ROI cap; bid nothing
        return float(grid[0]), 0.0
    return float(grid[best]), float(utils[best])


def _utility_at(env: AuctionEnv, agent: AgentSpec, bid: float) -> float:
    if agent.kind == "UM":
        return um_utility(env, agent, bid)
    value, feasible = vm_objective(env, agent, bid)
    return value if feasible else -np.inf


def ic_regret(env: AuctionEnv, agent: AgentSpec, bid_grid) -> float:
    """Best grid deviation gain over the truthful bid, floored at zero."""
    _, best_util = best_response(env, agent, bid_grid)
    truthful_util = _utility_at(env, agent, truthful_bid(agent))
    return max(0.0, best_util - truthful_util)


@dataclass(frozen=True)
class DynamicsResult:
    bids: np.ndarray
    epsilon: float
    converged: bool
    iterations: int
    trace: tuple[tuple[int, int, float, float, float], ...]  # (iter, agent, bid, utility, regret)

    def trace_csv_text(self) -> str:
        lines = ["iter,agent,bid,utility,regret"]
        for it, agent, bid, util, regret in self.trace:
            lines.append(f"{it},{agent},{bid!r},{util!r},{regret!r}")
        return "\n".join(lines) + "\n"


def best_response_dynamics(
    context: AuctionContext,
    base: BasePolicy,
    ctr_source: CtrSource,
    mech: MechanismConfig,
    agents: list[AgentSpec],
    bid_grid,
    max_iters: int = 50,
    initial_bids=None,
) -> DynamicsResult:
    """Simultaneous best-response iteration; agent i owns ad i.

    Stops at a fixed point of the grid-valued profile or after ``max_iters``.
    Reports epsilon = the largest unilateral regret at the final profile.
    """
    if not agents:
        raise ValueError("need at least one agent")
    if len(agents) > context.n_ads:
        raise ValueError(f"{len(agents)} agents but only {context.n_ads} ads")
    grid = np.asarray(bid_grid, dtype=float)
    if initial_bids is None:
        bids = np.array([truthful_bid(a) for a in agents])
    else:
        bids = np.asarray(initial_bids, dtype=float).copy()
    full = context.bids.values.copy()
    full[: len(agents)] = bids

    def env_for(i: int, profile: np.ndarray) -> AuctionEnv:
        return AuctionEnv(
            context=context.with_bids(profile), ad=i, base=base, ctr_source=ctr_source, mech=mech
        )

    trace: list[tuple[int, int, float, float, float]] = []
    converged = False
    iterations = 0
    for it in range(1, max_iters + 1):
        iterations = it
        responses = np.empty(len(agents))
        for i, agent in enumerate(agents):
            env = env_for(i, full)
            responses[i], _ = best_response(env, agent, grid)
        full[: len(agents)] = responses
        max_regret = 0.0
        for i, agent in enumerate(agents):
            env = env_for(i, full)
            util = _utility_at(env, agent, responses[i])
            _, best_util = best_response(env, agent, grid)
            regret = max(0.0, best_util - util)
            max_regret = max(max_regret, regret)
            trace.append((it, i, float(responses[i]), float(util), regret))
        if max_regret <= 0.0:
            converged = True
            break

    epsilon = 0.0
    for i, agent in enumerate(agents):
        env = env_for(i, full)
        util = _utility_at(env, agent, full[i])
        _, best_util = best_response(env, agent, grid)
        epsilon = max(epsilon, max(0.0, best_util - util))
    return DynamicsResult(
        bids=full[: len(agents)].copy(),
        epsilon=float(epsilon),
        converged=converged,
        iterations=iterations,
        trace=tuple(trace),
    )
