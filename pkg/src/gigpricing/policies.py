"""Compensation policies: rule-based benchmarks, learned pricing, and the
randomized data-collection policy."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .choice import ChoiceObservation, MnlParams, encode_instance
from .core import NONE, CompensationDecision, Instance, PreState, run_episode
from .vfa.network import ValueNetwork
from .vfa.training import EstimatedUtilities, price_state

KINDS = ("PP", "FP", "VFA", "PERTURBED", "COLLECT")


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    percentage: float = 0.0
    weights: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    epsilon: float = 0.0
    seed: int = 0
    checkpoint: Optional[str] = None
    collect_range: tuple[float, float] = (0.40, 0.85)
    name: Optional[str] = None
    estimator: str = "multi"  # which fitted MNL a VFA policy prices with: "multi" or "single"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.percentage <= 1.0:
            raise ValueError("percentage must lie in [0, 1]")
        lo, hi = self.collect_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("collect_range must satisfy 0 <= low <= high <= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.estimator not in ("multi", "single"):
            raise ValueError(f"unknown estimator variant {self.estimator!r}")
        object.__setattr__(self, "weights", tuple(float(v) for v in self.weights))

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "PERTURBED":
            return f"PERT-eps{self.epsilon:g}-s{self.seed}"
        if self.kind == "VFA" and self.estimator == "single":
            return "VFA-single"
        return self.kind

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PolicySpec":
        d = dict(d)
        for key in ("weights", "collect_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _zeros(state: PreState) -> CompensationDecision:
    return CompensationDecision({i: 0.0 for i in state.active})


class PercentagePolicy:
    """Offer a fixed share of each request's reward."""

    def __init__(self, p: float):
        self.p = p

    def decide(self, state: PreState, instance: Instance) -> CompensationDecision:
        return CompensationDecision({i: self.p * instance.rewards[i] for i in state.active})


class FormulaPolicy:
    """v1*reward + v2*travel + v3*penalty + v4*reward if expiring now, floored at 0."""

    def __init__(self, weights):
        self.v = tuple(float(x) for x in weights)

    def compensation(self, reward, travel, penalty, expiring) -> float:
        v1, v2, v3, v4 = self.v
        return max(0.0, v1 * reward + v2 * travel + v3 * penalty + v4 * reward * expiring)

    def decide(self, state: PreState, instance: Instance) -> CompensationDecision:
        t = state.step
        return CompensationDecision({
            i: self.compensation(
                instance.rewards[i], instance.requests[i].travel_time, instance.penalties[i], instance.expiry[i] == t
            )
            for i in state.active
        })


class VfaPolicy:
    """Closed-form MNL prices with opportunity costs from a value network.

    ``net=None`` means a zero value function, i.e. myopic pricing.
    """

    def __init__(self, net: Optional[ValueNetwork], estimates: Mapping[int, MnlParams], gamma: float = 0.95):
        self.net = net
        self.estimates = dict(estimates)
        self.gamma = gamma
        self._utils = EstimatedUtilities(self.estimates)

    def decide(self, state: PreState, instance: Instance) -> CompensationDecision:
        if state.worker is None or not state.active:
            return _zeros(state)
        out = price_state(self.net, state, instance, self._utils, self.gamma)
        return CompensationDecision.from_array(state.active, out.comps)


class CollectPolicy:
    """Offer an independent uniform share of each reward, for data collection."""

    def __init__(self, rng: np.random.Generator, low: float = 0.40, high: float = 0.85):
        self.rng, self.low, self.high = rng, low, high

    def decide(self, state: PreState, instance: Instance) -> CompensationDecision:
        shares = self.rng.uniform(self.low, self.high, size=len(state.active))
        return CompensationDecision.from_array(state.active, shares * instance.rewards[list(state.active)])


def sample_perturbation(true_params: Mapping[int, MnlParams], epsilon: float,
                        rng: np.random.Generator) -> dict[int, MnlParams]:
    """Perturb every group's (weights, mu) by a vector of norm in [max(0, eps-1), eps].

    Directions are uniform on the sphere; draws with a nonpositive mu are redrawn.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    out = {}
    lo = max(0.0, epsilon - 1.0)
    for g in sorted(true_params):
        p = true_params[g]
        if epsilon == 0:
            out[g] = MnlParams(g, p.weights.copy(), p.mu, p.u0)
            continue
        dim = len(p.weights) + 1
        while True:
            direction = rng.normal(size=dim)
            direction /= np.linalg.norm(direction)
            delta = rng.uniform(lo, epsilon) * direction
            if p.mu + delta[-1] > 0:
                break
        norm = np.linalg.norm(delta)
        assert lo - 1e-12 <= norm <= epsilon + 1e-12
        out[g] = MnlParams(g, p.weights + delta[:-1], float(p.mu + delta[-1]), p.u0)
    return out


def build_policy(spec: PolicySpec, estimates: Optional[Mapping[int, MnlParams]] = None,
                 net: Optional[ValueNetwork] = None, truth: Optional[Mapping[int, MnlParams]] = None,
                 gamma: float = 0.95, rng: Optional[np.random.Generator] = None):
    if spec.kind == "PP":
        return PercentagePolicy(spec.percentage)
    if spec.kind == "FP":
        return FormulaPolicy(spec.weights)
    if spec.kind == "VFA":
        if estimates is None:
            raise ValueError("VFA policy needs MNL estimates")
        return VfaPolicy(net, estimates, gamma)
    if spec.kind == "PERTURBED":
        if truth is None:
            raise ValueError("PERTURBED policy needs the true MNL parameters")
        params = sample_perturbation(truth, spec.epsilon, np.random.default_rng(spec.seed))
        return VfaPolicy(net, params, gamma)
    return CollectPolicy(rng if rng is not None else np.random.default_rng(spec.seed), *spec.collect_range)


def collect_observations(instances: Sequence[Instance], episodes: int, rng: np.random.Generator,
                         low: float = 0.40, high: float = 0.85) -> list[ChoiceObservation]:
    """Run the randomized collection policy and log every offer set shown to a worker.

    Episode ``k`` replays instance ``k mod len(instances)``.
    """
    if not instances:
        raise ValueError("data collection needs at least one instance")
    policy = CollectPolicy(rng, low, high)
    out = []
    for k in range(episodes):
        inst = instances[k % len(instances)]
        enc = encode_instance(inst)
        res = run_episode(inst, policy)
        for rec in res.per_step_log:
            if rec.worker is None or not rec.active:
                continue
            ids = list(rec.active)
            chosen = ids.index(rec.choice) if rec.choice != NONE else -1
            out.append(ChoiceObservation(
                inst.workers[rec.worker].group, enc[ids], np.array([rec.decision[i] for i in ids]), chosen,
            ))
    return out
