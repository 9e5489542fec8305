"""Domain types and episode mechanics for the crowdsourced compensation MDP.

One decision step works as follows: the operator sees the active requests and
at most one gig worker, offers a nonnegative compensation per request, the
worker picks the offer with the highest realized utility (or nothing), then
expiring requests leave with their penalty and new arrivals join.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

NONE = -1  # choice code for "worker rejected every offer"


class ContractViolation(ValueError):
    """Raised when an input breaks an operation's precondition."""


@dataclass(frozen=True)
class Request:
    id: int
    features: tuple[float, ...]
    pickup: int
    dropoff: int
    travel_time: float
    reward: float
    penalty: float
    arrival_step: int
    expiry_step: int
    type_id: int = 0

    def __post_init__(self):
        if not self.reward > 0:
            raise ContractViolation(f"request {self.id}: reward must be > 0")
        if not self.penalty < 0:
            raise ContractViolation(f"request {self.id}: penalty must be < 0")
        if self.expiry_step < self.arrival_step:
            raise ContractViolation(f"request {self.id}: expiry before arrival")


@dataclass(frozen=True)
class GigWorker:
    id: int
    group: int
    arrival_step: int
    # indexed by request id; one Gumbel draw per request of the instance
    noise_per_request: np.ndarray
    noise_null: float

    def __eq__(self, other):
        if not isinstance(other, GigWorker):
            return NotImplemented
        return (
            self.id == other.id
            and self.group == other.group
            and self.arrival_step == other.arrival_step
            and self.noise_null == other.noise_null
            and np.array_equal(self.noise_per_request, other.noise_per_request)
        )

    __hash__ = None


@dataclass(eq=False)
class Instance:
    """One realization of all exogenous randomness.

    ``utilities[d, i]`` is the deterministic utility of request ``i`` for a
    worker of group ``d``; groups are numbered from 0.
    """

    id: str
    horizon: int
    requests: list[Request]
    workers: list[GigWorker]
    n_pickup: int
    n_dropoff: int
    travel_time_matrix: np.ndarray
    utilities: np.ndarray
    u0: float = 0.0
    seed: int = 0

    def __post_init__(self):
        u = np.asarray(self.utilities, dtype=float)
        if u.ndim != 2:
            u = u.reshape(-1, len(self.requests)) if self.requests else np.zeros((1, 0))
        if u.shape[1] != len(self.requests):
            raise ContractViolation("utilities must have one column per request")
        self.utilities = u
        self.travel_time_matrix = np.asarray(self.travel_time_matrix, dtype=float)
        self._index()

    def _index(self):
        T = self.horizon
        for pos, req in enumerate(self.requests):
            if req.id != pos:
                raise ContractViolation("request ids must equal their position")
            if not 1 <= req.arrival_step <= req.expiry_step <= T:
                raise ContractViolation(f"request {req.id}: steps outside [1, {T}]")
        for pos, w in enumerate(self.workers):
            if w.id != pos:
                raise ContractViolation("worker ids must equal their position")
            if not 1 <= w.arrival_step <= T:
                raise ContractViolation(f"worker {w.id}: arrival outside [1, {T}]")
            if len(w.noise_per_request) != len(self.requests):
                raise ContractViolation(f"worker {w.id}: noise does not cover all requests")
        m = self.travel_time_matrix
        if m.size and (not np.allclose(m, m.T) or np.any(np.diag(m) != 0)):
            raise ContractViolation("travel time matrix must be symmetric with zero diagonal")

        self.rewards = np.array([r.reward for r in self.requests], dtype=float)
        self.penalties = np.array([r.penalty for r in self.requests], dtype=float)
        self.expiry = np.array([r.expiry_step for r in self.requests], dtype=int)
        self.arrival = np.array([r.arrival_step for r in self.requests], dtype=int)
        self.request_arrivals: dict[int, list[int]] = {}
        for req in self.requests:
            self.request_arrivals.setdefault(req.arrival_step, []).append(req.id)
        self.worker_arrivals: dict[int, list[int]] = {}
        for w in self.workers:
            self.worker_arrivals.setdefault(w.arrival_step, []).append(w.id)
        self.noise = (
            np.stack([w.noise_per_request for w in self.workers])
            if self.workers
            else np.zeros((0, len(self.requests)))
        )
        self.noise_null = np.array([w.noise_null for w in self.workers], dtype=float)

    @property
    def n_groups(self) -> int:
        return self.utilities.shape[0]

    @property
    def n_locations(self) -> int:
        return self.n_pickup + self.n_dropoff

    def total_penalty(self) -> float:
        return math.fsum(r.penalty for r in self.requests)

    def admission_steps(self) -> np.ndarray:
        """Step at which each worker is shown offers (FIFO, one per step).

        Entries greater than the horizon mean the worker is never served.
        Admission only depends on arrivals, so it is the same for every policy.
        """
        admitted = np.full(len(self.workers), self.horizon + 1, dtype=int)
        queue: list[int] = []
        for t in range(1, self.horizon + 1):
            queue.extend(self.worker_arrivals.get(t, ()))
            if queue:
                admitted[queue.pop(0)] = t
        return admitted


@dataclass(frozen=True)
class PreState:
    step: int
    active: tuple[int, ...]
    worker: Optional[int]
    queue: tuple[int, ...] = ()

    @property
    def has_worker(self) -> bool:
        return self.worker is not None


@dataclass(frozen=True)
class CompensationDecision:
    comp: dict[int, float]

    @classmethod
    def from_array(cls, ids: Sequence[int], values) -> "CompensationDecision":
        return cls({int(i): float(v) for i, v in zip(ids, values)})

    def validate(self, active: Sequence[int]) -> None:
        if set(self.comp) != set(active):
            raise ContractViolation(
                f"decision keys {sorted(self.comp)} do not match active set {sorted(active)}"
            )
        for i, c in self.comp.items():
            if not (math.isfinite(c) and c >= 0):
                raise ContractViolation(f"compensation for request {i} must be finite and >= 0, got {c}")


@dataclass(frozen=True)
class StepRecord:
    step: int
    active: tuple[int, ...]
    worker: Optional[int]
    decision: dict[int, float]
    choice: int
    expired: tuple[int, ...]
    reward: float


@dataclass
class EpisodeResult:
    total_reward: float
    accepted: list[tuple[int, int, int, float]] = field(default_factory=list)
    expired: list[tuple[int, int]] = field(default_factory=list)
    per_step_log: list[StepRecord] = field(default_factory=list)

    def reward_terms(self, instance: Instance) -> list[float]:
        terms = [instance.requests[i].reward - c for _, _, i, c in self.accepted]
        terms += [instance.requests[i].penalty for _, i in self.expired]
        return terms


class Policy(Protocol):
    def decide(self, state: PreState, instance: Instance) -> CompensationDecision: ...


def initial_state(instance: Instance) -> PreState:
    queue = list(instance.worker_arrivals.get(1, ()))
    worker = queue.pop(0) if queue else None
    return PreState(1, tuple(instance.request_arrivals.get(1, ())), worker, tuple(queue))


def expire_split(active: Sequence[int], t: int, instance: Instance) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Split ``active`` into (surviving, expiring-now) request ids."""
    surviving, expiring = [], []
    for i in active:
        exp = instance.expiry[i]
        if exp < t:
            raise ContractViolation(f"request {i} expired at {exp} but is still active at {t}")
        (expiring if exp == t else surviving).append(i)
    return tuple(surviving), tuple(expiring)


def worker_choice(instance: Instance, worker: int, ids: Sequence[int], comps: np.ndarray) -> int:
    """Gumbel-max choice with the worker's pre-drawn noise.

    Ties go to the lowest request id; the null option loses every tie.
    """
    if len(ids) == 0:
        return NONE
    group = instance.workers[worker].group
    ids_arr = np.asarray(ids, dtype=int)
    scores = instance.utilities[group, ids_arr] + comps + instance.noise[worker, ids_arr]
    best = scores.max()
    null = instance.u0 + instance.noise_null[worker]
    if best < null:
        return NONE
    return int(ids_arr[scores == best].min())


def step_transition(state: PreState, decision: CompensationDecision, instance: Instance):
    """Advance one step. Returns (post_active, choice, realized_reward, next_state, record)."""
    decision.validate(state.active)
    t = state.step
    surviving, expiring = expire_split(state.active, t, instance)
    choice = NONE
    if state.worker is not None:
        comps = np.array([decision.comp[i] for i in state.active], dtype=float)
        choice = worker_choice(instance, state.worker, state.active, comps)

    terms = []
    if choice != NONE:
        terms.append(instance.requests[choice].reward - decision.comp[choice])
    expired = tuple(i for i in expiring if i != choice)
    terms.extend(instance.requests[i].penalty for i in expired)
    reward = math.fsum(terms)

    post_active = tuple(i for i in surviving if i != choice)
    queue = list(state.queue) + list(instance.worker_arrivals.get(t + 1, ()))
    worker = queue.pop(0) if queue else None
    next_active = post_active + tuple(instance.request_arrivals.get(t + 1, ()))
    next_state = PreState(t + 1, next_active, worker, tuple(queue))
    record = StepRecord(t, state.active, state.worker, dict(decision.comp), choice, expired, reward)
    return post_active, choice, reward, next_state, record


def expected_immediate_reward(rewards, comps, penalties, expiring, probs, has_worker: bool) -> float:
    """Expected one-step operator reward for given acceptance probabilities."""
    rewards, comps, penalties = (np.asarray(a, dtype=float) for a in (rewards, comps, penalties))
    expiring = np.asarray(expiring, dtype=bool)
    probs = np.asarray(probs, dtype=float)
    if np.any((probs < 0) | (probs > 1)) or probs.sum() > 1 + 1e-12:
        raise ContractViolation("acceptance probabilities must lie in [0, 1] and sum to at most 1")
    value = float(np.sum(penalties[expiring]))
    if has_worker:
        value += float(np.sum(probs * (rewards - comps - penalties * expiring)))
    return value


def run_episode(instance: Instance, policy: Policy) -> EpisodeResult:
    state = initial_state(instance)
    result = EpisodeResult(0.0)
    for _ in range(instance.horizon):
        decision = policy.decide(state, instance)
        _, choice, _, next_state, record = step_transition(state, decision, instance)
        if choice != NONE:
            result.accepted.append((state.step, state.worker, choice, decision.comp[choice]))
        result.expired.extend((state.step, i) for i in record.expired)
        result.per_step_log.append(record)
        state = next_state
    result.total_reward = math.fsum(result.reward_terms(instance))
    return result
