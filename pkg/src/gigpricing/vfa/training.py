"""Approximate value iteration on the post-decision value function."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from ..choice import MnlParams, encode_instance
from ..core import CompensationDecision, Instance, PreState, initial_state, run_episode, step_transition
from ..pricing import PricingInput, PricingOutput, batched_optimal_value, optimal_compensations
from .network import N_GLOBALS, ValueNetwork, feature_dim, removal_globals, request_rows, set_globals

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.95
    batch_size: int = 512
    lr: float = 1e-5
    lr_decay_rate: float = 1e-2
    lr_decay_steps: int = 10_000
    epochs: int = 30
    update_every: int = 4_000  # environment steps between updates of the main network
    sync_every: int = 20_000  # environment steps between target-network syncs
    gradient_steps: int = 1  # minibatch steps per update
    huber_delta: float = 1.0
    clip_norm: float = 0.5
    explore_std: float = 10.0
    explore_decay: float = 1e-4
    replay_capacity: int = 200_000
    seed: int = 0

    def __post_init__(self):
        positive = ("gamma", "batch_size", "lr", "lr_decay_rate", "lr_decay_steps", "update_every",
                    "sync_every", "gradient_steps", "huber_delta", "clip_norm", "replay_capacity")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.epochs < 0 or self.explore_std < 0 or self.explore_decay < 0:
            raise ValueError("epochs and exploration settings must be nonnegative")
        if self.sync_every % self.update_every:
            raise ValueError("sync_every must be a multiple of update_every")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Settings that learn within a few dozen epochs of 80 short episodes."""
        # frequent small updates and syncs: bootstrapped values need many target refreshes to propagate
        base = dict(lr=1e-3, lr_decay_steps=5_000, update_every=100, sync_every=500, gradient_steps=5, epochs=8,
                    explore_std=0.5, explore_decay=2e-5)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def exploration_std(config: TrainConfig, env_step: int) -> float:
    return max(0.0, config.explore_std - env_step * config.explore_decay)


def learning_rate(config: TrainConfig, opt_step: int) -> float:
    return config.lr * config.lr_decay_rate ** (opt_step / config.lr_decay_steps)


class EstimatedUtilities:
    """Per-instance, per-group estimated utilities, computed once."""

    def __init__(self, estimates: Mapping[int, MnlParams]):
        self.estimates = estimates
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def params(self, group: int) -> MnlParams:
        try:
            return self.estimates[group]
        except KeyError:
            raise KeyError(f"no MNL estimate for worker group {group}") from None

    def __call__(self, instance: Instance, group: int) -> np.ndarray:
        key = (id(instance), group)
        if key not in self._cache:
            enc = encode_instance(instance)
            p = self.params(group)
            self._cache[key] = enc @ p.weights if len(enc) else np.zeros(0)
        return self._cache[key]


def _as_utilities(estimates) -> EstimatedUtilities:
    return estimates if isinstance(estimates, EstimatedUtilities) else EstimatedUtilities(estimates)


def price_state(net: Optional[ValueNetwork], state: PreState, instance: Instance, estimates, gamma: float,
                use_target: bool = False) -> PricingOutput:
    """Closed-form prices for a state with a worker, using the network's opportunity costs."""
    est = _as_utilities(estimates)
    worker = instance.workers[state.worker]
    params = est.params(worker.group)
    ids = np.asarray(state.active, dtype=int)
    t = state.step
    expiring = instance.expiry[ids] == t
    deltas = np.zeros(len(ids))
    keep = ids[~expiring]
    if net is not None and len(keep):
        rows = request_rows(keep, instance, t)
        seg = np.zeros(len(keep), dtype=int)
        G_full, G_minus = removal_globals(rows[:, -2], seg, 1, np.array([t / instance.horizon]))
        v_full, v_minus = net.values_with_removals(rows, seg, G_full, G_minus, use_target)
        deltas[~expiring] = gamma * (v_full[0] - v_minus)
    inp = PricingInput(
        instance.rewards[ids], instance.penalties[ids], expiring, est(instance, worker.group)[ids], deltas,
        params.mu, params.u0,
    )
    return optimal_compensations(inp)


@dataclass
class Transition:
    """Observed post-decision state at ``post_step`` and the pre-decision state after it.

    ``active`` is None when the post-decision state is the last one of the episode.
    """

    instance: Instance
    post: tuple[int, ...]
    post_step: int
    active: Optional[tuple[int, ...]]
    worker_group: int  # -1 when no worker is present
    rows: np.ndarray = field(default=None, repr=False)
    globals: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        inst = self.instance
        if self.rows is None:
            self.rows = request_rows(self.post, inst, self.post_step) if self.post else np.zeros(
                (0, feature_dim(inst))
            )
            self.globals = set_globals(self.rows[:, -2], self.post_step, inst.horizon)
        if self.active is not None:
            # successor pre-decision state, fixed for the life of the transition
            t = self.post_step + 1
            ids = np.asarray(self.active, dtype=int)
            self.succ_ids = ids
            self.succ_expiring = inst.expiry[ids] == t
            self.succ_penalty = float(inst.penalties[ids[self.succ_expiring]].sum())
            self.succ_base = inst.rewards[ids] - inst.penalties[ids] * self.succ_expiring
            keep = ids[~self.succ_expiring]
            self.succ_rows = request_rows(keep, inst, t) if len(keep) else np.zeros((0, feature_dim(inst)))
            self.succ_t_norm = t / inst.horizon


def batch_targets(net: ValueNetwork, transitions: Sequence[Transition], estimates, gamma: float,
                  use_target: bool = True) -> np.ndarray:
    """Estimated optimal value of each transition's successor pre-decision state."""
    est = _as_utilities(estimates)
    out = np.zeros(len(transitions))
    live = [k for k, tr in enumerate(transitions) if tr.active is not None]
    if not live:
        return out
    trs = [transitions[k] for k in live]
    n_sets = len(trs)
    sizes = np.array([len(tr.succ_rows) for tr in trs])
    X = np.vstack([tr.succ_rows for tr in trs])
    seg = np.repeat(np.arange(n_sets), sizes)
    t_norm = np.array([tr.succ_t_norm for tr in trs])
    G_full, G_minus = removal_globals(X[:, -2], seg, n_sets, t_norm)
    v_full, v_minus = net.values_with_removals(X, seg, G_full, G_minus, use_target)
    exp_pen = np.array([tr.succ_penalty for tr in trs])

    # pricing inputs for every active request of every transition with a worker
    starts = np.concatenate([[0], np.cumsum(sizes)])
    net_vals, utils, pseg, mus, u0s, with_worker = [], [], [], [], [], []
    for b, tr in enumerate(trs):
        if tr.worker_group < 0:
            continue
        deltas = np.zeros(len(tr.succ_ids))
        deltas[~tr.succ_expiring] = gamma * (v_full[b] - v_minus[starts[b] : starts[b + 1]])
        params = est.params(tr.worker_group)
        net_vals.append(tr.succ_base - deltas)
        utils.append(est(tr.instance, tr.worker_group)[tr.succ_ids])
        pseg.append(np.full(len(tr.succ_ids), len(with_worker)))
        mus.append(params.mu)
        u0s.append(params.u0)
        with_worker.append(b)
    phi_star = np.zeros(n_sets)
    if with_worker:
        phi_star[with_worker] = batched_optimal_value(
            np.concatenate(net_vals), np.concatenate(utils), np.concatenate(pseg).astype(int),
            np.asarray(mus), np.asarray(u0s),
        )
    out[live] = phi_star + gamma * v_full + exp_pen
    return out


def bellman_target(transition: Transition, net: ValueNetwork, estimates: Mapping[int, MnlParams],
                   gamma: float, use_target: bool = True) -> float:
    """Single-transition target via the closed-form pricing solver."""
    if transition.active is None:
        return 0.0
    inst, t = transition.instance, transition.post_step + 1
    ids = np.asarray(transition.active, dtype=int)
    expiring = inst.expiry[ids] == t
    keep = ids[~expiring]
    penalties = float(inst.penalties[ids[expiring]].sum())
    rows = request_rows(keep, inst, t) if len(keep) else np.zeros((0, net.n_features))
    seg = np.zeros(len(keep), dtype=int)
    G_full, G_minus = removal_globals(rows[:, -2] if len(rows) else np.zeros(0), seg, 1, np.array([t / inst.horizon]))
    v_full, v_minus = net.values_with_removals(rows, seg, G_full, G_minus, use_target)
    if transition.worker_group < 0:
        return penalties + gamma * float(v_full[0])
    est = _as_utilities(estimates)
    params = est.params(transition.worker_group)
    deltas = np.zeros(len(ids))
    deltas[~expiring] = gamma * (v_full[0] - v_minus)
    inp = PricingInput(inst.rewards[ids], inst.penalties[ids], expiring, est(inst, transition.worker_group)[ids],
                       deltas, params.mu, params.u0)
    return optimal_compensations(inp).phi_star + gamma * float(v_full[0]) + penalties


class ReplayBuffer:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.items: list[Transition] = []
        self.targets = np.zeros(capacity)
        self.version = np.full(capacity, -1, dtype=np.int64)
        self._next = 0

    def __len__(self):
        return len(self.items)

    def add(self, tr: Transition) -> None:
        if len(self.items) < self.capacity:
            self.items.append(tr)
        else:
            self.items[self._next] = tr
        self.version[self._next] = -1
        self._next = (self._next + 1) % self.capacity


class Adam:
    def __init__(self, params: dict[str, np.ndarray], b1=0.9, b2=0.999, eps=1e-7):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def huber_grad(r: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(r, -delta, delta)


def huber(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


class _VfaActor:
    """Deterministic VFA pricing as a policy (used for validation)."""

    def __init__(self, net, estimates, gamma):
        self.net, self.est, self.gamma = net, _as_utilities(estimates), gamma

    def decide(self, state, instance):
        if state.worker is None or not state.active:
            return CompensationDecision({i: 0.0 for i in state.active})
        out = price_state(self.net, state, instance, self.est, self.gamma)
        return CompensationDecision.from_array(state.active, out.comps)


def mean_episode_reward(net, instances, estimates, gamma) -> float:
    actor = _VfaActor(net, estimates, gamma)
    return float(np.mean([run_episode(inst, actor).total_reward for inst in instances]))


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = -math.inf
    initial_val: float = -math.inf


def _fit_normalization(net: ValueNetwork, buffer: ReplayBuffer, targets: np.ndarray) -> None:
    rows = np.vstack([tr.rows for tr in buffer.items if len(tr.rows)] or [np.zeros((1, net.n_features))])
    G = np.vstack([tr.globals for tr in buffer.items])
    for name, data in (("x", rows), ("g", G)):
        shift = data.mean(axis=0)
        scale = data.std(axis=0)
        net.stats[f"{name}_shift"] = shift
        net.stats[f"{name}_scale"] = np.where(scale > 1e-8, scale, 1.0)
    net.stats["y_shift"] = np.array([float(np.mean(targets))])
    net.stats["y_scale"] = np.array([max(float(np.std(targets)), 1.0)])


def train(train_instances: Sequence[Instance], val_instances: Sequence[Instance], estimates: Mapping[int, MnlParams],
          config: TrainConfig = TrainConfig(), net: Optional[ValueNetwork] = None):
    """Fit the post-decision value network; returns (best network on validation, TrainLog)."""
    if not train_instances or not val_instances:
        raise ValueError("train needs nonempty training and validation instance sets")
    rng = np.random.default_rng(config.seed)
    est = _as_utilities(estimates)
    if net is None:
        net = ValueNetwork.init(feature_dim(train_instances[0]), rng)
    net.sync_target()
    tlog = TrainLog()
    if config.epochs == 0:
        return net, tlog

    best = net.copy()
    tlog.initial_val = tlog.best_val = mean_episode_reward(net, val_instances, est, config.gamma)
    buffer = ReplayBuffer(config.replay_capacity)
    opt = Adam(net.params)
    env_step = 0
    target_version = 0
    normalized = False

    def update_phase() -> list[float]:
        nonlocal normalized
        if not normalized:
            idx_all = np.arange(len(buffer))
            _refresh_targets(idx_all)
            _fit_normalization(net, buffer, buffer.targets[: len(buffer)])
            # the head may be nonzero, so refresh the target copy with new statistics
            net.sync_target()
            buffer.version[:] = -1
            normalized = True
        losses = []
        for _ in range(config.gradient_steps):
            idx = rng.integers(0, len(buffer), size=min(config.batch_size, len(buffer)))
            _refresh_targets(idx)
            batch = [buffer.items[i] for i in idx]
            X = np.vstack([tr.rows for tr in batch])
            seg = np.repeat(np.arange(len(batch)), [len(tr.rows) for tr in batch])
            G = np.vstack([tr.globals for tr in batch])
            v, cache = net.forward_batch(X, seg, G)
            scale = net.stats["y_scale"][0]
            r = (v - buffer.targets[idx]) / scale
            losses.append(float(huber(r, config.huber_delta).mean()))
            if not math.isfinite(losses[-1]):
                raise FloatingPointError("value network training diverged (non-finite loss)")
            dv = huber_grad(r, config.huber_delta) / scale / len(batch)
            grads = net.backward_batch(cache, dv)
            clip_by_global_norm(grads, config.clip_norm)
            opt.step(net.params, grads, learning_rate(config, opt.t))
        return losses

    def _refresh_targets(idx):
        stale = np.unique(idx[buffer.version[idx] != target_version])
        if len(stale):
            trs = [buffer.items[i] for i in stale]
            buffer.targets[stale] = batch_targets(net, trs, est, config.gamma, use_target=True)
            buffer.version[stale] = target_version

    for epoch in range(1, config.epochs + 1):
        losses: list[float] = []
        order = rng.permutation(len(train_instances))
        for k in order:
            inst = train_instances[k]
            state = initial_state(inst)
            prev_post: Optional[tuple[tuple[int, ...], int]] = None
            for _ in range(inst.horizon):
                if prev_post is not None:
                    group = inst.workers[state.worker].group if state.worker is not None else -1
                    buffer.add(Transition(inst, prev_post[0], prev_post[1], state.active, group))
                if state.worker is not None and state.active:
                    out = price_state(net, state, inst, est, config.gamma)
                    std = exploration_std(config, env_step)
                    noise = rng.normal(0.0, std, size=len(state.active)) if std > 0 else 0.0
                    comps = np.maximum(0.0, out.comps_raw + noise)
                else:
                    comps = np.zeros(len(state.active))
                decision = CompensationDecision.from_array(state.active, comps)
                post, _, _, next_state, _ = step_transition(state, decision, inst)
                prev_post = (post, state.step)
                state = next_state
                env_step += 1
                if env_step % config.update_every == 0:
                    losses.extend(update_phase())
                if env_step % config.sync_every == 0:
                    net.sync_target()
                    target_version += 1
            buffer.add(Transition(inst, prev_post[0], prev_post[1], None, -1))

        val = mean_episode_reward(net, val_instances, est, config.gamma)
        entry = {
            "epoch": epoch,
            "env_steps": env_step,
            "opt_steps": opt.t,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "val_reward": val,
            "explore_std": exploration_std(config, env_step),
            "lr": learning_rate(config, opt.t),
        }
        tlog.epochs.append(entry)
        log.info("epoch %d: loss %.4g val %.4f", epoch, entry["loss"], val)
        if val > tlog.best_val:
            tlog.best_val, tlog.best_epoch = val, epoch
            best = net.copy()
    return best, tlog
