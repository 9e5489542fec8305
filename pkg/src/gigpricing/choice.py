"""Multinomial logit choice model: probabilities, the price/probability
bijection, and estimation from accept/reject logs."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .core import ContractViolation, Instance, Request


@dataclass(frozen=True)
class MnlParams:
    group: int
    weights: np.ndarray
    mu: float = 1.0
    u0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if not self.mu > 0:
            raise ContractViolation(f"group {self.group}: mu must be positive, got {self.mu}")

    def vector(self) -> np.ndarray:
        """Weights followed by mu, the space perturbations live in."""
        return np.append(self.weights, self.mu)

    def to_dict(self) -> dict:
        return {"group": self.group, "weights": self.weights.tolist(), "mu": self.mu, "u0": self.u0}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MnlParams":
        return cls(int(d["group"]), np.asarray(d["weights"], dtype=float), float(d["mu"]), float(d.get("u0", 0.0)))


@dataclass(frozen=True)
class ChoiceObservation:
    group: int
    encodings: np.ndarray  # (n_offers, dim)
    comps: np.ndarray  # (n_offers,)
    chosen: int  # index into the offers, or -1

    def __post_init__(self):
        if not -1 <= self.chosen < len(self.comps):
            raise ContractViolation(f"chosen index {self.chosen} out of range")

    def to_record(self) -> dict:
        return {
            "group": self.group,
            "offers": [[e.tolist(), float(c)] for e, c in zip(self.encodings, self.comps)],
            "chosen": self.chosen,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "ChoiceObservation":
        offers = rec["offers"]
        enc = np.array([o[0] for o in offers], dtype=float).reshape(len(offers), -1)
        comps = np.array([o[1] for o in offers], dtype=float)
        return cls(int(rec["group"]), enc, comps, int(rec["chosen"]))


@dataclass(frozen=True)
class MnlEstimate:
    params: MnlParams
    train_loss: float
    n_obs: int
    loss_history: tuple[float, ...] = ()


@dataclass(frozen=True)
class FitConfig:
    learning_rate: float = 1e-2
    epochs: int = 200
    batch_size: int = 256
    l2: float = 1e-3
    mode: str = "mnl"  # "mnl" or "binary"
    seed: int = 0
    mu_init: float = 1.0


def encode_request(req: Request, n_pickup: int, n_dropoff: int) -> np.ndarray:
    """[features, travel time, one-hot pickup, one-hot dropoff]."""
    enc = np.zeros(len(req.features) + 1 + n_pickup + n_dropoff)
    k = len(req.features)
    enc[:k] = req.features
    enc[k] = req.travel_time
    enc[k + 1 + req.pickup] = 1.0
    enc[k + 1 + n_pickup + req.dropoff] = 1.0
    return enc


def encode_instance(instance: Instance) -> np.ndarray:
    if not instance.requests:
        return np.zeros((0, 0))
    return np.stack([encode_request(r, instance.n_pickup, instance.n_dropoff) for r in instance.requests])


def utility_of(params: MnlParams, encoding) -> float | np.ndarray:
    encoding = np.asarray(encoding, dtype=float)
    if encoding.shape[-1] != params.weights.shape[0]:
        raise ContractViolation(
            f"encoding has dimension {encoding.shape[-1]}, weights have {params.weights.shape[0]}"
        )
    out = encoding @ params.weights
    return float(out) if out.ndim == 0 else out


def acceptance_probabilities(utilities, comps, mu: float, u0: float = 0.0):
    """MNL acceptance probability per offer and the probability of rejecting all."""
    scores = (np.asarray(utilities, dtype=float) + np.asarray(comps, dtype=float)) / mu
    if not (np.all(np.isfinite(scores)) and math.isfinite(u0) and mu > 0):
        raise ContractViolation("acceptance_probabilities needs finite inputs and mu > 0")
    null = u0 / mu
    top = max(null, scores.max()) if scores.size else null
    ex = np.exp(scores - top)
    ex_null = math.exp(null - top)
    denom = ex.sum() + ex_null
    return ex / denom, ex_null / denom


def compensation_from_probs(p_i, p_null, u_i, mu: float, u0: float = 0.0):
    """Compensation that yields acceptance probability ``p_i`` given ``p_null``."""
    p_i = np.asarray(p_i, dtype=float)
    if np.any((p_i <= 0) | (p_i >= 1)) or not 0 < p_null < 1:
        raise ContractViolation("probabilities must lie strictly inside (0, 1)")
    out = -np.asarray(u_i, dtype=float) + u0 + mu * np.log(p_i) - mu * math.log(p_null)
    return float(out) if out.ndim == 0 else out


# --- estimation ----------------------------------------------------------


def _pack(observations: Sequence[ChoiceObservation]):
    """Flatten ragged choice sets into padded arrays."""
    n = len(observations)
    width = max(len(o.comps) for o in observations)
    dim = observations[0].encodings.shape[1]
    X = np.zeros((n, width, dim))
    C = np.zeros((n, width))
    mask = np.zeros((n, width), dtype=bool)
    y = np.full(n, -1, dtype=int)
    for k, o in enumerate(observations):
        m = len(o.comps)
        X[k, :m] = o.encodings
        C[k, :m] = o.comps
        mask[k, :m] = True
        y[k] = o.chosen
    return X, C, mask, y


def _mnl_loss_grad(w, log_beta, X, C, mask, y, u0, l2):
    beta = math.exp(log_beta)
    raw = X @ w + C  # (n, width)
    s = np.where(mask, raw / beta, -np.inf)
    s0 = np.full((len(y), 1), u0 / beta)
    full = np.concatenate([s0, s], axis=1)
    lse = logsumexp(full, axis=1)
    chosen = np.where(y >= 0, s[np.arange(len(y)), np.maximum(y, 0)], u0 / beta)
    nll = lse - chosen
    loss = nll.mean() + l2 * beta * beta
    p = np.exp(full - lse[:, None])  # (n, width + 1)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y + 1] = 1.0
    resid = p - onehot  # d nll / d score
    raw_full = np.concatenate([np.full((len(y), 1), u0), np.where(mask, raw, 0.0)], axis=1)
    g_w = np.einsum("nk,nkd->nd", resid[:, 1:], X).mean(axis=0) / beta
    # d score / d log_beta = -score
    g_lb = -(resid * raw_full).sum(axis=1).mean() / beta + 2 * l2 * beta * beta
    return loss, g_w, g_lb


def _binary_loss_grad(w, log_beta, X, C, mask, y, u0, l2):
    beta = math.exp(log_beta)
    z = (X @ w + C - u0) / beta
    lab = np.zeros_like(z)
    rows = np.flatnonzero(y >= 0)
    lab[rows, y[rows]] = 1.0
    n_off = mask.sum()
    # log(1 + e^z) - lab * z, averaged over offers
    nll = np.where(mask, np.logaddexp(0.0, z) - lab * z, 0.0)
    loss = nll.sum() / n_off + l2 * beta * beta
    resid = np.where(mask, expit(z) - lab, 0.0)
    g_w = np.einsum("nk,nkd->d", resid, X) / n_off / beta
    g_lb = -(resid * z).sum() / n_off + 2 * l2 * beta * beta
    return loss, g_w, g_lb


def _fit_group(observations, config: FitConfig, u0: float, group: int) -> MnlEstimate:
    X, C, mask, y = _pack(observations)
    lossfn = _mnl_loss_grad if config.mode == "mnl" else _binary_loss_grad
    rng = np.random.default_rng(config.seed + 7919 * group)
    w = np.zeros(X.shape[2])
    log_beta = math.log(config.mu_init)
    n = len(y)
    bs = min(config.batch_size, n)
    # Adam moments
    m_w, v_w = np.zeros_like(w), np.zeros_like(w)
    m_b = v_b = 0.0
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = [lossfn(w, log_beta, X, C, mask, y, u0, config.l2)[0]]
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate / math.sqrt(epoch)
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            _, g_w, g_b = lossfn(w, log_beta, X[idx], C[idx], mask[idx], y[idx], u0, config.l2)
            step += 1
            m_w = b1 * m_w + (1 - b1) * g_w
            v_w = b2 * v_w + (1 - b2) * g_w * g_w
            m_b = b1 * m_b + (1 - b1) * g_b
            v_b = b2 * v_b + (1 - b2) * g_b * g_b
            c1, c2 = 1 - b1**step, 1 - b2**step
            w = w - lr * (m_w / c1) / (np.sqrt(v_w / c2) + eps)
            log_beta = log_beta - lr * (m_b / c1) / (math.sqrt(v_b / c2) + eps)
        history.append(lossfn(w, log_beta, X, C, mask, y, u0, config.l2)[0])
    params = MnlParams(group, w, math.exp(log_beta), u0)
    return MnlEstimate(params, float(history[-1]), n, tuple(float(h) for h in history))


def fit_mnl(
    observations: Iterable[ChoiceObservation],
    config: FitConfig = FitConfig(),
    u0: float = 0.0,
    groups: Iterable[int] | None = None,
) -> dict[int, MnlEstimate]:
    """Fit one MNL model per worker group by maximizing the choice likelihood.

    Utility scores are ``(w @ x + c) / beta`` with ``beta = exp(log_beta)``
    and an L2 penalty ``l2 * beta**2``; the null option scores ``u0 / beta``.
    """
    if config.mode not in ("mnl", "binary"):
        raise ValueError(f"unknown estimator mode {config.mode!r}")
    by_group: dict[int, list[ChoiceObservation]] = {}
    for obs in observations:
        if len(obs.comps):
            by_group.setdefault(obs.group, []).append(obs)
    wanted = sorted(set(groups) if groups is not None else by_group)
    out = {}
    for g in wanted:
        if not by_group.get(g):
            raise ValueError(f"no observations with offers for group {g}")
        out[g] = _fit_group(by_group[g], config, u0, g)
    return out


def pool_groups(observations: Iterable[ChoiceObservation], group: int = 0) -> list[ChoiceObservation]:
    """Relabel every observation into one group (single-MNL variant)."""
    return [replace(o, group=group) for o in observations]


def write_observations(path, observations: Iterable[ChoiceObservation]) -> None:
    with open(path, "w") as fh:
        for o in observations:
            fh.write(json.dumps(o.to_record(), separators=(",", ":")) + "\n")


def read_observations(path) -> list[ChoiceObservation]:
    with open(path) as fh:
        return [ChoiceObservation.from_record(json.loads(line)) for line in fh if line.strip()]
