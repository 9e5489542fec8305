"""Closed-form optimal compensations under MNL choice.

With acceptance probabilities as decision variables the pricing objective is
concave, and its first-order condition gives every request the same markdown
``m`` from its reward:

    c_i = r_i - beta_i * expiring_i - delta_i - m
    (m / mu - 1) * exp(m / mu - 1) = sum_i exp((r_i + u_i - u0 - beta_i * expiring_i - delta_i - mu) / mu)

so ``m = mu * (W0(rhs) + 1)`` with ``W0`` the principal Lambert W branch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .choice import acceptance_probabilities

_MAX_ITER = 64


def _as_float_array(x):
    arr = np.asarray(x, dtype=float)
    return arr, arr.ndim == 0


def lambert_w0(x):
    """Principal branch of Lambert W for nonnegative arguments (Halley's method)."""
    x, scalar = _as_float_array(x)
    x = np.atleast_1d(x)
    if np.any(~np.isfinite(x)) or np.any(x < 0):
        raise ValueError("lambert_w0 needs finite, nonnegative arguments")
    # initial guesses: log1p near the origin, asymptotic series for large x
    w = np.log1p(x)
    big = x > 3.0
    if np.any(big):
        l1 = np.log(x[big])
        l2 = np.log(l1)
        w[big] = l1 - l2 + l2 / l1
    for _ in range(_MAX_ITER):
        ew = np.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        dw = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w = w - dw
        if np.all(np.abs(dw) <= 4e-16 * (1.0 + np.abs(w))):
            break
    w[x == 0] = 0.0
    return float(w[0]) if scalar else w


def lambert_w0_log(log_x):
    """W0(exp(log_x)) without forming exp(log_x).

    For ``log_x > 1`` solves ``w + ln w = log_x`` by Newton's method, where the
    solution exceeds 1 and the iteration is well conditioned.
    """
    L, scalar = _as_float_array(log_x)
    L = np.atleast_1d(L)
    if np.any(~np.isfinite(L)):
        raise ValueError("lambert_w0_log needs a finite argument")
    out = np.empty_like(L)
    small = L <= 1.0
    if np.any(small):
        out[small] = lambert_w0(np.exp(L[small]))
    if np.any(~small):
        Lb = L[~small]
        w = np.maximum(Lb - np.log(Lb), 1.0)
        for _ in range(_MAX_ITER):
            f = w + np.log(w) - Lb
            dw = f / (1.0 + 1.0 / w)
            w = w - dw
            if np.all(np.abs(dw) <= 4e-16 * w):
                break
        out[~small] = w
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class PricingInput:
    """Aligned per-request arrays plus the worker group's ``mu`` and ``u0``.

    ``deltas`` are opportunity costs: value of keeping the request in the
    post-decision state minus value without it.
    """

    rewards: np.ndarray
    penalties: np.ndarray
    expiring: np.ndarray
    utilities: np.ndarray
    deltas: np.ndarray
    mu: float
    u0: float = 0.0

    def __post_init__(self):
        for name in ("rewards", "penalties", "utilities", "deltas"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        object.__setattr__(self, "expiring", np.asarray(self.expiring, dtype=bool).ravel())
        n = len(self.rewards)
        if any(len(getattr(self, a)) != n for a in ("penalties", "expiring", "utilities", "deltas")):
            raise ValueError("pricing arrays must be aligned")
        if not self.mu > 0:
            raise ValueError("mu must be positive")

    @classmethod
    def myopic(cls, rewards, penalties, expiring, utilities, mu, u0=0.0):
        return cls(rewards, penalties, expiring, utilities, np.zeros(len(rewards)), mu, u0)

    @property
    def n(self) -> int:
        return len(self.rewards)

    def net_values(self) -> np.ndarray:
        """r_i - beta_i * expiring_i - delta_i: what serving request i is worth now."""
        return self.rewards - self.penalties * self.expiring - self.deltas


@dataclass(frozen=True)
class PricingOutput:
    comps: np.ndarray
    comps_raw: np.ndarray
    probs: np.ndarray
    p_null: float
    m: float
    phi_star: float


def solve_m(inp: PricingInput) -> float:
    if inp.n == 0:
        return inp.mu
    a = (inp.net_values() + inp.utilities - inp.u0 - inp.mu) / inp.mu
    top = a.max()
    return inp.mu * (lambert_w0_log(float(top + math.log(np.exp(a - top).sum()))) + 1.0)


def optimal_compensations(inp: PricingInput) -> PricingOutput:
    m = solve_m(inp)
    mu = inp.mu
    net = inp.net_values()
    comps_raw = net - m
    log_p = math.log(mu / m) + (net + inp.utilities - inp.u0 - m) / mu
    probs = np.exp(log_p)
    phi_star = float(np.sum(probs * (inp.rewards - comps_raw - inp.deltas - inp.penalties * inp.expiring)))
    return PricingOutput(np.maximum(comps_raw, 0.0), comps_raw, probs, mu / m, m, phi_star)


def phi(inp: PricingInput, comps) -> float:
    """Expected net value of the worker's choice for compensations ``comps``."""
    if inp.n == 0:
        return 0.0
    comps = np.asarray(comps, dtype=float)
    probs, _ = acceptance_probabilities(inp.utilities, comps, inp.mu, inp.u0)
    return float(np.sum(probs * (inp.net_values() - comps)))


def phi_of_probs(inp: PricingInput, probs) -> float:
    """The same objective written in probability space (concave there)."""
    probs = np.asarray(probs, dtype=float)
    p_null = 1.0 - probs.sum()
    comps = -inp.utilities + inp.u0 + inp.mu * np.log(probs) - inp.mu * math.log(p_null)
    return float(np.sum(probs * (inp.net_values() - comps)))


def neg_phi_hessian(inp: PricingInput, probs) -> np.ndarray:
    """Hessian of -phi over (P_1..P_n, P_null), treating P_null as free."""
    probs = np.asarray(probs, dtype=float)
    p0 = 1.0 - probs.sum()
    n = len(probs)
    H = np.zeros((n + 1, n + 1))
    H[np.arange(n), np.arange(n)] = 1.0 / probs
    H[:n, n] = H[n, :n] = -1.0 / p0
    H[n, n] = probs.sum() / p0**2
    return inp.mu * H


def batched_optimal_value(net_values, utilities, seg, mu, u0) -> np.ndarray:
    """``phi_star`` for many pricing problems at once.

    ``seg`` assigns each request to a problem; ``mu`` and ``u0`` hold one
    entry per problem. Every problem needs at least one request; an empty
    problem has ``phi_star = 0`` anyway.
    """
    net_values = np.asarray(net_values, dtype=float)
    utilities = np.asarray(utilities, dtype=float)
    seg = np.asarray(seg, dtype=int)
    mu = np.asarray(mu, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    n = len(mu)
    a = (net_values + utilities - u0[seg] - mu[seg]) / mu[seg]
    top = np.full(n, -np.inf)
    np.maximum.at(top, seg, a)
    sums = np.bincount(seg, weights=np.exp(a - top[seg]), minlength=n)
    with np.errstate(divide="ignore"):
        lse = np.where(sums > 0, top + np.log(sums), -np.inf)
    m = mu.copy()
    has = np.isfinite(lse)
    m[has] = mu[has] * (lambert_w0_log(lse[has]) + 1.0)
    log_p = np.log(mu / m)[seg] + (net_values + utilities - u0[seg] - m[seg]) / mu[seg]
    return m * np.bincount(seg, weights=np.exp(log_p), minlength=n)
