"""Full-information upper bound as a max-weight bipartite matching.

Knowing every arrival and every utility noise draw, the operator would pay
each served worker exactly the smallest compensation that makes them pick the
request. The best achievable reward is then a matching problem between
requests and time-compatible workers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Instance

MODES = ("clamped", "literal")


@dataclass(frozen=True)
class MatchEdge:
    request: int
    worker: int
    min_comp: float
    weight: float


def literal_weight(reward: float, penalty: float, utility: float, noise: float, u0: float = 0.0) -> float:
    """Edge weight with a single noise term per worker: r - beta - (u0 - u - e)."""
    return reward - penalty - (u0 - utility - noise)


def build_edges(instance: Instance, mode: str = "clamped", use_admission: bool = True) -> list[MatchEdge]:
    """Profitable (request, worker) pairs.

    A pair is compatible when the worker is shown offers while the request is
    active. With ``use_admission`` the worker's FIFO admission step is used,
    which is what the simulator does; otherwise the raw arrival step.
    """
    if mode not in MODES:
        raise ValueError(f"unknown oracle mode {mode!r}; expected one of {MODES}")
    seen_at = instance.admission_steps() if use_admission else np.array(
        [w.arrival_step for w in instance.workers], dtype=int
    )
    edges = []
    u0 = instance.u0
    for j, worker in enumerate(instance.workers):
        tj = seen_at[j]
        if tj > instance.horizon:
            continue
        util = instance.utilities[worker.group]
        for req in instance.requests:
            i = req.id
            if not req.arrival_step <= tj <= req.expiry_step:
                continue
            if mode == "clamped":
                min_comp = max(0.0, u0 + worker.noise_null - util[i] - worker.noise_per_request[i])
                weight = (req.reward - req.penalty) - min_comp
            else:
                min_comp = u0 - util[i] + worker.noise_null
                weight = literal_weight(req.reward, req.penalty, util[i], -worker.noise_null, u0)
            if weight > 0:
                edges.append(MatchEdge(i, j, float(min_comp), float(weight)))
    return edges


def max_weight_matching(edges: list[MatchEdge], n_requests: int, n_workers: int):
    """Exact maximum-weight matching; returns (list of edges, total weight)."""
    if not edges:
        return [], 0.0
    W = np.zeros((n_requests, n_workers))
    lookup = {}
    for e in edges:
        if e.weight > W[e.request, e.worker]:
            W[e.request, e.worker] = e.weight
            lookup[(e.request, e.worker)] = e
    # non-edges weigh 0, so assigning them is the same as leaving both unmatched
    rows, cols = linear_sum_assignment(W, maximize=True)
    chosen = [lookup[(r, c)] for r, c in zip(rows, cols) if (r, c) in lookup]
    return chosen, math.fsum(e.weight for e in chosen)


def full_info_value(instance: Instance, mode: str = "clamped", use_admission: bool = True) -> float:
    edges = build_edges(instance, mode, use_admission)
    _, value = max_weight_matching(edges, len(instance.requests), len(instance.workers))
    return math.fsum([value] + [r.penalty for r in instance.requests])
