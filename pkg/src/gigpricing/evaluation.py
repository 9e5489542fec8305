"""Policy evaluation against the full-information bound, metrics, and grid tuning."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .choice import MnlParams, encode_instance
from .core import EpisodeResult, Instance, run_episode
from .oracle import full_info_value
from .policies import FormulaPolicy, PercentagePolicy, PolicySpec
from .simgen import instance_digest

PP_GRID = tuple(round(0.40 + 0.05 * k, 2) for k in range(13))
FP_GRID = {
    "reward": (0.0, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95),
    "distance": (0.0, 5.0, 10.0, 15.0, 20.0),
    "penalty": (-0.1, -0.05, 0.0, 0.05, 0.1),
    "boost": (0.0, 0.1, 0.2, 0.3),
}
BOUND_TOL = 1e-9


class UpperBoundViolation(AssertionError):
    """An episode beat the full-information value: simulator or oracle bug."""


def performance_ratio(rho_opt: float, rho_alg: float, sum_beta: float) -> float:
    """Percent of the gap between all-penalties and the full-information value that is closed."""
    if not rho_opt > sum_beta:
        raise ValueError(f"degenerate instance: full-information value {rho_opt} <= penalty baseline {sum_beta}")
    return (1.0 - (rho_opt - rho_alg) / (rho_opt - sum_beta)) * 100.0


def mbe(true_utils, est_utils) -> float:
    """Mean bias error; positive when utilities are underestimated."""
    u, v = _paired(true_utils, est_utils)
    return float(np.mean(u - v))


def rmse(true_utils, est_utils) -> float:
    u, v = _paired(true_utils, est_utils)
    return float(np.sqrt(np.mean((u - v) ** 2)))


def _paired(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if len(a) != len(b) or len(a) == 0:
        raise ValueError("utility vectors must be nonempty and of equal length")
    return a, b


def coefficient_of_variation(rates) -> float:
    rates = np.asarray(rates, dtype=float)
    if len(rates) == 0:
        return float("nan")
    mean = rates.mean()
    if mean == 0:
        return 0.0
    return float(rates.std() / mean * 100.0)


def pair_acceptance_rates(episodes: Iterable[tuple[Instance, EpisodeResult]]) -> dict[tuple[int, int], float]:
    """Accepted share of requests per (pickup, dropoff) pair, pooled over episodes."""
    offered: dict[tuple[int, int], int] = {}
    accepted: dict[tuple[int, int], int] = {}
    for inst, res in episodes:
        for r in inst.requests:
            key = (r.pickup, r.dropoff)
            offered[key] = offered.get(key, 0) + 1
        for _, _, i, _ in res.accepted:
            r = inst.requests[i]
            key = (r.pickup, r.dropoff)
            accepted[key] = accepted.get(key, 0) + 1
    return {k: accepted.get(k, 0) / n for k, n in sorted(offered.items())}


def acceptance_cv(episodes: Iterable[tuple[Instance, EpisodeResult]]) -> float:
    """Dispersion (percent) of acceptance rates over pairs with at least one request."""
    return coefficient_of_variation(list(pair_acceptance_rates(episodes).values()))


def utility_errors(instances: Sequence[Instance], estimates: Mapping[int, MnlParams]) -> tuple[float, float]:
    """(MBE, RMSE) of estimated against true deterministic utilities over all requests and groups."""
    true_parts, est_parts = [], []
    for inst in instances:
        if not inst.requests:
            continue
        enc = encode_instance(inst)
        for g in range(inst.n_groups):
            true_parts.append(inst.utilities[g])
            est_parts.append(enc @ estimates[g].weights)
    if not true_parts:
        return float("nan"), float("nan")
    u, v = np.concatenate(true_parts), np.concatenate(est_parts)
    return mbe(u, v), rmse(u, v)


class OracleCache:
    """Full-information values keyed by (instance digest, mode), optionally backed by a JSON file."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.values: dict[str, float] = {}
        if path and os.path.exists(path):
            with open(path) as fh:
                self.values = json.load(fh)
        self._dirty = False

    def get(self, inst: Instance, mode: str) -> float:
        key = f"{instance_digest(inst)}:{mode}"
        if key not in self.values:
            self.values[key] = full_info_value(inst, mode)
            self._dirty = True
        return self.values[key]

    def save(self) -> None:
        if self.path and (self._dirty or not os.path.exists(self.path)):
            tmp = self.path + ".tmp"
            with open(tmp, "w") as fh:
                json.dump(dict(sorted(self.values.items())), fh, indent=1, sort_keys=True)
                fh.write("\n")
            os.replace(tmp, self.path)
            self._dirty = False


@dataclass
class InstanceRow:
    instance: str
    rho_alg: float
    rho_opt: float
    sum_beta: float
    ratio: float
    n_requests: int
    n_workers: int
    n_accepted: int
    gap_sum: float = 0.0  # sum over accepted requests of compensation + true utility


@dataclass
class EvalReport:
    policy: str
    oracle_mode: str
    rows: list[InstanceRow]
    mean_ratio: float
    std_ratio: float
    utilization: float  # percent of arrived workers who accepted a request
    comp_gap: float  # mean of compensation + true utility over accepted requests
    acceptance_cv: float
    mbe: float = float("nan")
    rmse: float = float("nan")
    extra: dict = field(default_factory=dict)

    SUMMARY_FIELDS = ("mean_ratio", "std_ratio", "utilization", "comp_gap", "acceptance_cv", "mbe", "rmse")

    def summary(self) -> dict:
        d = {"policy": self.policy, "oracle_mode": self.oracle_mode, "n_instances": len(self.rows)}
        d.update({k: getattr(self, k) for k in self.SUMMARY_FIELDS})
        d.update(self.extra)
        return d

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "rows": [dataclasses.asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        s = dict(d["summary"])
        rows = [InstanceRow(**r) for r in d["rows"]]
        known = {k: s.pop(k) for k in cls.SUMMARY_FIELDS}
        policy, mode = s.pop("policy"), s.pop("oracle_mode")
        s.pop("n_instances", None)
        return cls(policy, mode, rows, extra=s, **known)


def aggregate(policy: str, oracle_mode: str, rows: list[InstanceRow], cv: float,
              errors: tuple[float, float] = (float("nan"), float("nan"))) -> EvalReport:
    """Summary statistics from per-instance rows (the CV and utility errors come precomputed)."""
    ratios = np.array([r.ratio for r in rows])
    workers = sum(r.n_workers for r in rows)
    accepted = sum(r.n_accepted for r in rows)
    return EvalReport(
        policy, oracle_mode, rows,
        mean_ratio=float(ratios.mean()) if len(rows) else float("nan"),
        std_ratio=float(ratios.std()) if len(rows) else float("nan"),
        utilization=100.0 * accepted / workers if workers else 0.0,
        comp_gap=math.fsum(r.gap_sum for r in rows) / accepted if accepted else float("nan"),
        acceptance_cv=cv,
        mbe=errors[0],
        rmse=errors[1],
    )


def evaluate(policy, instances: Sequence[Instance], oracle_mode: str = "clamped", label: str = "policy",
             estimates: Optional[Mapping[int, MnlParams]] = None, cache: Optional[OracleCache] = None) -> EvalReport:
    """Run ``policy`` on every instance and score it against the full-information value.

    Pass the policy's MNL ``estimates`` to get MBE and RMSE against the true utilities.
    In the default oracle mode a run above the bound raises UpperBoundViolation.
    """
    cache = cache or OracleCache()
    rows, episodes = [], []
    for inst in instances:
        res = run_episode(inst, policy)
        rho_opt = cache.get(inst, oracle_mode)
        sum_beta = inst.total_penalty()
        if oracle_mode == "clamped" and res.total_reward > rho_opt + BOUND_TOL:
            raise UpperBoundViolation(
                f"{label} earned {res.total_reward} on {inst.id}, above the full-information value {rho_opt}"
            )
        gaps = [c + inst.utilities[inst.workers[j].group, i] for _, j, i, c in res.accepted]
        rows.append(InstanceRow(
            inst.id, res.total_reward, rho_opt, sum_beta, performance_ratio(rho_opt, res.total_reward, sum_beta),
            len(inst.requests), len(inst.workers), len(res.accepted), math.fsum(gaps),
        ))
        episodes.append((inst, res))
    errors = utility_errors(instances, estimates) if estimates is not None else (float("nan"), float("nan"))
    return aggregate(label, oracle_mode, rows, acceptance_cv(episodes), errors)


# --- grid tuning -----------------------------------------------------------

def pp_grid() -> list[PolicySpec]:
    return [PolicySpec("PP", percentage=p) for p in PP_GRID]


def fp_grid() -> list[PolicySpec]:
    return [PolicySpec("FP", weights=v) for v in itertools.product(*FP_GRID.values())]


def _spec_key(spec: PolicySpec):
    return (spec.percentage, spec.weights)


def mean_total_reward(policy, instances: Sequence[Instance]) -> float:
    return math.fsum(run_episode(inst, policy).total_reward for inst in instances) / len(instances)


def tune_grid(kind: str, train_instances: Sequence[Instance], grid: Optional[Sequence[PolicySpec]] = None):
    """Best grid point by mean training reward; returns (spec, [(spec, score), ...]).

    Ties go to the lexicographically smallest (percentage, weights).
    """
    if grid is None:
        grid = {"PP": pp_grid, "FP": fp_grid}[kind]()
    if not grid:
        raise ValueError("empty tuning grid")
    if not train_instances:
        raise ValueError("tuning needs training instances")
    scored = []
    for spec in grid:
        if spec.kind != kind:
            raise ValueError(f"grid point {spec} is not of kind {kind}")
        policy = PercentagePolicy(spec.percentage) if kind == "PP" else FormulaPolicy(spec.weights)
        scored.append((spec, mean_total_reward(policy, train_instances)))
    best_score = max(s for _, s in scored)
    best = min((spec for spec, s in scored if s == best_score), key=_spec_key)
    return best, scored


# --- report files ------------------------------------------------------------

ROW_FIELDS = ("policy", "instance", "rho_alg", "rho_opt", "sum_beta", "ratio", "n_requests", "n_workers", "n_accepted",
              "gap_sum")


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_instance_table(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for rep in reports:
            for r in rep.rows:
                w.writerow([rep.policy] + [_fmt(getattr(r, f)) for f in ROW_FIELDS[1:]])


def write_summary(reports: Sequence[EvalReport], path) -> None:
    keys = ["policy", "oracle_mode", "n_instances", *EvalReport.SUMMARY_FIELDS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for rep in reports:
            s = rep.summary()
            w.writerow([_fmt(s[k]) for k in keys])


def write_long_table(reports: Sequence[EvalReport], path) -> None:
    """One (policy, instance, metric, value) row per measurement, for boxplots and heatmaps."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("policy", "instance", "metric", "value"))
        for rep in reports:
            for r in rep.rows:
                for metric in ("ratio", "rho_alg", "rho_opt"):
                    w.writerow((rep.policy, r.instance, metric, _fmt(getattr(r, metric))))
            for metric in EvalReport.SUMMARY_FIELDS:
                w.writerow((rep.policy, "ALL", metric, _fmt(getattr(rep, metric))))
