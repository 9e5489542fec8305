"""Synthetic scenario generation and the instance file format."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .choice import MnlParams, encode_request
from .core import GigWorker, Instance, Request

SCHEMA_VERSION = 1
EULER_GAMMA = 0.5772156649015329


@dataclass(frozen=True)
class Ranges:
    """Uniform sampling ranges for the generator truth."""

    features: tuple[float, float] = (0.0, 5.0)
    reward_weights: tuple[float, float] = (0.5, 2.0)
    urgency_bonus: tuple[float, float] = (1.0, 3.0)
    penalty_weights: tuple[float, float] = (0.1, 0.5)
    long_stay_surcharge: tuple[float, float] = (1.0, 3.0)
    utility_weights: tuple[float, float] = (-2.0, 0.0)
    location_weights: tuple[float, float] = (-3.0, 3.0)
    travel_time_scale: float = 10.0
    urgency_window: int = 3
    long_stay_after: int = 10
    strong_multiplier: float = 4.0


@dataclass(frozen=True)
class ScenarioConfig:
    n_groups: int = 1
    request_rate: float = 0.5
    worker_rate: float = 0.5
    expiry_rate: float = 0.1
    n_types: int = 5
    n_features: int = 3
    n_pickup: int = 5
    n_dropoff: int = 5
    horizon: int = 50
    n_train: int = 80
    n_test: int = 20
    n_validation: int = 10
    seed: int = 0
    preference_mode: str = "weak"
    mu: float = 1.0
    u0: float = 0.0
    ranges: Ranges = field(default_factory=Ranges)

    def __post_init__(self):
        counts = (self.n_groups, self.n_types, self.n_features, self.n_pickup, self.n_dropoff, self.horizon)
        if min(counts) <= 0:
            raise ValueError("scenario counts must be positive")
        if self.request_rate < 0 or self.worker_rate < 0 or self.expiry_rate <= 0:
            raise ValueError("arrival rates must be >= 0 and the expiry rate > 0")
        if self.preference_mode not in ("weak", "strong"):
            raise ValueError(f"unknown preference mode {self.preference_mode!r}")
        if min(self.n_train, self.n_test, self.n_validation) < 0:
            raise ValueError("split sizes must be nonnegative")

    @property
    def n_instances(self) -> int:
        return self.n_train + self.n_test + self.n_validation

    @property
    def encoding_dim(self) -> int:
        return self.n_features + 1 + self.n_pickup + self.n_dropoff

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioConfig":
        d = dict(d)
        if "ranges" in d and not isinstance(d["ranges"], Ranges):
            d["ranges"] = Ranges(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["ranges"].items()})
        return cls(**d)

    def digest(self) -> str:
        return digest_of(self.to_dict())


# Scenario rows of the synthetic-data table; pass overrides via dataclasses.replace.
SCENARIOS = {
    "I.1": ScenarioConfig(n_groups=1, request_rate=0.5),
    "I.2": ScenarioConfig(n_groups=1, request_rate=0.3),
    "I.3": ScenarioConfig(n_groups=1, request_rate=1.0),
    "II": ScenarioConfig(n_groups=3, request_rate=0.5),
}


def digest_of(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(eq=False)
class GeneratorTruth:
    type_features: np.ndarray  # (n_types, n_features)
    reward_weights: np.ndarray  # (n_features + 1,)
    urgency_bonus: float
    penalty_weights: np.ndarray  # (n_features + 1,)
    long_stay_surcharge: float
    group_weights: np.ndarray  # (n_groups, encoding_dim)
    group_mu: np.ndarray  # (n_groups,)
    locations: np.ndarray  # (n_pickup + n_dropoff, 2)
    travel_time_matrix: np.ndarray
    n_pickup: int
    n_dropoff: int
    u0: float = 0.0

    def mnl_params(self) -> dict[int, MnlParams]:
        return {
            d: MnlParams(d, self.group_weights[d].copy(), float(self.group_mu[d]), self.u0)
            for d in range(len(self.group_mu))
        }

    def travel_time(self, pickup: int, dropoff: int) -> float:
        return float(self.travel_time_matrix[pickup, self.n_pickup + dropoff])

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorTruth":
        kw = {}
        for f in dataclasses.fields(cls):
            v = d[f.name]
            kw[f.name] = np.asarray(v, dtype=float) if isinstance(v, list) else v
        return cls(**kw)


def generate_truth(config: ScenarioConfig, rng: np.random.Generator) -> GeneratorTruth:
    R = config.ranges
    k, m = config.n_types, config.n_features
    n_p, n_d = config.n_pickup, config.n_dropoff
    type_features = rng.uniform(*R.features, size=(k, m))
    reward_weights = rng.uniform(*R.reward_weights, size=m + 1)
    urgency_bonus = float(rng.uniform(*R.urgency_bonus))
    penalty_weights = rng.uniform(*R.penalty_weights, size=m + 1)
    surcharge = float(rng.uniform(*R.long_stay_surcharge))

    locations = rng.uniform(0.0, 1.0, size=(n_p + n_d, 2))
    dist = np.linalg.norm(locations[:, None, :] - locations[None, :, :], axis=-1)
    travel = np.round(R.travel_time_scale * dist, 1)
    travel = np.minimum(travel, travel.T)

    D = config.n_groups
    weights = np.empty((D, config.encoding_dim))
    weights[:, : m + 1] = rng.uniform(*R.utility_weights, size=(D, m + 1))
    weights[:, m + 1 :] = rng.uniform(*R.location_weights, size=(D, n_p + n_d))
    if config.preference_mode == "strong":
        # pickup location 0 strongly preferred, dropoff location 0 strongly avoided
        loc = weights[:, m + 1 :]
        big = R.strong_multiplier * np.median(np.abs(loc), axis=1)
        weights[:, m + 1] = big
        weights[:, m + 1 + n_p] = -big

    # Shift every group's utilities so the best (type, pickup, dropoff) is exactly 0.
    for d in range(D):
        best = -np.inf
        for t in range(k):
            for p in range(n_p):
                for q in range(n_d):
                    u = (
                        type_features[t] @ weights[d, :m]
                        + weights[d, m] * travel[p, n_p + q]
                        + weights[d, m + 1 + p]
                        + weights[d, m + 1 + n_p + q]
                    )
                    best = max(best, u)
        weights[d, m + 1 : m + 1 + n_p] -= best

    return GeneratorTruth(
        type_features=type_features,
        reward_weights=reward_weights,
        urgency_bonus=urgency_bonus,
        penalty_weights=penalty_weights,
        long_stay_surcharge=surcharge,
        group_weights=weights,
        group_mu=np.full(D, config.mu),
        locations=locations,
        travel_time_matrix=travel,
        n_pickup=n_p,
        n_dropoff=n_d,
        u0=config.u0,
    )


def generate_instance(
    config: ScenarioConfig, truth: GeneratorTruth, rng: np.random.Generator, instance_id: str = "0", seed: int = 0
) -> Instance:
    R = config.ranges
    T = config.horizon
    requests: list[Request] = []
    worker_specs: list[tuple[int, int]] = []
    for t in range(1, T + 1):
        for _ in range(rng.poisson(config.request_rate)):
            type_id = int(rng.integers(config.n_types))
            pickup = int(rng.integers(config.n_pickup))
            dropoff = int(rng.integers(config.n_dropoff))
            duration = max(1, math.ceil(rng.exponential(1.0 / config.expiry_rate)))
            expiry = min(T, t + duration)
            feats = truth.type_features[type_id]
            td = truth.travel_time(pickup, dropoff)
            attrs = np.append(feats, td)
            reward = float(truth.reward_weights @ attrs)
            if expiry - t < R.urgency_window:
                reward += truth.urgency_bonus
            penalty = -float(truth.penalty_weights @ attrs)
            if expiry - t > R.long_stay_after:
                penalty -= truth.long_stay_surcharge
            requests.append(
                Request(
                    id=len(requests),
                    features=tuple(float(f) for f in feats),
                    pickup=pickup,
                    dropoff=dropoff,
                    travel_time=td,
                    reward=max(reward, 1e-2),
                    penalty=min(penalty, -1e-2),
                    arrival_step=t,
                    expiry_step=expiry,
                    type_id=type_id,
                )
            )
        for _ in range(rng.poisson(config.worker_rate)):
            worker_specs.append((t, int(rng.integers(config.n_groups))))

    n = len(requests)
    workers = []
    for j, (t, group) in enumerate(worker_specs):
        mu = float(truth.group_mu[group])
        # zero-mean Gumbel: location -mu * euler_gamma
        draws = rng.gumbel(-mu * EULER_GAMMA, mu, size=n + 1)
        workers.append(GigWorker(j, group, t, draws[:n].copy(), float(draws[n])))

    if n:
        enc = np.stack([encode_request(r, config.n_pickup, config.n_dropoff) for r in requests])
        utilities = truth.group_weights @ enc.T
    else:
        utilities = np.zeros((config.n_groups, 0))
    return Instance(
        id=instance_id,
        horizon=T,
        requests=requests,
        workers=workers,
        n_pickup=config.n_pickup,
        n_dropoff=config.n_dropoff,
        travel_time_matrix=truth.travel_time_matrix,
        utilities=utilities,
        u0=truth.u0,
        seed=seed,
    )


@dataclass
class ScenarioSet:
    config: ScenarioConfig
    truth: GeneratorTruth
    train: list[Instance]
    test: list[Instance]
    validation: list[Instance]

    def splits(self) -> dict[str, list[Instance]]:
        return {"train": self.train, "test": self.test, "validation": self.validation}


def generate_scenario_set(config: ScenarioConfig) -> ScenarioSet:
    """Shared truth plus independently seeded train/test/validation instances."""
    root = np.random.SeedSequence(config.seed)
    truth_seq, inst_seq = root.spawn(2)
    truth = generate_truth(config, np.random.default_rng(truth_seq))
    children = inst_seq.spawn(config.n_instances)
    out: dict[str, list[Instance]] = {"train": [], "test": [], "validation": []}
    k = 0
    for split, count in (("train", config.n_train), ("test", config.n_test), ("validation", config.n_validation)):
        for _ in range(count):
            seed = int(children[k].generate_state(1)[0])
            inst = generate_instance(config, truth, np.random.default_rng(children[k]), f"{split}-{k:04d}", seed)
            out[split].append(inst)
            k += 1
    return ScenarioSet(config, truth, out["train"], out["test"], out["validation"])


# --- file format ---------------------------------------------------------


def instance_to_dict(inst: Instance) -> dict:
    return {
        "id": inst.id,
        "seed": inst.seed,
        "horizon": inst.horizon,
        "n_pickup": inst.n_pickup,
        "n_dropoff": inst.n_dropoff,
        "u0": inst.u0,
        "travel_time_matrix": inst.travel_time_matrix.tolist(),
        "utilities": inst.utilities.tolist(),
        "requests": [
            [r.id, list(r.features), r.pickup, r.dropoff, r.travel_time, r.reward, r.penalty,
             r.arrival_step, r.expiry_step, r.type_id]
            for r in inst.requests
        ],
        "workers": [
            [w.id, w.group, w.arrival_step, w.noise_null, w.noise_per_request.tolist()] for w in inst.workers
        ],
    }


def instance_from_dict(d: Mapping) -> Instance:
    requests = [
        Request(int(i), tuple(f), int(p), int(q), float(td), float(r), float(b), int(a), int(e), int(ty))
        for i, f, p, q, td, r, b, a, e, ty in d["requests"]
    ]
    workers = [
        GigWorker(int(j), int(g), int(a), np.asarray(noise, dtype=float), float(n0))
        for j, g, a, n0, noise in d["workers"]
    ]
    n_groups = len(d["utilities"])
    utilities = np.asarray(d["utilities"], dtype=float).reshape(n_groups, len(requests))
    return Instance(
        id=d["id"],
        horizon=int(d["horizon"]),
        requests=requests,
        workers=workers,
        n_pickup=int(d["n_pickup"]),
        n_dropoff=int(d["n_dropoff"]),
        travel_time_matrix=np.asarray(d["travel_time_matrix"], dtype=float),
        utilities=utilities,
        u0=float(d["u0"]),
        seed=int(d["seed"]),
    )


def instance_digest(inst: Instance) -> str:
    return digest_of(instance_to_dict(inst))


def dumps_scenario_set(sset: ScenarioSet, split: str | None = None) -> str:
    """Serialize a whole scenario set (or one split) to JSON text.

    Floats are written with ``repr`` precision, so reading back is lossless.
    """
    splits = sset.splits() if split is None else {split: sset.splits()[split]}
    doc = {
        "header": {
            "schema_version": SCHEMA_VERSION,
            "seed": sset.config.seed,
            "config_digest": sset.config.digest(),
            "config": sset.config.to_dict(),
        },
        "truth": sset.truth.to_dict(),
        "splits": {name: [instance_to_dict(i) for i in insts] for name, insts in splits.items()},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def loads_scenario_set(text: str) -> ScenarioSet:
    doc = json.loads(text)
    header = doc["header"]
    if header["schema_version"] != SCHEMA_VERSION:
        raise ValueError(f"unsupported instance schema version {header['schema_version']}")
    config = ScenarioConfig.from_dict(header["config"])
    truth = GeneratorTruth.from_dict(doc["truth"])
    splits = {name: [instance_from_dict(d) for d in insts] for name, insts in doc["splits"].items()}
    return ScenarioSet(config, truth, splits.get("train", []), splits.get("test", []), splits.get("validation", []))


def save_scenario_set(sset: ScenarioSet, path) -> None:
    Path(path).write_text(dumps_scenario_set(sset))


def load_scenario_set(path) -> ScenarioSet:
    return loads_scenario_set(Path(path).read_text())
