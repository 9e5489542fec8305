"""Attention-pooled value network over post-decision request sets.

Each request row goes through a Swish embedding layer; an attention score
``sigmoid(w . tanh(W e))`` weights the embeddings, whose weighted sum is the
context vector. The context plus a few set-level features feed a two-layer
Swish trunk with a scalar head.

Batches are ragged: request rows of all sets are stacked and ``seg`` maps each
row to its set.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from ..core import Instance

URGENCY_WINDOW = 3
N_GLOBALS = 3  # request count, most urgent time-to-expiry, t / T

PARAM_ORDER = ("W_emb", "b_emb", "W_att", "w_att", "W1", "b1", "W2", "b2", "w_out", "b_out")
STAT_ORDER = ("x_shift", "x_scale", "g_shift", "g_scale", "y_shift", "y_scale")


@dataclass
class StateFeatures:
    requests: np.ndarray  # (n, F)
    globals: np.ndarray  # (N_GLOBALS,)


def _static_block(instance: Instance) -> np.ndarray:
    """Time-independent part of every request row, cached on the instance."""
    cached = getattr(instance, "_vfa_static", None)
    if cached is not None:
        return cached
    m = len(instance.requests[0].features) if instance.requests else 0
    width = m + 3 + instance.n_pickup + instance.n_dropoff
    block = np.zeros((len(instance.requests), width))
    for r in instance.requests:
        row = block[r.id]
        row[:m] = r.features
        row[m] = r.reward
        row[m + 1] = r.penalty
        row[m + 2] = r.travel_time
        row[m + 3 + r.pickup] = 1.0
        row[m + 3 + instance.n_pickup + r.dropoff] = 1.0
    instance._vfa_static = block
    return block


def feature_dim(instance: Instance) -> int:
    m = len(instance.requests[0].features) if instance.requests else 0
    return m + 3 + instance.n_pickup + instance.n_dropoff + 2


def request_rows(ids: Sequence[int], instance: Instance, t: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=int)
    static = _static_block(instance)
    rows = np.empty((len(ids), static.shape[1] + 2))
    rows[:, :-2] = static[ids]
    tte = instance.expiry[ids] - t
    rows[:, -2] = tte / instance.horizon
    rows[:, -1] = tte < URGENCY_WINDOW
    return rows


def set_globals(tte_norm: np.ndarray, t: int, horizon: int) -> np.ndarray:
    n = len(tte_norm)
    return np.array([float(n), float(tte_norm.min()) if n else 0.0, t / horizon])


def featurize(post_state: Sequence[int], instance: Instance, t: int) -> StateFeatures:
    """Encode a post-decision request set observed at step ``t``."""
    rows = request_rows(post_state, instance, t) if len(post_state) else np.zeros((0, feature_dim(instance)))
    return StateFeatures(rows, set_globals(rows[:, -2], t, instance.horizon))


def swish(a):
    return a * expit(a)


def swish_grad(a):
    s = expit(a)
    return s * (1.0 + a * (1.0 - s))


@dataclass
class ValueNetwork:
    params: dict[str, np.ndarray]
    stats: dict[str, np.ndarray]
    target: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, n_features: int, rng: np.random.Generator, embed: int = 32, attn: int = 64,
             hidden: Sequence[int] = (16, 16), zero_head: bool = True) -> "ValueNetwork":
        h1, h2 = hidden

        def glorot(fan_in, fan_out, shape):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=shape)

        p = {
            "W_emb": glorot(n_features, embed, (n_features, embed)),
            "b_emb": np.zeros(embed),
            "W_att": glorot(embed, attn, (attn, embed)),
            "w_att": glorot(attn, 1, (attn,)),
            "W1": glorot(embed + N_GLOBALS, h1, (embed + N_GLOBALS, h1)),
            "b1": np.zeros(h1),
            "W2": glorot(h1, h2, (h1, h2)),
            "b2": np.zeros(h2),
            # a zero head makes the untrained network constant, i.e. myopic pricing
            "w_out": np.zeros(h2) if zero_head else glorot(h2, 1, (h2,)),
            "b_out": np.zeros(1),
        }
        stats = {
            "x_shift": np.zeros(n_features),
            "x_scale": np.ones(n_features),
            "g_shift": np.zeros(N_GLOBALS),
            "g_scale": np.ones(N_GLOBALS),
            "y_shift": np.zeros(1),
            "y_scale": np.ones(1),
        }
        net = cls(p, stats)
        net.sync_target()
        return net

    @property
    def n_features(self) -> int:
        return self.params["W_emb"].shape[0]

    def dims(self) -> dict:
        return {
            "n_features": self.n_features,
            "embed": self.params["W_emb"].shape[1],
            "attn": self.params["W_att"].shape[0],
            "hidden": [self.params["W1"].shape[1], self.params["W2"].shape[1]],
        }

    def sync_target(self) -> None:
        self.target = {k: v.copy() for k, v in self.params.items()}

    def copy(self) -> "ValueNetwork":
        return ValueNetwork(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.stats.items()},
            {k: v.copy() for k, v in self.target.items()},
        )

    # --- forward / backward ------------------------------------------------

    def _embed(self, X, p):
        xn = (X - self.stats["x_shift"]) / self.stats["x_scale"]
        a = xn @ p["W_emb"] + p["b_emb"]
        e = swish(a)
        h = np.tanh(e @ p["W_att"].T)
        s = h @ p["w_att"]
        beta = expit(s)
        return xn, a, e, h, beta

    def _trunk(self, C, G, p):
        gn = (G - self.stats["g_shift"]) / self.stats["g_scale"]
        z = np.concatenate([C, gn], axis=1)
        a1 = z @ p["W1"] + p["b1"]
        h1 = swish(a1)
        a2 = h1 @ p["W2"] + p["b2"]
        h2 = swish(a2)
        o = h2 @ p["w_out"] + p["b_out"][0]
        v = self.stats["y_shift"][0] + self.stats["y_scale"][0] * o
        return v, (z, a1, h1, a2, h2)

    def forward_batch(self, X, seg, G, use_target: bool = False):
        """Values of ``len(G)`` sets; returns (values, cache for backward)."""
        p = self.target if use_target else self.params
        X = np.asarray(X, dtype=float).reshape(-1, self.n_features)
        G = np.asarray(G, dtype=float).reshape(-1, N_GLOBALS)
        seg = np.asarray(seg, dtype=int)
        xn, a, e, h, beta = self._embed(X, p)
        C = np.zeros((len(G), e.shape[1]))
        np.add.at(C, seg, beta[:, None] * e)
        v, trunk = self._trunk(C, G, p)
        return v, (xn, a, e, h, beta, seg, trunk)

    def backward_batch(self, cache, dv) -> dict[str, np.ndarray]:
        """Gradients of ``sum(dv * values)`` with respect to every parameter."""
        p = self.params
        xn, a, e, h, beta, seg, (z, a1, h1, a2, h2) = cache
        dv = np.asarray(dv, dtype=float)
        do = dv * self.stats["y_scale"][0]
        g = {"w_out": h2.T @ do, "b_out": np.array([do.sum()])}
        da2 = np.outer(do, p["w_out"]) * swish_grad(a2)
        g["W2"] = h1.T @ da2
        g["b2"] = da2.sum(axis=0)
        da1 = (da2 @ p["W2"].T) * swish_grad(a1)
        g["W1"] = z.T @ da1
        g["b1"] = da1.sum(axis=0)
        dC = (da1 @ p["W1"].T)[:, : e.shape[1]]
        dC_rows = dC[seg]
        de = dC_rows * beta[:, None]
        ds = np.sum(dC_rows * e, axis=1) * beta * (1.0 - beta)
        g["w_att"] = h.T @ ds
        dpre = np.outer(ds, p["w_att"]) * (1.0 - h * h)
        g["W_att"] = dpre.T @ e
        de += dpre @ p["W_att"]
        da = de * swish_grad(a)
        g["W_emb"] = xn.T @ da
        g["b_emb"] = da.sum(axis=0)
        return g

    def forward(self, features: StateFeatures, use_target: bool = False) -> float:
        if features.requests.shape[1] != self.n_features and len(features.requests):
            raise ValueError(
                f"feature dimension {features.requests.shape[1]} does not match network ({self.n_features})"
            )
        n = len(features.requests)
        v, _ = self.forward_batch(features.requests, np.zeros(n, dtype=int), features.globals[None, :], use_target)
        return float(v[0])

    def values_with_removals(self, X, seg, G_full, G_minus, use_target: bool = False):
        """Value of every set and of every set with one request removed.

        Embeddings and attention weights are computed once; each removal
        subtracts that row's contribution from its set's context vector.
        Returns (full values per set, removal values per row).
        """
        p = self.target if use_target else self.params
        X = np.asarray(X, dtype=float).reshape(-1, self.n_features)
        G_full = np.asarray(G_full, dtype=float).reshape(-1, N_GLOBALS)
        _, _, e, _, beta = self._embed(X, p)
        contrib = beta[:, None] * e
        C = np.zeros((len(G_full), e.shape[1]))
        np.add.at(C, seg, contrib)
        C_minus = C[seg] - contrib
        v, _ = self._trunk(np.vstack([C, C_minus]), np.vstack([G_full, np.asarray(G_minus).reshape(-1, N_GLOBALS)]), p)
        return v[: len(G_full)], v[len(G_full):]


def removal_globals(tte_norm: np.ndarray, seg: np.ndarray, n_sets: int, t_norm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Set-level features for every set and for every one-row removal."""
    counts = np.bincount(seg, minlength=n_sets).astype(float)
    G_full = np.zeros((n_sets, N_GLOBALS))
    G_full[:, 0] = counts
    G_full[:, 2] = t_norm
    G_minus = np.zeros((len(seg), N_GLOBALS))
    G_minus[:, 0] = counts[seg] - 1.0
    G_minus[:, 2] = t_norm[seg]
    if len(seg):
        # smallest and second-smallest time-to-expiry per set
        first = np.full(n_sets, np.inf)
        np.minimum.at(first, seg, tte_norm)
        is_min = tte_norm == first[seg]
        # a set may hold the minimum twice, then removing one copy keeps it
        n_min = np.bincount(seg, weights=is_min.astype(float), minlength=n_sets)
        masked = np.where(is_min, np.inf, tte_norm)
        second = np.full(n_sets, np.inf)
        np.minimum.at(second, seg, masked)
        second = np.where(n_min > 1, first, second)
        G_full[:, 1] = np.where(np.isfinite(first), first, 0.0)
        without = np.where(is_min, second[seg], first[seg])
        G_minus[:, 1] = np.where(np.isfinite(without), without, 0.0)
    return G_full, G_minus


# --- checkpoints ---------------------------------------------------------

_MAGIC = b"GIGVFA\x01\n"


def save_checkpoint(net: ValueNetwork, path, seed: int = 0, epoch: int = 0, config_digest: str = "") -> None:
    """Header line (JSON) followed by little-endian float64 arrays in declared order."""
    arrays = [(f"params/{k}", net.params[k]) for k in PARAM_ORDER]
    arrays += [(f"target/{k}", net.target[k]) for k in PARAM_ORDER]
    arrays += [(f"stats/{k}", net.stats[k]) for k in STAT_ORDER]
    header = {
        "dims": net.dims(),
        "seed": seed,
        "epoch": epoch,
        "config_digest": config_digest,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ValueNetwork, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise ValueError(f"{path} is not a value-network checkpoint")
    pos = len(_MAGIC)
    (n,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    header = json.loads(blob[pos : pos + n])
    pos += n
    out = {"params": {}, "target": {}, "stats": {}}
    for name, shape in header["arrays"]:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(float)
        pos += 8 * size
        kind, key = name.split("/")
        out[kind][key] = arr
    return ValueNetwork(out["params"], out["stats"], out["target"]), header


def params_digest(net: ValueNetwork) -> str:
    h = hashlib.sha256()
    for k in PARAM_ORDER:
        h.update(np.ascontiguousarray(net.params[k], dtype="<f8").tobytes())
    return h.hexdigest()[:16]
