"""Small hand-built instances for unit tests."""
from __future__ import annotations

import numpy as np

from gigpricing.core import GigWorker, Instance, Request


def request(i, arrival, expiry, reward=10.0, penalty=-4.0, pickup=0, dropoff=0, travel=1.0, features=(0.0,)):
    return Request(i, tuple(features), pickup, dropoff, travel, reward, penalty, arrival, expiry)


def worker(j, arrival, noise, noise_null=0.0, group=0):
    return GigWorker(j, group, arrival, np.asarray(noise, dtype=float), float(noise_null))


def instance(requests, workers, horizon, utilities, u0=0.0, n_pickup=1, n_dropoff=1, iid="hand"):
    n_loc = n_pickup + n_dropoff
    return Instance(iid, horizon, list(requests), list(workers), n_pickup, n_dropoff, np.zeros((n_loc, n_loc)),
                    np.atleast_2d(np.asarray(utilities, dtype=float)), u0)


class FixedPolicy:
    """Offer the same compensation to every active request."""

    def __init__(self, c):
        self.c = c

    def decide(self, state, inst):
        from gigpricing.core import CompensationDecision

        return CompensationDecision({i: self.c for i in state.active})
