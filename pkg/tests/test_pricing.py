import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gigpricing.choice import acceptance_probabilities
from gigpricing.pricing import (
    PricingInput,
    batched_optimal_value,
    lambert_w0,
    lambert_w0_log,
    neg_phi_hessian,
    optimal_compensations,
    phi,
    phi_of_probs,
    solve_m,
)

from oracles import lambert_bisect, lambert_mp, maximize_on_simplex, mp_neg_phi_hessian

W_OF_ONE = 0.567143290409784  # omega constant, bisection oracle
W_OF_EXP_700 = 693.4583088790255  # mpmath at 40 digits


def _random_input(rng, n=None, clamp_free=True):
    """Problems whose optimal probabilities stay comfortably inside the simplex."""
    n = int(rng.integers(1, 8)) if n is None else n
    mu = rng.uniform(0.3, 3.0)
    u0 = rng.normal()
    r = rng.uniform(5, 40, n)
    beta = -rng.uniform(0.5, 8, n)
    ex = rng.random(n) < 0.4
    d = rng.uniform(-2, 6, n)
    u = -(r - beta * ex - d) + u0 + mu * rng.uniform(-2, 2, n)
    return PricingInput(r, beta, ex, u, d, mu, u0)


def test_lambert_examples():
    assert lambert_w0(0.0) == 0.0
    assert lambert_w0(math.e) == pytest.approx(1.0, abs=1e-14)
    assert lambert_w0(1.0) == pytest.approx(W_OF_ONE, abs=1e-14)
    assert lambert_bisect(1.0) == pytest.approx(W_OF_ONE, abs=1e-14)
    with pytest.raises(ValueError):
        lambert_w0(-0.1)


def test_lambert_log_path_large_argument():
    assert lambert_mp(700.0) == pytest.approx(W_OF_EXP_700, abs=1e-12)
    assert lambert_w0_log(700.0) == pytest.approx(W_OF_EXP_700, abs=1e-10)
    assert lambert_w0_log(0.0) == pytest.approx(W_OF_ONE, abs=1e-14)
    assert lambert_w0_log(-800.0) == pytest.approx(math.exp(-800.0), rel=1e-12)


def test_lambert_against_bisection():
    xs = np.concatenate([[1e-12, 1e-3, 0.5], np.geomspace(1.0, 1e12, 40)])
    w = lambert_w0(xs)
    ref = np.array([lambert_bisect(x) for x in xs])
    assert np.max(np.abs(w - ref) / np.maximum(1.0, ref)) <= 1e-12
    assert np.max(np.abs(lambert_w0_log(np.log(xs)) - ref) / np.maximum(1.0, ref)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 600))
def test_lambert_log_satisfies_defining_identity(log_x):
    w = lambert_w0_log(log_x)
    assert w + math.log(w) == pytest.approx(log_x, abs=1e-10 * max(1.0, abs(log_x)))


def test_solve_m_examples():
    # one request with r + u - u0 - mu = 0 (mu=1): W0(1) + 1
    inp = PricingInput.myopic([1.0], [-1.0], [False], [0.0], 1.0)
    assert solve_m(inp) == pytest.approx(1.0 + W_OF_ONE, abs=1e-14)
    scaled = PricingInput.myopic([2.0], [-1.0], [False], [0.0], 2.0)
    assert solve_m(scaled) == pytest.approx(2.0 * (1.0 + W_OF_ONE), abs=1e-13)
    empty = PricingInput.myopic([], [], [], [], 1.7)
    assert solve_m(empty) == 1.7


def test_single_request_worked_example():
    # r = 10, u = -8, mu = 1: m = 2, c = 8, P = 1/2, expected value 1
    out = optimal_compensations(PricingInput.myopic([10.0], [-1.0], [False], [-8.0], 1.0))
    assert out.m == pytest.approx(2.0, abs=1e-12)
    assert out.comps[0] == pytest.approx(8.0, abs=1e-12)
    assert out.probs[0] == pytest.approx(0.5, abs=1e-12) and out.p_null == pytest.approx(0.5, abs=1e-12)
    assert out.phi_star == pytest.approx(1.0, abs=1e-12)


def test_expiring_request_gets_penalty_added():
    base = PricingInput.myopic([10.0, 12.0], [-3.0, -2.0], [False, False], [-6.0, -7.0], 1.0)
    urgent = PricingInput.myopic([10.0, 12.0], [-3.0, -2.0], [True, False], [-6.0, -7.0], 1.0)
    a, b = optimal_compensations(base), optimal_compensations(urgent)
    assert (b.comps_raw[0] + b.m) - (a.comps_raw[0] + a.m) == pytest.approx(3.0, abs=1e-12)


def test_price_structure_and_normalization():
    rng = np.random.default_rng(0)
    for _ in range(300):
        inp = _random_input(rng)
        out = optimal_compensations(inp)
        # common markdown from the net value
        assert np.allclose(inp.net_values() - out.comps_raw, out.m, atol=1e-12, rtol=0)
        assert out.m > inp.mu
        assert abs(out.probs.sum() + out.p_null - 1.0) <= 1e-12
        p, p0 = acceptance_probabilities(inp.utilities, out.comps_raw, inp.mu, inp.u0)
        assert np.max(np.abs(p - out.probs)) <= 1e-12 and abs(p0 - out.p_null) <= 1e-12
        assert out.phi_star == pytest.approx(phi(inp, out.comps_raw), abs=1e-10)
        assert out.phi_star == pytest.approx(out.m - inp.mu, abs=1e-10)


def test_closed_form_beats_random_alternatives():
    rng = np.random.default_rng(1)
    inp = _random_input(rng, n=5)
    best = optimal_compensations(inp)
    worst_gap = np.inf
    for _ in range(500):
        alt = best.comps_raw + rng.normal(0, 2.0, inp.n)
        worst_gap = min(worst_gap, best.phi_star - phi(inp, alt))
    assert worst_gap >= -1e-10


def test_closed_form_matches_simplex_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(40):
        inp = _random_input(rng)
        out = optimal_compensations(inp)
        a = inp.net_values() + inp.utilities - inp.u0
        val, x = maximize_on_simplex(a, inp.mu)
        worst = max(worst, abs(val - out.phi_star) / max(1.0, abs(out.phi_star)))
        assert np.max(np.abs(x[:-1] - out.probs)) <= 1e-6
    assert worst <= 1e-9


def test_phi_of_probs_agrees_with_phi():
    rng = np.random.default_rng(4)
    inp = _random_input(rng, n=4)
    c = rng.uniform(0, 20, 4)
    p, _ = acceptance_probabilities(inp.utilities, c, inp.mu, inp.u0)
    assert phi_of_probs(inp, p) == pytest.approx(phi(inp, c), abs=1e-10)


def test_negative_compensations_are_clamped():
    # tiny reward against a big opportunity cost: the raw price goes negative
    inp = PricingInput([1.0, 20.0], [-1.0, -1.0], [False, False], [0.0, -15.0], [5.0, 0.0], 1.0)
    out = optimal_compensations(inp)
    assert out.comps_raw[0] < 0 and out.comps[0] == 0.0
    assert out.comps[1] == out.comps_raw[1] > 0


def test_hessian_is_positive_semidefinite_and_matches_extended_precision():
    rng = np.random.default_rng(5)
    for _ in range(5):
        inp = _random_input(rng, n=3)
        out = optimal_compensations(inp)
        H = neg_phi_hessian(inp, out.probs)
        assert np.min(np.linalg.eigvalsh(H)) >= -1e-9 * np.max(np.abs(H))
        ref = mp_neg_phi_hessian(out.probs, out.p_null, inp.net_values() + inp.utilities - inp.u0, inp.mu)
        assert np.max(np.abs(H - ref)) <= 1e-6 * np.max(np.abs(H))


def test_batched_value_matches_single_problems():
    rng = np.random.default_rng(6)
    problems = [_random_input(rng) for _ in range(30)]
    seg = np.concatenate([np.full(p.n, k) for k, p in enumerate(problems)])
    got = batched_optimal_value(
        np.concatenate([p.net_values() for p in problems]),
        np.concatenate([p.utilities for p in problems]),
        seg,
        np.array([p.mu for p in problems]),
        np.array([p.u0 for p in problems]),
    )
    want = np.array([optimal_compensations(p).phi_star for p in problems])
    assert np.max(np.abs(got - want)) <= 1e-10


def test_extreme_scores_stay_finite():
    inp = PricingInput.myopic([1e3, 5.0], [-1.0, -1.0], [False, True], [0.0, -400.0], 0.5)
    out = optimal_compensations(inp)
    assert np.all(np.isfinite(out.comps)) and np.isfinite(out.m)
    assert abs(out.probs.sum() + out.p_null - 1.0) <= 1e-12


def test_misaligned_inputs_rejected():
    with pytest.raises(ValueError):
        PricingInput.myopic([1.0, 2.0], [-1.0], [False], [0.0], 1.0)
    with pytest.raises(ValueError):
        PricingInput.myopic([1.0], [-1.0], [False], [0.0], 0.0)
