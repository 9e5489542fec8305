"""Acceptance suite: one or more tests per criterion, tagged with ``criterion(n)``.

The end-to-end checks (9, 10, 11) drive the command-line pipeline on the
shipped desk-scale configs in temporary directories; the two scenario runs
take roughly a quarter of an hour together on one core.
"""
import dataclasses
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import chisquare

from gigpricing.choice import acceptance_probabilities, compensation_from_probs
from gigpricing.cli import load_estimates, main
from gigpricing.core import worker_choice
from gigpricing.evaluation import OracleCache, UpperBoundViolation, evaluate, utility_errors
from gigpricing.oracle import build_edges, full_info_value, max_weight_matching
from gigpricing.policies import CollectPolicy, FormulaPolicy, PercentagePolicy, VfaPolicy, sample_perturbation
from gigpricing.pricing import PricingInput, lambert_w0, lambert_w0_log, optimal_compensations
from gigpricing.simgen import SCENARIOS, ScenarioConfig, generate_scenario_set, instance_digest, load_scenario_set
from gigpricing.vfa.network import N_GLOBALS, ValueNetwork, feature_dim, featurize

from helpers import instance, request, worker
from oracles import brute_force_matching, maximize_on_simplex, mp_neg_phi_hessian

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def _run_pipeline(config: str, out: Path) -> Path:
    assert main(["all", "--config", str(CONFIGS / config), "--out", str(out)]) == 0
    return out


def _summaries(out: Path) -> dict:
    doc = json.loads((out / "evaluation.json").read_text())
    return {r["summary"]["policy"]: r for r in doc["reports"]}


@pytest.fixture(scope="module")
def i1_run(tmp_path_factory):
    return _run_pipeline("i1_desk.yaml", tmp_path_factory.mktemp("i1_desk"))


@pytest.fixture(scope="module")
def ii_run(tmp_path_factory):
    return _run_pipeline("ii_desk.yaml", tmp_path_factory.mktemp("ii_desk"))


# --- 1 -------------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_lambert_kernel():
    xs = np.concatenate([[0.0], np.logspace(-12, 8, 4000)])
    start = time.perf_counter()
    w = lambert_w0(xs)
    w_log = lambert_w0_log(np.log(xs[1:]))
    elapsed = time.perf_counter() - start
    residual = np.abs(w * np.exp(w) - xs)
    assert np.all(residual <= 1e-12 * (1.0 + xs)), residual.max()
    rel = np.abs(w_log - w[1:]) / np.maximum(np.abs(w[1:]), np.finfo(float).tiny)
    assert rel.max() <= 1e-10
    assert elapsed < 1.0
    print(f"max residual/(1+x) {np.max(residual / (1 + xs)):.2e}, log-vs-direct {rel.max():.2e}, {elapsed:.3f}s")


# --- 2 -------------------------------------------------------------------------------

def _pricing_problem(rng):
    # optimal probabilities stay away from the simplex boundary, where projected gradient stalls
    n = int(rng.integers(1, 9))
    mu = rng.uniform(0.3, 3.0)
    u0 = rng.normal()
    r = rng.uniform(5, 40, n)
    beta = -rng.uniform(0.5, 8, n)
    ex = rng.random(n) < 0.4
    d = rng.uniform(-2, 6, n)
    u = -(r - beta * ex - d) + u0 + mu * rng.uniform(-2, 2, n)
    return PricingInput(r, beta, ex, u, d, mu, u0)


@pytest.mark.criterion(2)
def test_closed_form_matches_simplex_maximization():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        inp = _pricing_problem(rng)
        out = optimal_compensations(inp)
        val, _ = maximize_on_simplex(inp.net_values() + inp.utilities - inp.u0, inp.mu)
        worst = max(worst, abs(out.phi_star - val) / max(abs(val), 1e-12))
    elapsed = time.perf_counter() - start
    print(f"worst relative gap {worst:.2e} in {elapsed:.1f}s")
    assert worst <= 1e-5 and elapsed < 30


@pytest.mark.criterion(2)
def test_objective_hessian_is_psd_at_interior_points():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    lowest = math.inf
    for _ in range(100):
        inp = _pricing_problem(rng)
        x = rng.dirichlet(np.ones(inp.n + 1))
        H = mp_neg_phi_hessian(x[:-1], x[-1], inp.net_values() + inp.utilities - inp.u0, inp.mu)
        lowest = min(lowest, float(np.linalg.eigvalsh(H).min()))
    elapsed = time.perf_counter() - start
    print(f"smallest eigenvalue {lowest:.2e} in {elapsed:.1f}s")
    assert lowest >= -1e-8 and elapsed < 30


# --- 3 -------------------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_normalization_and_round_trip():
    rng = np.random.default_rng(3)
    worst_norm = worst_trip = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        mu, u0 = rng.uniform(0.2, 3.0), rng.normal()
        c = rng.uniform(0, 15, n)
        u = u0 - c + mu * rng.uniform(-3, 3, n)
        p, p0 = acceptance_probabilities(u, c, mu, u0)
        worst_norm = max(worst_norm, abs(p.sum() + p0 - 1.0))
        back = compensation_from_probs(p, p0, u, mu, u0)
        worst_trip = max(worst_trip, float(np.max(np.abs(back - c))))
    print(f"normalization {worst_norm:.2e}, round trip {worst_trip:.2e}")
    assert worst_norm <= 1e-12 and worst_trip <= 1e-9


# --- 4 -------------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_gradients_and_permutation_invariance():
    sset = generate_scenario_set(ScenarioConfig(n_train=20, n_test=0, n_validation=0, seed=4))
    rng = np.random.default_rng(4)
    worst_grad = worst_perm = 0.0
    h = 1e-6
    for trial in range(200):
        inst = sset.train[trial % len(sset.train)]
        if len(inst.requests) < 2:
            continue
        F = feature_dim(inst)
        net = ValueNetwork.init(F, rng, zero_head=False)
        net.stats["x_shift"] = rng.normal(size=F)
        net.stats["x_scale"] = rng.uniform(0.5, 3.0, F)
        net.stats["g_scale"] = rng.uniform(0.5, 3.0, N_GLOBALS)
        k = int(rng.integers(1, min(8, len(inst.requests)) + 1))
        ids = tuple(int(i) for i in rng.choice(len(inst.requests), size=k, replace=False))
        t = int(min(inst.expiry[list(ids)]))
        f = featurize(ids, inst, t)
        seg = np.zeros(k, dtype=int)
        _, cache = net.forward_batch(f.requests, seg, f.globals[None, :])
        grads = net.backward_batch(cache, np.ones(1))
        fd_vec, an_vec = [], []
        for name, arr in net.params.items():
            for _ in range(3):
                idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
                old = arr[idx]
                arr[idx] = old + h
                up = net.forward_batch(f.requests, seg, f.globals[None, :])[0][0]
                arr[idx] = old - h
                down = net.forward_batch(f.requests, seg, f.globals[None, :])[0][0]
                arr[idx] = old
                fd_vec.append((up - down) / (2 * h))
                an_vec.append(grads[name][idx])
        fd_vec, an_vec = np.array(fd_vec), np.array(an_vec)
        rel = np.linalg.norm(fd_vec - an_vec) / max(np.linalg.norm(fd_vec), np.linalg.norm(an_vec), 1e-12)
        worst_grad = max(worst_grad, rel)
        perm = tuple(ids[i] for i in rng.permutation(k))
        worst_perm = max(worst_perm, abs(net.forward(f) - net.forward(featurize(perm, inst, t))))
    print(f"worst gradient relative error {worst_grad:.2e}, permutation {worst_perm:.2e}")
    assert worst_grad <= 1e-4 and worst_perm <= 1e-12


# --- 5 -------------------------------------------------------------------------------

def _random_small_instance(rng):
    n_req, n_work, T = int(rng.integers(1, 7)), int(rng.integers(1, 5)), 6
    reqs = []
    for i in range(n_req):
        a = int(rng.integers(1, T + 1))
        reqs.append(request(i, a, int(rng.integers(a, T + 1)), reward=float(rng.uniform(2, 20)),
                            penalty=-float(rng.uniform(0.5, 6))))
    ws = [worker(j, int(rng.integers(1, T + 1)), rng.gumbel(size=n_req), float(rng.gumbel())) for j in range(n_work)]
    return instance(reqs, ws, T, [rng.uniform(-12, 0, n_req)])


@pytest.mark.criterion(5)
def test_matching_equals_enumeration():
    rng = np.random.default_rng(5)
    nontrivial = 0
    for _ in range(100):
        inst = _random_small_instance(rng)
        edges = build_edges(inst)
        _, value = max_weight_matching(edges, len(inst.requests), len(inst.workers))
        weights = {(e.request, e.worker): e.weight for e in edges}
        assert value == brute_force_matching(weights, len(inst.requests), len(inst.workers))
        nontrivial += len(edges) > 1
    assert nontrivial >= 50


# --- 6 -------------------------------------------------------------------------------

@pytest.mark.criterion(6)
def test_no_policy_beats_the_bound_on_fresh_instances():
    checked = 0
    for name, seed in (("I.1", 61), ("I.3", 62), ("II", 63)):
        cfg = dataclasses.replace(SCENARIOS[name], n_train=0, n_test=15, n_validation=0, seed=seed)
        sset = generate_scenario_set(cfg)
        truth = sset.truth.mnl_params()
        rng = np.random.default_rng(seed)
        policies = [PercentagePolicy(p) for p in (0.0, 0.5, 1.0)]
        policies += [FormulaPolicy((0.9, 20.0, -0.1, 0.3)), CollectPolicy(rng), VfaPolicy(None, truth)]
        policies += [VfaPolicy(None, sample_perturbation(truth, eps, rng)) for eps in (2.0, 6.0)]
        for pol in policies:
            rep = evaluate(pol, sset.test)  # raises UpperBoundViolation on any breach
            assert all(row.rho_alg <= row.rho_opt + 1e-9 and row.ratio <= 100 + 1e-9 for row in rep.rows)
            checked += len(rep.rows)
    assert checked == 3 * 15 * 8


@pytest.mark.criterion(6)
def test_pipeline_evaluations_respect_the_bound(i1_run, ii_run):
    for out in (i1_run, ii_run):
        for label, rep in _summaries(out).items():
            for row in rep["rows"]:
                assert row["rho_alg"] <= row["rho_opt"] + 1e-9, (label, row["instance"])
                assert row["ratio"] <= 100 + 1e-9


@pytest.mark.criterion(6)
def test_bound_violation_is_reported():
    inst = instance([request(0, 1, 2, reward=10.0, penalty=-4.0)], [worker(0, 1, [0.0])], 2, [[0.0]])
    lying = type(inst)(inst.id, 2, inst.requests, inst.workers, 1, 1, inst.travel_time_matrix, [[-100.0]])
    # the bound comes from a cache holding the pessimistic copy's value
    cache = OracleCache()
    cache.values[f"{instance_digest(inst)}:clamped"] = full_info_value(lying)
    with pytest.raises(UpperBoundViolation):
        evaluate(PercentagePolicy(0.0), [inst], cache=cache)


# --- 7 -------------------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_simulated_choices_match_logit_probabilities():
    cfg = ScenarioConfig(horizon=1, request_rate=5.0, worker_rate=100_000.0, n_train=1, n_test=0,
                         n_validation=0, seed=12)
    sset = generate_scenario_set(cfg)
    inst, mu = sset.train[0], sset.truth.mnl_params()[0].mu
    n, n_workers = len(inst.requests), len(inst.workers)
    assert n >= 3 and n_workers >= 99_000
    ids = tuple(range(n))
    u = inst.utilities[0]
    comps = np.maximum(0.0, -u + np.linspace(-1.0, 1.0, n))  # spread the choice shares
    counts = np.zeros(n + 1)
    for j in range(n_workers):
        c = worker_choice(inst, j, ids, comps)
        counts[c if c >= 0 else n] += 1
    p, p0 = acceptance_probabilities(u, comps, mu, inst.u0)
    expected = np.append(p, p0) * n_workers
    stat, pvalue = chisquare(counts, expected)
    print(f"{n_workers} choices over {n + 1} options: chi2 {stat:.2f}, p = {pvalue:.3f}")
    assert pvalue > 0.001


# --- 8 -------------------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_mnl_recovery_from_collected_offers(i1_run):
    sset = load_scenario_set(i1_run / "scenario.json")
    est = load_estimates(i1_run / "mnl.json", "multi", sset.config.n_groups)
    population = sset.train + sset.test + sset.validation
    bias, err = utility_errors(population, est)
    mu = sset.truth.mnl_params()[0].mu
    print(f"utility MBE {bias:+.3f}, RMSE {err:.3f} (limit {0.5 * mu:.2f}); fitted mu {est[0].mu:.3f}")
    assert err <= 0.5 * mu


# --- 9 -------------------------------------------------------------------------------

def _ratio(s, label):
    return s[label]["summary"]["mean_ratio"]


@pytest.mark.criterion(9)
def test_exact_knowledge_beats_benchmarks(i1_run):
    s = _summaries(i1_run)
    pert0, pp, fp = _ratio(s, "PERT-eps0-s0"), _ratio(s, "PP"), _ratio(s, "FP")
    print(f"exact-parameter pricing {pert0:.2f}, PP {pp:.2f}, FP {fp:.2f}")
    assert pert0 >= pp and pert0 >= fp


@pytest.mark.criterion(9)
def test_learned_pricing_close_to_exact_and_above_benchmarks(i1_run):
    s = _summaries(i1_run)
    vfa, pert0 = _ratio(s, "VFA"), _ratio(s, "PERT-eps0-s0")
    best_bench = max(_ratio(s, "PP"), _ratio(s, "FP"))
    print(f"learned pricing {vfa:.2f}, exact-parameter {pert0:.2f}, best benchmark {best_bench:.2f}")
    assert abs(vfa - pert0) <= 10.0
    assert vfa >= best_bench - 1.0


@pytest.mark.criterion(9)
def test_perturbation_sensitivity(i1_run):
    s = _summaries(i1_run)
    means = {}
    neg, pos = [], []
    for eps in (2, 4, 6):
        runs = [s[f"PERT-eps{eps}-s{k}"]["summary"] for k in range(5)]
        means[eps] = float(np.mean([r["mean_ratio"] for r in runs]))
        for r in runs:
            (neg if r["mbe"] < 0 else pos).append(r["mean_ratio"])
    print("mean ratio by radius: " + ", ".join(f"{e}: {m:.2f}" for e, m in means.items()))
    print(f"overestimated utilities (MBE < 0): {np.mean(neg):.2f} over {len(neg)} runs; "
          f"underestimated (MBE > 0): {np.mean(pos):.2f} over {len(pos)} runs")
    assert means[2] >= means[4] >= means[6]
    assert neg and pos and np.mean(neg) < np.mean(pos)


# --- 10 ------------------------------------------------------------------------------

@pytest.mark.criterion(10)
def test_group_specific_models_beat_pooled_model(ii_run):
    s = _summaries(ii_run)
    multi, single = _ratio(s, "VFA"), _ratio(s, "VFA-single")
    print(f"per-group MNL {multi:.2f}, pooled MNL {single:.2f}")
    assert multi >= single


# --- 11 ------------------------------------------------------------------------------

@pytest.mark.criterion(11)
def test_pipeline_reruns_are_byte_identical(tmp_path):
    a = _run_pipeline("smoke.yaml", tmp_path / "a")
    b = _run_pipeline("smoke.yaml", tmp_path / "b")
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) > 10
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    # each stage re-run individually is a no-op that leaves artifacts untouched
    before = {rel: (a / rel).read_bytes() for rel in files_a}
    for stage in ("generate", "collect", "fit-mnl", "train", "tune", "evaluate", "report"):
        assert main([stage, "--config", str(CONFIGS / "smoke.yaml"), "--out", str(a)]) == 0
    assert before == {rel: (a / rel).read_bytes() for rel in files_a}
    # forcing every stage regenerates the same bytes
    assert main(["all", "--config", str(CONFIGS / "smoke.yaml"), "--out", str(a), "--force"]) == 0
    assert before == {rel: (a / rel).read_bytes() for rel in files_a}
