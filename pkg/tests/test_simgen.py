import math

import numpy as np
import pytest

from gigpricing.choice import encode_instance, utility_of
from gigpricing.simgen import (
    SCENARIOS,
    ScenarioConfig,
    dumps_scenario_set,
    generate_scenario_set,
    instance_digest,
    instance_from_dict,
    instance_to_dict,
    load_scenario_set,
    loads_scenario_set,
    save_scenario_set,
)


@pytest.fixture(scope="module")
def base():
    return generate_scenario_set(SCENARIOS["I.1"])


def test_zero_rates_give_empty_instances():
    sset = generate_scenario_set(ScenarioConfig(request_rate=0.0, worker_rate=0.0, n_train=3, n_test=1, n_validation=1))
    for inst in sset.train + sset.test + sset.validation:
        assert not inst.requests and not inst.workers
        assert inst.utilities.shape == (1, 0)


def test_request_count_matches_poisson_total():
    cfg = ScenarioConfig(n_train=1000, n_test=0, n_validation=0, seed=11)
    insts = generate_scenario_set(cfg).train
    counts = np.array([len(inst.requests) for inst in insts])
    mean_total = cfg.request_rate * cfg.horizon
    sigma = math.sqrt(mean_total / len(counts))
    assert abs(counts.mean() - mean_total) <= 3 * sigma
    workers = np.array([len(inst.workers) for inst in insts])
    assert abs(workers.mean() - cfg.worker_rate * cfg.horizon) <= 3 * sigma


def test_requests_are_valid(base):
    for inst in base.train:
        for r in inst.requests:
            assert 1 <= r.arrival_step <= r.expiry_step <= inst.horizon
            assert r.expiry_step > r.arrival_step or r.expiry_step == inst.horizon
            assert r.reward > 0 and r.penalty < 0
            assert r.travel_time == base.truth.travel_time(r.pickup, r.dropoff)


def test_best_utility_is_exactly_zero_after_shift(base):
    truth, cfg = base.truth, base.config
    m, n_p, n_d = cfg.n_features, cfg.n_pickup, cfg.n_dropoff
    for d, w in enumerate(truth.group_weights):
        best = -np.inf
        for feats in truth.type_features:
            for p in range(n_p):
                for q in range(n_d):
                    enc = np.concatenate([feats, [truth.travel_time(p, q)], np.eye(n_p)[p], np.eye(n_d)[q]])
                    best = max(best, float(w @ enc))
        assert best <= 1e-12 and best >= -1e-9


def test_stored_utilities_recompute(base):
    params = base.truth.mnl_params()
    for inst in base.test:
        if inst.requests:
            assert np.max(np.abs(utility_of(params[0], encode_instance(inst)) - inst.utilities[0])) <= 1e-12


def test_strong_mode_designates_locations():
    sset = generate_scenario_set(ScenarioConfig(preference_mode="strong", n_groups=3, n_train=1, n_test=0,
                                                n_validation=0, seed=2))
    cfg = sset.config
    loc = sset.truth.group_weights[:, cfg.n_features + 1 :]
    for row in loc:
        drop = row[cfg.n_pickup :]
        others = np.abs(drop[1:])
        assert drop[0] < 0 and abs(drop[0]) >= 3 * np.median(others)


def test_one_group_gives_one_weight_vector(base):
    assert base.truth.group_weights.shape == (1, base.config.encoding_dim)
    assert set(base.truth.mnl_params()) == {0}
    assert base.truth.mnl_params()[0].mu == 1.0


def test_splits_are_disjoint_with_configured_sizes(base):
    ids = [inst.id for inst in base.train + base.test + base.validation]
    seeds = [inst.seed for inst in base.train + base.test + base.validation]
    assert len(set(ids)) == len(ids) and len(set(seeds)) == len(seeds)
    assert (len(base.train), len(base.test), len(base.validation)) == (80, 20, 10)


def test_full_scale_split_counts():
    cfg = ScenarioConfig(n_train=480, n_test=120, n_validation=30, horizon=5)
    sset = generate_scenario_set(cfg)
    assert (len(sset.train), len(sset.test), len(sset.validation)) == (480, 120, 30)


def test_same_seed_gives_identical_bytes(tmp_path):
    cfg = ScenarioConfig(n_train=5, n_test=2, n_validation=2, seed=7)
    save_scenario_set(generate_scenario_set(cfg), tmp_path / "a.json")
    save_scenario_set(generate_scenario_set(cfg), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    other = ScenarioConfig(n_train=5, n_test=2, n_validation=2, seed=8)
    assert dumps_scenario_set(generate_scenario_set(other)) != (tmp_path / "a.json").read_text()


def test_file_round_trip_is_lossless(tmp_path, base):
    path = tmp_path / "scen.json"
    save_scenario_set(base, path)
    back = load_scenario_set(path)
    assert back.config == base.config
    for a, b in zip(base.train + base.test, back.train + back.test):
        assert instance_digest(a) == instance_digest(b)
        assert a.requests == b.requests
        for wa, wb in zip(a.workers, b.workers):
            assert np.array_equal(wa.noise_per_request, wb.noise_per_request) and wa.noise_null == wb.noise_null
        assert np.array_equal(a.utilities, b.utilities)
    assert dumps_scenario_set(back) == path.read_text()
    assert loads_scenario_set(path.read_text()).truth.to_dict() == base.truth.to_dict()


def test_instance_dict_round_trip(base):
    inst = base.validation[0]
    again = instance_from_dict(instance_to_dict(inst))
    assert instance_to_dict(again) == instance_to_dict(inst)


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(n_groups=0)
    with pytest.raises(ValueError):
        ScenarioConfig(request_rate=-1.0)
    with pytest.raises(ValueError):
        ScenarioConfig(preference_mode="medium")


def test_scenario_presets():
    assert SCENARIOS["I.1"].n_groups == 1 and SCENARIOS["I.1"].horizon == 50
    assert SCENARIOS["II"].n_groups > 1
