"""Run one synthetic episode under a fixed-percentage policy and print the step log."""
from gigpricing.core import run_episode
from gigpricing.oracle import full_info_value
from gigpricing.policies import PercentagePolicy
from gigpricing.simgen import ScenarioConfig, generate_scenario_set

sset = generate_scenario_set(ScenarioConfig(n_train=1, n_test=1, n_validation=0, horizon=20, seed=3))
inst = sset.test[0]
print(f"{len(inst.requests)} requests, {len(inst.workers)} workers over {inst.horizon} steps")

res = run_episode(inst, PercentagePolicy(0.7))
for rec in res.per_step_log:
    if rec.worker is None:
        continue
    took = "declined" if rec.choice < 0 else f"took request {rec.choice}"
    print(f"t={rec.step:2d} worker {rec.worker} saw {len(rec.active)} open, {took}, reward {rec.reward:+.2f}")

print("episode reward", round(res.total_reward, 3))
print("full-information value", round(full_info_value(inst), 3))
