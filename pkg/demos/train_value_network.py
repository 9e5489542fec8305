"""Short value-network training run on a small scenario, then evaluate the learned policy."""
from gigpricing.evaluation import evaluate
from gigpricing.policies import VfaPolicy
from gigpricing.simgen import ScenarioConfig, generate_scenario_set
from gigpricing.vfa import TrainConfig, train

sset = generate_scenario_set(ScenarioConfig(n_train=40, n_test=10, n_validation=5, seed=5))
truth = sset.truth.mnl_params()

net, log = train(sset.train, sset.validation, truth, TrainConfig.desk())
print(f"validation reward: start {log.initial_val:.2f}, best {log.best_val:.2f} at epoch {log.best_epoch}")

for label, model in (("myopic", None), ("learned", net)):
    rep = evaluate(VfaPolicy(model, truth), sset.test, label=label)
    print(f"{label:<8} mean ratio {rep.mean_ratio:6.2f}")
