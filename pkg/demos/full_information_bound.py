"""Compare several policies with the hindsight matching bound on a handful of test instances."""
from gigpricing.evaluation import evaluate
from gigpricing.policies import FormulaPolicy, PercentagePolicy, VfaPolicy
from gigpricing.simgen import ScenarioConfig, generate_scenario_set

sset = generate_scenario_set(ScenarioConfig(n_train=1, n_test=8, n_validation=0, seed=11))
truth = sset.truth.mnl_params()

for label, pol in [("PP 0.7", PercentagePolicy(0.7)),
                   ("FP", FormulaPolicy((0.6, 0.0, 0.05, 0.1))),
                   ("myopic, true utilities", VfaPolicy(None, truth))]:
    rep = evaluate(pol, sset.test, label=label, estimates=truth)
    print(f"{label:<24} mean ratio {rep.mean_ratio:6.2f}  utilization {rep.utilization:5.1f}%")
