"""Price three open requests for one worker and check the result against a numeric optimizer."""
import numpy as np
from scipy.optimize import minimize

from gigpricing.choice import acceptance_probabilities
from gigpricing.pricing import PricingInput, lambert_w0, optimal_compensations, phi

print("W(1) =", float(lambert_w0(1.0)))

inp = PricingInput(
    rewards=[10.0, 7.0, 4.0],
    penalties=[3.0, 0.0, 0.0],
    expiring=[True, False, False],
    utilities=[-8.0, -5.0, -2.0],
    deltas=[0.0, 0.5, 0.0],
    mu=1.0,
)
out = optimal_compensations(inp)
print("offers      ", np.round(out.comps, 4))
print("accept probs", np.round(out.probs, 4), "no-take", round(out.p_null, 4))
print("expected net value", round(out.phi_star, 6))

# brute check: maximize expected value directly over the offers
res = minimize(lambda c: -phi(inp, c), x0=np.zeros(inp.n), method="BFGS")
print("numeric optimum    ", round(-res.fun, 6), "offers", np.round(res.x, 4))

p, p0 = acceptance_probabilities(inp.utilities, out.comps_raw, inp.mu)
print("probabilities reproduce:", np.allclose(p, out.probs))
