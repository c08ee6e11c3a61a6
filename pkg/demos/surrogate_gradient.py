"""
The demonstration likelihood and its gradient
=============================================

The log-likelihood of demonstrations under the reward-induced policy reduces
to a single-level expression: reward plus reference log-probability on the
data, minus the log-partition function. Its gradient is the gap between the
reward gradient averaged over demonstrations and over the policy's own
completions. Both are checked here against the slower routes.
"""

import numpy as np

from irlalign import make_instance, InstanceSpec, sample_demonstrations
from irlalign.objectives import (
    bilevel_surrogate,
    finite_difference_gradient,
    optimal_policy,
    single_level_surrogate,
    stochastic_gradient,
    surrogate_gradient,
)
from irlalign.seqcore import completion_array

inst = make_instance(InstanceSpec())
D = sample_demonstrations(inst, 200, seed=1)
rng = np.random.default_rng(2)
reward = inst.r_star.with_params(rng.standard_normal(inst.r_star.n_params))
args = (D, inst.pi_ref, inst.prompt_set, inst.beta)

print("single-level value:", single_level_surrogate(reward, *args))
print("bi-level value:    ", bilevel_surrogate(reward, *args))

g = surrogate_gradient(reward, *args)
fd = finite_difference_gradient(lambda th: single_level_surrogate(reward.with_params(th), *args), reward.params)
print("\nexact gradient      ", np.round(g, 5))
print("finite differences  ", np.round(fd, 5))

# the sampled form: demos minus fresh generations from the aligned policy
pi = optimal_policy(reward, inst.pi_ref, inst.beta)
comps = completion_array(inst.V, inst.H)
gens = []
for x, _ in D.items:
    p = inst.prompt_set.index(x)
    gens.append((x, tuple(comps[pi.sample_indices(p, 1, rng)[0]])))
print("one sampled estimate", np.round(stochastic_gradient(reward, D.items, gens), 5))
