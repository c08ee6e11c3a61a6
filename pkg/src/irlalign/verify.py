"""Self-checks exposed through ``irlalign verify``.

Each check returns a dict of measured quantities plus a ``passed`` flag.
"""

from __future__ import annotations

import numpy as np

from .evalx import concentration_experiment
from .objectives import (
    DemonstrationDataset,
    PreferenceDataset,
    bilevel_surrogate,
    btl_loss,
    dpo_loss,
    finite_difference_gradient,
    gibbs_residual,
    optimal_policy,
    single_level_surrogate,
    surrogate_gradient,
)
from .seqcore import (
    PromptSet,
    RewardModel,
    ScoreTable,
    SequencePolicy,
    enumerate_completions,
    floor_log_probs,
    random_policy_table,
)
from .workbench import InstanceSpec, make_instance

GRADIENT_TOL = 1e-6
IDENTITY_TOL = 1e-10
DPO_TOL = 1e-12
SLOPE_RANGE = (-0.65, -0.35)


def _rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def random_world(rng, V=3, H=3, n_prompts=3):
    """Tabular reward, reference policy and demonstrations on distinct random prompts."""
    prompts = PromptSet([(k,) for k in range(n_prompts)])
    n = V**H
    pi_ref = SequencePolicy(prompts, V, H, floor_log_probs(random_policy_table(rng, n_prompts, n), 1e-6))
    reward = RewardModel.tabular(prompts, V, H, rng.standard_normal((n_prompts, n)))
    comps = enumerate_completions(V, H)
    items = [(prompts.prompts[rng.integers(n_prompts)], comps[rng.integers(n)]) for _ in range(50)]
    return reward, pi_ref, DemonstrationDataset(items), prompts


def gradient_check(seed: int = 0, n_instances: int = 10, beta: float = 1.0) -> dict:
    worst = 0.0
    for k in range(n_instances):
        rng = np.random.default_rng([seed, k])
        reward, pi_ref, D, prompts = random_world(rng)
        analytic = surrogate_gradient(reward, D, pi_ref, prompts, beta)
        numeric = finite_difference_gradient(
            lambda th: single_level_surrogate(reward.with_params(th), D, pi_ref, prompts, beta), reward.params)
        worst = max(worst, _rel_err(analytic, numeric))
    return {"max_rel_err": worst, "tol": GRADIENT_TOL, "passed": worst <= GRADIENT_TOL}


def identities_check(seed: int = 0, n_triples: int = 100, n_pairs: int = 1000) -> dict:
    betas = (0.1, 1.0, 10.0)
    norm = gibbs = dual = 0.0
    for k in range(n_triples):
        rng = np.random.default_rng([seed, 1, k])
        reward, pi_ref, D, prompts = random_world(rng)
        beta = betas[k % 3]
        pi = optimal_policy(reward, pi_ref, beta)
        norm = max(norm, float(np.max(np.abs(pi.probs.sum(axis=1) - 1.0))))
        gibbs = max(gibbs, gibbs_residual(pi, reward, pi_ref, beta))
        dual = max(dual, abs(single_level_surrogate(reward, D, pi_ref, prompts)
                             - bilevel_surrogate(reward, D, pi_ref, prompts)))
    rng = np.random.default_rng([seed, 2])
    _, pi_ref, _, prompts = random_world(rng)
    policy = SequencePolicy(prompts, 3, 3, floor_log_probs(random_policy_table(rng, len(prompts), 27), 1e-6))
    comps = enumerate_completions(3, 3)
    items = []
    while len(items) < n_pairs:
        a, b = rng.integers(27, size=2)
        if a != b:
            items.append((prompts.prompts[rng.integers(len(prompts))], comps[a], comps[b]))
    prefs = PreferenceDataset(items)
    dpo_beta = 0.1
    implicit = ScoreTable(prompts, 3, 3, dpo_beta * (policy.log_probs - pi_ref.log_probs))
    dpo_gap = abs(dpo_loss(policy, pi_ref, prefs, dpo_beta) - btl_loss(implicit, prefs))
    return {
        "normalization": norm,
        "gibbs": gibbs,
        "dual_path": dual,
        "dpo_btl": dpo_gap,
        "passed": norm <= IDENTITY_TOL and gibbs <= IDENTITY_TOL and dual <= IDENTITY_TOL and dpo_gap <= DPO_TOL,
    }


def concentration_check(seed: int = 0, trials: int = 50, theta_samples: int = 5) -> dict:
    inst = make_instance(InstanceSpec(V=3, H=3, prompt_count=3, seed=seed))
    rep = concentration_experiment(inst, theta_samples=theta_samples, trials=trials, seed=seed)
    within = bool(np.all(rep.p90_gap <= rep.bound))
    lo, hi = SLOPE_RANGE
    return {
        "slope": rep.slope,
        "p90_within_bound": within,
        "rows": list(rep.rows()),
        "passed": lo <= rep.slope <= hi and within,
    }


def recovery_check(seed: int = 0, steps: int = 500) -> dict:
    """Exact-mode likelihood ascent from full-population demonstrations."""
    from .evalx import kl_to_expert
    from .irl import IrlConfig, irl_align

    inst = make_instance(InstanceSpec(seed=seed))
    D = DemonstrationDataset.full_population(inst.pi_expert)
    init = RewardModel.linear(inst.prompt_set, inst.V, inst.H, inst.r_star.features, C_r=inst.C_r)
    cfg = IrlConfig(K=steps, reward_steps_per_iter=1, reward_learning_rate=0.05, beta=inst.beta,
                    reward_loss="likelihood", reward_gradient="exact", seed=seed)
    _, policy, _ = irl_align(D, inst.pi_ref, cfg, inst, init_reward=init)
    kl = kl_to_expert(policy, inst)
    return {"kl_to_expert": kl, "passed": kl <= 1e-3}


CHECKS = {
    "gradient": gradient_check,
    "identities": identities_check,
    "concentration": concentration_check,
}
