"""Evaluation against a synthetic ground-truth judge, and the concentration
study for the finite-sample likelihood surrogate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objectives import (
    DemonstrationDataset,
    PreferenceDataset,
    exact_likelihood,
    kl_per_prompt,
    log_partition,
    sft_loss,
)
from .seqcore import Instance, RewardModel, SequencePolicy, completion_array, inverse_cdf

DELTA = 0.05


@dataclass
class EvalReport:
    reward_accuracy: float
    ground_truth_score: float
    win_rate: float
    kl_to_expert: float
    heldout_demo_loglik: float


@dataclass
class ConcentrationReport:
    sizes: list
    trials: int
    theta_samples: int
    median_gap: np.ndarray
    p90_gap: np.ndarray
    slope: float
    intercept: float
    bound: np.ndarray
    gaps: np.ndarray  # [size, theta, trial]

    def rows(self):
        for k, n in enumerate(self.sizes):
            yield {
                "size": n,
                "median_gap": float(self.median_gap[k]),
                "p90_gap": float(self.p90_gap[k]),
                "bound": float(self.bound[k]),
            }


def reward_accuracy(reward, heldout: PreferenceDataset) -> float:
    """Fraction of pairs the reward orders like the judge; exact ties score half."""
    if len(heldout) == 0:
        raise ValueError("empty preference set")
    p, w, l = heldout.indices(reward.prompts, reward.V, reward.H)
    s = reward.scores()
    d = s[p, w] - s[p, l]
    return float(np.mean(np.where(d > 0, 1.0, np.where(d == 0, 0.5, 0.0))))


def ground_truth_score(policy: SequencePolicy, r_star, prompts, n_samples: int | None = None, seed: int = 0) -> float:
    """Mean judge reward under ``policy``; exact expectation when ``n_samples`` is None."""
    scores = r_star.scores()
    mu = prompts.weights
    if n_samples is None:
        return float(np.sum(mu * np.sum(policy.probs * scores, axis=1)))
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    per_prompt = np.array([scores[p][policy.sample_indices(p, n_samples, rng)].mean() for p in range(len(prompts))])
    return float(np.sum(mu * per_prompt))


def win_rate(policy_a: SequencePolicy, policy_b: SequencePolicy, r_star, prompts, n_matches: int, seed: int = 0,
             mirrored: bool = False) -> float:
    """Judge-scored head-to-head rate of ``policy_a`` over ``policy_b``.

    Each match draws a prompt and one uniform per side; ``mirrored=True`` hands
    the uniforms to the opposite sides, so ``win_rate(a, b, s)`` and
    ``win_rate(b, a, s, mirrored=True)`` replay the same matches.
    """
    if n_matches < 1:
        raise ValueError("n_matches must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.random((n_matches, 3))
    ua, ub = (u[:, 2], u[:, 1]) if mirrored else (u[:, 1], u[:, 2])
    x = inverse_cdf(prompts.weights, u[:, 0])
    scores = r_star.scores()
    pa, pb = policy_a.probs, policy_b.probs
    wins = 0.0
    for p in range(len(prompts)):
        m = x == p
        if not m.any():
            continue
        sa = scores[p][inverse_cdf(pa[p], ua[m])]
        sb = scores[p][inverse_cdf(pb[p], ub[m])]
        wins += np.sum(sa > sb) + 0.5 * np.sum(sa == sb)
    return float(wins / n_matches)


def exact_win_probability(policy_a, policy_b, r_star, prompts) -> float:
    """Brute-force pairwise win probability over all completion pairs."""
    s = r_star.scores()
    total = 0.0
    for p in range(len(prompts)):
        d = s[p][:, None] - s[p][None, :]
        pay = np.where(d > 0, 1.0, np.where(d == 0, 0.5, 0.0))
        total += prompts.weights[p] * policy_a.probs[p] @ pay @ policy_b.probs[p]
    return float(total)


def kl_to_expert(policy: SequencePolicy, instance: Instance) -> float:
    kl = kl_per_prompt(instance.pi_expert, policy)
    return float(max(0.0, np.sum(instance.prompt_set.weights * kl)))


def heldout_preferences(instance: Instance, n: int, seed: int = 0) -> PreferenceDataset:
    """Judge-labelled pairs of distinct completions drawn from an even mixture
    of reference and expert; exact judge ties are redrawn."""
    rng = np.random.default_rng(seed)
    comps = completion_array(instance.V, instance.H)
    s = instance.r_star.scores()
    mix = 0.5 * (instance.pi_ref.probs + instance.pi_expert.probs)
    prompts = instance.prompt_set
    items = []
    while len(items) < n:
        p = int(inverse_cdf(prompts.weights, rng.random(1))[0])
        a, b = inverse_cdf(mix[p], rng.random(2))
        if s[p, a] == s[p, b]:
            continue
        if s[p, a] < s[p, b]:
            a, b = b, a
        items.append((prompts.prompts[p], tuple(comps[a]), tuple(comps[b])))
    return PreferenceDataset(items)


def sample_from_expert(instance: Instance, n: int, rng: np.random.Generator):
    """Prompt and completion indices of ``n`` expert demonstrations."""
    p = inverse_cdf(instance.prompt_set.weights, rng.random(n))
    u = rng.random(n)
    j = np.empty(n, dtype=np.int64)
    probs = instance.pi_expert.probs
    for q in range(len(instance.prompt_set)):
        m = p == q
        j[m] = inverse_cdf(probs[q], u[m])
    return p, j


def concentration_experiment(instance: Instance, theta_samples: int = 5, sizes=(16, 64, 256, 1024, 4096),
                             trials: int = 50, seed: int = 0, beta: float | None = None) -> ConcentrationReport:
    """Gap between the exact likelihood and its finite-sample surrogate.

    Random rewards share the judge's parameterization. Only the data term of
    the surrogate depends on the sample, so it is evaluated directly from the
    sampled indices (equal to ``single_level_surrogate`` on that sample).
    """
    sizes = list(sizes)
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    beta = instance.beta if beta is None else beta
    rng = np.random.default_rng(seed)
    prompts = instance.prompt_set
    gaps = np.empty((len(sizes), theta_samples, trials))
    for t in range(theta_samples):
        theta = rng.standard_normal(instance.r_star.n_params)
        reward = instance.r_star.with_params(theta)
        L = exact_likelihood(reward, instance, beta)
        logZ = float(np.sum(prompts.weights * log_partition(reward, instance.pi_ref, beta)))
        value = reward.scores() / beta + instance.pi_ref.log_probs
        for k, n in enumerate(sizes):
            for trial in range(trials):
                p, j = sample_from_expert(instance, n, rng)
                L_hat = value[p, j].mean() - logZ
                gaps[k, t, trial] = abs(L - L_hat)
    flat = gaps.reshape(len(sizes), -1)
    med = np.median(flat, axis=1)
    p90 = np.percentile(flat, 90, axis=1)
    slope = intercept = float("nan")
    if len(sizes) > 1:
        slope, intercept = np.polyfit(np.log(sizes), np.log(med), 1)
    return ConcentrationReport(
        sizes=sizes,
        trials=trials,
        theta_samples=theta_samples,
        median_gap=med,
        p90_gap=p90,
        slope=float(slope),
        intercept=float(intercept),
        bound=concentration_bound(instance, sizes, DELTA, beta),
        gaps=gaps,
    )


def concentration_bound(instance: Instance, sizes, delta: float = DELTA, beta: float | None = None) -> np.ndarray:
    """Hoeffding width for values ``r/beta + log pi_ref`` in ``[C_p, C_r/beta]``."""
    beta = instance.beta if beta is None else beta
    width = instance.C_r / beta - instance.C_p
    return width * np.sqrt(np.log(2 / delta) / (2 * np.asarray(sizes, dtype=float)))


def evaluate(policy, reward, instance: Instance, heldout_prefs, heldout_demos: DemonstrationDataset,
             n_matches: int = 2000, seed: int = 0) -> EvalReport:
    return EvalReport(
        reward_accuracy=reward_accuracy(reward, heldout_prefs),
        ground_truth_score=ground_truth_score(policy, instance.r_star, instance.prompt_set),
        win_rate=win_rate(policy, instance.pi_ref, instance.r_star, instance.prompt_set, n_matches, seed),
        kl_to_expert=kl_to_expert(policy, instance),
        heldout_demo_loglik=-sft_loss(policy, heldout_demos),
    )
