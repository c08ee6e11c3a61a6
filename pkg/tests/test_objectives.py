import math

import numpy as np
import pytest

import oracles
from conftest import random_tabular
from irlalign.objectives import (
    DemonstrationDataset,
    PreferenceDataset,
    bilevel_surrogate,
    btl_loss,
    dpo_logit_gradient,
    dpo_loss,
    exact_likelihood,
    finite_difference_gradient,
    gibbs_residual,
    kl_per_prompt,
    kl_rl_objective,
    optimal_policy,
    sft_loss,
    single_level_surrogate,
    stochastic_gradient,
    surrogate_gradient,
)
from irlalign.seqcore import (
    PromptSet,
    RewardModel,
    ScoreTable,
    SequencePolicy,
    enumerate_completions,
    random_policy_table,
)

ONE = PromptSet([(0,)])


def _pairs(prompts, V, H, n, rng):
    comps = enumerate_completions(V, H)
    items = []
    while len(items) < n:
        a, b = rng.integers(len(comps), size=2)
        if a != b:
            items.append((prompts.prompts[rng.integers(len(prompts))], comps[a], comps[b]))
    return PreferenceDataset(items)


# -- sft ------------------------------------------------------------------------

def test_sft_loss_certain_policy():
    probs = np.zeros((1, 8))
    probs[0, 3] = 1.0
    pol = SequencePolicy.from_probs(ONE, 2, 3, probs)
    assert sft_loss(pol, DemonstrationDataset([((0,), (0, 1, 1))] * 3)) == 0.0


def test_sft_loss_uniform():
    pol = SequencePolicy.uniform(ONE, 2, 3)
    D = DemonstrationDataset([((0,), (1, 0, 1)), ((0,), (0, 0, 0))])
    assert sft_loss(pol, D) == pytest.approx(3 * math.log(2), abs=1e-12)


def test_sft_loss_two_items():
    probs = np.array([[0.1, 0.2, 0.3, 0.4]])
    pol = SequencePolicy.from_probs(ONE, 2, 2, probs)
    D = DemonstrationDataset([((0,), (0, 1)), ((0,), (1, 1))])
    assert sft_loss(pol, D) == pytest.approx(-(math.log(0.2) + math.log(0.4)) / 2, abs=1e-12)


def test_datasets_reject_bad_input():
    with pytest.raises(ValueError):
        DemonstrationDataset([])
    with pytest.raises(ValueError):
        PreferenceDataset([])
    with pytest.raises(ValueError, match="chosen equals rejected"):
        PreferenceDataset([((0,), (1, 1), (1, 1))])
    with pytest.raises(ValueError, match="horizon mismatch"):
        DemonstrationDataset([((0,), (1, 1)), ((0,), (1,))])
    with pytest.raises(ValueError):
        DemonstrationDataset([((0,), (1,)), ((0,), (0,))], weights=[0.5, 0.6])


# -- btl / dpo ------------------------------------------------------------------

def test_btl_equal_scores_is_ln2():
    r = RewardModel.tabular(ONE, 2, 2)
    P = PreferenceDataset([((0,), (0, 0), (1, 1)), ((0,), (0, 1), (1, 0))])
    assert btl_loss(r, P) == pytest.approx(math.log(2), abs=1e-15)


def test_btl_unit_gap():
    table = ScoreTable(ONE, 2, 1, np.array([[2.0, 1.0]]))
    P = PreferenceDataset([((0,), (0,), (1,))])
    assert btl_loss(table, P) == pytest.approx(-oracles.log_sigmoid(1.0), abs=1e-15)
    assert btl_loss(table, P) == pytest.approx(0.313262, abs=1e-6)


def test_btl_saturates_monotonically():
    P = PreferenceDataset([((0,), (0,), (1,))])
    losses = [btl_loss(ScoreTable(ONE, 2, 1, np.array([[g, 0.0]])), P) for g in (0, 1, 5, 20, 50, 700)]
    assert all(a > b for a, b in zip(losses, losses[1:-1]))
    assert losses[-1] < 1e-20


def test_btl_matches_oracle():
    prompts, _, reward, rng = random_tabular(11)
    P = _pairs(prompts, 3, 3, 200, rng)
    pairs = [(reward.score(x, w), reward.score(x, l)) for x, w, l in P.items]
    assert btl_loss(reward, P) == pytest.approx(oracles.btl_loss(pairs), abs=1e-13)


def test_dpo_at_reference_and_zero_beta():
    prompts, ref, _, rng = random_tabular(12)
    P = _pairs(prompts, 3, 3, 50, rng)
    assert dpo_loss(ref, ref, P, 0.1) == pytest.approx(math.log(2), abs=1e-15)
    other = SequencePolicy(prompts, 3, 3, random_policy_table(rng, 3, 27))
    assert dpo_loss(other, ref, P, 0.0) == pytest.approx(math.log(2), abs=1e-15)


def test_dpo_equals_btl_on_implicit_reward():
    prompts, ref, _, rng = random_tabular(13)
    pol = SequencePolicy(prompts, 3, 3, random_policy_table(rng, 3, 27))
    P = _pairs(prompts, 3, 3, 300, rng)
    beta = 0.3
    implicit = ScoreTable(prompts, 3, 3, beta * (pol.log_probs - ref.log_probs))
    assert abs(dpo_loss(pol, ref, P, beta) - btl_loss(implicit, P)) <= 1e-12


def test_dpo_logit_gradient_matches_finite_differences():
    prompts, ref, _, rng = random_tabular(14, V=2, H=2)
    logits = rng.standard_normal((3, 4))
    P = _pairs(prompts, 2, 2, 40, rng)

    def f(z):
        return dpo_loss(SequencePolicy.from_logits(prompts, 2, 2, z.reshape(3, 4)), ref, P, 0.5)

    g = dpo_logit_gradient(SequencePolicy.from_logits(prompts, 2, 2, logits), ref, P, 0.5)
    np.testing.assert_allclose(g.ravel(), finite_difference_gradient(f, logits.ravel()), atol=1e-9)


# -- KL-regularized objective and its optimum ------------------------------------

def test_kl_rl_at_reference():
    prompts, ref, reward, _ = random_tabular(15)
    expected = float(np.mean(np.sum(ref.probs * reward.scores(), axis=1)))
    assert kl_rl_objective(ref, reward, ref, prompts, 0.7) == pytest.approx(expected, abs=1e-12)


def test_kl_rl_constant_reward_maximized_at_reference():
    prompts, ref, _, rng = random_tabular(16)
    const = ScoreTable(prompts, 3, 3, np.full((3, 27), 1.3))
    base = kl_rl_objective(ref, const, ref, prompts, 0.5)
    assert base == pytest.approx(1.3, abs=1e-12)
    for _ in range(5):
        other = SequencePolicy(prompts, 3, 3, random_policy_table(rng, 3, 27))
        assert kl_rl_objective(other, const, ref, prompts, 0.5) < base


def test_kl_rl_matches_oracle():
    prompts, ref, reward, rng = random_tabular(17)
    pol = SequencePolicy(prompts, 3, 3, random_policy_table(rng, 3, 27))
    expected = oracles.kl_rl_value(pol.probs.tolist(), ref.probs.tolist(), reward.scores().tolist(),
                                   prompts.weights.tolist(), 0.4)
    assert kl_rl_objective(pol, reward, ref, prompts, 0.4) == pytest.approx(expected, abs=1e-12)


def test_kl_undefined():
    ref = SequencePolicy.from_probs(ONE, 2, 1, [[1.0, 0.0]])
    pol = SequencePolicy.uniform(ONE, 2, 1)
    with pytest.raises(ValueError, match="KL undefined"):
        kl_per_prompt(pol, ref)


def test_optimal_policy_constant_reward():
    prompts, ref, _, _ = random_tabular(18)
    pi = optimal_policy(ScoreTable(prompts, 3, 3, np.full((3, 27), 2.0)), ref, 0.3)
    np.testing.assert_allclose(pi.probs, ref.probs, atol=1e-12)


def test_optimal_policy_hand_case():
    pi = optimal_policy(ScoreTable(ONE, 2, 1, np.array([[math.log(2), 0.0]])), SequencePolicy.uniform(ONE, 2, 1), 1.0)
    np.testing.assert_allclose(pi.probs, [[2 / 3, 1 / 3]], atol=1e-15)


def test_optimal_policy_matches_oracle():
    prompts, ref, reward, _ = random_tabular(19)
    for beta in (0.1, 1.0, 10.0):
        pi = optimal_policy(reward, ref, beta)
        for p in range(3):
            expected = oracles.gibbs_row(ref.probs[p].tolist(), reward.scores()[p].tolist(), beta)
            np.testing.assert_allclose(pi.probs[p], expected, rtol=1e-10, atol=1e-300)


def test_optimal_policy_shift_invariance():
    prompts, ref, reward, _ = random_tabular(20)
    shift = np.array([[-3.0], [0.5], [7.0]])
    a = optimal_policy(reward, ref, 0.5)
    b = optimal_policy(ScoreTable(prompts, 3, 3, reward.scores() + shift), ref, 0.5)
    np.testing.assert_allclose(a.probs, b.probs, atol=1e-12)


def test_optimal_policy_extreme_ratio_is_finite():
    prompts, ref, reward, _ = random_tabular(21, scale=40.0)
    pi = optimal_policy(reward, ref, 1e-3)
    assert np.all(np.isfinite(pi.log_probs))
    assert gibbs_residual(pi, reward, ref, 1e-3) < 1e-6 / 1e-3


# -- surrogate ------------------------------------------------------------------

def _demos(prompts, V, H, n, rng):
    comps = enumerate_completions(V, H)
    return DemonstrationDataset([(prompts.prompts[rng.integers(len(prompts))], comps[rng.integers(len(comps))])
                                 for _ in range(n)])


def test_surrogate_zero_reward():
    prompts, ref, _, rng = random_tabular(22)
    D = _demos(prompts, 3, 3, 30, rng)
    zero = ScoreTable(prompts, 3, 3, np.zeros((3, 27)))
    expected = -sft_loss(ref, D)
    assert single_level_surrogate(zero, D, ref, prompts) == pytest.approx(expected, abs=1e-12)


def test_surrogate_uniform_entropy():
    ref = SequencePolicy.uniform(ONE, 2, 1)
    D = DemonstrationDataset.full_population(ref)
    const = ScoreTable(ONE, 2, 1, np.zeros((1, 2)))
    assert single_level_surrogate(const, D, ref, ONE) == pytest.approx(-math.log(2), abs=1e-15)


@pytest.mark.parametrize("beta", [0.1, 1.0, 3.0])
def test_surrogate_matches_oracle(beta):
    prompts, ref, reward, rng = random_tabular(23)
    D = _demos(prompts, 3, 3, 40, rng)
    W = D.table(prompts, 3, 3).tolist()
    expected = oracles.surrogate(W, ref.probs.tolist(), reward.scores().tolist(), prompts.weights.tolist(), beta)
    assert single_level_surrogate(reward, D, ref, prompts, beta) == pytest.approx(expected, abs=1e-11)


def test_dual_paths_agree():
    for seed in range(10):
        prompts, ref, reward, rng = random_tabular(100 + seed)
        D = _demos(prompts, 3, 3, 25, rng)
        for beta in (0.2, 1.0):
            a = single_level_surrogate(reward, D, ref, prompts, beta)
            b = bilevel_surrogate(reward, D, ref, prompts, beta)
            assert abs(a - b) <= 1e-10


def test_exact_likelihood_maximized_by_judge(default_instance):
    inst = default_instance
    best = exact_likelihood(inst.r_star, inst)
    neg_entropy = float(np.sum(inst.prompt_set.weights[:, None] * inst.pi_expert.probs * inst.pi_expert.log_probs))
    assert best == pytest.approx(neg_entropy, abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(5):
        other = inst.r_star.with_params(inst.r_star.params + 0.3 * rng.standard_normal(inst.r_star.n_params))
        assert exact_likelihood(other, inst) < best


def test_exact_likelihood_equals_full_population_surrogate(default_instance):
    inst = default_instance
    D = DemonstrationDataset.full_population(inst.pi_expert)
    rng = np.random.default_rng(1)
    for _ in range(3):
        r = inst.r_star.with_params(rng.standard_normal(inst.r_star.n_params))
        a = exact_likelihood(r, inst)
        b = single_level_surrogate(r, D, inst.pi_ref, inst.prompt_set, inst.beta)
        assert abs(a - b) <= 1e-12


# -- gradients ------------------------------------------------------------------

def test_gradient_zero_at_stationarity():
    prompts, ref, reward, _ = random_tabular(24)
    pi = optimal_policy(reward, ref, 1.0)
    D = DemonstrationDataset.full_population(pi)
    g = surrogate_gradient(reward, D, ref, prompts)
    assert np.max(np.abs(g)) <= 1e-10


@pytest.mark.parametrize("beta", [0.5, 1.0, 2.0])
def test_gradient_matches_finite_differences(beta):
    prompts, ref, reward, rng = random_tabular(25)
    D = _demos(prompts, 3, 3, 40, rng)
    g = surrogate_gradient(reward, D, ref, prompts, beta)
    fd = finite_difference_gradient(lambda th: single_level_surrogate(reward.with_params(th), D, ref, prompts, beta),
                                    reward.params)
    assert np.max(np.abs(g - fd)) / (1 + np.max(np.abs(g))) <= 1e-6


def test_gradient_linear_reward_finite_differences(default_instance):
    inst = default_instance
    rng = np.random.default_rng(3)
    r = inst.r_star.with_params(rng.standard_normal(inst.r_star.n_params))
    D = DemonstrationDataset([(inst.prompt_set.prompts[i % 4], (i % 4, 1, 2)) for i in range(12)])
    g = surrogate_gradient(r, D, inst.pi_ref, inst.prompt_set)
    fd = finite_difference_gradient(lambda th: single_level_surrogate(r.with_params(th), D, inst.pi_ref,
                                                                      inst.prompt_set), r.params)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) <= 1e-6


def test_gradient_sign_single_demo():
    rng = np.random.default_rng(5)
    feats = rng.standard_normal((1, 4, 6))
    r = RewardModel.linear(ONE, 2, 2, feats)
    ref = SequencePolicy.uniform(ONE, 2, 2)
    y0 = (1, 0)
    D = DemonstrationDataset([((0,), y0)])
    g = surrogate_gradient(r, D, ref, ONE)
    moved = r.with_params(1e-3 * g)
    j0 = 2
    assert moved.scores()[0, j0] > r.scores()[0, j0]
    others = np.delete(moved.scores()[0], j0)
    assert others.mean() < np.delete(r.scores()[0], j0).mean()
    assert g @ r.grad_score((0,), y0) > 0


def test_stochastic_gradient_definitions():
    prompts, _, reward, rng = random_tabular(26, V=2, H=2)
    batch = [((0, 0), (0, 1)), ((1, 1), (1, 1)), ((2, 2), (0, 0))]
    np.testing.assert_array_equal(stochastic_gradient(reward, batch, batch), 0.0)
    a, b = ((0, 0), (1, 0)), ((2, 2), (0, 1))
    np.testing.assert_allclose(stochastic_gradient(reward, [a], [b]),
                               reward.grad_score(*a) - reward.grad_score(*b), atol=1e-15)
    with pytest.raises(ValueError):
        stochastic_gradient(reward, [], batch)


def test_stochastic_gradient_is_unbiased():
    prompts, ref, reward, rng = random_tabular(27, V=2, H=2)
    comps = enumerate_completions(2, 2)
    D = _demos(prompts, 2, 2, 12, rng)
    pi = optimal_policy(reward, ref, 1.0)
    exact = surrogate_gradient(reward, D, ref, prompts, 1.0)
    n_batches, size = 100, 1000
    means = []
    for b in range(n_batches):
        demo = [D.items[i] for i in rng.integers(len(D), size=size)]
        gen = []
        for p in rng.integers(3, size=size):
            gen.append((prompts.prompts[p], comps[rng.choice(4, p=pi.probs[p])]))
        means.append(stochastic_gradient(reward, demo, gen))
    means = np.array(means)
    se = means.std(axis=0, ddof=1) / np.sqrt(n_batches)
    dev = np.abs(means.mean(axis=0) - exact)
    assert np.all(dev <= 3 * se + 1e-12)
