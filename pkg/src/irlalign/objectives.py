"""Scalar objectives and exact gradients.

The bi-level likelihood is evaluated on the likelihood scale for every ``beta``::

    pi*(y|x)  = pi_ref(y|x) exp(r(x,y)/beta) / Z(x)
    L_hat     = E_D[r/beta + log pi_ref] - E_mu[log Z]
    grad      = (E_D[grad r] - E_{mu, pi*}[grad r]) / beta

With ``beta == 1`` these are the textbook forms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .seqcore import (
    PromptSet,
    RewardModel,
    SequencePolicy,
    as_tokens,
    completion_index,
    log_normalize,
)


def log_sigmoid(z):
    return -np.logaddexp(0.0, -np.asarray(z, dtype=float))


@dataclass(frozen=True, eq=False)
class DemonstrationDataset:
    """Prompt/completion pairs, optionally weighted (full-population mode)."""

    items: tuple
    weights: np.ndarray | None = None

    def __post_init__(self):
        items = tuple((as_tokens(x), as_tokens(y)) for x, y in self.items)
        if not items:
            raise ValueError("demonstration dataset is empty")
        H = len(items[0][1])
        if any(len(y) != H for _, y in items):
            raise ValueError("horizon mismatch: completions of unequal length")
        object.__setattr__(self, "items", items)
        if self.weights is not None:
            w = np.array(self.weights, dtype=float)
            if w.shape != (len(items),) or np.any(w < 0):
                raise ValueError("weights must be nonnegative, one per item")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"weights sum to {w.sum()!r}, not 1")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.items)

    def __eq__(self, other):
        if not isinstance(other, DemonstrationDataset) or self.items != other.items:
            return False
        if self.weights is None or other.weights is None:
            return self.weights is None and other.weights is None
        return np.array_equal(self.weights, other.weights)

    def item_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(len(self.items), 1.0 / len(self.items))
        return self.weights

    def indices(self, prompts: PromptSet, V: int, H: int):
        p = np.array([prompts.index(x) for x, _ in self.items], dtype=np.int64)
        j = np.array([completion_index(y, V, H) for _, y in self.items], dtype=np.int64)
        return p, j

    def table(self, prompts: PromptSet, V: int, H: int) -> np.ndarray:
        """Empirical joint distribution over (prompt, completion) as a table."""
        p, j = self.indices(prompts, V, H)
        t = np.zeros((len(prompts), V**H))
        np.add.at(t, (p, j), self.item_weights())
        return t

    @classmethod
    def full_population(cls, policy: SequencePolicy) -> "DemonstrationDataset":
        """Every (prompt, completion) pair weighted by ``mu(x) * policy(y|x)``."""
        from .seqcore import enumerate_completions

        comps = enumerate_completions(policy.V, policy.H)
        w = policy.prompts.weights[:, None] * policy.probs
        items = [(x, y) for x in policy.prompts.prompts for y in comps]
        w = w.ravel()
        return cls(items, w / w.sum())


@dataclass(frozen=True, eq=False)
class PreferenceDataset:
    items: tuple

    def __post_init__(self):
        items = tuple((as_tokens(x), as_tokens(w), as_tokens(l)) for x, w, l in self.items)
        if not items:
            raise ValueError("preference dataset is empty")
        for x, w, l in items:
            if w == l:
                raise ValueError(f"chosen equals rejected for prompt {x}")
        object.__setattr__(self, "items", items)

    def __len__(self):
        return len(self.items)

    def __eq__(self, other):
        return isinstance(other, PreferenceDataset) and self.items == other.items

    def indices(self, prompts: PromptSet, V: int, H: int):
        p = np.array([prompts.index(x) for x, _, _ in self.items], dtype=np.int64)
        w = np.array([completion_index(c, V, H) for _, c, _ in self.items], dtype=np.int64)
        l = np.array([completion_index(c, V, H) for _, _, c in self.items], dtype=np.int64)
        return p, w, l


# -- supervised / preference losses -------------------------------------------------

def sft_loss(policy: SequencePolicy, D: DemonstrationDataset) -> float:
    p, j = D.indices(policy.prompts, policy.V, policy.H)
    return float(-np.sum(D.item_weights() * policy.log_probs[p, j]))


def btl_margins(reward, P: PreferenceDataset) -> np.ndarray:
    p, w, l = P.indices(reward.prompts, reward.V, reward.H)
    s = reward.scores()
    return s[p, w] - s[p, l]


def btl_loss(reward, P: PreferenceDataset) -> float:
    """Negative Bradley-Terry log-likelihood. ``reward`` needs ``scores()``."""
    return float(-np.mean(log_sigmoid(btl_margins(reward, P))))


def btl_gradient(reward: RewardModel, P: PreferenceDataset) -> np.ndarray:
    p, w, l = P.indices(reward.prompts, reward.V, reward.H)
    s = reward.scores()
    # d/dz of -log sigmoid(z) is -sigmoid(-z)
    coef = -np.exp(log_sigmoid(-(s[p, w] - s[p, l]))) / len(P)
    t = np.zeros_like(s)
    np.add.at(t, (p, w), coef)
    np.add.at(t, (p, l), -coef)
    return reward.pullback(t)


def dpo_loss(policy: SequencePolicy, pi_ref: SequencePolicy, P: PreferenceDataset, beta: float) -> float:
    p, w, l = P.indices(policy.prompts, policy.V, policy.H)
    ratio = policy.log_probs - pi_ref.log_probs
    z = beta * (ratio[p, w] - ratio[p, l])
    return float(-np.mean(log_sigmoid(z)))


def dpo_logit_gradient(policy: SequencePolicy, pi_ref: SequencePolicy, P: PreferenceDataset, beta: float):
    """Gradient of :func:`dpo_loss` w.r.t. the policy's per-prompt logits."""
    p, w, l = P.indices(policy.prompts, policy.V, policy.H)
    ratio = policy.log_probs - pi_ref.log_probs
    z = beta * (ratio[p, w] - ratio[p, l])
    coef = -beta * np.exp(log_sigmoid(-z)) / len(P)
    # the softmax Jacobian terms of chosen and rejected cancel within a pair
    g = np.zeros_like(policy.log_probs)
    np.add.at(g, (p, w), coef)
    np.add.at(g, (p, l), -coef)
    return g


# -- KL-regularized RL and its closed-form optimum ---------------------------------

def kl_per_prompt(policy: SequencePolicy, other: SequencePolicy) -> np.ndarray:
    """``KL(policy(.|x) || other(.|x))`` for every prompt."""
    p = policy.probs
    if np.any((p > 0) & np.isneginf(other.log_probs)):
        raise ValueError("KL undefined: support not covered by the second policy")
    with np.errstate(invalid="ignore"):
        terms = np.where(p > 0, p * (policy.log_probs - other.log_probs), 0.0)
    return np.maximum(terms.sum(axis=1), 0.0)


def kl_rl_objective(policy, reward, pi_ref, prompts: PromptSet, beta: float) -> float:
    mu = prompts.weights
    exp_r = np.sum(policy.probs * reward.scores(), axis=1)
    return float(np.sum(mu * exp_r) - beta * np.sum(mu * kl_per_prompt(policy, pi_ref)))


def gibbs_logits(reward, pi_ref: SequencePolicy, beta: float) -> np.ndarray:
    if beta <= 0:
        raise ValueError("beta must be positive")
    return pi_ref.log_probs + reward.scores() / beta


def log_partition(reward, pi_ref: SequencePolicy, beta: float) -> np.ndarray:
    return logsumexp(gibbs_logits(reward, pi_ref, beta), axis=1)


def optimal_policy(reward, pi_ref: SequencePolicy, beta: float = 1.0) -> SequencePolicy:
    return pi_ref.with_log_probs(log_normalize(gibbs_logits(reward, pi_ref, beta)))


def gibbs_residual(policy, reward, pi_ref, beta) -> float:
    """Max over prompts of the spread of ``log pi - log pi_ref - r/beta`` across completions."""
    d = policy.log_probs - pi_ref.log_probs - reward.scores() / beta
    return float(np.max(d.max(axis=1) - d.min(axis=1)))


# -- bi-level likelihood --------------------------------------------------------------

def single_level_surrogate(reward, D: DemonstrationDataset, pi_ref: SequencePolicy, prompts: PromptSet, beta: float = 1.0) -> float:
    W = D.table(prompts, reward.V, reward.H)
    first = np.sum(W * (reward.scores() / beta + pi_ref.log_probs))
    return float(first - np.sum(prompts.weights * log_partition(reward, pi_ref, beta)))


def bilevel_surrogate(reward, D: DemonstrationDataset, pi_ref: SequencePolicy, prompts: PromptSet, beta: float = 1.0) -> float:
    """The surrogate with the inner problem solved explicitly and its value plugged in."""
    W = D.table(prompts, reward.V, reward.H)
    first = np.sum(W * (reward.scores() / beta + pi_ref.log_probs))
    inner = optimal_policy(reward, pi_ref, beta)
    inner_value = kl_rl_objective(inner, reward, pi_ref, prompts, beta)
    return float(first - inner_value / beta)


def exact_likelihood(reward, instance, beta: float | None = None) -> float:
    beta = instance.beta if beta is None else beta
    pi = optimal_policy(reward, instance.pi_ref, beta)
    mu = instance.prompt_set.weights
    return float(np.sum(mu[:, None] * instance.pi_expert.probs * pi.log_probs))


def surrogate_gradient(reward: RewardModel, D: DemonstrationDataset, pi_ref: SequencePolicy, prompts: PromptSet, beta: float = 1.0) -> np.ndarray:
    W = D.table(prompts, reward.V, reward.H)
    pi = optimal_policy(reward, pi_ref, beta)
    return reward.pullback(W - prompts.weights[:, None] * pi.probs) / beta


def stochastic_gradient(reward: RewardModel, demo_batch: Sequence, generated_batch: Sequence) -> np.ndarray:
    """Mean ``grad r`` over demonstrations minus mean ``grad r`` over generations.

    Batches are sequences of ``(prompt, completion)`` pairs.
    """
    if len(demo_batch) == 0 or len(generated_batch) == 0:
        raise ValueError("empty batch")
    t = np.zeros((len(reward.prompts), reward.V**reward.H))
    for batch, sign in ((demo_batch, 1.0), (generated_batch, -1.0)):
        p = [reward.prompts.index(x) for x, _ in batch]
        j = [completion_index(y, reward.V, reward.H) for _, y in batch]
        np.add.at(t, (p, j), sign / len(batch))
    return reward.pullback(t)


def finite_difference_gradient(f, params: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` at ``params``."""
    params = np.asarray(params, dtype=float)
    g = np.empty_like(params)
    for k in range(params.size):
        up = params.copy()
        up[k] += step
        down = params.copy()
        down[k] -= step
        g[k] = (f(up) - f(down)) / (2 * step)
    return g
