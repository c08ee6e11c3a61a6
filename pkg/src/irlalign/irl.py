"""Joint reward learning and policy fine-tuning from demonstrations.

Each iteration aligns the policy to the current reward (exactly, by the
Gibbs tilt of the reference, or approximately by best-of-n rejection), then
moves the reward so demonstrations score above the aligned policy's own
generations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .objectives import (
    DemonstrationDataset,
    PreferenceDataset,
    exact_likelihood,
    kl_per_prompt,
    log_sigmoid,
    optimal_policy,
    single_level_surrogate,
)
from .optim import make_optimizer
from .seqcore import (
    DEFAULT_FLOOR,
    ENUMERATION_CAP,
    RewardModel,
    SequencePolicy,
    completion_array,
    floor_log_probs,
    inverse_cdf,
)

POLICY_MODES = ("exact", "best_of_n")
PAIR_SELECTIONS = ("all", "max_min")
REWARD_LOSSES = ("btl", "likelihood")
REWARD_GRADIENTS = ("sampled", "exact")


class DegeneratePairsError(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    def __init__(self, msg, records):
        super().__init__(msg)
        self.records = records


@dataclass(frozen=True)
class IrlConfig:
    K: int = 3
    reward_steps_per_iter: int = 100
    reward_learning_rate: float = 5e-3
    reward_batch_size: int = 64
    generations_per_demo: int = 1
    policy_mode: str = "exact"
    best_of_n: int = 32
    bon_draws: int = 512
    pair_selection: str = "all"
    beta: float = 0.1
    seed: int = 0
    warm_start_reward: bool = True
    # "btl": minimize the synthetic-preference loss; "likelihood": ascend the
    # surrogate likelihood with its demo-minus-generation gradient
    reward_loss: str = "btl"
    # "exact": expectations over the full dataset table and the exact policy
    reward_gradient: str = "sampled"
    optimizer: str = "adam"
    line_search: bool = False
    policy_floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.reward_steps_per_iter < 0:
            raise ValueError("reward_steps_per_iter must be >= 0")
        if self.reward_learning_rate < 0:
            raise ValueError("reward_learning_rate must be >= 0")
        if self.reward_batch_size < 1 or self.generations_per_demo < 1:
            raise ValueError("batch size and generations per demo must be >= 1")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.policy_mode not in POLICY_MODES:
            raise ValueError(f"policy_mode must be one of {POLICY_MODES}")
        if self.policy_mode == "best_of_n" and self.best_of_n < 2:
            raise ValueError("best_of_n must be >= 2")
        if self.pair_selection not in PAIR_SELECTIONS:
            raise ValueError(f"pair_selection must be one of {PAIR_SELECTIONS}")
        if self.reward_loss not in REWARD_LOSSES:
            raise ValueError(f"reward_loss must be one of {REWARD_LOSSES}")
        if self.reward_gradient not in REWARD_GRADIENTS:
            raise ValueError(f"reward_gradient must be one of {REWARD_GRADIENTS}")


@dataclass
class IterationRecord:
    iteration: int
    surrogate: float
    exact_likelihood: float | None
    rm_loss_before: float  # expected synthetic-preference loss, exact enumeration
    rm_loss_after: float
    kl_to_expert: float | None
    wall_time: float
    reward: RewardModel = field(repr=False, compare=False)
    policy: SequencePolicy = field(repr=False, compare=False)
    loss_trace: list = field(default_factory=list, repr=False)

    def values(self):
        return (
            self.iteration,
            self.surrogate,
            self.exact_likelihood,
            self.rm_loss_before,
            self.rm_loss_after,
            self.kl_to_expert,
            tuple(self.loss_trace),
        )


# -- policy alignment ---------------------------------------------------------------

def policy_alignment_exact(reward, pi_ref: SequencePolicy, beta: float, cap: int = ENUMERATION_CAP):
    n = reward.V**reward.H
    if n > cap:
        raise ValueError(f"enumeration too large ({n} > {cap}); use policy_mode='best_of_n'")
    return optimal_policy(reward, pi_ref, beta)


def policy_alignment_bon(reward, base_policy: SequencePolicy, prompts, n: int, seed: int,
                         draws: int = 512, floor: float = DEFAULT_FLOOR) -> SequencePolicy:
    """Empirical best-of-``n`` policy: per prompt, ``draws`` rounds of ``n``
    samples from ``base_policy``, each round keeping its highest-reward sample.

    Among equal-reward samples the one drawn first wins, so a constant reward
    reproduces ``base_policy`` in distribution.
    """
    if n < 2:
        raise ValueError("best-of-n requires n >= 2")
    rng = np.random.default_rng(seed)
    scores = reward.scores()
    counts = np.zeros_like(base_policy.log_probs)
    for p in range(len(prompts)):
        idx = base_policy.sample_indices(p, draws * n, rng).reshape(draws, n)
        best = np.argmax(scores[p][idx], axis=1)  # first maximal entry
        np.add.at(counts[p], idx[np.arange(draws), best], 1.0)
    with np.errstate(divide="ignore"):
        lp = np.log(counts / counts.sum(axis=1, keepdims=True))
    return base_policy.with_log_probs(floor_log_probs(lp, floor))


# -- synthetic preferences ----------------------------------------------------------

def _synthetic_pairs(p_idx, y_idx, policy, generations_per_demo, pair_selection, rng, scores=None):
    """Index-level pair construction; returns (prompt, chosen, rejected) arrays."""
    g = generations_per_demo
    probs = policy.probs
    gen = np.empty((len(p_idx), g), dtype=np.int64)
    for i, p in enumerate(p_idx):
        gen[i] = inverse_cdf(probs[p], rng.random(g))
    if pair_selection == "max_min" and scores is not None:
        s = scores[p_idx[:, None], gen]
        s = np.where(gen == y_idx[:, None], np.inf, s)
        # lowest reward; ties go to the lowest lexicographic completion
        pick = np.empty(len(p_idx), dtype=np.int64)
        for i in range(len(p_idx)):
            cand = np.flatnonzero(s[i] == s[i].min())
            pick[i] = gen[i, cand[np.argmin(gen[i, cand])]]
        keep = np.isfinite(s.min(axis=1))
        return p_idx[keep], y_idx[keep], pick[keep]
    pp = np.repeat(p_idx, g)
    yy = np.repeat(y_idx, g)
    gg = gen.ravel()
    keep = gg != yy
    return pp[keep], yy[keep], gg[keep]


def build_synthetic_preferences(D: DemonstrationDataset, policy: SequencePolicy, generations_per_demo: int = 1,
                                pair_selection: str = "all", seed: int = 0, reward=None) -> PreferenceDataset:
    """Demonstrations as chosen, the policy's own generations as rejected.

    ``max_min`` keeps one pair per demonstration, rejecting the lowest-reward
    generation; without a ``reward`` it falls back to ``all``.
    """
    if generations_per_demo < 1:
        raise ValueError("generations_per_demo must be >= 1")
    if pair_selection not in PAIR_SELECTIONS:
        raise ValueError(f"pair_selection must be one of {PAIR_SELECTIONS}")
    p_idx, y_idx = D.indices(policy.prompts, policy.V, policy.H)
    rng = np.random.default_rng(seed)
    scores = None if reward is None else reward.scores()
    p, w, l = _synthetic_pairs(p_idx, y_idx, policy, generations_per_demo, pair_selection, rng, scores)
    if len(p) == 0:
        raise DegeneratePairsError("degenerate: policy reproduces demonstrations exactly")
    comps = completion_array(policy.V, policy.H)
    prompts = policy.prompts.prompts
    return PreferenceDataset([(prompts[a], tuple(comps[b]), tuple(comps[c])) for a, b, c in zip(p, w, l)])


# -- reward alignment ---------------------------------------------------------------

def _btl_loss_and_table(scores, p, w, l):
    z = scores[p, w] - scores[p, l]
    loss = float(-np.mean(log_sigmoid(z)))
    coef = -np.exp(log_sigmoid(-z)) / len(p)
    t = np.zeros_like(scores)
    np.add.at(t, (p, w), coef)
    np.add.at(t, (p, l), -coef)
    return loss, t


def _exact_btl_loss_and_table(scores, W, pi_probs):
    """Expected synthetic-preference loss over the full dataset table ``W`` and
    generations from ``pi_probs``; returns the loss and its gradient table."""
    z = scores[:, :, None] - scores[:, None, :]  # [p, chosen, rejected]
    mass = W[:, :, None] * pi_probs[:, None, :]
    loss = float(-np.sum(mass * log_sigmoid(z)))
    c = -mass * np.exp(log_sigmoid(-z))
    return loss, c.sum(axis=2) - c.sum(axis=1)


def _likelihood_table(W_demo, W_gen):
    # minimizing the negative surrogate
    return -(W_demo - W_gen)


def reward_alignment_step(reward: RewardModel, D: DemonstrationDataset, policy: SequencePolicy, config: IrlConfig,
                          seed: int | None = None, pi_ref: SequencePolicy | None = None, optimizer=None):
    """Run ``config.reward_steps_per_iter`` optimizer steps on the reward.

    Returns the updated reward and the per-step loss trace (synthetic-preference
    loss measured before each step). ``pi_ref`` is needed for line search.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    opt = optimizer if optimizer is not None else make_optimizer(config.optimizer, config.reward_learning_rate)
    lr = config.reward_learning_rate
    prompts = policy.prompts
    V, H = policy.V, policy.H
    p_all, y_all = D.indices(prompts, V, H)
    item_w = D.item_weights()
    W = D.table(prompts, V, H)
    pi_probs = policy.probs
    exact = config.reward_gradient == "exact"
    if config.line_search:
        if pi_ref is None:
            raise ValueError("line search needs pi_ref")
        objective = lambda r: single_level_surrogate(r, D, pi_ref, prompts, config.beta)  # noqa: E731
        current = objective(reward)

    trace = []
    for _ in range(config.reward_steps_per_iter):
        scores = reward.scores()
        if exact:
            loss, t_btl = _exact_btl_loss_and_table(scores, W, pi_probs)
            if config.reward_loss == "likelihood":
                t = _likelihood_table(W, prompts.weights[:, None] * pi_probs)
            else:
                t = t_btl
        else:
            pick = rng.choice(len(p_all), size=config.reward_batch_size, p=item_w)
            p, w, l = _synthetic_pairs(p_all[pick], y_all[pick], policy, config.generations_per_demo,
                                       config.pair_selection, rng, scores)
            if len(p) == 0:
                raise DegeneratePairsError("degenerate: policy reproduces demonstrations exactly")
            loss, t = _btl_loss_and_table(scores, p, w, l)
            if config.reward_loss == "likelihood":
                demo = np.zeros_like(scores)
                np.add.at(demo, (p_all[pick], y_all[pick]), 1.0 / len(pick))
                gen = np.zeros_like(scores)
                np.add.at(gen, (p, l), 1.0 / len(p))
                t = _likelihood_table(demo, gen)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite reward-alignment loss {loss}")
        trace.append(loss)
        grad = reward.pullback(t)
        if not config.line_search:
            reward = reward.with_params(opt.step(reward.params, grad, lr))
            continue
        for _halving in range(40):
            delta, state = opt.direction(grad, lr)
            cand = reward.with_params(reward.params + delta)
            value = objective(cand)
            if value >= current:
                opt.commit(state)
                reward, current = cand, value
                break
            lr *= 0.5
    return reward, trace


# -- driver -------------------------------------------------------------------------

def _align(reward, pi_ref, config, k):
    if config.policy_mode == "exact":
        return policy_alignment_exact(reward, pi_ref, config.beta)
    return policy_alignment_bon(reward, pi_ref, pi_ref.prompts, config.best_of_n,
                                seed=_seed(config.seed, k, 1), draws=config.bon_draws,
                                floor=config.policy_floor)


def _seed(*parts):
    return np.random.SeedSequence(list(parts)).generate_state(1)[0]


def irl_align(D: DemonstrationDataset, pi_ref: SequencePolicy, config: IrlConfig, instance=None,
              init_reward: RewardModel | None = None, callback=None):
    """Alternate policy alignment and reward alignment for ``config.K`` rounds.

    Returns ``(reward, policy, records)``; ``records[k]`` describes the reward
    after round ``k`` and the policy aligned to it. ``callback(record)`` is
    invoked after each round.
    """
    if init_reward is None:
        init_reward = RewardModel.tabular(pi_ref.prompts, pi_ref.V, pi_ref.H)
    reward = init_reward
    opt = make_optimizer(config.optimizer, config.reward_learning_rate)
    records = []
    policy = _align(reward, pi_ref, config, 0)
    W = D.table(pi_ref.prompts, pi_ref.V, pi_ref.H)
    for k in range(config.K):
        t0 = time.perf_counter()
        if not config.warm_start_reward:
            reward = init_reward
            opt = make_optimizer(config.optimizer, config.reward_learning_rate)
        rm_before = _exact_btl_loss_and_table(reward.scores(), W, policy.probs)[0]
        try:
            reward, trace = reward_alignment_step(reward, D, policy, config, seed=_seed(config.seed, k, 0),
                                                  pi_ref=pi_ref, optimizer=opt)
        except FloatingPointError as exc:
            raise NonFiniteLoss(str(exc), records) from exc
        rm_after = _exact_btl_loss_and_table(reward.scores(), W, policy.probs)[0]
        policy = _align(reward, pi_ref, config, k + 1)
        surrogate = single_level_surrogate(reward, D, pi_ref, pi_ref.prompts, config.beta)
        if not np.isfinite(surrogate):
            raise NonFiniteLoss(f"non-finite surrogate at iteration {k}", records)
        lik = kl = None
        if instance is not None:
            lik = exact_likelihood(reward, instance, config.beta)
            kl = float(np.sum(instance.prompt_set.weights * kl_per_prompt(instance.pi_expert, policy)))
        rec = IterationRecord(
            iteration=k,
            surrogate=surrogate,
            exact_likelihood=lik,
            rm_loss_before=rm_before,
            rm_loss_after=rm_after,
            kl_to_expert=kl,
            wall_time=time.perf_counter() - t0,
            reward=reward,
            policy=policy,
            loss_trace=trace,
        )
        records.append(rec)
        if callback is not None:
            callback(rec)
    return reward, policy, records


def with_overrides(config: IrlConfig, **kw) -> IrlConfig:
    return replace(config, **kw)
