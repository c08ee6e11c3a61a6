"""Demonstration-only baselines: behavior cloning (SFT) and SPIN.

Both train a tabular policy through unconstrained per-prompt logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .irl import build_synthetic_preferences
from .objectives import DemonstrationDataset, dpo_logit_gradient, dpo_loss, sft_loss
from .optim import cosine_lr, make_optimizer
from .seqcore import DEFAULT_FLOOR, ScoreTable, SequencePolicy, floor_log_probs, log_normalize


class TrainingAborted(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class SftConfig:
    epochs: int = 2000
    learning_rate: float = 0.1
    batch_size: int | None = None  # None: full batch
    seed: int = 0
    optimizer: str = "adam"
    schedule: str = "cosine"
    # a short second-moment memory keeps Adam moving once gradients of
    # never-demonstrated completions become tiny
    adam_beta2: float = 0.99
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass(frozen=True)
class SpinConfig:
    iterations: int = 2
    dpo_beta: float = 0.1
    inner_steps: int = 50
    learning_rate: float = 0.01
    generations_per_demo: int = 1
    seed: int = 0
    fixed_reference: bool = False
    optimizer: str = "adam"
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.dpo_beta <= 0:
            raise ValueError("dpo_beta must be positive")


def _finite_logits(policy: SequencePolicy) -> np.ndarray:
    return np.maximum(policy.log_probs, np.log(np.finfo(float).tiny))


def _finish(policy: SequencePolicy, logits: np.ndarray, floor: float) -> SequencePolicy:
    return policy.with_log_probs(floor_log_probs(log_normalize(logits), floor))


def sft_train(init_policy: SequencePolicy, D: DemonstrationDataset, config: SftConfig = SftConfig(), trace=None):
    """Fit per-prompt softmax logits to the demonstrations by gradient descent."""
    if config.learning_rate == 0:
        return init_policy
    prompts, V, H = init_policy.prompts, init_policy.V, init_policy.H
    p_all, y_all = D.indices(prompts, V, H)
    w_all = D.item_weights()
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config.optimizer, config.learning_rate, config.adam_beta2)
    logits = _finite_logits(init_policy)
    trace = [] if trace is None else trace
    n = len(p_all)
    bs = n if config.batch_size is None else min(config.batch_size, n)
    steps_per_epoch = -(-n // bs)
    total = config.epochs * steps_per_epoch
    step = 0
    for _ in range(config.epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        for b in range(steps_per_epoch):
            sel = order[b * bs:(b + 1) * bs]
            w = w_all[sel] / w_all[sel].sum()
            W = np.zeros_like(logits)
            np.add.at(W, (p_all[sel], y_all[sel]), w)
            lp = log_normalize(logits)
            loss = -np.sum(W * lp)
            if not np.isfinite(loss):
                raise TrainingAborted(f"non-finite SFT loss at step {step}", trace)
            trace.append(float(loss))
            grad = W.sum(axis=1, keepdims=True) * np.exp(lp) - W
            lr = config.learning_rate
            if config.schedule == "cosine":
                lr = cosine_lr(lr, step, total)
            logits = opt.step(logits.ravel(), grad.ravel(), lr).reshape(logits.shape)
            step += 1
    return _finish(init_policy, logits, config.floor)


def implicit_reward(policy: SequencePolicy, ref: SequencePolicy, beta: float) -> ScoreTable:
    """``beta * log(policy / ref)`` as a scorer."""
    return ScoreTable(policy.prompts, policy.V, policy.H, beta * (policy.log_probs - ref.log_probs))


def spin_iteration(policy: SequencePolicy, pi_ref_for_dpo: SequencePolicy, D: DemonstrationDataset,
                   config: SpinConfig = SpinConfig(), seed: int = 0, trace=None) -> SequencePolicy:
    """One round of self-play: demonstrations beat the current policy's own
    generations, and the policy is moved by the DPO loss on those pairs."""
    if config.inner_steps == 0:
        return policy
    prefs = build_synthetic_preferences(D, policy, config.generations_per_demo, "all", seed)
    opt = make_optimizer(config.optimizer, config.learning_rate)
    logits = _finite_logits(policy)
    cur = policy
    for step in range(config.inner_steps):
        loss = dpo_loss(cur, pi_ref_for_dpo, prefs, config.dpo_beta)
        if not np.isfinite(loss):
            raise TrainingAborted(f"non-finite DPO loss at step {step}", trace)
        if trace is not None:
            trace.append(loss)
        g = dpo_logit_gradient(cur, pi_ref_for_dpo, prefs, config.dpo_beta)
        logits = opt.step(logits.ravel(), g.ravel()).reshape(logits.shape)
        cur = policy.with_log_probs(log_normalize(logits))
    return _finish(policy, logits, config.floor)


def spin_train(init_policy: SequencePolicy, D: DemonstrationDataset, config: SpinConfig = SpinConfig(),
               heldout_demos: DemonstrationDataset | None = None, heldout_prefs=None, callback=None):
    """Chain SPIN rounds. Returns the final policy and one metrics dict per round.

    Metrics use the implicit reward relative to ``init_policy``.
    """
    from .evalx import reward_accuracy

    policy = init_policy
    metrics = []
    for it in range(config.iterations):
        ref = init_policy if config.fixed_reference else policy
        seed = int(np.random.SeedSequence([config.seed, it]).generate_state(1)[0])
        trace = []
        policy = spin_iteration(policy, ref, D, config, seed=seed, trace=trace)
        row = {
            "iteration": it,
            "dpo_loss_start": trace[0] if trace else float("nan"),
            "dpo_loss_end": trace[-1] if trace else float("nan"),
        }
        if heldout_demos is not None:
            row["heldout_demo_loglik"] = -sft_loss(policy, heldout_demos)
        if heldout_prefs is not None:
            row["implicit_reward_accuracy"] = reward_accuracy(
                implicit_reward(policy, init_policy, config.dpo_beta), heldout_prefs)
        metrics.append(row)
        if callback is not None:
            callback(it, policy)
    return policy, metrics
